"""Pair-wise affinity maps and differentiated affinity reasoning (DAR).

All ops are torch functions in float64 and broadcast over leading batch
dims: features are (..., n, d), probability maps (..., n, C), affinity
maps (..., n, n), where n is the flattened pixel count of the feature
grid (an (h, w, d) map becomes (h*w, d) row-major).
"""

from __future__ import annotations

import torch

from .errors import DegenerateRowError, ShapeError, SingularFeatureError

DAR_CLAMP = 1e-8
ROW_SUM_ATOL = 1e-9


def as_f64(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.dtype.is_floating_point:
        t = t.to(torch.float64)
    elif t.dtype != torch.float64:
        t = t.to(torch.float64)
    return t


def check_affinity(p: torch.Tensor, name: str = "affinity map") -> torch.Tensor:
    p = as_f64(p)
    if p.ndim < 2 or p.shape[-1] != p.shape[-2]:
        raise ShapeError(f"{name} must be (..., n, n), got shape {tuple(p.shape)}")
    with torch.no_grad():
        if p.min() < -ROW_SUM_ATOL or p.max() > 1.0 + ROW_SUM_ATOL:
            raise ShapeError(f"{name} entries outside [0, 1]")
        dev = (p.sum(dim=-1) - 1.0).abs().max().item()
        if dev > ROW_SUM_ATOL:
            raise ShapeError(f"{name} rows must sum to 1 (worst deviation {dev:.3e})")
    return p


def affinity_map(features) -> torch.Tensor:
    """Row-normalized shifted cosine similarity between pixel features.

    Raw cosine lies in [-1, 1]; it is shifted to [0, 1] via (1+cos)/2 and
    each row is then normalized to sum to 1. The diagonal (self similarity)
    contributes weight 1 per row, so rows are never degenerate.
    """
    f = as_f64(features)
    if f.ndim < 2:
        raise ShapeError(f"features must be (..., n, d), got shape {tuple(f.shape)}")
    norms = torch.linalg.vector_norm(f, dim=-1, keepdim=True)
    if (norms == 0).any():
        raise SingularFeatureError("zero-norm pixel feature vector")
    unit = f / norms
    cos = torch.matmul(unit, unit.transpose(-1, -2)).clamp(-1.0, 1.0)
    shifted = 0.5 * (1.0 + cos)
    return shifted / shifted.sum(dim=-1, keepdim=True)


def reverse_affinity(p_aff) -> torch.Tensor:
    """Row-normalized (1 - P'), the inter-class dissimilarity map."""
    p = check_affinity(p_aff)
    rev = 1.0 - p
    row_sums = rev.sum(dim=-1, keepdim=True)
    if (row_sums <= 1e-12).any():
        raise DegenerateRowError("a row of P' is all ones; 1 - P' cannot be normalized")
    return rev / row_sums


def dar_combine(q, p_aff) -> torch.Tensor:
    """Raw DAR combination, before clamping back onto the simplex.

    P_intra(k1) = Q(k1) + sum_k2 P'(k1,k2) Q(k2) aggregates same-class
    context; P_inter(k1) = Q(k1) - sum_k2 P'_re(k1,k2) Q(k2) pushes away
    from other-class context; the result is their average. Entries can be
    slightly negative; see dar_refine.
    """
    q = as_f64(q)
    p = check_affinity(p_aff)
    if q.ndim < 2 or q.shape[-2] != p.shape[-1]:
        raise ShapeError(
            f"prob map has {tuple(q.shape)} pixels but affinity map is "
            f"{tuple(p.shape)}"
        )
    p_re = reverse_affinity(p)
    return q + 0.5 * (torch.matmul(p, q) - torch.matmul(p_re, q))


def dar_refine(q, p_aff) -> torch.Tensor:
    """DAR-refined probability map, clamped and renormalized per pixel."""
    combined = dar_combine(q, p_aff)
    clamped = combined.clamp(min=DAR_CLAMP)
    return clamped / clamped.sum(dim=-1, keepdim=True)
