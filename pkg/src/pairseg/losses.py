"""Training losses and the finite-difference gradient checker.

All losses are means (not sums) over pixels or pairs, so the joint-loss
weights keep the same relative scale across image sizes. Inputs are torch
tensors in float64; every loss is differentiable w.r.t. its continuous
inputs and broadcast over leading batch dims.

Losses do not re-validate simplex or row-sum invariants on their
probability inputs: gradient checking perturbs coordinates off the
simplex by design, and producing valid maps is the caller's contract.
Log arguments are clamped at 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .affinity import as_f64
from .errors import NonFiniteLossError, ShapeError
from .ntm import translate_exact

LOG_EPS = 1e-12


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def ce_loss(p, noisy_onehot) -> torch.Tensor:
    """Pixel-wise cross entropy against (noisy) one-hot labels, mean over pixels."""
    p = as_f64(p)
    y = as_f64(noisy_onehot)
    _check_same_shape(p, y, "prob map vs one-hot labels")
    logp = torch.log(p.clamp(min=LOG_EPS))
    return -(y * logp).sum(dim=-1).mean()


def class_corrected_loss(p, t_c, noisy_onehot) -> torch.Tensor:
    """Cross entropy after translating predictions through the class NTM.

    Per pixel the clean-class prediction P(k) is mapped to the implied
    noisy-label distribution P(k) @ T_C before the log-likelihood, so the
    loss is minimized by clean-posterior predictions under noisy labels.
    """
    p = as_f64(p)
    t_c = as_f64(t_c)
    y = as_f64(noisy_onehot)
    _check_same_shape(p, y, "prob map vs one-hot labels")
    if t_c.ndim != 2 or t_c.shape[0] != t_c.shape[1] or t_c.shape[0] != p.shape[-1]:
        raise ShapeError(f"class NTM shape {tuple(t_c.shape)} vs C={p.shape[-1]}")
    noisy_p = torch.matmul(p, t_c)
    logq = torch.log(noisy_p.clamp(min=LOG_EPS))
    return -(y * logq).sum(dim=-1).mean()


def affinity_bce(p_aff, noisy_aff) -> torch.Tensor:
    """Binary cross entropy over all ordered pixel pairs, diagonal included."""
    p = as_f64(p_aff)
    y = as_f64(noisy_aff)
    _check_same_shape(p, y, "affinity map vs affinity labels")
    pc = p.clamp(LOG_EPS, 1.0 - LOG_EPS)
    terms = y * torch.log(pc) + (1.0 - y) * torch.log(1.0 - pc)
    return -terms.mean()


def affinity_corrected_loss(p_aff, t_a, noisy_aff) -> torch.Tensor:
    """Affinity BCE after translating through the 2x2 affinity NTM.

    Each scalar affinity prediction p' is lifted to the distribution
    [1-p', p'] over {different, same}, multiplied by T_A to get the
    implied noisy-affinity distribution [q0, q1], and scored against the
    noisy affinity label.
    """
    p = as_f64(p_aff)
    t = as_f64(t_a)
    y = as_f64(noisy_aff)
    _check_same_shape(p, y, "affinity map vs affinity labels")
    if t.shape != (2, 2):
        raise ShapeError(f"affinity NTM must be 2x2, got {tuple(t.shape)}")
    lifted = torch.stack([1.0 - p, p], dim=-1)
    q = torch.matmul(lifted, t)
    qc = q.clamp(LOG_EPS, 1.0 - LOG_EPS)
    terms = y * torch.log(qc[..., 1]) + (1.0 - y) * torch.log(qc[..., 0])
    return -terms.mean()


def cacr(t_c, t_a, n_dist) -> torch.Tensor:
    """Class-affinity consistency: MSE between translate_exact(T_C, N) and T_A."""
    t_a = as_f64(t_a)
    if t_a.shape != (2, 2):
        raise ShapeError(f"affinity NTM must be 2x2, got {tuple(t_a.shape)}")
    translated = translate_exact(t_c, n_dist)
    return ((translated - t_a) ** 2).mean()


def joint_loss(class_term, affinity_term, cacr_term, lam: float,
               volume_term=None, volume_weight: float = 0.0) -> torch.Tensor:
    """Weighted sum of the corrected losses plus consistency and volume terms."""
    if lam < 0:
        raise ShapeError(f"lambda must be >= 0, got {lam}")
    total = as_f64(class_term) + as_f64(affinity_term) + lam * as_f64(cacr_term)
    if volume_term is not None and volume_weight != 0.0:
        total = total + volume_weight * as_f64(volume_term)
    return total


@dataclass(frozen=True)
class GradCheck:
    """Outcome of a finite-difference sweep over sampled coordinates."""

    max_rel_err: float
    coords_checked: int
    coords_skipped: int

    def ok(self, tol: float) -> bool:
        return self.coords_checked > 0 and self.max_rel_err < tol


def finite_diff_check(loss_op, inputs, step: float = 1e-5,
                      min_coords: int = 100, seed: int = 0,
                      kink_ratio: float = 0.1) -> GradCheck:
    """Validate autograd gradients of a scalar loss by central differences.

    Samples at least `min_coords` coordinates uniformly across all inputs
    (or every coordinate if there are fewer) and compares the analytic
    gradient to (f(x+h) - f(x-h)) / 2h. Relative error uses denominator
    max(|analytic|, |numeric|, 1e-8).

    Coordinates where the forward and backward one-sided differences
    disagree by more than `kink_ratio` (relative) are counted as skipped
    rather than failed: the loss is not differentiable there (a clamp or
    floor boundary sits within one step).
    """
    if not (1e-7 <= step <= 1e-3):
        raise ShapeError(f"step must be in [1e-7, 1e-3], got {step}")
    tensors = [as_f64(x).clone().detach().requires_grad_(True) for x in inputs]
    loss = loss_op(*tensors)
    if not torch.isfinite(loss).item():
        raise NonFiniteLossError(f"loss is {loss.item()!r} at the base point")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]

    sizes = [t.numel() for t in tensors]
    coords = [(i, j) for i, n in enumerate(sizes) for j in range(n)]
    rng = np.random.default_rng(seed)
    if len(coords) > min_coords:
        picks = rng.choice(len(coords), size=min_coords, replace=False)
        coords = [coords[k] for k in sorted(picks)]

    frozen = [t.detach().clone() for t in tensors]

    def eval_at(idx: int, flat: int, delta: float) -> float:
        probe = [t.clone() for t in frozen]
        probe[idx].view(-1)[flat] += delta
        with torch.no_grad():
            val = loss_op(*probe)
        v = float(val)
        if not np.isfinite(v):
            raise NonFiniteLossError(
                f"loss is {v!r} at perturbed input {idx} coordinate {flat}"
            )
        return v

    f0 = float(loss.detach())
    max_rel = 0.0
    skipped = 0
    checked = 0
    for idx, flat in coords:
        f_plus = eval_at(idx, flat, step)
        f_minus = eval_at(idx, flat, -step)
        fwd = (f_plus - f0) / step
        bwd = (f0 - f_minus) / step
        gap = abs(fwd - bwd)
        if gap > kink_ratio * max(abs(fwd), abs(bwd)) and gap > 1e-7:
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2.0 * step)
        analytic = float(grads[idx].view(-1)[flat])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
        checked += 1
    return GradCheck(max_rel_err=max_rel, coords_checked=checked, coords_skipped=skipped)
