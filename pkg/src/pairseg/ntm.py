"""Noise-transition-matrix (NTM) algebra.

A class NTM T_C is a row-stochastic C x C matrix, entry (m, n) the
probability that clean class m is observed as noisy class n. An affinity
NTM T_A is the 2 x 2 analogue over the pair-wise affinity labels, with
the convention index 1 = "same class", index 0 = "different class".

`translate_exact` turns (T_C, class distribution N) into the induced
affinity NTM by summing the four exact pair probabilities; it is the
canonical translation. `translate_closed_form` evaluates the shorter
closed-form expression, which agrees for identity and symmetric-uniform
T_C but diverges for asymmetric ones (see tests for the pinned
counterexample); it is kept for comparison only. `mc_translate_oracle`
estimates the same matrix by simulation and is the independent referee.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .affinity import ROW_SUM_ATOL, as_f64
from .errors import (
    ConfigError,
    DegenerateDistributionError,
    InsufficientSamplesError,
    ShapeError,
)

VOLUME_FLOOR = 1e-12


def check_ntm(t, name: str = "NTM", classes: int | None = None) -> torch.Tensor:
    t = as_f64(t)
    if t.ndim != 2 or t.shape[0] != t.shape[1] or t.shape[0] < 1:
        raise ShapeError(f"{name} must be square, got shape {tuple(t.shape)}")
    if classes is not None and t.shape[0] != classes:
        raise ShapeError(f"{name} must be {classes}x{classes}, got {tuple(t.shape)}")
    with torch.no_grad():
        if t.min() < -ROW_SUM_ATOL or t.max() > 1.0 + ROW_SUM_ATOL:
            raise ShapeError(f"{name} entries outside [0, 1]")
        dev = (t.sum(dim=-1) - 1.0).abs().max().item()
        if dev > ROW_SUM_ATOL:
            raise ShapeError(f"{name} rows must sum to 1 (worst deviation {dev:.3e})")
    return t


def check_distribution(n_dist, name: str = "class distribution") -> torch.Tensor:
    n = as_f64(n_dist)
    if n.ndim != 1 or n.shape[0] < 1:
        raise ShapeError(f"{name} must be a 1-d vector, got shape {tuple(n.shape)}")
    with torch.no_grad():
        if n.min() < -ROW_SUM_ATOL:
            raise ShapeError(f"{name} has negative entries")
        if abs(n.sum().item() - 1.0) > ROW_SUM_ATOL:
            raise ShapeError(f"{name} must sum to 1, got {n.sum().item()!r}")
    return n


def ntm_from_params(raw) -> torch.Tensor:
    """Row-wise softmax of unconstrained parameters; always row-stochastic."""
    raw = as_f64(raw)
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise ShapeError(f"raw NTM params must be square, got {tuple(raw.shape)}")
    if not torch.isfinite(raw).all():
        raise ConfigError("non-finite NTM parameters")
    return torch.softmax(raw, dim=-1)


def identity_raw(classes: int, scale: float = 4.0) -> torch.Tensor:
    """Raw params whose softmax is a diagonally dominant near-identity NTM."""
    if classes < 1:
        raise ConfigError(f"classes must be >= 1, got {classes}")
    return scale * torch.eye(classes, dtype=torch.float64)


def _pair_sums(t_c: torch.Tensor, n_dist: torch.Tensor):
    """The four pair-probability masses, indexed (clean same?, noisy same?).

    v[a][b] = sum over class pairs (m, m') with the clean pattern a and
    noisy-label pairs (n, n') with pattern b of N_m N_m' T(m,n) T(m',n').
    Uses O(C^2) contractions; the quadruple loop is kept as a test oracle.
    """
    row_sq = (t_c * t_c).sum(dim=1)          # s_m = sum_n T(m,n)^2
    row_sum = t_c.sum(dim=1)                 # r_m, 1 for a valid NTM
    n2 = n_dist * n_dist
    v11 = (n2 * row_sq).sum()
    v10 = (n2 * (row_sum * row_sum - row_sq)).sum()
    col_mass = (n_dist[:, None] * t_c).sum(dim=0)     # G_n = sum_m N_m T(m,n)
    v01 = (col_mass * col_mass).sum() - v11
    total_diff = (n_dist * row_sum).sum() ** 2 - (n2 * row_sum * row_sum).sum()
    v00 = total_diff - v01
    return v00, v01, v10, v11


def translate_exact(t_c, n_dist) -> torch.Tensor:
    """Affinity NTM induced by class NTM t_c under class distribution n_dist.

    Row 1 conditions on a clean same-class pair, row 0 on a clean
    different-class pair; columns are the noisy affinity outcome.
    Differentiable w.r.t. t_c (and n_dist).
    """
    t_c = check_ntm(t_c, "class NTM")
    n_dist = check_distribution(n_dist)
    if t_c.shape[0] != n_dist.shape[0]:
        raise ShapeError(
            f"NTM is {t_c.shape[0]}x{t_c.shape[0]} but distribution has "
            f"{n_dist.shape[0]} classes"
        )
    if t_c.shape[0] < 2:
        raise DegenerateDistributionError(
            "affinity translation needs >= 2 classes; with one class the "
            "different-class pair set is empty"
        )
    v00, v01, v10, v11 = _pair_sums(t_c, n_dist)
    same_mass = v11 + v10
    diff_mass = v01 + v00
    if diff_mass.item() <= 0:
        raise DegenerateDistributionError(
            "class distribution puts no mass on different-class pairs"
        )
    if same_mass.item() <= 0:
        raise DegenerateDistributionError(
            "class distribution puts no mass on same-class pairs"
        )
    row0 = torch.stack([v00 / diff_mass, v01 / diff_mass])
    row1 = torch.stack([v10 / same_mass, v11 / same_mass])
    return torch.stack([row0, row1])


def translate_closed_form(t_c, n_dist) -> torch.Tensor:
    """The printed closed-form translation, kept verbatim for comparison.

    T_A(1,1) = sum_m N_m^2 ||T_C(m,.)||^2 / sum_m N_m^2 and
    T_A(0,1) = (sum_m [N_m sum_n T_C(m,n)]^2 - sum_m N_m^2 ||T_C(m,.)||^2)
               / sum_m N_m (1 - N_m),
    with the squared norm taken row-wise. Disagrees with translate_exact
    for asymmetric T_C; do not use for training.
    """
    t_c = check_ntm(t_c, "class NTM")
    n_dist = check_distribution(n_dist)
    if t_c.shape[0] != n_dist.shape[0]:
        raise ShapeError("NTM and distribution class counts differ")
    row_sq = (t_c * t_c).sum(dim=1)
    row_sum = t_c.sum(dim=1)
    n2 = n_dist * n_dist
    same_num = (n2 * row_sq).sum()
    same_den = n2.sum()
    total = n_dist.sum()
    diff_den = (n_dist * (total - n_dist)).sum()
    if diff_den.item() <= 0:
        raise DegenerateDistributionError(
            "distribution is concentrated on one class; closed form divides by 0"
        )
    diff_num = ((n_dist * row_sum) ** 2).sum() - same_num
    t11 = same_num / same_den
    t01 = diff_num / diff_den
    row0 = torch.stack([1.0 - t01, t01])
    row1 = torch.stack([1.0 - t11, t11])
    return torch.stack([row0, row1])


@dataclass(frozen=True)
class McTranslate:
    """Monte-Carlo estimate of the affinity NTM with binomial standard errors."""

    estimate: np.ndarray
    std_err: np.ndarray
    counts: np.ndarray


def _sample_rows(rng: np.random.Generator, cum_rows: np.ndarray, labels: np.ndarray) -> np.ndarray:
    u = rng.random(labels.shape[0])
    return (u[:, None] > cum_rows[labels]).sum(axis=1)


def mc_translate_oracle(t_c, n_dist, samples: int, seed: int) -> McTranslate:
    """Estimate the class->affinity translation by direct simulation.

    Draws `samples` label pairs i.i.d. from n_dist, corrupts each label
    independently through its T_C row, and tallies the clean-affinity to
    noisy-affinity confusion. Deterministic for a fixed seed.
    """
    t_np = check_ntm(t_c, "class NTM").detach().cpu().numpy()
    n_np = check_distribution(n_dist).detach().cpu().numpy()
    if t_np.shape[0] != n_np.shape[0]:
        raise ShapeError("NTM and distribution class counts differ")
    if samples < 10_000:
        raise InsufficientSamplesError(f"need >= 10^4 samples, got {samples}")
    rng = np.random.default_rng(seed)
    n_cum = np.cumsum(n_np)
    t_cum = np.cumsum(t_np, axis=1)
    # guard against cumulative round-off pushing the last edge below 1
    n_cum[-1] = 1.0
    t_cum[:, -1] = 1.0
    m1 = (rng.random(samples)[:, None] > n_cum[None, :-1]).sum(axis=1)
    m2 = (rng.random(samples)[:, None] > n_cum[None, :-1]).sum(axis=1)
    y1 = _sample_rows(rng, t_cum[:, :-1], m1)
    y2 = _sample_rows(rng, t_cum[:, :-1], m2)
    clean_same = (m1 == m2).astype(np.int64)
    noisy_same = (y1 == y2).astype(np.int64)
    counts = np.zeros((2, 2), dtype=np.int64)
    np.add.at(counts, (clean_same, noisy_same), 1)
    row_totals = counts.sum(axis=1)
    if (row_totals == 0).any():
        raise InsufficientSamplesError(
            f"a clean-affinity class was never sampled (counts {counts.tolist()})"
        )
    est = counts / row_totals[:, None]
    se = np.sqrt(est * (1.0 - est) / row_totals[:, None])
    return McTranslate(estimate=est, std_err=se, counts=counts)


def volume_reg(t_c) -> torch.Tensor:
    """log|det T_C|, the simplex-volume surrogate to be minimized.

    Entries are floored at 1e-12 and the result is clamped at log(1e-12)
    so a singular matrix yields a finite penalty (with a warning) instead
    of -inf.
    """
    t_c = check_ntm(t_c, "class NTM")
    floored = t_c.clamp(min=VOLUME_FLOOR)
    sign, logabs = torch.linalg.slogdet(floored)
    if sign.item() == 0 or not torch.isfinite(logabs).item():
        warnings.warn("NTM is singular; volume penalty clamped", RuntimeWarning)
        logabs = torch.nan_to_num(logabs, nan=math.log(VOLUME_FLOOR), neginf=math.log(VOLUME_FLOOR))
    return torch.clamp(logabs, min=math.log(VOLUME_FLOOR))


def ntm_to_json(t) -> dict:
    t = as_f64(t).detach().cpu().numpy()
    return {"classes": int(t.shape[0]), "rows": t.tolist()}


def ntm_from_json(obj: dict) -> torch.Tensor:
    try:
        classes = int(obj["classes"])
        rows = obj["rows"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed NTM JSON: {exc}") from exc
    t = torch.tensor(rows, dtype=torch.float64)
    return check_ntm(t, "NTM from JSON", classes=classes)
