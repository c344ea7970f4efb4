"""Synthetic label noise, affinity labels, and noise-rate measurement.

Everything here is numpy over integer label maps; corruption is a pure
function of (labels, spec, seed). The measured contrast between the
pixel-wise and pair-wise noise rates is the empirical motivation for
doing loss correction in both spaces.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DegenerateRowError, ShapeError

NOISE_KINDS = ("symmetric", "asymmetric", "ntm", "ellipse")


@dataclass(frozen=True)
class NoiseSpec:
    """Which corruption to apply and its parameters.

    `classes` is the label alphabet size (needed to pick flip targets);
    `ntm` is required exactly when kind == "ntm"; the ellipse kind uses
    `max_dilate` / `max_erode` pixels and ignores `rate`.
    """

    kind: str
    rate: float = 0.0
    classes: int = 2
    ntm: np.ndarray | None = None
    max_dilate: float = 0.0
    max_erode: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}, want one of {NOISE_KINDS}")
        if not (0.0 <= self.rate <= 1.0):
            raise ConfigError(f"noise rate must be in [0, 1], got {self.rate}")
        if (self.ntm is not None) != (self.kind == "ntm"):
            raise ConfigError("an NTM must be given exactly when kind == 'ntm'")
        if self.kind in ("symmetric", "asymmetric") and self.classes < 2:
            raise ConfigError(f"{self.kind} noise needs >= 2 classes, got {self.classes}")
        if self.max_dilate < 0 or self.max_erode < 0:
            raise ConfigError("dilate/erode radii must be >= 0")
        if self.ntm is not None:
            t = np.asarray(self.ntm, dtype=np.float64)
            if t.ndim != 2 or t.shape[0] != t.shape[1]:
                raise ConfigError(f"noise NTM must be square, got shape {t.shape}")
            if not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
                raise ConfigError("noise NTM rows must sum to 1")

    def effective_classes(self) -> int:
        """The label alphabet: the NTM's size for ntm noise, `classes` otherwise."""
        if self.ntm is not None:
            return int(np.asarray(self.ntm).shape[0])
        return self.classes


@dataclass(frozen=True)
class NoiseReport:
    class_noise_rate: float
    affinity_noise_rate: float


def _flat_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"labels must be integer, got dtype {labels.dtype}")
    if labels.size == 0:
        raise ShapeError("empty label map")
    return labels.reshape(-1)


def affinity_label(labels: np.ndarray) -> np.ndarray:
    """Binary n x n matrix: entry (k1, k2) = 1 iff the pixels share a class.

    Pixels are flattened row-major, so an (H, W) map yields n = H*W.
    Symmetric with unit diagonal by construction.
    """
    flat = _flat_labels(labels)
    return (flat[:, None] == flat[None, :]).astype(np.uint8)


def _sample_categorical_rows(rng: np.random.Generator, rows: np.ndarray,
                             picks: np.ndarray) -> np.ndarray:
    cum = np.cumsum(rows, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(picks.shape[0])
    return (u[:, None] > cum[picks][:, :-1]).sum(axis=1)


def _disk(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    if r < 1:
        return np.ones((1, 1), dtype=bool)
    span = np.arange(-r, r + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return (yy * yy + xx * xx) <= radius * radius


def _covering_ellipse_mask(component: np.ndarray) -> np.ndarray:
    """Second-moment ellipse of a component, inflated to cover all its pixels."""
    coords = np.argwhere(component).astype(np.float64)
    center = coords.mean(axis=0)
    centered = coords - center
    # ridge of a quarter pixel keeps single-pixel/collinear components invertible
    cov = centered.T @ centered / coords.shape[0] + 0.25 * np.eye(2)
    inv = np.linalg.inv(cov)
    d2 = np.einsum("ij,jk,ik->i", centered, inv, centered)
    scale = d2.max()
    h, w = component.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy = yy - center[0]
    dx = xx - center[1]
    quad = inv[0, 0] * dy * dy + (inv[0, 1] + inv[1, 0]) * dy * dx + inv[1, 1] * dx * dx
    return quad <= scale + 1e-9


def _ellipse_corrupt(labels: np.ndarray, spec: NoiseSpec,
                     rng: np.random.Generator) -> np.ndarray:
    if not (labels > 0).any():
        warnings.warn("ellipse noise on an all-background map; returning input",
                      RuntimeWarning)
        return labels.copy()
    out = np.zeros_like(labels)
    eight = np.ones((3, 3), dtype=bool)
    # descending class order: the lowest class is painted last and wins overlaps
    for cls in sorted(np.unique(labels[labels > 0]), reverse=True):
        comp_map, count = ndimage.label(labels == cls, structure=eight)
        for comp_id in range(1, count + 1):
            mask = _covering_ellipse_mask(comp_map == comp_id)
            if rng.random() < 0.5:
                radius = rng.uniform(0.0, spec.max_dilate)
                mask = ndimage.binary_dilation(mask, structure=_disk(radius))
            else:
                radius = rng.uniform(0.0, spec.max_erode)
                mask = ndimage.binary_erosion(mask, structure=_disk(radius))
            out[mask] = cls
    return out


def corrupt(labels: np.ndarray, spec: NoiseSpec, seed: int) -> np.ndarray:
    """Apply the configured label noise; deterministic for a fixed seed."""
    labels = np.asarray(labels)
    flat = _flat_labels(labels)
    rng = np.random.default_rng(seed)
    if spec.kind == "ellipse":
        if labels.ndim != 2:
            raise ShapeError("ellipse noise needs a 2-d label map")
        return _ellipse_corrupt(labels, spec, rng)
    classes = spec.effective_classes()
    if flat.max() >= classes:
        raise ShapeError(
            f"label {flat.max()} out of range for {classes} classes"
        )
    if spec.kind == "symmetric":
        flip = rng.random(flat.shape) < spec.rate
        offsets = rng.integers(1, spec.classes, size=flat.shape)
        noisy = np.where(flip, (flat + offsets) % spec.classes, flat)
    elif spec.kind == "asymmetric":
        flip = rng.random(flat.shape) < spec.rate
        noisy = np.where(flip, (flat + 1) % spec.classes, flat)
    else:  # ntm
        t = np.asarray(spec.ntm, dtype=np.float64)
        noisy = _sample_categorical_rows(rng, t, flat)
    return noisy.reshape(labels.shape).astype(labels.dtype)


def noise_rates(clean: np.ndarray, noisy: np.ndarray) -> NoiseReport:
    """Pixel-wise vs pair-wise noise rates between a clean/noisy map pair.

    The affinity rate counts mismatched entries of affinity_label over the
    off-diagonal ordered pairs only: diagonal pairs can never flip and
    would deflate the rate.
    """
    clean_f = _flat_labels(clean)
    noisy_f = _flat_labels(noisy)
    if clean_f.shape != noisy_f.shape:
        raise ShapeError(f"map sizes differ: {clean.shape} vs {noisy.shape}")
    n = clean_f.shape[0]
    class_rate = float(np.mean(clean_f != noisy_f))
    if n < 2:
        return NoiseReport(class_noise_rate=class_rate, affinity_noise_rate=0.0)
    diff = affinity_label(clean_f) != affinity_label(noisy_f)
    np.fill_diagonal(diff, False)
    affinity_rate = float(diff.sum() / (n * (n - 1)))
    return NoiseReport(class_noise_rate=class_rate, affinity_noise_rate=affinity_rate)


def empirical_ntm(clean: np.ndarray, noisy: np.ndarray,
                  classes: int | None = None) -> np.ndarray:
    """Row-normalized confusion counts of noisy labels given clean labels."""
    clean_f = _flat_labels(clean)
    noisy_f = _flat_labels(noisy)
    if clean_f.shape != noisy_f.shape:
        raise ShapeError(f"map sizes differ: {clean.shape} vs {noisy.shape}")
    if classes is None:
        classes = int(max(clean_f.max(), noisy_f.max())) + 1
    counts = np.zeros((classes, classes), dtype=np.float64)
    np.add.at(counts, (clean_f, noisy_f), 1.0)
    row_totals = counts.sum(axis=1)
    missing = np.nonzero(row_totals == 0)[0]
    if missing.size:
        raise DegenerateRowError(
            f"classes {missing.tolist()} absent from the clean map; their NTM "
            "rows are undefined"
        )
    return counts / row_totals[:, None]


def class_distribution(label_maps, classes: int | None = None) -> np.ndarray:
    """Pooled per-class pixel proportions over one map or a collection."""
    if isinstance(label_maps, np.ndarray):
        label_maps = [label_maps]
    flats = [_flat_labels(m) for m in label_maps]
    if not flats:
        raise ConfigError("class_distribution needs at least one label map")
    pooled = np.concatenate(flats)
    if classes is None:
        classes = int(pooled.max()) + 1
    counts = np.bincount(pooled, minlength=classes).astype(np.float64)
    if counts.size > classes:
        raise ShapeError(f"label {pooled.max()} out of range for {classes} classes")
    dist = counts / counts.sum()
    if np.count_nonzero(dist) < 2:
        warnings.warn("class distribution is concentrated on one class; the "
                      "affinity translation is degenerate", RuntimeWarning)
    return dist
