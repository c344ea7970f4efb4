"""Core grid types, one-hot encoding, segmentation metrics, and GRID file I/O.

Maps are plain numpy arrays with fixed layout conventions:

* label map:   (H, W) integer array, entries in [0, C)
* one-hot map: (H, W, C) float array, exactly one 1 per pixel
* prob map:    (H, W, C) float array, each pixel on the simplex
* feature map: (h, w, d) float array, finite, no all-zero pixel vector

Validators raise instead of silently fixing, so corrupt data fails at the
boundary where it entered.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import GridFormatError, LabelRangeError, ShapeError

PROB_ATOL = 1e-9


def check_label_map(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[0] < 1 or labels.shape[1] < 1:
        raise ShapeError(f"label map must be 2-d and non-empty, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"label map must be integer, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= classes:
        raise LabelRangeError(
            f"labels must lie in [0, {classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def check_prob_map(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3:
        raise ShapeError(f"prob map must be (H, W, C), got shape {p.shape}")
    if p.min() < -PROB_ATOL or p.max() > 1.0 + PROB_ATOL:
        raise ShapeError("prob map entries outside [0, 1]")
    sums = p.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=PROB_ATOL):
        worst = np.abs(sums - 1.0).max()
        raise ShapeError(f"prob map pixels must sum to 1 (worst deviation {worst:.3e})")
    return p


def check_feature_map(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3:
        raise ShapeError(f"feature map must be (h, w, d), got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ShapeError("feature map has non-finite values")
    return f


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    """Encode an (H, W) label map as an (H, W, C) indicator array."""
    labels = check_label_map(labels, classes)
    out = np.zeros(labels.shape + (classes,), dtype=np.float64)
    h_idx, w_idx = np.indices(labels.shape)
    out[h_idx, w_idx, labels] = 1.0
    return out


def from_one_hot(onehot: np.ndarray) -> np.ndarray:
    """Invert :func:`one_hot` via per-pixel argmax."""
    onehot = np.asarray(onehot)
    if onehot.ndim != 3:
        raise ShapeError(f"one-hot map must be (H, W, C), got shape {onehot.shape}")
    return onehot.argmax(axis=-1).astype(np.int64)


@dataclass(frozen=True)
class SegMetrics:
    """Per-class and mean Dice / Jaccard overlap scores.

    Classes absent from both prediction and reference score 1 (vacuous
    perfection). The means average only over classes present in the
    reference; a class that is predicted but absent from the reference is
    excluded from the mean.
    """

    per_class_dice: np.ndarray
    per_class_jac: np.ndarray
    mean_dice: float
    mean_jac: float


def _metrics_from_counts(inter: np.ndarray, pred_n: np.ndarray, ref_n: np.ndarray) -> SegMetrics:
    classes = len(inter)
    dice = np.ones(classes)
    jac = np.ones(classes)
    union = pred_n + ref_n - inter
    nonvacuous = (pred_n + ref_n) > 0
    dice[nonvacuous] = 2.0 * inter[nonvacuous] / (pred_n + ref_n)[nonvacuous]
    jac[nonvacuous] = inter[nonvacuous] / union[nonvacuous]
    in_ref = ref_n > 0
    if not in_ref.any():
        raise ShapeError("reference contains no labeled pixels")
    return SegMetrics(
        per_class_dice=dice,
        per_class_jac=jac,
        mean_dice=float(dice[in_ref].mean()),
        mean_jac=float(jac[in_ref].mean()),
    )


def _overlap_counts(pred: np.ndarray, reference: np.ndarray, classes: int):
    pred = check_label_map(pred, classes)
    reference = check_label_map(reference, classes)
    if pred.shape != reference.shape:
        raise ShapeError(f"prediction {pred.shape} vs reference {reference.shape}")
    inter = np.zeros(classes)
    pred_n = np.zeros(classes)
    ref_n = np.zeros(classes)
    for c in range(classes):
        p = pred == c
        r = reference == c
        inter[c] = np.count_nonzero(p & r)
        pred_n[c] = np.count_nonzero(p)
        ref_n[c] = np.count_nonzero(r)
    return inter, pred_n, ref_n


def dice_jaccard(pred: np.ndarray, reference: np.ndarray, classes: int) -> SegMetrics:
    """Per-class Dice = 2|∩|/(|P|+|R|) and Jaccard = |∩|/|∪| for one image."""
    return _metrics_from_counts(*_overlap_counts(pred, reference, classes))


class MetricAccumulator:
    """Aggregates intersections and set sizes per class across a whole split.

    Per-class scores are computed on the aggregated counts (not averaged
    per image), so rare classes are not dominated by images they are
    absent from.
    """

    def __init__(self, classes: int):
        self.classes = classes
        self._inter = np.zeros(classes)
        self._pred_n = np.zeros(classes)
        self._ref_n = np.zeros(classes)

    def update(self, pred: np.ndarray, reference: np.ndarray) -> None:
        inter, pred_n, ref_n = _overlap_counts(pred, reference, self.classes)
        self._inter += inter
        self._pred_n += pred_n
        self._ref_n += ref_n

    def finalize(self) -> SegMetrics:
        return _metrics_from_counts(self._inter, self._pred_n, self._ref_n)


# GRID container: magic "JGRD", version u8=1, dtype u8, ndim u8,
# ndim x u32 little-endian dims, then row-major little-endian payload.
_GRID_MAGIC = b"JGRD"
_GRID_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.uint8): 0, np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def write_grid(path, grid: np.ndarray) -> None:
    """Write an array to the bit-exact GRID container format."""
    grid = np.asarray(grid)
    if grid.ndim == 0 or any(dim == 0 for dim in grid.shape):
        raise GridFormatError(f"cannot write degenerate grid of shape {grid.shape}")
    if grid.ndim > 255:
        raise GridFormatError("too many dimensions for GRID header")
    key = np.dtype(grid.dtype)
    if key not in _CODE_FOR_KIND:
        raise GridFormatError(f"unsupported dtype {grid.dtype} (use u8, f32 or f64)")
    code = _CODE_FOR_KIND[key]
    header = _GRID_MAGIC + struct.pack("<BBB", _GRID_VERSION, code, grid.ndim)
    header += struct.pack(f"<{grid.ndim}I", *grid.shape)
    payload = np.ascontiguousarray(grid).astype(_DTYPE_CODES[code], copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_grid(path) -> np.ndarray:
    """Read a GRID file written by :func:`write_grid` (lossless)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 7 or raw[:4] != _GRID_MAGIC:
        raise GridFormatError(f"{path}: not a GRID file (bad magic)")
    version, code, ndim = struct.unpack("<BBB", raw[4:7])
    if version != _GRID_VERSION:
        raise GridFormatError(f"{path}: unsupported GRID version {version}")
    if code not in _DTYPE_CODES:
        raise GridFormatError(f"{path}: unknown dtype code {code}")
    if ndim == 0:
        raise GridFormatError(f"{path}: zero-dimensional grid not allowed")
    dims_end = 7 + 4 * ndim
    if len(raw) < dims_end:
        raise GridFormatError(f"{path}: truncated header")
    shape = struct.unpack(f"<{ndim}I", raw[7:dims_end])
    if any(dim == 0 for dim in shape):
        raise GridFormatError(f"{path}: zero-size dimension in {shape}")
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = raw[dims_end:]
    if len(payload) != expected:
        raise GridFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
