"""Deterministic synthetic shapes dataset.

Each image is a grayscale grid: background plus a few contiguous
foreground shapes (ellipse, rectangle, triangle), one distinct intensity
band per class with additive Gaussian noise. The first C-1 shapes of an
image take classes 1..C-1 in order, so every foreground class is present
in every image under the default config. Per-image RNG streams are
derived from (seed, image index), so generation order cannot change the
data and the test split (indices offset by train_count) never overlaps
the train split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SHAPE_KINDS = ("ellipse", "rect", "triangle")
MIN_CLASS_PIXELS = 6
MAX_PLACEMENT_TRIES = 40


@dataclass(frozen=True)
class ShapesConfig:
    image_size: int = 32
    classes: int = 4
    min_shapes: int = 3
    max_shapes: int = 5
    intensities: tuple = ()          # length-C class means; empty = evenly spaced
    noise_scale: float = 0.08
    train_count: int = 200
    test_count: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need >= 2 classes, got {self.classes}")
        if self.image_size < 8:
            raise ConfigError(f"image size must be >= 8, got {self.image_size}")
        if not (0 <= self.min_shapes <= self.max_shapes):
            raise ConfigError("need 0 <= min_shapes <= max_shapes")
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigError("train and test counts must be >= 1")
        if self.intensities and len(self.intensities) != self.classes:
            raise ConfigError(
                f"got {len(self.intensities)} intensities for {self.classes} classes"
            )
        if self.noise_scale < 0:
            raise ConfigError("noise scale must be >= 0")

    def class_means(self) -> np.ndarray:
        if self.intensities:
            return np.asarray(self.intensities, dtype=np.float64)
        return np.linspace(0.1, 0.9, self.classes)


@dataclass(frozen=True)
class Sample:
    image: np.ndarray    # (H, W, 1) float64
    label: np.ndarray    # (H, W) uint8


def _ellipse_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    cy, cx = rng.uniform(size * 0.2, size * 0.8, size=2)
    a, b = rng.uniform(size * 0.1, size * 0.3, size=2)
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dy = yy - cy
    dx = xx - cx
    u = (dy * np.cos(theta) + dx * np.sin(theta)) / max(a, 1.5)
    v = (-dy * np.sin(theta) + dx * np.cos(theta)) / max(b, 1.5)
    return u * u + v * v <= 1.0


def _rect_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    h = rng.integers(size // 6, size // 2 + 1)
    w = rng.integers(size // 6, size // 2 + 1)
    y0 = rng.integers(0, size - h + 1)
    x0 = rng.integers(0, size - w + 1)
    mask = np.zeros((size, size), dtype=bool)
    mask[y0:y0 + h, x0:x0 + w] = True
    return mask


def _triangle_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    for _ in range(10):
        pts = rng.uniform(size * 0.1, size * 0.9, size=(3, 2))
        area2 = abs(
            (pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
            - (pts[2, 0] - pts[0, 0]) * (pts[1, 1] - pts[0, 1])
        )
        if area2 >= size * size * 0.05:
            break
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    mask = np.ones((size, size), dtype=bool)
    for i in range(3):
        ay, ax = pts[i]
        by, bx = pts[(i + 1) % 3]
        oy, ox = pts[(i + 2) % 3]
        side = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
        ref = (bx - ax) * (oy - ay) - (by - ay) * (ox - ax)
        mask &= (side * ref) >= 0
    return mask


_SHAPE_FNS = {"ellipse": _ellipse_mask, "rect": _rect_mask, "triangle": _triangle_mask}


def _paint_label(config: ShapesConfig, rng: np.random.Generator):
    size = config.image_size
    n_shapes = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    fg = config.classes - 1
    label = np.zeros((size, size), dtype=np.uint8)
    shape_classes = [(i % fg) + 1 for i in range(n_shapes)]
    for cls in shape_classes:
        kind = SHAPE_KINDS[rng.integers(0, len(SHAPE_KINDS))]
        label[_SHAPE_FNS[kind](size, rng)] = cls
    return label, set(shape_classes)


def _gen_sample(config: ShapesConfig, index: int) -> Sample:
    rng = np.random.default_rng([config.seed, index])
    wanted = None
    for _ in range(MAX_PLACEMENT_TRIES):
        label, wanted = _paint_label(config, rng)
        counts = np.bincount(label.reshape(-1), minlength=config.classes)
        if all(counts[c] >= MIN_CLASS_PIXELS for c in wanted):
            break
    else:
        raise ConfigError(
            f"could not place classes {sorted(wanted)} after "
            f"{MAX_PLACEMENT_TRIES} tries; shapes do not fit the image"
        )
    means = config.class_means()
    image = means[label] + rng.normal(0.0, config.noise_scale, size=label.shape)
    return Sample(image=image[:, :, None], label=label)


def gen_shapes(config: ShapesConfig):
    """Generate the (train, test) splits; bit-identical for a fixed config."""
    train = [_gen_sample(config, i) for i in range(config.train_count)]
    test = [
        _gen_sample(config, config.train_count + i)
        for i in range(config.test_count)
    ]
    return train, test
