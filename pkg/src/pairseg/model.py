"""Toy segmentation network and the joint class/affinity training loop.

The network is deliberately small: two 3x3 convolutions (the second with
stride 2) into a 1x1 classifier head, all float64, giving a 16x16
feature grid (n = 256 pair space) for 32x32 inputs. Class and affinity
NTMs live alongside the conv weights as unconstrained raw parameters
mapped through a row-wise softmax, so they stay row-stochastic by
construction and train with their own learning rate.

Training modes select which loss terms are active:

* baseline_ce  plain pixel-wise CE on the coarse prediction Q
* affinity     CE on Q plus binary CE on the affinity map P'
* dar          CE on the DAR-refined P plus binary CE on P' (no correction)
* calc         NTM-corrected class and affinity losses, no DAR
* jcas         DAR refinement plus corrected losses plus consistency

Everything is seeded and single-threaded; identical config and seed give
bit-identical histories.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import grids
from .affinity import affinity_map, dar_refine
from .errors import ConfigError, NonFiniteLossError, ShapeError
from .losses import (
    affinity_bce,
    affinity_corrected_loss,
    cacr,
    ce_loss,
    class_corrected_loss,
    joint_loss,
)
from .noise import class_distribution
from .ntm import identity_raw, ntm_from_params, volume_reg

MODES = ("baseline_ce", "affinity", "dar", "calc", "jcas")
CORRECTED_MODES = ("calc", "jcas")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    warmup_epochs: int = 2
    lr_backbone: float = 0.05
    lr_ntm: float = 0.005
    momentum: float = 0.9
    lam: float = 0.01
    volume_weight: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    mode: str = "jcas"
    width: int = 16
    ntm_init_scale: float = 4.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, want one of {MODES}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.mode in CORRECTED_MODES and self.warmup_epochs < 1:
            raise ConfigError(
                f"mode {self.mode!r} estimates the class distribution from "
                "warm-up pseudo labels and needs warmup_epochs >= 1"
            )
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_backbone <= 0 or self.lr_ntm <= 0:
            raise ConfigError("learning rates must be > 0")


class SegModel(torch.nn.Module):
    """Two-conv feature extractor, softmax classifier head, and NTM params."""

    def __init__(self, channels: int = 1, classes: int = 4, width: int = 16,
                 seed: int = 0, ntm_init_scale: float = 4.0):
        super().__init__()
        if classes < 2:
            raise ConfigError(f"need >= 2 classes, got {classes}")
        # layer construction draws from the global torch RNG; pin it so the
        # same seed always yields the same initial weights
        torch.manual_seed(seed)
        self.classes = classes
        self.conv1 = torch.nn.Conv2d(channels, width, 3, padding=1)
        self.conv2 = torch.nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.head = torch.nn.Conv2d(width, classes, 1)
        self.ntm_c_raw = torch.nn.Parameter(identity_raw(classes, ntm_init_scale))
        self.ntm_a_raw = torch.nn.Parameter(identity_raw(2, ntm_init_scale))
        self.double()

    def forward(self, x: torch.Tensor):
        """Images (B, ch, H, W) -> features (B, d, h, w) and probs Q (B, C, h, w)."""
        if x.ndim != 4:
            raise ShapeError(f"expected (B, ch, H, W) input, got {tuple(x.shape)}")
        f = torch.relu(self.conv1(x))
        f = torch.relu(self.conv2(f))
        q = torch.softmax(self.head(f), dim=1)
        return f, q

    def flat_forward(self, x: torch.Tensor):
        """Forward pass reshaped to pair space: (B, n, d) features, (B, n, C) probs."""
        f, q = self.forward(x)
        b, d, h, w = f.shape
        feat = f.permute(0, 2, 3, 1).reshape(b, h * w, d)
        probs = q.permute(0, 2, 3, 1).reshape(b, h * w, self.classes)
        return feat, probs, (h, w)

    def class_ntm(self) -> torch.Tensor:
        return ntm_from_params(self.ntm_c_raw)

    def affinity_ntm(self) -> torch.Tensor:
        return ntm_from_params(self.ntm_a_raw)


@dataclass
class TrainData:
    """Tensors for one experiment: noisy-label train split, clean test split."""

    train_images: torch.Tensor     # (N, ch, H, W) float64
    train_noisy: np.ndarray        # (N, H, W) int labels, possibly corrupted
    test_images: torch.Tensor
    test_clean: np.ndarray
    classes: int

    def __post_init__(self):
        if self.train_images.shape[0] != self.train_noisy.shape[0]:
            raise ShapeError("train image/label counts differ")
        if self.test_images.shape[0] != self.test_clean.shape[0]:
            raise ShapeError("test image/label counts differ")


def build_train_data(train_samples, test_samples, noisy_labels, classes: int) -> TrainData:
    """Pack dataset samples plus corrupted train labels into torch tensors."""
    def stack_images(samples):
        imgs = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(imgs)).to(torch.float64)

    noisy = np.stack([np.asarray(m) for m in noisy_labels])
    clean_test = np.stack([s.label for s in test_samples])
    return TrainData(
        train_images=stack_images(train_samples),
        train_noisy=noisy,
        test_images=stack_images(test_samples),
        test_clean=clean_test,
        classes=classes,
    )


@dataclass
class TrainHistory:
    """Per-epoch loss components and clean-test metrics."""

    rows: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(row)


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor downsample aligned to the stride-2 conv centers."""
    if factor < 1:
        raise ShapeError(f"downsample factor must be >= 1, got {factor}")
    return labels[..., ::factor, ::factor]


def upsample_pred(pred: np.ndarray, factor: int) -> np.ndarray:
    return pred.repeat(factor, axis=-2).repeat(factor, axis=-1)


def _one_hot_torch(labels: torch.Tensor, classes: int) -> torch.Tensor:
    return torch.nn.functional.one_hot(labels.long(), classes).to(torch.float64)


def _affinity_labels_torch(flat_labels: torch.Tensor) -> torch.Tensor:
    return (flat_labels[:, :, None] == flat_labels[:, None, :]).to(torch.float64)


def make_optimizer(model: SegModel, config: TrainConfig) -> torch.optim.Optimizer:
    backbone = [p for name, p in model.named_parameters() if "ntm" not in name]
    return torch.optim.SGD(
        [
            {"params": backbone, "lr": config.lr_backbone},
            {"params": [model.ntm_c_raw, model.ntm_a_raw], "lr": config.lr_ntm},
        ],
        momentum=config.momentum,
    )


def mode_losses(model: SegModel, images: torch.Tensor, flat_noisy: torch.Tensor,
                config: TrainConfig, n_dist: torch.Tensor | None) -> dict:
    """Forward pass plus every loss term the mode asks for.

    Returns tensors under keys total/class/aff/cacr so callers can either
    backprop through `total` or log the components.
    """
    feat, q, _ = model.flat_forward(images)
    onehot = _one_hot_torch(flat_noisy, model.classes)
    mode = config.mode
    zero = torch.zeros((), dtype=torch.float64)

    if mode == "baseline_ce":
        loss_class = ce_loss(q, onehot)
        return {"total": loss_class, "class": loss_class, "aff": zero, "cacr": zero}

    p_aff = affinity_map(feat)
    aff_labels = _affinity_labels_torch(flat_noisy)

    if mode == "affinity":
        loss_class = ce_loss(q, onehot)
        loss_aff = affinity_bce(p_aff, aff_labels)
    elif mode == "dar":
        refined = dar_refine(q, p_aff)
        loss_class = ce_loss(refined, onehot)
        loss_aff = affinity_bce(p_aff, aff_labels)
    elif mode == "calc":
        loss_class = class_corrected_loss(q, model.class_ntm(), onehot)
        loss_aff = affinity_corrected_loss(p_aff, model.affinity_ntm(), aff_labels)
    else:  # jcas
        refined = dar_refine(q, p_aff)
        loss_class = class_corrected_loss(refined, model.class_ntm(), onehot)
        loss_aff = affinity_corrected_loss(p_aff, model.affinity_ntm(), aff_labels)

    if mode in CORRECTED_MODES:
        if n_dist is None:
            raise ConfigError(f"mode {mode!r} needs the estimated class distribution")
        loss_cacr = cacr(model.class_ntm(), model.affinity_ntm(), n_dist)
        vol = volume_reg(model.class_ntm())
        total = joint_loss(loss_class, loss_aff, loss_cacr, config.lam,
                           volume_term=vol, volume_weight=config.volume_weight)
    else:
        loss_cacr = zero
        total = loss_class + loss_aff
    return {"total": total, "class": loss_class, "aff": loss_aff, "cacr": loss_cacr}


def train_step(model: SegModel, optimizer: torch.optim.Optimizer,
               images: torch.Tensor, flat_noisy: torch.Tensor,
               config: TrainConfig, n_dist: torch.Tensor | None) -> dict:
    """One SGD step; returns the detached loss components."""
    losses = mode_losses(model, images, flat_noisy, config, n_dist)
    total = losses["total"]
    if not torch.isfinite(total).item():
        snapshot = {k: float(v.detach()) for k, v in losses.items()}
        snapshot["mode"] = config.mode
        raise NonFiniteLossError(f"non-finite loss in mode {config.mode}", snapshot)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def _epoch_batches(count: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def _ce_epoch(model, optimizer, data: TrainData, flat_noisy: torch.Tensor,
              config: TrainConfig, rng) -> None:
    ce_cfg_kwargs = {**asdict(config), "mode": "baseline_ce"}
    ce_cfg = TrainConfig(**ce_cfg_kwargs)
    for batch in _epoch_batches(data.train_images.shape[0], config.batch_size, rng):
        idx = torch.from_numpy(batch)
        train_step(model, optimizer, data.train_images[idx], flat_noisy[idx],
                   ce_cfg, None)


def warmup_and_estimate_n(model: SegModel, optimizer, data: TrainData,
                          flat_noisy: torch.Tensor, config: TrainConfig,
                          rng) -> torch.Tensor:
    """Plain-CE warm-up, then the class distribution of argmax pseudo labels.

    If some class never appears in the pseudo labels the noisy-label
    distribution is used instead (with a warning): a zero proportion would
    tell the affinity translation the class does not exist.
    """
    if config.warmup_epochs < 1:
        raise ConfigError("warm-up needs warmup_epochs >= 1")
    for _ in range(config.warmup_epochs):
        _ce_epoch(model, optimizer, data, flat_noisy, config, rng)
    preds = []
    with torch.no_grad():
        for start in range(0, data.train_images.shape[0], config.batch_size):
            _, q, _ = model.flat_forward(data.train_images[start:start + config.batch_size])
            preds.append(q.argmax(dim=-1).reshape(-1).numpy())
    pooled = np.concatenate(preds)
    counts = np.bincount(pooled, minlength=data.classes)
    if (counts == 0).any():
        warnings.warn(
            "a class is absent from warm-up pseudo labels; falling back to "
            "the noisy-label distribution", RuntimeWarning,
        )
        dist = class_distribution(flat_noisy.numpy(), classes=data.classes)
    else:
        dist = counts / counts.sum()
    return torch.from_numpy(np.asarray(dist, dtype=np.float64))


def evaluate(model: SegModel, images: torch.Tensor, clean_labels: np.ndarray,
             mode: str, batch_size: int = 32) -> grids.SegMetrics:
    """Clean-test metrics for the mode's prediction rule.

    Modes with DAR predict from the refined map P; the others from Q.
    Predictions are argmaxed at feature resolution and nearest-neighbor
    upsampled to label resolution.
    """
    acc = grids.MetricAccumulator(model.classes)
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start:start + batch_size]
            feat, q, (h, w) = model.flat_forward(chunk)
            if mode in ("dar", "jcas"):
                probs = dar_refine(q, affinity_map(feat))
            else:
                probs = q
            pred = probs.argmax(dim=-1).reshape(-1, h, w).numpy()
            factor = clean_labels.shape[-1] // w
            pred_full = upsample_pred(pred, factor)
            for i in range(pred_full.shape[0]):
                acc.update(pred_full[i].astype(np.int64),
                           clean_labels[start + i].astype(np.int64))
    return acc.finalize()


def train(data: TrainData, config: TrainConfig):
    """Warm-up (when the mode needs it) then the full training loop.

    Returns the trained model and a TrainHistory with one row per main
    epoch: mean loss components over the epoch's batches plus clean-test
    metrics under the mode's prediction rule.
    """
    torch.set_num_threads(1)
    model = SegModel(
        channels=data.train_images.shape[1], classes=data.classes,
        width=config.width, seed=config.seed,
        ntm_init_scale=config.ntm_init_scale,
    )
    optimizer = make_optimizer(model, config)
    rng = np.random.default_rng([config.seed, 104729])

    with torch.no_grad():
        _, _, (h, _) = model.flat_forward(data.train_images[:1])
    factor = data.train_images.shape[-2] // h
    coarse = downsample_labels(data.train_noisy, factor)
    flat_noisy = torch.from_numpy(
        np.ascontiguousarray(coarse.reshape(coarse.shape[0], -1))
    ).long()

    history = TrainHistory()
    n_dist = None
    if config.mode in CORRECTED_MODES:
        n_dist = warmup_and_estimate_n(model, optimizer, data, flat_noisy, config, rng)
    elif config.warmup_epochs > 0:
        for _ in range(config.warmup_epochs):
            _ce_epoch(model, optimizer, data, flat_noisy, config, rng)

    for epoch in range(config.epochs):
        sums = {"total": 0.0, "class": 0.0, "aff": 0.0, "cacr": 0.0}
        batches = 0
        for batch in _epoch_batches(data.train_images.shape[0], config.batch_size, rng):
            idx = torch.from_numpy(batch)
            parts = train_step(model, optimizer, data.train_images[idx],
                               flat_noisy[idx], config, n_dist)
            for key in sums:
                sums[key] += parts[key]
            batches += 1
        metrics = evaluate(model, data.test_images, data.test_clean, config.mode)
        row = {
            "epoch": epoch,
            "loss_class": sums["class"] / batches,
            "loss_aff": sums["aff"] / batches,
            "loss_cacr": sums["cacr"] / batches,
            "loss_total": sums["total"] / batches,
            "mean_dice": metrics.mean_dice,
            "mean_jac": metrics.mean_jac,
        }
        for c in range(data.classes):
            row[f"dice_{c}"] = float(metrics.per_class_dice[c])
            row[f"jac_{c}"] = float(metrics.per_class_jac[c])
        history.append(row)
    return model, history


def config_hash(config) -> str:
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(out_dir, model: SegModel, config: TrainConfig, epoch: int) -> None:
    """Persist parameters as GRID arrays plus a JSON manifest."""
    os.makedirs(out_dir, exist_ok=True)
    entries = {}
    for name, param in model.named_parameters():
        fname = f"param_{name.replace('.', '_')}.grid"
        grids.write_grid(os.path.join(out_dir, fname), param.detach().numpy())
        entries[name] = {"file": fname, "shape": list(param.shape)}
    manifest = {
        "classes": model.classes,
        "channels": model.conv1.in_channels,
        "width": model.conv1.out_channels,
        "epoch": epoch,
        "config": asdict(config),
        "config_hash": config_hash(config),
        "params": entries,
    }
    with open(os.path.join(out_dir, "checkpoint.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir):
    """Rebuild a SegModel from save_checkpoint output."""
    path = os.path.join(ckpt_dir, "checkpoint.json")
    with open(path) as fh:
        manifest = json.load(fh)
    model = SegModel(
        channels=manifest["channels"], classes=manifest["classes"],
        width=manifest["width"],
    )
    state = {}
    for name, entry in manifest["params"].items():
        arr = grids.read_grid(os.path.join(ckpt_dir, entry["file"]))
        state[name] = torch.from_numpy(arr).to(torch.float64)
    model.load_state_dict(state)
    return model, manifest
