"""Experiment command line: generate, corrupt, analyze, train, evaluate.

One JSON config describes an experiment (dataset, noise, training); every
leaf is overridable with repeated `--set dotted.path=value` flags and the
whole resolved config is echoed into the output manifest. All outputs are
reproducible: the only field allowed to differ between identical runs is
the manifest timestamp.

Exit codes: 0 success, 2 usage (argparse), 3 invalid config, 4 missing
file, 5 malformed data or file format, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
import traceback

import numpy as np
import torch

from . import __version__
from .affinity import affinity_map, dar_refine
from .dataset import Sample, ShapesConfig, gen_shapes
from .errors import (
    ConfigError,
    GridFormatError,
    LabelRangeError,
    PairsegError,
    ShapeError,
)
from .grids import read_grid, write_grid
from .losses import (
    affinity_bce,
    affinity_corrected_loss,
    cacr,
    ce_loss,
    class_corrected_loss,
    finite_diff_check,
)
from .model import (
    TrainConfig,
    build_train_data,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .noise import NoiseSpec, class_distribution, corrupt, empirical_ntm, noise_rates
from .ntm import (
    mc_translate_oracle,
    ntm_from_params,
    ntm_to_json,
    translate_closed_form,
    translate_exact,
    volume_reg,
)

FLOAT_FMT = "%.12g"
NOISE_STREAM = 9001     # mixed into per-image corruption seeds


def default_config() -> dict:
    return {
        "seed": 0,
        "out": "runs/exp",
        "data_dir": None,
        "checkpoint_dir": None,
        "dataset": {},
        "noise": {"kind": "symmetric", "rate": 0.5, "classes": 4},
        "train": {},
        "translate": {
            "ntm": [[0.9, 0.1], [0.2, 0.8]],
            "dist": [0.5, 0.5],
            "samples": 200_000,
            "mc_seed": 123,
        },
        "grad_check": {"seed": 0, "step": 1e-5},
    }


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set wants key=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    if not all(keys):
        raise ConfigError(f"bad --set path {path!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    for key in keys[:-1]:
        nxt = node.get(key)
        if not isinstance(nxt, dict):
            nxt = {}
            node[key] = nxt
        node = nxt
    node[keys[-1]] = value


def _dataclass_from(cls, obj: dict, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(obj).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


def load_config(args) -> dict:
    config = default_config()
    if args.config is not None:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("top-level config must be a JSON object")
        config = _deep_merge(config, user)
    for assignment in args.set or []:
        _apply_set(config, assignment)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.out is not None:
        config["out"] = args.out
    if not isinstance(config.get("seed"), int) or config["seed"] < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {config.get('seed')!r}")
    return config


def resolve_dataset_config(config: dict) -> ShapesConfig:
    block = dict(config.get("dataset") or {})
    block.setdefault("seed", config["seed"])
    if "intensities" in block and block["intensities"] is not None:
        block["intensities"] = tuple(block["intensities"])
    return _dataclass_from(ShapesConfig, block, "dataset config")


def resolve_noise_spec(config: dict, classes: int) -> NoiseSpec:
    block = dict(config.get("noise") or {})
    block.setdefault("classes", classes)
    if block.get("ntm") is not None:
        block["ntm"] = np.asarray(block["ntm"], dtype=np.float64)
    return _dataclass_from(NoiseSpec, block, "noise config")


def resolve_train_config(config: dict) -> TrainConfig:
    block = dict(config.get("train") or {})
    block.setdefault("seed", config["seed"])
    return _dataclass_from(TrainConfig, block, "train config")


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def write_json(path, obj) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_json_ready(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(out_dir: str, config: dict, command: str, files: dict) -> None:
    manifest = {
        "tool": f"pairseg {__version__}",
        "command": command,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config": config,
        "files": files,
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)


def write_csv(path, columns, rows) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            cells = []
            for col in columns:
                val = row[col]
                if isinstance(val, float):
                    cells.append(FLOAT_FMT % val)
                else:
                    cells.append(str(val))
            fh.write(",".join(cells) + "\n")


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()


def _noise_seed(master: int, index: int):
    return [master, NOISE_STREAM, index]


def _corrupt_split(labels, spec: NoiseSpec, master_seed: int):
    return [corrupt(lab, spec, _noise_seed(master_seed, i)) for i, lab in enumerate(labels)]


def _dataset_dir(config: dict) -> str:
    return config.get("data_dir") or os.path.join(config["out"], "dataset")


def _checkpoint_dir(config: dict) -> str:
    return config.get("checkpoint_dir") or os.path.join(config["out"], "checkpoint")


def cmd_gen_data(config: dict) -> int:
    ds_config = resolve_dataset_config(config)
    train_split, test_split = gen_shapes(ds_config)
    out_dir = _dataset_dir(config)
    os.makedirs(out_dir, exist_ok=True)
    files = {"train_images": [], "train_labels": [], "test_images": [], "test_labels": []}
    for split_name, split in (("train", train_split), ("test", test_split)):
        for i, sample in enumerate(split):
            img_name = f"{split_name}_image_{i:04d}.grid"
            lab_name = f"{split_name}_label_{i:04d}.grid"
            write_grid(os.path.join(out_dir, img_name), sample.image)
            write_grid(os.path.join(out_dir, lab_name), sample.label)
            files[f"{split_name}_images"].append(img_name)
            files[f"{split_name}_labels"].append(lab_name)
    checksums = {
        name: _sha256(os.path.join(out_dir, name))
        for group in files.values() for name in group
    }
    index = {"classes": ds_config.classes, "files": files, "sha256": checksums}
    write_json(os.path.join(out_dir, "dataset.json"), index)
    write_manifest(config["out"], config, "gen-data", {"dataset_dir": out_dir})
    print(f"wrote {len(train_split)} train / {len(test_split)} test samples to {out_dir}")
    return 0


def _load_dataset_dir(data_dir: str):
    index_path = os.path.join(data_dir, "dataset.json")
    if not os.path.exists(index_path):
        raise FileNotFoundError(f"no dataset index at {index_path}; run gen-data first")
    with open(index_path) as fh:
        index = json.load(fh)
    def load_group(kind):
        return [read_grid(os.path.join(data_dir, name)) for name in index["files"][kind]]
    train_split = [
        Sample(image=img, label=lab.astype(np.uint8))
        for img, lab in zip(load_group("train_images"), load_group("train_labels"))
    ]
    test_split = [
        Sample(image=img, label=lab.astype(np.uint8))
        for img, lab in zip(load_group("test_images"), load_group("test_labels"))
    ]
    return index["classes"], train_split, test_split


def cmd_corrupt(config: dict) -> int:
    data_dir = _dataset_dir(config)
    classes, train_split, _ = _load_dataset_dir(data_dir)
    spec = resolve_noise_spec(config, classes)
    out_dir = os.path.join(config["out"], "noisy")
    os.makedirs(out_dir, exist_ok=True)
    noisy = _corrupt_split([s.label for s in train_split], spec, config["seed"])
    names = []
    for i, lab in enumerate(noisy):
        name = f"train_noisy_{i:04d}.grid"
        write_grid(os.path.join(out_dir, name), lab.astype(np.uint8))
        names.append(name)
    write_json(os.path.join(out_dir, "noisy.json"),
               {"classes": classes, "files": names, "source": data_dir})
    write_manifest(config["out"], config, "corrupt", {"noisy_dir": out_dir})
    print(f"corrupted {len(names)} train label maps into {out_dir}")
    return 0


def cmd_noise_stats(config: dict) -> int:
    ds_config = resolve_dataset_config(config)
    spec = resolve_noise_spec(config, ds_config.classes)
    train_split, _ = gen_shapes(ds_config)
    clean = [s.label for s in train_split]
    noisy = _corrupt_split(clean, spec, config["seed"])
    per_image = [noise_rates(c, n) for c, n in zip(clean, noisy)]
    class_rates = np.array([r.class_noise_rate for r in per_image])
    aff_rates = np.array([r.affinity_noise_rate for r in per_image])
    pooled_ntm = empirical_ntm(np.stack(clean), np.stack(noisy), classes=ds_config.classes)
    report = {
        "noise_kind": spec.kind,
        "images": len(clean),
        "mean_class_noise_rate": float(class_rates.mean()),
        "mean_affinity_noise_rate": float(aff_rates.mean()),
        "affinity_below_class_fraction": float(np.mean(aff_rates < class_rates)),
        "per_image_class_rate": class_rates.tolist(),
        "per_image_affinity_rate": aff_rates.tolist(),
        "empirical_ntm": ntm_to_json(torch.from_numpy(pooled_ntm)),
        "class_distribution": class_distribution(np.stack(clean),
                                                 classes=ds_config.classes).tolist(),
    }
    out_path = os.path.join(config["out"], "noise_report.json")
    write_json(out_path, report)
    write_manifest(config["out"], config, "noise-stats", {"noise_report": out_path})
    print(f"class rate {report['mean_class_noise_rate']:.4f}, "
          f"affinity rate {report['mean_affinity_noise_rate']:.4f} "
          f"-> {out_path}")
    return 0


def cmd_translate_ntm(config: dict) -> int:
    block = config.get("translate") or {}
    if "ntm" not in block or "dist" not in block:
        raise ConfigError("translate config needs 'ntm' and 'dist' entries")
    t_c = torch.tensor(block["ntm"], dtype=torch.float64)
    n_dist = torch.tensor(block["dist"], dtype=torch.float64)
    samples = int(block.get("samples", 200_000))
    mc_seed = int(block.get("mc_seed", 123))
    exact = translate_exact(t_c, n_dist)
    closed = translate_closed_form(t_c, n_dist)
    oracle = mc_translate_oracle(t_c, n_dist, samples, mc_seed)
    gap = np.abs(exact.numpy() - oracle.estimate)
    sigmas = gap / np.maximum(oracle.std_err, 1e-300)
    report = {
        "class_ntm": ntm_to_json(t_c),
        "class_distribution": n_dist.tolist(),
        "exact": exact.numpy().tolist(),
        "closed_form": closed.numpy().tolist(),
        "oracle_estimate": oracle.estimate.tolist(),
        "oracle_std_err": oracle.std_err.tolist(),
        "oracle_samples": samples,
        "max_abs_exact_vs_closed": float(np.abs(exact.numpy() - closed.numpy()).max()),
        "max_sigmas_exact_vs_oracle": float(sigmas.max()),
    }
    out_path = os.path.join(config["out"], "ntm_report.json")
    write_json(out_path, report)
    write_manifest(config["out"], config, "translate-ntm", {"ntm_report": out_path})
    print(f"exact vs oracle: {report['max_sigmas_exact_vs_oracle']:.2f} sigma max; "
          f"exact vs closed: {report['max_abs_exact_vs_closed']:.3g} -> {out_path}")
    return 0


def cmd_grad_check(config: dict) -> int:
    block = config.get("grad_check") or {}
    seed = int(block.get("seed", 0))
    step = float(block.get("step", 1e-5))
    rng = np.random.default_rng(seed)
    n, classes = 6, 3

    def rnd_simplex(*shape):
        raw = rng.random(shape) + 0.1
        return raw / raw.sum(axis=-1, keepdims=True)

    p = torch.from_numpy(rnd_simplex(n, classes))
    onehot = torch.from_numpy(np.eye(classes)[rng.integers(0, classes, n)])
    p_aff = torch.from_numpy(rnd_simplex(n, n))
    aff_labels = torch.from_numpy(
        (rng.random((n, n)) < 0.5).astype(np.float64))
    raw_c = torch.from_numpy(rng.normal(0, 1, (classes, classes)))
    raw_a = torch.from_numpy(rng.normal(0, 1, (2, 2)))
    ndist = torch.from_numpy(rnd_simplex(classes))
    feats = torch.from_numpy(rng.normal(0, 1, (n, 4)))
    q = torch.from_numpy(rnd_simplex(n, classes))

    checks = {
        "ce_loss": (lambda pp: ce_loss(pp, onehot), [p]),
        "class_corrected_loss": (
            lambda pp, rc: class_corrected_loss(pp, ntm_from_params(rc), onehot),
            [p, raw_c]),
        "affinity_bce": (lambda pa: affinity_bce(pa, aff_labels), [p_aff]),
        "affinity_corrected_loss": (
            lambda pa, ra: affinity_corrected_loss(pa, ntm_from_params(ra), aff_labels),
            [p_aff, raw_a]),
        "cacr": (
            lambda rc, ra: cacr(ntm_from_params(rc), ntm_from_params(ra), ndist),
            [raw_c, raw_a]),
        "volume_reg": (lambda rc: volume_reg(ntm_from_params(rc)), [raw_c]),
        "dar_refine": (
            lambda qq, ff: ce_loss(dar_refine(qq, affinity_map(ff)), onehot),
            [q, feats]),
    }
    report = {}
    worst = 0.0
    for name, (fn, inputs) in checks.items():
        res = finite_diff_check(fn, inputs, step=step, seed=seed)
        report[name] = {
            "max_rel_err": res.max_rel_err,
            "coords_checked": res.coords_checked,
            "coords_skipped": res.coords_skipped,
            "pass": res.ok(1e-4),
        }
        worst = max(worst, res.max_rel_err)
    report["all_pass"] = all(entry["pass"] for entry in report.values()
                             if isinstance(entry, dict))
    out_path = os.path.join(config["out"], "grad_report.json")
    write_json(out_path, report)
    write_manifest(config["out"], config, "grad-check", {"grad_report": out_path})
    print(f"worst relative error {worst:.3g}, "
          f"all_pass={report['all_pass']} -> {out_path}")
    return 0 if report["all_pass"] else 1


def _history_columns(classes: int):
    cols = ["epoch", "loss_class", "loss_aff", "loss_cacr", "loss_total",
            "mean_dice", "mean_jac"]
    cols += [f"dice_{c}" for c in range(classes)]
    cols += [f"jac_{c}" for c in range(classes)]
    return cols


def cmd_train(config: dict) -> int:
    ds_config = resolve_dataset_config(config)
    spec = resolve_noise_spec(config, ds_config.classes)
    train_config = resolve_train_config(config)
    train_split, test_split = gen_shapes(ds_config)
    noisy = _corrupt_split([s.label for s in train_split], spec, config["seed"])
    data = build_train_data(train_split, test_split, noisy, ds_config.classes)
    model, history = train(data, train_config)

    out_dir = config["out"]
    metrics_path = os.path.join(out_dir, "metrics.csv")
    write_csv(metrics_path, _history_columns(ds_config.classes), history.rows)
    jac_path = os.path.join(out_dir, "jac_curve.csv")
    write_csv(jac_path, ["epoch", "mean_jac"],
              [{"epoch": r["epoch"], "mean_jac": r["mean_jac"]} for r in history.rows])

    ntm_report = {
        "mode": train_config.mode,
        "learned_class_ntm": ntm_to_json(model.class_ntm()),
        "learned_affinity_ntm": ntm_to_json(model.affinity_ntm()),
    }
    if train_config.mode in ("calc", "jcas"):
        ntm_report["translated_from_class"] = translate_exact(
            model.class_ntm(),
            torch.from_numpy(class_distribution(data.train_noisy,
                                                classes=ds_config.classes)),
        ).detach().numpy().tolist()
    ntm_path = os.path.join(out_dir, "ntm_report.json")
    write_json(ntm_path, ntm_report)

    ckpt_dir = _checkpoint_dir(config)
    save_checkpoint(ckpt_dir, model, train_config, epoch=train_config.epochs)
    write_manifest(out_dir, config, "train", {
        "metrics": metrics_path, "jac_curve": jac_path,
        "ntm_report": ntm_path, "checkpoint": ckpt_dir,
    })
    final = history.rows[-1] if history.rows else {}
    print(f"mode={train_config.mode} final mean_jac="
          f"{final.get('mean_jac', float('nan')):.4f} -> {metrics_path}")
    return 0


def cmd_eval(config: dict) -> int:
    ckpt_dir = _checkpoint_dir(config)
    if not os.path.exists(os.path.join(ckpt_dir, "checkpoint.json")):
        raise FileNotFoundError(f"no checkpoint at {ckpt_dir}; run train first")
    model, manifest = load_checkpoint(ckpt_dir)
    ds_config = resolve_dataset_config(config)
    mode = (config.get("train") or {}).get("mode") or manifest["config"]["mode"]
    _, test_split = gen_shapes(ds_config)
    images = np.stack([s.image for s in test_split]).transpose(0, 3, 1, 2)
    labels = np.stack([s.label for s in test_split])
    metrics = evaluate(model, torch.from_numpy(images).to(torch.float64), labels, mode)
    report = {
        "mode": mode,
        "checkpoint_epoch": manifest["epoch"],
        "mean_dice": metrics.mean_dice,
        "mean_jac": metrics.mean_jac,
        "per_class_dice": metrics.per_class_dice.tolist(),
        "per_class_jac": metrics.per_class_jac.tolist(),
    }
    out_path = os.path.join(config["out"], "eval_metrics.json")
    write_json(out_path, report)
    write_manifest(config["out"], config, "eval", {"eval_metrics": out_path})
    print(f"mode={mode} mean_jac={metrics.mean_jac:.4f} -> {out_path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "corrupt": cmd_corrupt,
    "noise-stats": cmd_noise_stats,
    "translate-ntm": cmd_translate_ntm,
    "grad-check": cmd_grad_check,
    "train": cmd_train,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairseg",
        description="joint class/affinity segmentation experiments under label noise",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", help="JSON experiment config", default=None)
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override, repeatable")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        os.makedirs(config["out"], exist_ok=True)
        return COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 4
    except (GridFormatError, ShapeError, LabelRangeError) as exc:
        print(f"error: bad data: {exc}", file=sys.stderr)
        return 5
    except PairsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
