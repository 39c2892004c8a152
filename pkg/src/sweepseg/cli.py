"""Command-line entry point.

Subcommands: ``synth``, ``train``, ``eval``, ``predict``, ``gradcheck``.
Training and gradient checking are driven by a JSON run configuration
with ``model``, ``train``, ``loss``, ``manifest`` and ``out_dir``
sections; command-line flags override the file and the effective merged
configuration is written into the output directory.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, metrics
from .autodiff import gradient_check
from .errors import ConfigError, UsageError
from .model import (ModelConfig, build_model, forward, load_frontend_weights,
                    load_model, tiny_config)
from .training import (EpochRow, LossConfig, TrainConfig, median_frequency_weights,
                       train)


def _fail(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


@contextlib.contextmanager
def _run_lock(out_dir: Path):
    # One training run per output directory.
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out_dir} is locked by another run (remove {lock} "
                         f"if that run is dead)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def load_run_config(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read run config {path}: {exc}") from exc
    if not isinstance(doc, dict) or "model" not in doc:
        raise ConfigError(f"{path}: run config must be an object with a 'model' section")
    doc.setdefault("train", {})
    doc.setdefault("loss", {})
    return doc


def _parse_prior_log(path: Path) -> list[EpochRow]:
    rows = []
    if not path.exists():
        return rows
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for rec in csv.DictReader(lines):
        rows.append(EpochRow(
            epoch=int(rec["epoch"]),
            mean_loss=float(rec["mean_loss"]),
            global_acc=float(rec["global_acc"]) if rec["global_acc"] else None,
            mean_iou=float(rec["mean_iou"]) if rec["mean_iou"] else None,
            wall_seconds=float(rec["wall_seconds"])))
    return rows


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        _fail(f"{out} exists and is not empty; pass --force to write anyway")
        return 1
    height = args.height or args.size
    width = args.width or args.size
    manifest = data.synth_dataset(
        args.n, height, width, args.classes, args.seed, out,
        shape_frac=tuple(args.shape_frac), void_frac=args.void_frac)
    print(f"wrote {args.n} samples ({height}x{width}, {args.classes} classes) "
          f"and manifest to {out}")
    print(f"splits: " + ", ".join(
        f"{s}={len(manifest.entries(s))}" for s in data.SPLITS))
    return 0


def _merged_train_config(args) -> dict:
    doc = load_run_config(args.config)
    if args.epochs is not None:
        doc["train"]["max_epochs"] = args.epochs
    if args.batch_size is not None:
        doc["train"]["batch_size"] = args.batch_size
    if args.seed is not None:
        doc["train"]["seed"] = args.seed
    if args.balance is not None:
        doc["loss"]["balance"] = args.balance
    if args.out is not None:
        doc["out_dir"] = args.out
    if args.frozen_frontend:
        doc["model"]["frontend_frozen"] = True
    if "out_dir" not in doc:
        raise ConfigError("no output directory: set 'out_dir' in the config or pass --out")
    if "manifest" not in doc:
        raise ConfigError("run config needs a 'manifest' path")
    return doc


def cmd_train(args) -> int:
    doc = _merged_train_config(args)
    model_cfg = ModelConfig.from_dict(doc["model"])
    model_cfg.validate()
    tcfg = doc["train"]
    if "max_epochs" not in tcfg:
        raise ConfigError("train section needs 'max_epochs'")
    train_cfg = TrainConfig(
        max_epochs=int(tcfg["max_epochs"]),
        batch_size=int(tcfg.get("batch_size", 5)),
        seed=int(tcfg.get("seed", 0)),
        eval_every=int(tcfg.get("eval_every", 1)),
        out_dir=Path(doc["out_dir"]))
    manifest_path = Path(args.config).parent / doc["manifest"] \
        if not Path(doc["manifest"]).is_absolute() else Path(doc["manifest"])
    dataset = data.load_dataset(manifest_path)
    lcfg = doc["loss"]
    balance = lcfg.get("balance", "none")
    if balance not in ("none", "median-frequency"):
        raise ConfigError(f"loss.balance must be 'none' or 'median-frequency', got {balance!r}")
    void_class = lcfg.get("void_class")
    if void_class is None:
        void_class = dataset.void_index
    weights = None
    if balance == "median-frequency":
        freqs = data.compute_class_frequencies(dataset, "train")
        weights = tuple(median_frequency_weights(freqs))
    loss_cfg = LossConfig(class_weights=weights, void_class=void_class,
                          l2=float(lcfg.get("l2", 0.001)))

    out_dir = train_cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    start_epoch = 0
    optimizer_state = None
    best_iou = float("-inf")
    prior_rows: list[EpochRow] = []
    if args.resume:
        last = out_dir / "last.model"
        if not last.exists():
            raise ConfigError(f"--resume: no checkpoint at {last}")
        model, extras = load_model(last)
        optimizer_state = extras.get("optimizer_state")
        start_epoch = int(extras["extra"].get("epoch", 0))
        saved_best = extras["extra"].get("best_iou")
        best_iou = float(saved_best) if saved_best is not None else float("-inf")
        prior_rows = [r for r in _parse_prior_log(out_dir / "log.csv")
                      if r.epoch < start_epoch]
        print(f"resuming from epoch {start_epoch}")
    else:
        model = build_model(model_cfg)
        if args.frontend_weights:
            load_frontend_weights(model, args.frontend_weights)

    doc["loss"]["class_weights"] = list(weights) if weights is not None else None
    doc["loss"]["void_class"] = void_class
    doc["model"] = model.config.to_dict()
    (out_dir / "effective_config.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")

    with _run_lock(out_dir):
        log = train(model, dataset, train_cfg, loss_cfg,
                    optimizer_state=optimizer_state, start_epoch=start_epoch,
                    best_iou=best_iou, prior_rows=prior_rows)
    done = len(log.rows)
    print(f"trained to epoch {train_cfg.max_epochs} ({done} rows logged); "
          f"checkpoints in {out_dir}")
    if log.best_epoch >= 0:
        print(f"best mean IoU {log.best_iou:.4f} at epoch {log.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_model(args.model)
    dataset = data.load_dataset(args.manifest)
    samples = dataset.split(args.split)
    if not samples:
        raise ConfigError(f"split {args.split!r} is empty")
    cm = metrics.ConfusionMatrix.zeros(model.config.classes)
    for sample in samples:
        pred = forward(model, sample.image).argmax(axis=-1)
        cm = metrics.accumulate(cm, pred, sample.mask, void_class=dataset.void_index)
    names = list(dataset.manifest.classes)
    print(metrics.render_table(cm, names))
    csv_path = Path(args.csv) if args.csv else Path(args.model).parent / f"eval_{args.split}.csv"
    csv_path.write_text(metrics.report_csv(cm, names))
    print(f"wrote {csv_path}")
    return 0


def cmd_predict(args) -> int:
    model, _ = load_model(args.model)
    image = data.load_image(args.image)
    probs = forward(model, image)
    pred = probs.argmax(axis=-1).astype(np.uint8)
    out = Path(args.out)
    data.write_netpbm(out, pred)
    print(f"wrote {out}")
    if args.probs:
        for k in range(probs.shape[-1]):
            prob_path = out.with_name(f"{out.stem}_class{k}.pgm")
            data.write_netpbm(prob_path, np.round(probs[:, :, k] * 255.0).astype(np.uint8))
            print(f"wrote {prob_path}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        doc = load_run_config(args.config)
        model_cfg = ModelConfig.from_dict(doc["model"])
        l2 = float(doc["loss"].get("l2", 0.001))
    else:
        model_cfg = tiny_config()
        l2 = 0.001
    if args.frozen_frontend:
        model_cfg.frontend_frozen = True
    model_cfg.validate()
    model = build_model(model_cfg, dtype=np.float64)
    rng = np.random.default_rng(model_cfg.seed)
    h, w, k = model_cfg.input_h, model_cfg.input_w, model_cfg.classes
    batch = [(rng.random((h, w, 3)), rng.integers(0, k, size=(h, w)))
             for _ in range(2)]
    report = gradient_check(model, batch, tolerance=args.tolerance,
                            loss_cfg=LossConfig(l2=l2), seed=model_cfg.seed)
    print(report.as_table())
    print(f"elapsed: {report.elapsed_seconds:.1f}s")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sweepseg",
        description="Recurrent-sweep semantic segmentation at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic segmentation dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--size", type=int, default=32, help="square image size")
    p.add_argument("--height", type=int, help="override height")
    p.add_argument("--width", type=int, help="override width")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true",
                   help="write into a non-empty directory")
    p.add_argument("--shape-frac", type=float, nargs=2, default=(0.25, 0.45),
                   metavar=("LO", "HI"), help="shape size range as a fraction "
                   "of the short side (controls class balance)")
    p.add_argument("--void-frac", type=float, default=0.0,
                   help="fraction of pixels marked void")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("config", help="run configuration JSON")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--epochs", type=int, help="override train.max_epochs")
    p.add_argument("--batch-size", type=int, help="override train.batch_size")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--balance", choices=("none", "median-frequency"),
                   help="class balancing (overrides loss.balance)")
    p.add_argument("--resume", action="store_true",
                   help="continue from last.model in the output directory")
    p.add_argument("--frozen-frontend", action="store_true",
                   help="freeze frontend parameters")
    p.add_argument("--frontend-weights", help="model file to copy frontend weights from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a dataset split")
    p.add_argument("model", help="model file")
    p.add_argument("manifest", help="dataset manifest JSON")
    p.add_argument("--split", choices=data.SPLITS, default="test")
    p.add_argument("--csv", help="where to write the CSV report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a mask for one image")
    p.add_argument("model", help="model file")
    p.add_argument("image", help="input image (P5/P6)")
    p.add_argument("out", help="output mask path (PGM, class indices)")
    p.add_argument("--probs", action="store_true",
                   help="also write one probability PGM per class")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("config", nargs="?", help="run config JSON (default: tiny profile)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--frozen-frontend", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        _fail(str(exc))
        return 2
    except Exception as exc:  # runtime failures: bad files, numeric errors, IO
        _fail(str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
