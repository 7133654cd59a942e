"""Command-line entry point.

    vesselprior synth --count 32 --size 64 --seed 7 --out data/
    vesselprior train-ae --data data/ --config ae.cfg --out ae.ckpt
    vesselprior train-seg --data data/ --config seg.cfg --prior ae.ckpt --out seg.ckpt
    vesselprior cross-validate --data data/ --config seg.cfg --ae-config ae.cfg -k 5
    vesselprior predict --checkpoint seg.ckpt --image img.png --out pred/case
    vesselprior eval --gt gt.png --pred pred/case_mask.png

Config files hold flat ``key = value`` lines (``#`` starts a comment) mixing
training and model keys; ``--override key=value`` replaces single entries.
Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .architectures import ModelConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import parse_kv, parse_overrides
from .data import (
    ImageSample,
    generate_synthetic,
    load_drive,
    load_ircadb_slices,
    load_synthetic,
    read_image,
    read_mask,
    resize_image,
    write_synthetic,
)
from .errors import ConfigError, ShapeError, UndefinedMetricError, ValidationError
from .metrics import MetricsReport, boundary_mask, evaluate_case
from .training import (
    TrainConfig,
    config_hash,
    cross_validate,
    predict,
    split_config,
    train_autoencoder,
    train_segmenter,
)

log = logging.getLogger("vesselprior")

INVALID = (ConfigError, ValidationError, ShapeError, UndefinedMetricError, FileNotFoundError)

GT_COLOUR = (0, 255, 0)
PRED_COLOUR = (0, 0, 255)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# Helpers ----------------------------------------------------------------------


def _configs(args, stage: str) -> tuple[TrainConfig, ModelConfig]:
    values = parse_kv(Path(args.config).read_text()) if args.config else {}
    values.setdefault("stage", stage)
    values.update(parse_overrides(args.override))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    train, model = split_config(values)
    if train.stage != stage:
        raise ConfigError(f"this command trains stage {stage!r}, config says {train.stage!r}")
    return train, model


def _load_dataset(root: str, fmt: str, size: tuple[int, int]) -> list[ImageSample]:
    path = Path(root)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    if fmt == "auto":
        if (path / "manifest.csv").exists():
            fmt = "synthetic"
        elif (path / "images").is_dir():
            fmt = "drive"
        else:
            fmt = "ircadb"
    if fmt == "synthetic":
        samples = load_synthetic(path, size)
    elif fmt == "drive":
        samples = load_drive(path, size)
    else:
        samples = load_ircadb_slices(path, size)
    if not samples:
        raise ValidationError(f"no samples found in {path}")
    return samples


def _log_stream(path: str | None):
    return open(path, "w") if path else contextlib.nullcontext()


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.4f}"


def _save_gray(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray | None = None) -> np.ndarray:
    """RGB uint8 picture of ``image`` (C, H, W) with the prediction contour in
    blue and, when given, the ground-truth contour in green."""
    base = image[:3] if image.shape[0] >= 3 else np.repeat(image[:1], 3, axis=0)
    rgb = np.round(base.transpose(1, 2, 0) * 255).astype(np.uint8)
    if gt is not None:
        rgb[boundary_mask(gt)] = GT_COLOUR
    rgb[boundary_mask(pred)] = PRED_COLOUR
    return rgb


def _read_prediction(path: Path) -> np.ndarray:
    """Prediction PNG as values in [0, 1] (binary masks and 8-bit probability
    maps alike)."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def _pairs(gt: Path, pred: Path) -> list[tuple[str, Path, Path]]:
    if gt.is_file() and pred.is_file():
        return [(gt.stem, gt, pred)]
    if gt.is_dir() and pred.is_dir():
        preds = {p.stem: p for p in pred.iterdir() if p.suffix.lower() == ".png"}
        pairs = []
        for g in sorted(p for p in gt.iterdir() if p.suffix.lower() == ".png"):
            match = preds.get(g.stem) or preds.get(g.stem + "_mask")
            if match is None:
                raise ValidationError(f"no prediction for {g.name} in {pred}")
            pairs.append((g.stem, g, match))
        if not pairs:
            raise ValidationError(f"no PNG masks in {gt}")
        return pairs
    for p in (gt, pred):
        if not p.exists():
            raise FileNotFoundError(f"not found: {p}")
    raise ValidationError("--gt and --pred must both be files or both be directories")


# Commands ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    seed = 0 if args.seed is None else args.seed
    samples = generate_synthetic(args.count, args.size, seed)
    write_synthetic(samples, args.out, seed)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train_ae(args) -> int:
    train, model = _configs(args, "ae")
    samples = _load_dataset(args.data, args.format, model.input_size)
    val = _load_dataset(args.val, args.format, model.input_size) if args.val else None
    with _log_stream(args.log) as fh:
        res = train_autoencoder(samples, train, model, val_samples=val, log_stream=fh)
    save_checkpoint(res.checkpoint, args.out)
    print(f"best epoch {res.checkpoint.epoch}: reconstruction MSE {res.checkpoint.val_metric:.6f}")
    return 0


def cmd_train_seg(args) -> int:
    train, model = _configs(args, "seg")
    encoder = None
    if train.prior != "none":
        if not args.prior:
            raise ConfigError(f"prior = {train.prior} needs --prior <auto-encoder checkpoint>")
        ckpt = load_checkpoint(args.prior)
        if ckpt.kind != train.prior:
            raise ConfigError(f"--prior holds a {ckpt.kind} model but the config asks for {train.prior}")
        encoder = ckpt.model()
    samples = _load_dataset(args.data, args.format, model.input_size)
    val = _load_dataset(args.val, args.format, model.input_size) if args.val else None
    with _log_stream(args.log) as fh:
        res = train_segmenter(samples, train, model, encoder, val_samples=val, log_stream=fh)
    save_checkpoint(res.checkpoint, args.out)
    print(f"best epoch {res.checkpoint.epoch}: DSC {res.checkpoint.val_metric:.4f}")
    return 0


def cmd_cross_validate(args) -> int:
    seg, model = _configs(args, "seg")
    ae = ae_model = None
    if seg.prior != "none":
        if not args.ae_config:
            raise ConfigError(f"prior = {seg.prior} needs --ae-config")
        values = parse_kv(Path(args.ae_config).read_text())
        values.setdefault("stage", "ae")
        values.setdefault("prior", seg.prior)
        values["seed"] = str(seg.seed)
        ae, ae_model = split_config(values)
    run_dir = Path(args.run_dir) if args.run_dir else Path("runs") / config_hash(seg, model)
    samples = _load_dataset(args.data, args.format, model.input_size)
    res = cross_validate(samples, seg, model, args.k, ae, ae_model, fold_seed=seg.seed, run_dir=run_dir)
    print(res.report.format())
    print(f"run directory: {run_dir}")
    if not res.complete:
        log.error("%d fold(s) failed; see %s/audit.json", sum(f.error is not None for f in res.folds), run_dir)
        return 2
    return 0


def cmd_predict(args) -> int:
    if not 0 < args.threshold < 1:
        raise ValidationError(f"threshold must lie in (0, 1), got {args.threshold}")
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.kind != "unet":
        raise ConfigError(f"{args.checkpoint} holds a {ckpt.kind} model, not a segmenter")
    cfg = ckpt.model_config
    image = read_image(Path(args.image))
    if image.shape[0] != cfg.input_channels:
        raise ConfigError(
            f"{args.image} has {image.shape[0]} channel(s); the checkpoint expects {cfg.input_channels}"
        )
    image = resize_image(image, cfg.input_size)
    gt = None
    if args.gt:
        with Image.open(args.gt) as g:
            gt = (np.asarray(g.convert("L").resize(cfg.input_size[::-1], Image.NEAREST)) > 127).astype(np.uint8)
    sample = ImageSample(image, np.zeros(cfg.input_size, np.uint8), Path(args.image).stem)
    prob = predict(ckpt.model(), [sample])[0]
    mask = prob >= args.threshold

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    paths = [out.with_name(out.name + suffix) for suffix in ("_prob.png", "_mask.png", "_overlay.png")]
    _save_gray(prob, paths[0])
    _save_gray(mask.astype(float), paths[1])
    Image.fromarray(overlay(image, mask, gt)).save(paths[2])
    for p in paths:
        print(p)
    return 0


def cmd_eval(args) -> int:
    if not 0 < args.threshold < 1:
        raise ValidationError(f"threshold must lie in (0, 1), got {args.threshold}")
    cases = []
    for case_id, gt_path, pred_path in _pairs(Path(args.gt), Path(args.pred)):
        gt = read_mask(gt_path)
        prob = _read_prediction(pred_path)
        if prob.shape != gt.shape:
            raise ShapeError(f"{case_id}: prediction {prob.shape} vs ground truth {gt.shape}")
        cases.append(evaluate_case(gt, prob, args.threshold, tuple(args.spacing), case_id))
    report = MetricsReport(cases)
    if len(cases) == 1:
        c = cases[0]
        print(f"DSC: {_fmt(c.dsc)}\nAVD: {_fmt(c.avd)}\nASSD: {_fmt(c.assd)}\nHD: {_fmt(c.hd)}")
    else:
        print(report.format())
    if args.csv:
        report.write_csv(args.csv)
    return 0


# Parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vesselprior", description="Vessel segmentation with a learned latent shape prior.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def configurable(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--format", choices=["auto", "synthetic", "drive", "ircadb"], default="auto")

    p = sub.add_parser("synth", help="write a synthetic vessel-tree dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-ae", help="train the mask auto-encoder")
    configurable(p)
    p.add_argument("--val", help="validation dataset for checkpoint selection")
    p.add_argument("--log", help="write the per-step loss log here")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train-seg", help="train the segmenter, optionally with a shape prior")
    configurable(p)
    p.add_argument("--prior", help="auto-encoder checkpoint used as the frozen shape prior")
    p.add_argument("--val", help="validation dataset for checkpoint selection")
    p.add_argument("--log", help="write the per-step loss log here")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("cross-validate", help="k-fold training and evaluation of both stages")
    configurable(p)
    p.add_argument("--ae-config", help="auto-encoder config (required with a prior)")
    p.add_argument("-k", type=int, default=5, help="number of folds")
    p.add_argument("--run-dir", help="defaults to runs/<config hash>")
    p.set_defaults(func=cmd_cross_validate)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output prefix; writes _prob, _mask and _overlay PNGs")
    p.add_argument("--gt", help="ground-truth mask drawn in green on the overlay")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="compare predicted and ground-truth masks")
    p.add_argument("--gt", required=True, help="mask PNG or directory of PNGs")
    p.add_argument("--pred", required=True, help="prediction PNG or directory of PNGs")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--spacing", type=float, nargs=2, default=(1.0, 1.0), metavar=("ROW_MM", "COL_MM"))
    p.add_argument("--csv", help="write per-case metrics here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


run = main

if __name__ == "__main__":
    sys.exit(main())
