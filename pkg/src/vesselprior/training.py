"""Two-stage training: mask auto-encoder first, then the shape-regularized
segmenter, optionally under k-fold cross-validation."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence, TextIO

import numpy as np
import torch
import torch.nn as nn

from .architectures import ModelConfig, build_model
from .checkpoint import Checkpoint, from_model, save_checkpoint
from .config import format_kv, parse_kv, to_bool, to_float, to_int
from .data import AugmentationConfig, ImageSample, augment, make_folds
from .errors import ConfigError, DivergenceError
from .losses import LossValue, foreground_weight, freeze, reconstruction_loss, total_loss
from .metrics import MetricsReport, dice, evaluate_case, merge_reports

log = logging.getLogger(__name__)

STAGES = ("ae", "seg")
PRIORS = ("none", "cae", "socae")


@dataclass(frozen=True)
class TrainConfig:
    """Settings for one training stage.

    ``prior`` selects the auto-encoder: the one being trained when
    ``stage == "ae"``, the frozen shape prior when ``stage == "seg"``.
    ``positive_weight`` of ``None`` means inverse foreground frequency of the
    training masks. ``augmentation`` is ``"none"``, ``"geometric"`` or
    ``"full"``.
    """

    stage: str = "seg"
    learning_rate: float = 1e-3
    batch_size: int = 4
    epochs: int = 200
    lam: float = 40.0
    seed: int = 0
    optimizer: str = "adam"
    prior: str = "socae"
    positive_weight: float | None = None
    augmentation: str = "none"
    threshold: float = 0.5
    deterministic: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.prior not in PRIORS:
            raise ConfigError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        if self.stage == "ae" and self.prior == "none":
            raise ConfigError("stage 'ae' needs prior = cae or socae")
        if self.optimizer != "adam":
            raise ConfigError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.positive_weight is not None and not self.positive_weight > 0:
            raise ConfigError(f"positive_weight must be > 0, got {self.positive_weight}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {sorted(AUGMENTATIONS)}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")

    def to_dict(self) -> dict[str, object]:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        if out["positive_weight"] is None:
            out["positive_weight"] = "auto"
        return out

    def to_text(self) -> str:
        return format_kv(self.to_dict())

    @classmethod
    def keys(cls) -> set[str]:
        return {"lambda" if f.name == "lam" else f.name for f in fields(cls)}

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "TrainConfig":
        unknown = set(values) - cls.keys()
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kw: dict[str, object] = {}
        for key, value in values.items():
            if key in {"stage", "optimizer", "prior", "augmentation"}:
                kw[key] = value
            elif key in {"batch_size", "epochs", "seed"}:
                kw[key] = to_int(key, value)
            elif key == "deterministic":
                kw[key] = to_bool(key, value)
            elif key == "positive_weight":
                kw[key] = None if value.lower() == "auto" else to_float(key, value)
            elif key == "lambda":
                kw["lam"] = to_float(key, value)
            else:
                kw[key] = to_float(key, value)
        return cls(**kw)


AUGMENTATIONS = {
    "none": None,
    "geometric": AugmentationConfig.geometric_only(),
    "full": AugmentationConfig(),
}

# Stage settings per dataset: (learning rate, batch size, epochs[, lambda]).
REFERENCE_SETTINGS = {
    ("drive", "ae"): dict(learning_rate=1e-3, batch_size=4, epochs=1000),
    ("ircadb", "ae"): dict(learning_rate=5e-4, batch_size=32, epochs=100),
    ("drive", "seg"): dict(learning_rate=1e-3, batch_size=4, epochs=200, lam=40.0),
    ("ircadb", "seg"): dict(learning_rate=1e-4, batch_size=16, epochs=100, lam=60.0),
}


def reference_config(dataset: str, stage: str, **overrides) -> TrainConfig:
    """Reference training settings for ``dataset`` in {drive, ircadb}."""
    try:
        settings = REFERENCE_SETTINGS[(dataset, stage)]
    except KeyError:
        raise ConfigError(f"no preset for dataset={dataset!r}, stage={stage!r}") from None
    aug = "full" if dataset == "drive" else "geometric"
    return TrainConfig(stage=stage, augmentation=aug, **{**settings, **overrides})


def split_config(values: Mapping[str, str]) -> tuple[TrainConfig, ModelConfig]:
    """Split a flat key/value mapping into train and model configs; unknown
    keys are rejected."""
    train_keys, model_keys = TrainConfig.keys(), ModelConfig.keys()
    unknown = set(values) - train_keys - model_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    train = TrainConfig.from_mapping({k: v for k, v in values.items() if k in train_keys})
    model = ModelConfig.from_mapping({k: v for k, v in values.items() if k in model_keys})
    return train, model


def load_run_config(path: str | Path | None, overrides: Mapping[str, str] = {}) -> tuple[TrainConfig, ModelConfig]:
    values = parse_kv(Path(path).read_text()) if path else {}
    values.update(overrides)
    return split_config(values)


def config_hash(train: TrainConfig, model: ModelConfig) -> str:
    text = train.to_text() + model.to_text()
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# Helpers --------------------------------------------------------------------


def set_deterministic(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def to_batch(samples: Sequence[ImageSample]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    y = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))[:, None]
    return x, y


def mask_sample(sample: ImageSample) -> ImageSample:
    """The auto-encoder's view of a sample: its mask is both input and target.

    Augmentation then moves input and target together, while blur and noise
    only touch the input copy.
    """
    return replace(sample, image=sample.mask[None].astype(np.float32))


def _batches(samples, config: TrainConfig, rng: np.random.Generator):
    aug = AUGMENTATIONS[config.augmentation]
    order = rng.permutation(len(samples))
    for start in range(0, len(order), config.batch_size):
        chunk = [samples[i] for i in order[start : start + config.batch_size]]
        if aug is not None:
            chunk = [augment(s, aug, rng) for s in chunk]
        yield to_batch(chunk)


@torch.no_grad()
def predict(model: nn.Module, samples: Sequence[ImageSample], batch_size: int = 16) -> np.ndarray:
    """Eval-mode probabilities ``(N, H, W)``; restores the previous mode."""
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        x, _ = to_batch(samples[start : start + batch_size])
        out.append(model(x)[:, 0].numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,))


@torch.no_grad()
def _reconstruction_error(model: nn.Module, samples, batch_size: int = 16) -> float:
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(samples), batch_size):
        _, y = to_batch(samples[start : start + batch_size])
        total += float(reconstruction_loss(y, model(y))) * len(y)
        count += len(y)
    model.train(was_training)
    return total / count


class StepLog:
    """Line-oriented comma-separated training log."""

    def __init__(self, stream: TextIO | None, columns: Sequence[str]):
        self.stream = stream
        if stream is not None:
            stream.write(",".join(columns) + "\n")

    def write(self, *values) -> None:
        if self.stream is not None:
            self.stream.write(",".join(repr(v) for v in values) + "\n")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: nn.Module
    history: list[dict[str, float]] = field(default_factory=list)


def _check_finite(loss: torch.Tensor, step: int, what: str) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"{what} loss became {loss.item()} at step {step}")


# Stage one --------------------------------------------------------------------


def train_autoencoder(
    samples: Sequence[ImageSample],
    config: TrainConfig,
    model_config: ModelConfig,
    val_samples: Sequence[ImageSample] | None = None,
    log_stream: TextIO | None = None,
) -> TrainResult:
    """Fit a mask auto-encoder (``config.prior``) by mean squared error.

    Only the masks of ``samples`` are used. With augmentation, geometric
    transforms apply to input and target alike; blur and noise perturb the
    input only, so the encoder also meets soft, non-binary masks. The returned checkpoint is the
    epoch with the lowest eval-mode reconstruction error on ``val_samples``
    (on the training masks when no validation set is given).
    """
    if config.stage != "ae":
        raise ConfigError(f"train_autoencoder needs stage = ae, got {config.stage!r}")
    if not samples:
        raise ConfigError("no training samples")
    set_deterministic(config.seed, config.deterministic)
    rng = np.random.default_rng(config.seed)
    model = build_model(config.prior, model_config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999))
    selection = list(val_samples) if val_samples else list(samples)
    steplog = StepLog(log_stream, ["step", "recon_loss"])
    chash = config_hash(config, model_config)
    masks = [mask_sample(s) for s in samples]

    best, best_err, history, step = None, math.inf, [], 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        running = 0.0
        for x, y in _batches(masks, config, rng):
            loss = reconstruction_loss(y, model(x))
            _check_finite(loss, step, "reconstruction")
            opt.zero_grad()
            loss.backward()
            opt.step()
            steplog.write(step, loss.item())
            running += loss.item() * len(y)
            step += 1
        err = _reconstruction_error(model, selection)
        history.append({"epoch": epoch, "train_loss": running / len(samples), "val_mse": err})
        if err < best_err:
            best_err = err
            best = from_model(model, epoch=epoch, val_metric=err, config_hash=chash)
    model.load_state_dict(best.state)
    model.eval()
    return TrainResult(best, model, history)


# Stage two --------------------------------------------------------------------

StepHook = Callable[[int, nn.Module, LossValue], None]


def train_segmenter(
    samples: Sequence[ImageSample],
    config: TrainConfig,
    model_config: ModelConfig,
    frozen_encoder: nn.Module | None = None,
    val_samples: Sequence[ImageSample] | None = None,
    log_stream: TextIO | None = None,
    on_step: StepHook | None = None,
) -> TrainResult:
    """Fit the U-Net on ``seg + lambda * shape`` (plain ``seg`` when
    ``config.prior == "none"``).

    ``on_step`` is called after each backward pass, before the optimizer
    step. The returned checkpoint has the best mean validation Dice
    (training set when no validation set is given).
    """
    if config.stage != "seg":
        raise ConfigError(f"train_segmenter needs stage = seg, got {config.stage!r}")
    if not samples:
        raise ConfigError("no training samples")
    encoder = None
    if config.prior != "none":
        if frozen_encoder is None:
            raise ConfigError(f"prior = {config.prior} needs a trained encoder")
        if getattr(frozen_encoder, "kind", config.prior) != config.prior:
            raise ConfigError(f"prior = {config.prior} but encoder is {frozen_encoder.kind}")
        if tuple(frozen_encoder.config.input_size) != tuple(model_config.input_size):
            raise ConfigError(
                f"encoder input size {frozen_encoder.config.input_size} does not match "
                f"segmenter input size {model_config.input_size}"
            )
        encoder = freeze(frozen_encoder)
    channels = samples[0].image.shape[0]
    if channels != model_config.input_channels or samples[0].mask.shape != tuple(model_config.input_size):
        raise ConfigError(
            f"samples are {channels}x{samples[0].mask.shape}, model expects "
            f"{model_config.input_channels}x{model_config.input_size}"
        )

    set_deterministic(config.seed, config.deterministic)
    rng = np.random.default_rng(config.seed)
    model = build_model("unet", model_config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999))
    pos_w = config.positive_weight or foreground_weight(s.mask for s in samples)
    selection = list(val_samples) if val_samples else list(samples)
    steplog = StepLog(log_stream, ["step", "seg_loss", "shape_loss", "total"])
    chash = config_hash(config, model_config)

    best, best_dsc, history, step = None, -math.inf, [], 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        for x, y in _batches(samples, config, rng):
            lv = total_loss(y, x, model, encoder, config.lam if encoder is not None else 0.0, pos_w)
            _check_finite(lv.total, step, "segmentation")
            opt.zero_grad()
            lv.total.backward()
            if on_step is not None:
                on_step(step, model, lv)
            opt.step()
            steplog.write(step, lv.seg.item(), lv.shape.item(), lv.total.item())
            step += 1
        probs = predict(model, selection)
        dsc = float(np.mean([dice(s.mask, p >= config.threshold) for s, p in zip(selection, probs)]))
        history.append({"epoch": epoch, "val_dsc": dsc})
        if dsc > best_dsc:
            best_dsc = dsc
            best = from_model(
                model, epoch=epoch, val_metric=dsc, config_hash=chash,
                extra={"positive_weight": pos_w, "prior": config.prior, "lambda": config.lam},
            )
    model.load_state_dict(best.state)
    model.eval()
    return TrainResult(best, model, history)


def evaluate(model: nn.Module, samples: Sequence[ImageSample], threshold: float = 0.5) -> MetricsReport:
    probs = predict(model, samples)
    cases = [
        evaluate_case(s.mask, p, threshold, s.spacing, case_id=s.case_id)
        for s, p in zip(samples, probs)
    ]
    return MetricsReport(cases)


# Cross-validation ---------------------------------------------------------------


@dataclass
class FoldRecord:
    fold: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    ae_ids: tuple[str, ...] = ()
    error: str | None = None


@dataclass
class CVResult:
    report: MetricsReport
    folds: list[FoldRecord]

    @property
    def complete(self) -> bool:
        return self.report.complete


def cross_validate(
    samples: Sequence[ImageSample],
    seg_config: TrainConfig,
    model_config: ModelConfig,
    k: int = 5,
    ae_config: TrainConfig | None = None,
    ae_model_config: ModelConfig | None = None,
    fold_seed: int = 0,
    run_dir: str | Path | None = None,
) -> CVResult:
    """Per fold: train the auto-encoder on the fold's training masks (when a
    prior is used), train the segmenter, and evaluate on the held-out cases.

    A failing fold is recorded and skipped; the merged report is then
    flagged incomplete.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if seg_config.prior != "none":
        if ae_config is None:
            raise ConfigError(f"prior = {seg_config.prior} needs an ae_config")
        ae_config = replace(ae_config, prior=seg_config.prior)
    folds = make_folds(samples, k, fold_seed)
    by_id = {s.case_id: s for s in samples}
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        (run / "seg.cfg").write_text(seg_config.to_text() + model_config.to_text())
        if ae_config is not None:
            (run / "ae.cfg").write_text(ae_config.to_text() + (ae_model_config or model_config).to_text())

    reports, records = [], []
    for split in folds:
        record = FoldRecord(split.fold_index, split.train_ids, split.val_ids)
        records.append(record)
        train = [by_id[c] for c in split.train_ids]
        val = [by_id[c] for c in split.val_ids]
        try:
            encoder = None
            if seg_config.prior != "none":
                with _log_file(run, f"ae_fold{split.fold_index}.log") as fh:
                    ae = train_autoencoder(train, ae_config, ae_model_config or model_config, log_stream=fh)
                record.ae_ids = tuple(s.case_id for s in train)
                encoder = ae.model
                if run is not None:
                    save_checkpoint(ae.checkpoint, run / f"ae_fold{split.fold_index}.ckpt")
            with _log_file(run, f"seg_fold{split.fold_index}.log") as fh:
                seg = train_segmenter(train, seg_config, model_config, encoder, val, log_stream=fh)
            if run is not None:
                save_checkpoint(seg.checkpoint, run / f"seg_fold{split.fold_index}.ckpt")
            reports.append(evaluate(seg.model, val, seg_config.threshold))
        except (ConfigError, DivergenceError, RuntimeError) as exc:
            log.error("fold %d failed: %s", split.fold_index, exc)
            record.error = str(exc)

    report = merge_reports(reports) if reports else MetricsReport([], complete=False)
    report.complete = report.complete and all(r.error is None for r in records)
    if run is not None:
        report.write_csv(run / "metrics.csv")
        (run / "audit.json").write_text(
            json.dumps([asdict(r) for r in records], indent=1, sort_keys=True) + "\n"
        )
    return CVResult(report, records)


def _log_file(run: Path | None, name: str):
    return contextlib.nullcontext() if run is None else open(run / name, "w")
