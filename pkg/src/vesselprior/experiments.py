"""Desk-scale comparison of a plain U-Net against U-Net + S-OCAE prior on
synthetic vessel trees.

The shape weight is chosen once, on a dataset drawn from a seed that none of
the repetitions use, and then held fixed for every repetition.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

from .architectures import ModelConfig
from .data import generate_synthetic, make_folds
from .metrics import MetricsReport
from .training import TrainConfig, cross_validate, evaluate, train_autoencoder, train_segmenter

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrendSettings:
    count: int = 128
    size: int = 64
    k: int = 2
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    tuning_seed: int = 100
    lambdas: tuple[float, ...] = (10.0, 40.0)
    seg_model: ModelConfig = ModelConfig(depth=4, base_channels=8)
    ae_model: ModelConfig = ModelConfig(depth=4, base_channels=4, latent_channels=16, head_bias=-3.0)
    seg_train: TrainConfig = TrainConfig(
        stage="seg", prior="none", lam=0.0, epochs=30, batch_size=8, augmentation="full"
    )
    ae_train: TrainConfig = TrainConfig(
        stage="ae", prior="socae", epochs=40, batch_size=8, learning_rate=3e-3, augmentation="full"
    )


@dataclass
class Repetition:
    seed: int
    baseline: MetricsReport
    prior: MetricsReport

    @property
    def prior_wins(self) -> bool:
        """Mean Hausdorff distance of the prior variant is no worse."""
        return self.prior.hd_mm <= self.baseline.hd_mm


@dataclass
class TrendResult:
    lam: float
    tuning: dict[float, tuple[float, float]]
    repetitions: list[Repetition] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def wins(self) -> int:
        return sum(r.prior_wins for r in self.repetitions)

    def table(self) -> str:
        lines = [f"lambda = {self.lam:g} (tuning HD/DSC: "
                 + ", ".join(f"{k:g}: {hd:.3f}/{d:.4f}" for k, (hd, d) in self.tuning.items()) + ")"]
        lines.append("seed  baseline HD  prior HD  baseline DSC  prior DSC  HD defined")
        for r in self.repetitions:
            n = len(r.baseline.per_case)
            lines.append(
                f"{r.seed:>4}  {r.baseline.hd_mm:>11.3f}  {r.prior.hd_mm:>8.3f}  "
                f"{r.baseline.dsc:>12.4f}  {r.prior.dsc:>9.4f}  "
                f"{r.baseline.count('hd')}/{n} vs {r.prior.count('hd')}/{n}"
            )
        lines.append(f"prior HD <= baseline HD in {self.wins}/{len(self.repetitions)}; {self.seconds:.0f} s")
        return "\n".join(lines)


def tune_lambda(settings: TrendSettings = TrendSettings()) -> tuple[float, dict[float, tuple[float, float]]]:
    """Pick the shape weight with the lowest mean Hausdorff distance on the
    first fold of the tuning dataset (ties go to the higher Dice).

    Returns the weight and ``{lambda: (mean HD, mean DSC)}``.
    """
    seed = settings.tuning_seed
    samples = generate_synthetic(settings.count, settings.size, seed)
    split = make_folds(samples, settings.k, seed)[0]
    by_id = {s.case_id: s for s in samples}
    train = [by_id[c] for c in split.train_ids]
    val = [by_id[c] for c in split.val_ids]
    ae = train_autoencoder(train, replace(settings.ae_train, seed=seed), settings.ae_model)
    scores = {}
    for lam in settings.lambdas:
        cfg = replace(settings.seg_train, prior=settings.ae_train.prior, lam=lam, seed=seed)
        seg = train_segmenter(train, cfg, settings.seg_model, ae.model, val)
        report = evaluate(seg.model, val, cfg.threshold)
        scores[lam] = (report.hd_mm, report.dsc)
        log.info("tuning lambda=%g: HD %.3f, DSC %.4f", lam, *scores[lam])
    best = min(scores, key=lambda lam: (_finite(scores[lam][0]), -scores[lam][1]))
    return best, scores


def _finite(value: float) -> float:
    return value if math.isfinite(value) else math.inf


def run_repetition(seed: int, lam: float, settings: TrendSettings = TrendSettings()) -> Repetition:
    """k-fold cross-validation of both variants on the dataset drawn from
    ``seed``; the auto-encoder is retrained inside every fold."""
    samples = generate_synthetic(settings.count, settings.size, seed)
    base_cfg = replace(settings.seg_train, prior="none", lam=0.0, seed=seed)
    prior_cfg = replace(settings.seg_train, prior=settings.ae_train.prior, lam=lam, seed=seed)
    baseline = cross_validate(samples, base_cfg, settings.seg_model, settings.k, fold_seed=seed)
    prior = cross_validate(
        samples, prior_cfg, settings.seg_model, settings.k,
        ae_config=replace(settings.ae_train, seed=seed), ae_model_config=settings.ae_model, fold_seed=seed,
    )
    return Repetition(seed, baseline.report, prior.report)


def trend_check(
    settings: TrendSettings = TrendSettings(),
    progress: Callable[[str], None] | None = None,
) -> TrendResult:
    start = time.perf_counter()
    lam, scores = tune_lambda(settings)
    result = TrendResult(lam, scores)
    if progress:
        progress(f"lambda = {lam:g} after {time.perf_counter() - start:.0f} s")
    for seed in settings.seeds:
        rep = run_repetition(seed, lam, settings)
        result.repetitions.append(rep)
        if progress:
            progress(
                f"seed {seed}: HD {rep.baseline.hd_mm:.3f} -> {rep.prior.hd_mm:.3f}, "
                f"DSC {rep.baseline.dsc:.4f} -> {rep.prior.dsc:.4f} ({time.perf_counter() - start:.0f} s)"
            )
    result.seconds = time.perf_counter() - start
    return result
