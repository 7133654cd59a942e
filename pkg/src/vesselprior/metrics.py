"""Overlap and surface-distance metrics for 2D binary masks.

Surfaces are the foreground pixels with at least one background
4-neighbour, the image border counting as background. Point coordinates
are pixel centres multiplied by the ``(row, col)`` spacing, so distances
come out in physical units.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ShapeError, UndefinedMetricError, ValidationError

_CROSS = ndimage.generate_binary_structure(2, 1)

METRIC_NAMES = ("dsc", "avd", "assd", "hd")


def as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2D mask, got shape {m.shape}")
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValidationError("mask values must be 0 or 1")
        m = m.astype(bool)
    return m


def _pair(gt, p) -> tuple[np.ndarray, np.ndarray]:
    gt, p = as_mask(gt), as_mask(p)
    if gt.shape != p.shape:
        raise ShapeError(f"mask shapes differ: {gt.shape} vs {p.shape}")
    return gt, p


def _check_spacing(spacing) -> tuple[float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 2 or min(spacing) <= 0:
        raise ValidationError(f"spacing must be two positive numbers, got {spacing}")
    return spacing


def dice(gt, p) -> float:
    gt, p = _pair(gt, p)
    total = int(gt.sum()) + int(p.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((gt & p).sum()) / total


def avd(gt, p) -> float:
    """Absolute volume difference relative to the ground truth; not symmetric."""
    gt, p = _pair(gt, p)
    n_gt = int(gt.sum())
    if n_gt == 0:
        raise UndefinedMetricError("avd is undefined for an empty ground truth")
    return abs(n_gt - int(p.sum())) / n_gt


def boundary_mask(m) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background; pixels outside
    the frame count as background."""
    m = as_mask(m).astype(bool)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def extract_surface(m, spacing=(1.0, 1.0)) -> np.ndarray:
    """Physical coordinates ``(k, 2)`` of the boundary pixels of ``m``."""
    sy, sx = _check_spacing(spacing)
    rows, cols = np.nonzero(boundary_mask(m))
    return np.stack([rows * sy, cols * sx], axis=1).astype(float)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each point of ``src`` to its nearest point of ``dst``
    (exact nearest neighbour via a k-d tree)."""
    dist, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dist, dtype=float)


def _surfaces(gt, p, spacing) -> tuple[np.ndarray, np.ndarray]:
    gt, p = _pair(gt, p)
    s_gt, s_p = extract_surface(gt, spacing), extract_surface(p, spacing)
    if len(s_gt) == 0 or len(s_p) == 0:
        raise UndefinedMetricError("surface distance is undefined when a mask is empty")
    return s_gt, s_p


def assd(gt, p, spacing=(1.0, 1.0)) -> float:
    s_gt, s_p = _surfaces(gt, p, spacing)
    d_gt = _directed(s_gt, s_p).sum()
    d_p = _directed(s_p, s_gt).sum()
    return float((d_gt + d_p) / (len(s_gt) + len(s_p)))


def hausdorff(gt, p, spacing=(1.0, 1.0)) -> float:
    s_gt, s_p = _surfaces(gt, p, spacing)
    return float(max(_directed(s_gt, s_p).max(), _directed(s_p, s_gt).max()))


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float | None = None
    avd: float | None = None
    assd: float | None = None
    hd: float | None = None
    errors: dict[str, str] = field(default_factory=dict)

    def values(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def evaluate_case(gt, p_prob, threshold: float = 0.5, spacing=(1.0, 1.0), case_id: str = "") -> CaseMetrics:
    """Binarize ``p_prob`` at ``threshold`` and compute all four metrics.

    Metrics that are undefined for this case are left as ``None`` with the
    reason recorded in ``errors``.
    """
    if not 0 < threshold < 1:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    p_prob = np.asarray(p_prob, dtype=float)
    p = p_prob >= threshold
    gt = as_mask(gt)
    out = CaseMetrics(case_id)
    funcs = {
        "dsc": lambda: dice(gt, p),
        "avd": lambda: avd(gt, p),
        "assd": lambda: assd(gt, p, spacing),
        "hd": lambda: hausdorff(gt, p, spacing),
    }
    for name, fn in funcs.items():
        try:
            setattr(out, name, fn())
        except UndefinedMetricError as exc:
            out.errors[name] = str(exc)
    return out


@dataclass
class MetricsReport:
    """Per-case metrics with mean and (population) standard deviation over
    the cases where each metric is defined."""

    per_case: list[CaseMetrics]
    complete: bool = True

    def _column(self, name: str) -> np.ndarray:
        return np.array([v for c in self.per_case if (v := getattr(c, name)) is not None], dtype=float)

    def mean(self, name: str) -> float:
        col = self._column(name)
        return float(col.mean()) if col.size else math.nan

    def std(self, name: str) -> float:
        col = self._column(name)
        return float(col.std()) if col.size else math.nan

    def count(self, name: str) -> int:
        return int(self._column(name).size)

    @property
    def dsc(self) -> float:
        return self.mean("dsc")

    @property
    def avd(self) -> float:
        return self.mean("avd")

    @property
    def assd_mm(self) -> float:
        return self.mean("assd")

    @property
    def hd_mm(self) -> float:
        return self.mean("hd")

    def summary(self) -> dict[str, tuple[float, float]]:
        return {name: (self.mean(name), self.std(name)) for name in METRIC_NAMES}

    def format(self) -> str:
        lines = [f"cases: {len(self.per_case)}" + ("" if self.complete else " (incomplete)")]
        for name, (mu, sd) in self.summary().items():
            missing = len(self.per_case) - self.count(name)
            extra = f"  [{missing} missing]" if missing else ""
            lines.append(f"{name.upper():>4}: {mu:.4f} ± {sd:.4f}{extra}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["case_id", *METRIC_NAMES])
            for case in sorted(self.per_case, key=lambda c: c.case_id):
                writer.writerow([case.case_id, *("" if v is None else repr(v) for v in case.values().values())])
            writer.writerow(
                ["mean±std", *(f"{mu!r}±{sd!r}" for mu, sd in self.summary().values())]
            )


def read_csv(path: str | Path) -> MetricsReport:
    cases = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["case_id"] == "mean±std":
                continue
            vals = {k: (float(row[k]) if row[k] else None) for k in METRIC_NAMES}
            cases.append(CaseMetrics(row["case_id"], **vals))
    return MetricsReport(cases)


def merge_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    cases = sorted((c for r in reports for c in r.per_case), key=lambda c: c.case_id)
    return MetricsReport(cases, complete=all(r.complete for r in reports))
