"""Dataset ingestion, augmentation, fold splitting and synthetic vessel trees.

Images are float32 arrays ``(channels, H, W)`` in ``[0, 1]``; masks are
uint8 arrays ``(H, W)`` holding 0/1.

Directory layouts
-----------------
DRIVE-style (``load_drive``)::

    root/images/21_training.tif     (or .png)
    root/masks/21_manual1.png

Images and masks pair on the leading integer of the file name.

IRCADb-style (``load_ircadb_slices``)::

    root/<patient>/ct/<slice>.npy       Hounsfield units (or .png, 0-255)
    root/<patient>/liver/<slice>.png
    root/<patient>/vessels/<slice>.png

Synthetic (``write_synthetic`` / ``load_synthetic``)::

    root/images/<case_id>.png  root/masks/<case_id>.png  root/manifest.csv
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .errors import ConfigError, IngestionError, ValidationError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".gif", ".jpg", ".jpeg", ".bmp", ".ppm"}


@dataclass
class ImageSample:
    image: np.ndarray
    mask: np.ndarray
    case_id: str
    spacing: tuple[float, float] = (1.0, 1.0)
    group: str | None = None

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.image.shape[1:] != self.mask.shape:
            raise ValidationError(
                f"{self.case_id}: image {self.image.shape} and mask {self.mask.shape} differ spatially"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise ValidationError(f"{self.case_id}: mask is not binary")

    @property
    def group_id(self) -> str:
        return self.group if self.group is not None else self.case_id


# Resizing ------------------------------------------------------------------


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a ``(C, H, W)`` float image."""
    if image.shape[1:] == tuple(size):
        return image.astype(np.float32)
    chans = [
        np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize(size[::-1], Image.BILINEAR))
        for c in image
    ]
    return np.clip(np.stack(chans), 0.0, 1.0).astype(np.float32)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if mask.shape == tuple(size):
        return mask.astype(np.uint8)
    img = Image.fromarray(mask.astype(np.uint8) * 255).resize(size[::-1], Image.NEAREST)
    return (np.asarray(img) > 127).astype(np.uint8)


def read_image(path: Path, channels: int | None = None) -> np.ndarray:
    with Image.open(path) as img:
        if channels == 3:
            img = img.convert("RGB")
        elif channels == 1:
            img = img.convert("L")
        arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return (arr.astype(np.float32) / scale).clip(0, 1)


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 127).astype(np.uint8)


def _leading_int(name: str) -> int | None:
    m = re.match(r"\d+", name)
    return int(m.group()) if m else None


def _image_files(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_drive(root: str | Path, size: tuple[int, int] = (512, 512)) -> list[ImageSample]:
    """RGB fundus images and vessel masks resized to ``size``, ordered by case id."""
    root = Path(root)
    images = {_leading_int(p.name): p for p in _image_files(root / "images")}
    masks = {_leading_int(p.name): p for p in _image_files(root / "masks")}
    images.pop(None, None)
    masks.pop(None, None)
    if not images and not masks:
        log.warning("no DRIVE images found under %s", root)
        return []
    orphans = sorted(str(images[k]) for k in images.keys() - masks.keys())
    if orphans:
        raise IngestionError(f"images without masks: {orphans}")
    samples = []
    for key in sorted(images):
        image = resize_image(read_image(images[key], channels=3), size)
        mask = resize_mask(read_mask(masks[key]), size)
        samples.append(ImageSample(image, mask, case_id=f"{key:02d}"))
    return samples


HU_WINDOW = (-100.0, 400.0)
LIVER_PAD = 8


def window_hu(ct: np.ndarray, window: tuple[float, float] = HU_WINDOW) -> np.ndarray:
    lo, hi = window
    return np.clip((np.asarray(ct, dtype=np.float32) - lo) / (hi - lo), 0.0, 1.0)


def liver_bbox(liver: np.ndarray, pad: int = LIVER_PAD) -> tuple[slice, slice] | None:
    rows, cols = np.nonzero(liver)
    if rows.size == 0:
        return None
    h, w = liver.shape
    return (
        slice(max(rows.min() - pad, 0), min(rows.max() + pad + 1, h)),
        slice(max(cols.min() - pad, 0), min(cols.max() + pad + 1, w)),
    )


def load_ircadb_slices(
    root: str | Path,
    size: tuple[int, int] = (256, 256),
    window: tuple[float, float] = HU_WINDOW,
    pad: int = LIVER_PAD,
) -> list[ImageSample]:
    """Axial CT slices cropped to the padded liver box, windowed and resized.

    The patient directory name becomes the sample group so folds never split
    a patient.
    """
    root = Path(root)
    samples = []
    for patient in sorted(p for p in root.iterdir() if p.is_dir()):
        ct_files = sorted((patient / "ct").glob("*")) if (patient / "ct").is_dir() else []
        for ct_path in ct_files:
            stem = ct_path.stem
            liver_path = next(iter(sorted((patient / "liver").glob(stem + ".*"))), None)
            vessel_path = next(iter(sorted((patient / "vessels").glob(stem + ".*"))), None)
            if liver_path is None or vessel_path is None:
                log.warning("%s/%s: missing label files, skipped", patient.name, stem)
                continue
            if ct_path.suffix == ".npy":
                ct = window_hu(np.load(ct_path), window)
            else:
                ct = read_image(ct_path, channels=1)[0]
            liver = read_mask(liver_path)
            box = liver_bbox(liver, pad)
            if box is None:
                log.warning("%s/%s: empty liver label, skipped", patient.name, stem)
                continue
            image = resize_image(ct[box][None], size)
            mask = resize_mask(read_mask(vessel_path)[box], size)
            samples.append(ImageSample(image, mask, f"{patient.name}/{stem}", group=patient.name))
    return samples


# Synthetic vessel trees ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the procedural vessel-tree renderer.

    Lengths are fractions of the image side. Widths are in pixels per branch
    generation; generations beyond the list reuse its last entry.
    """

    generations: int = 3
    widths: tuple[int, ...] = (3, 2, 1)
    trunk_length: tuple[float, float] = (0.35, 0.5)
    length_decay: float = 0.7
    branch_angle_deg: tuple[float, float] = (20.0, 45.0)
    curvature_deg: float = 12.0
    segment_steps: int = 4
    vessel_contrast: tuple[float, float] = (0.35, 0.6)
    background_mean: tuple[float, float] = (0.55, 0.75)
    texture_std: float = 0.08
    texture_sigma: float = 4.0
    vessel_blur: float = 0.7
    noise_std: float = 0.03
    supersample: int = 4
    min_fraction: float = 0.005
    max_fraction: float = 0.15
    max_attempts: int = 50


def _grow_tree(rng: np.random.Generator, size: int, cfg: SyntheticConfig):
    """Polylines (points, generation) of a random branching tree rooted near
    one image edge. The root always bifurcates."""
    edge = rng.integers(4)
    t = rng.uniform(0.3, 0.7) * (size - 1)
    start = {
        0: (t, 0.0, 90.0),
        1: (t, size - 1.0, -90.0),
        2: (0.0, t, 0.0),
        3: (size - 1.0, t, 180.0),
    }[int(edge)]
    # angle 0 points down the rows, 90 along the columns
    stack = [(np.array(start[:2]), start[2], 0)]
    polylines = []
    while stack:
        origin, heading, gen = stack.pop()
        length = rng.uniform(*cfg.trunk_length) * size * cfg.length_decay**gen
        pts = [origin]
        step = length / cfg.segment_steps
        for _ in range(cfg.segment_steps):
            heading += rng.uniform(-cfg.curvature_deg, cfg.curvature_deg)
            rad = math.radians(heading)
            pts.append(pts[-1] + step * np.array([math.cos(rad), math.sin(rad)]))
        polylines.append((np.array(pts), gen))
        if gen + 1 < cfg.generations:
            spread = rng.uniform(*cfg.branch_angle_deg, size=2)
            stack.append((pts[-1], heading + spread[0], gen + 1))
            stack.append((pts[-1], heading - spread[1], gen + 1))
    return polylines


def _draw(polylines, size: int, scale: int, cfg: SyntheticConfig) -> np.ndarray:
    canvas = Image.new("L", (size * scale, size * scale), 0)
    draw = ImageDraw.Draw(canvas)
    for pts, gen in polylines:
        width = cfg.widths[min(gen, len(cfg.widths) - 1)] * scale
        # PIL takes (x, y) = (col, row); shift to pixel-centre convention
        xy = [((c + 0.5) * scale - 0.5, (r + 0.5) * scale - 0.5) for r, c in pts]
        draw.line(xy, fill=255, width=width, joint="curve")
        for x, y in xy:
            rad = width / 2
            draw.ellipse((x - rad, y - rad, x + rad, y + rad), fill=255)
    arr = np.asarray(canvas, dtype=np.float32) / 255.0
    if scale > 1:
        arr = arr.reshape(size, scale, size, scale).mean(axis=(1, 3))
    return arr


def render_tree(rng: np.random.Generator, size: int, cfg: SyntheticConfig = SyntheticConfig()):
    """Render one tree: ``(coverage, mask, n_segments)``.

    ``coverage`` is anti-aliased (supersampled) in ``[0, 1]``; ``mask`` is the
    aliased rendering, which keeps thin branches 8-connected.
    """
    polylines = _grow_tree(rng, size, cfg)
    coverage = _draw(polylines, size, cfg.supersample, cfg)
    mask = (_draw(polylines, size, 1, cfg) > 0.5).astype(np.uint8)
    return coverage, mask, len(polylines)


def _synthesize_one(rng: np.random.Generator, size: int, cfg: SyntheticConfig):
    for _ in range(cfg.max_attempts):
        coverage, mask, _ = render_tree(rng, size, cfg)
        if cfg.min_fraction <= mask.mean() <= cfg.max_fraction:
            break
    else:
        raise RuntimeError("could not draw a tree within the foreground-fraction bounds")
    background = rng.uniform(*cfg.background_mean)
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), cfg.texture_sigma)
    texture *= cfg.texture_std / (texture.std() + 1e-12)
    vessels = ndimage.gaussian_filter(coverage, cfg.vessel_blur)
    image = background + texture - rng.uniform(*cfg.vessel_contrast) * vessels
    image += rng.normal(0, cfg.noise_std, (size, size))
    return np.clip(image, 0, 1).astype(np.float32)[None], mask


def generate_synthetic(
    count: int, size: int = 64, seed: int = 0, config: SyntheticConfig = SyntheticConfig()
) -> list[ImageSample]:
    """``count`` dark-vessel images on a textured background with their masks.

    Sample ``i`` depends only on ``(seed, i)``.
    """
    if size < 32:
        raise ConfigError(f"synthetic size must be >= 32, got {size}")
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        image, mask = _synthesize_one(rng, size, config)
        samples.append(ImageSample(image, mask, case_id=f"syn{seed:04d}_{i:04d}"))
    return samples


def write_synthetic(samples: Sequence[ImageSample], root: str | Path, seed: int) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", "seed", "foreground_fraction"])
        for s in samples:
            img = np.round(s.image[0] * 255).astype(np.uint8)
            Image.fromarray(img).save(root / "images" / f"{s.case_id}.png")
            Image.fromarray(s.mask * 255).save(root / "masks" / f"{s.case_id}.png")
            writer.writerow([s.case_id, seed, repr(float(s.mask.mean()))])


def load_synthetic(root: str | Path, size: tuple[int, int] | None = None) -> list[ImageSample]:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise IngestionError(f"no manifest.csv in {root}")
    samples = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            cid = row["case_id"]
            img_path, mask_path = root / "images" / f"{cid}.png", root / "masks" / f"{cid}.png"
            if not img_path.exists() or not mask_path.exists():
                raise IngestionError(f"{cid}: listed in manifest but files are missing")
            image, mask = read_image(img_path, channels=1), read_mask(mask_path)
            if size is not None:
                image, mask = resize_image(image, size), resize_mask(mask, size)
            samples.append(ImageSample(image, mask, cid))
    return sorted(samples, key=lambda s: s.case_id)


# Augmentation --------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    """Ranges are ``(low, high)`` and sampled uniformly; translation is a
    fraction of the image side."""

    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    shear_deg: tuple[float, float] = (-10.0, 10.0)
    translate_frac: tuple[float, float] = (-0.1, 0.1)
    flip: bool = True
    flip_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.0, 1.5)
    noise_std: tuple[float, float] = (0.0, 0.05)

    def __post_init__(self):
        for name in ("rotation_deg", "shear_deg", "translate_frac", "blur_sigma", "noise_std"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ConfigError(f"{name} must be a finite (low, high) range, got {(lo, hi)}")
        if self.blur_sigma[0] < 0 or self.noise_std[0] < 0:
            raise ConfigError("blur_sigma and noise_std must be non-negative")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        zero = (0.0, 0.0)
        return cls(zero, zero, zero, False, 0.0, zero, zero)

    @classmethod
    def geometric_only(cls) -> "AugmentationConfig":
        """Rotation, shear and translation only (the IRCADb recipe)."""
        zero = (0.0, 0.0)
        return replace(cls(), flip=False, blur_sigma=zero, noise_std=zero)


def _affine_matrix(rot_deg: float, shear_deg: float, flip: bool) -> np.ndarray:
    """Output-to-input linear map in (row, col) coordinates."""
    a = math.radians(rot_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    shear = np.array([[1.0, 0.0], [math.tan(math.radians(shear_deg)), 1.0]])
    fwd = rot @ shear
    if flip:
        fwd = fwd @ np.diag([1.0, -1.0])
    return np.linalg.inv(fwd)


def augment(sample: ImageSample, config: AugmentationConfig, rng: np.random.Generator) -> ImageSample:
    """Random geometric transform shared by image and mask (nearest-neighbour
    for the mask), then blur and noise on the image only."""
    h, w = sample.mask.shape
    rot = rng.uniform(*config.rotation_deg)
    shear = rng.uniform(*config.shear_deg)
    ty, tx = rng.uniform(*config.translate_frac, size=2) * np.array([h, w])
    flip = config.flip and rng.random() < config.flip_prob
    sigma = rng.uniform(*config.blur_sigma)
    noise = rng.uniform(*config.noise_std)

    image, mask = sample.image, sample.mask
    if rot or shear or ty or tx or flip:
        inv = _affine_matrix(rot, shear, flip)
        centre = np.array([(h - 1) / 2, (w - 1) / 2])
        offset = centre - inv @ (centre + np.array([ty, tx]))
        image = np.stack(
            [ndimage.affine_transform(c, inv, offset, order=1, mode="nearest") for c in image]
        )
        mask = ndimage.affine_transform(mask, inv, offset, order=0, mode="constant", cval=0)
    if sigma > 0:
        image = np.stack([ndimage.gaussian_filter(c, sigma) for c in image])
    if noise > 0:
        image = image + rng.normal(0, noise, image.shape)
    image = np.clip(image, 0, 1).astype(np.float32)
    return replace(sample, image=image, mask=mask.astype(np.uint8))


# Folds ----------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]


def make_folds(samples: Sequence[ImageSample], k: int, seed: int = 0) -> list[FoldSplit]:
    """Shuffle sample groups (patients, or cases when ungrouped) and deal
    them into ``k`` folds; every case validates exactly once."""
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    groups: dict[str, list[str]] = {}
    for s in samples:
        groups.setdefault(s.group_id, []).append(s.case_id)
    if len(groups) < k:
        raise ConfigError(f"cannot split {len(groups)} group(s) into {k} folds")
    order = sorted(groups)
    perm = np.random.default_rng(seed).permutation(len(order))
    chunks = np.array_split(np.array([order[i] for i in perm], dtype=object), k)
    folds = []
    for i, chunk in enumerate(chunks):
        val_groups = set(chunk.tolist())
        val = tuple(sorted(c for g in val_groups for c in groups[g]))
        train = tuple(sorted(c for g in order if g not in val_groups for c in groups[g]))
        folds.append(FoldSplit(i, train, val))
    return folds
