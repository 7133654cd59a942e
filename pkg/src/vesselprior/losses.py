"""Reconstruction, shape-prior and segmentation losses.

All reductions are means (over elements, or over the batch for the shape
term) so that the shape-prior weight does not depend on batch size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn

from .architectures import LatentCode
from .errors import ConfigError, ShapeError, ValidationError

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class LossValue:
    total: torch.Tensor
    seg: torch.Tensor
    shape: torch.Tensor

    def components(self) -> dict[str, float]:
        return {"seg": self.seg.item(), "shape": self.shape.item(), "total": self.total.item()}


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(y: torch.Tensor, y_tilde: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    _same_shape(y, y_tilde, "reconstruction_loss")
    return ((y - y_tilde) ** 2).mean()


def _flat(z: LatentCode | torch.Tensor) -> torch.Tensor:
    if isinstance(z, LatentCode):
        return z.values
    return z.reshape(z.shape[0], -1)


def shape_prior_loss(z_gt: LatentCode | torch.Tensor, z_pred: LatentCode | torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``1 - cos(z_gt, z_pred)``, in ``[0, 2]``.

    A pair where either code has zero norm counts as cosine 0 (loss 1).
    """
    a, b = _flat(z_gt), _flat(z_pred)
    _same_shape(a, b, "shape_prior_loss")
    na, nb = a.norm(dim=1), b.norm(dim=1)
    degenerate = (na == 0) | (nb == 0)
    if bool(degenerate.any()):
        log.warning("shape_prior_loss: %d zero-norm latent(s), cosine set to 0", int(degenerate.sum()))
    denom = torch.where(degenerate, torch.ones_like(na), na * nb)
    cos = torch.where(degenerate, torch.zeros_like(na), (a * b).sum(dim=1) / denom)
    return (1 - cos.clamp(-1, 1)).mean()


def weighted_bce(y: torch.Tensor, y_hat: torch.Tensor, positive_weight: float = 1.0) -> torch.Tensor:
    """Mean of ``-[w y log p + (1 - y) log(1 - p)]`` with ``p`` clamped to
    ``[EPS, 1 - EPS]``."""
    _same_shape(y, y_hat, "weighted_bce")
    if not (positive_weight > 0 and torch.isfinite(torch.tensor(positive_weight))):
        raise ConfigError(f"positive_weight must be finite and > 0, got {positive_weight}")
    if not bool(((y == 0) | (y == 1)).all()):
        raise ValidationError("weighted_bce: targets must be binary")
    p = y_hat.clamp(EPS, 1 - EPS)
    return -(positive_weight * y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def foreground_weight(masks) -> float:
    """Inverse foreground frequency of a collection of binary masks."""
    total = fg = 0
    for m in masks:
        m = torch.as_tensor(m)
        total += m.numel()
        fg += int((m > 0).sum())
    if fg == 0:
        raise ValidationError("no foreground pixels; cannot derive a positive-class weight")
    return total / fg


def freeze(model: nn.Module) -> nn.Module:
    """Put ``model`` in evaluation mode and stop gradients to its parameters.

    Stale gradients are dropped so an optimizer holding these parameters
    cannot move them.
    """
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
        p.grad = None
    return model


def total_loss(
    y: torch.Tensor,
    x: torch.Tensor,
    segmenter: nn.Module,
    encoder: nn.Module | None,
    lam: float,
    positive_weight: float = 1.0,
) -> LossValue:
    """Segmentation loss plus ``lam`` times the latent shape prior.

    ``encoder`` is any frozen auto-encoder exposing ``encode``; gradients pass
    through it into the prediction but never reach its parameters. Soft
    predictions are encoded, not thresholded ones.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    y_hat = segmenter(x)
    seg = weighted_bce(y, y_hat, positive_weight)
    if encoder is None:
        shape = torch.zeros((), dtype=seg.dtype)
        return LossValue(seg, seg, shape)
    with torch.no_grad():
        z_gt = encoder.encode(y)
    shape = shape_prior_loss(z_gt, encoder.encode(y_hat))
    return LossValue(seg + lam * shape, seg, shape)
