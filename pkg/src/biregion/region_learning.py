"""Reliable/unreliable region splitting and the region-weighted hybrid losses.

URL (labeled stream) keeps full weight on the uncertain region and scales the
certain region by ``alpha``. CRL (unlabeled stream) does the opposite.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .model import softmax
from .uncertainty import RegionMask

DICE_EPS = 1e-5


@dataclass
class RegionSplitLabels:
    reliable: torch.Tensor  # one-hot [B, C, H, W], zero where mask == 1
    unreliable: torch.Tensor  # one-hot [B, C, H, W], zero where mask == 0
    mask: RegionMask

    def swapped(self) -> "RegionSplitLabels":
        """Roles exchanged: the reliable region becomes the masked one."""
        inv = RegionMask(1.0 - self.mask.values, self.mask.threshold_used, self.mask.percentile_q)
        return RegionSplitLabels(self.unreliable, self.reliable, inv)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ce_masked_unreliable: torch.Tensor
    ce_masked_reliable: torch.Tensor
    dice_masked_unreliable: torch.Tensor
    dice_masked_reliable: torch.Tensor
    alpha: float

    def to_dict(self, prefix: str = "") -> dict:
        return {
            f"{prefix}total": float(self.total.detach()),
            f"{prefix}ce_unreliable": float(self.ce_masked_unreliable.detach()),
            f"{prefix}ce_reliable": float(self.ce_masked_reliable.detach()),
            f"{prefix}dice_unreliable": float(self.dice_masked_unreliable.detach()),
            f"{prefix}dice_reliable": float(self.dice_masked_reliable.detach()),
            f"{prefix}alpha": self.alpha,
        }


def one_hot(Y: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    return F.one_hot(Y.long(), num_classes).permute(0, 3, 1, 2).to(dtype)


def split_regions(Y: torch.Tensor, mask: RegionMask, num_classes: int) -> RegionSplitLabels:
    if Y.shape != mask.values.shape:
        raise ShapeError(f"label shape {list(Y.shape)} does not match mask shape {list(mask.values.shape)}")
    if Y.numel() and (int(Y.min()) < 0 or int(Y.max()) >= num_classes):
        raise ShapeError(f"label values must lie in [0, {num_classes})")
    oh = one_hot(Y, num_classes)
    m = mask.values.to(oh.dtype).unsqueeze(1)
    return RegionSplitLabels(reliable=oh * (1 - m), unreliable=oh * m, mask=mask)


def masked_seg_loss(P: torch.Tensor, Y_onehot: torch.Tensor, pixel_mask: torch.Tensor):
    """Cross-entropy and Dice loss restricted to ``pixel_mask`` pixels.

    CE is the mean of -ln p_y over in-mask pixels. Dice is one minus the mean
    over classes of the smoothed soft Dice, with probabilities and targets zeroed
    outside the mask. An empty mask gives (0, 0).
    """
    m = pixel_mask.to(P.dtype).unsqueeze(1)
    n = m.sum()
    if float(n) == 0:
        zero = P.sum() * 0
        return zero, zero
    Y_onehot = Y_onehot.to(P.dtype)
    log_p = torch.log(P.clamp_min(torch.finfo(P.dtype).tiny))
    ce = -(Y_onehot * m * log_p).sum() / n
    dims = (0, 2, 3)
    inter = (P * Y_onehot * m).sum(dims)
    denom = (P * m).sum(dims) + (Y_onehot * m).sum(dims)
    dice = 1 - ((2 * inter + DICE_EPS) / (denom + DICE_EPS)).mean()
    return ce, dice


def _check_alpha(alpha: float) -> None:
    if not 0 <= alpha <= 1:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")


NORMALIZATIONS = ("region", "pixel")


def _region_losses(P: torch.Tensor, splits: RegionSplitLabels):
    m = splits.mask.values
    ce_u, dice_u = masked_seg_loss(P, splits.unreliable, m)
    ce_r, dice_r = masked_seg_loss(P, splits.reliable, 1 - m)
    return ce_u, dice_u, ce_r, dice_r


def _region_weights(splits: RegionSplitLabels, normalization: str, w_uncertain: float, w_certain: float):
    """Multipliers for the (uncertain, certain) region terms.

    ``"region"`` applies the weights to the two region means directly. ``"pixel"``
    turns them into per-pixel weights and takes the weighted mean over all pixels,
    so each region counts in proportion to its size.
    """
    if normalization == "region":
        return w_uncertain, w_certain
    if normalization == "pixel":
        frac = float(splits.mask.values.mean())
        z = w_uncertain * frac + w_certain * (1.0 - frac)
        if z == 0:
            return 0.0, 0.0
        return w_uncertain * frac / z, w_certain * (1.0 - frac) / z
    raise ConfigError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")


def url_loss(P_l: torch.Tensor, splits: RegionSplitLabels, alpha: float,
             normalization: str = "region") -> LossBreakdown:
    """Full weight on the uncertain region, ``alpha`` on the certain one.

    With the default ``normalization="region"`` each region term is its own
    mean loss, so the small uncertain region weighs as much as the rest of the
    image. ``"pixel"`` gives each pixel weight 1 or ``alpha`` instead.
    """
    _check_alpha(alpha)
    w_u, w_r = _region_weights(splits, normalization, 1.0, alpha)
    ce_u, dice_u, ce_r, dice_r = _region_losses(P_l, splits)
    total = w_u * (ce_u + dice_u) + w_r * (ce_r + dice_r)
    return LossBreakdown(total, ce_u, ce_r, dice_u, dice_r, alpha)


def crl_loss(P_u: torch.Tensor, splits: RegionSplitLabels, alpha: float,
             normalization: str = "region") -> LossBreakdown:
    """Full weight on the certain region, ``alpha`` on the uncertain one."""
    _check_alpha(alpha)
    w_u, w_r = _region_weights(splits, normalization, alpha, 1.0)
    ce_u, dice_u, ce_r, dice_r = _region_losses(P_u, splits)
    total = w_r * (ce_r + dice_r) + w_u * (ce_u + dice_u)
    return LossBreakdown(total, ce_u, ce_r, dice_u, dice_r, alpha)


def plain_loss(P: torch.Tensor, Y: torch.Tensor, num_classes: int) -> LossBreakdown:
    """Unmasked CE + Dice, reported with every pixel in the reliable slot."""
    full = torch.ones(Y.shape, dtype=P.dtype)
    ce, dice = masked_seg_loss(P, one_hot(Y, num_classes, P.dtype), full)
    zero = ce * 0
    return LossBreakdown(ce + dice, zero, ce, zero, dice, 1.0)


def total_loss(l: LossBreakdown, u: LossBreakdown) -> torch.Tensor:
    return l.total + u.total


@torch.no_grad()
def generate_pseudo_labels(teacher: torch.nn.Module, X_u: torch.Tensor):
    """Hard argmax pseudo-labels (ties go to the smallest class id) and the teacher's ProbMap."""
    was_training = teacher.training
    teacher.eval()
    P = softmax(teacher(X_u))
    teacher.train(was_training)
    return P.argmax(dim=1), P
