"""Training objectives: binary cross-entropy, soft dice, and the dual-task
total that sums the segmentation terms with a weighted reconstruction term.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import Tensor, clip, log, reduce_mean, reduce_sum


@dataclass
class LossConfig:
    dice_smooth: float = 1.0
    reconstruction_weight: float = 1.0
    bce_clamp: float = 1e-7

    def __post_init__(self):
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be positive")
        if self.reconstruction_weight < 0:
            raise ValueError("reconstruction_weight must be non-negative")
        if not 0 < self.bce_clamp < 0.5:
            raise ValueError("bce_clamp must lie in (0, 0.5)")

    def to_dict(self) -> dict:
        return {
            "dice_smooth": self.dice_smooth,
            "reconstruction_weight": self.reconstruction_weight,
            "bce_clamp": self.bce_clamp,
        }


def bce(pred: Tensor, target: Tensor, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with clamped log arguments.

    -mean[t*ln(clip(p)) + (1-t)*ln(clip(1-p))], always finite and >= 0.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    pos = target * log(clip(pred, clamp, 1.0 - clamp))
    neg = (1.0 - target) * log(clip(1.0 - pred, clamp, 1.0 - clamp))
    return -reduce_mean(pos + neg)


def dice_loss(pred: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft dice loss, computed per image and averaged over the batch.

    1 - (2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth); the smoothing term
    makes a perfect prediction score exactly 0, including the all-empty mask.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    axes = tuple(range(1, pred.ndim))
    inter = reduce_sum(pred * target, axes=axes)
    num = 2.0 * inter + smooth
    den = reduce_sum(pred, axes=axes) + reduce_sum(target, axes=axes) + smooth
    return reduce_mean(1.0 - num / den)


def total_loss(out, mask_gt: Tensor, gray_gt: Tensor,
               cfg: LossConfig | None = None) -> tuple[Tensor, dict]:
    """Segmentation BCE + dice plus weighted grayscale-reconstruction BCE.

    Returns the scalar loss tensor and a breakdown dict with the three
    component values plus their total.
    """
    if cfg is None:
        cfg = LossConfig()
    bce_mask = bce(out.mask, mask_gt, cfg.bce_clamp)
    dice = dice_loss(out.mask, mask_gt, cfg.dice_smooth)
    bce_gray = bce(out.gray, gray_gt, cfg.bce_clamp)
    total = (bce_mask + dice) + cfg.reconstruction_weight * bce_gray
    breakdown = {
        "loss_bce_mask": bce_mask.item(),
        "loss_dice": dice.item(),
        "loss_bce_gray": bce_gray.item(),
        "loss_total": total.item(),
    }
    return total, breakdown
