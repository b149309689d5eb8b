"""Training objectives.

* ``mae_loss``: L1 reconstruction.
* ``dice_loss``: soft Dice on probabilities.
* ``local_loss``: L1 between the decoder output restricted to the dilated
  predicted vessel mask and the ground-truth attention map.
* ``uncertainty_weighted_loss``: homoscedastic-uncertainty combination of the
  segmentation and local losses, parameterised by log-variances.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

DICE_SMOOTH = 1.0
SEG_THRESHOLD = 0.5


@dataclass
class LossReport:
    l_recon: float = float("nan")
    l_seg: float = float("nan")
    l_loc: float = float("nan")
    combined: float = float("nan")
    sigma1_sq: float = 1.0
    sigma2_sq: float = 1.0

    def as_dict(self) -> dict:
        return asdict(self)


def _check_shapes(*tensors):
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def mae_loss(a, b):
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    _check_shapes(a, b)
    return (a - b).abs().mean()


def dice_loss(pred, gt, smooth: float = DICE_SMOOTH):
    pred, gt = torch.as_tensor(pred), torch.as_tensor(gt)
    _check_shapes(pred, gt)
    if pred.numel() and (pred.min() < 0 or pred.max() > 1):
        raise ValueError("dice_loss expects probabilities in [0, 1]")
    gt = gt.to(pred.dtype)
    inter = (pred * gt).sum()
    return 1 - (2 * inter + smooth) / (pred.sum() + gt.sum() + smooth)


def dilate_tensor(mask, radius: int):
    """Chebyshev dilation of the last two dims via max-pooling; no gradient."""
    if radius < 0:
        raise ValueError(f"dilation radius must be >= 0, got {radius}")
    if radius == 0:
        return mask
    shape = mask.shape
    flat = mask.reshape(-1, 1, *shape[-2:])
    out = F.max_pool2d(flat, kernel_size=2 * radius + 1, stride=1, padding=radius)
    return out.reshape(shape)


def predicted_attention_mask(pred_seg, radius: int, threshold: float = SEG_THRESHOLD):
    with torch.no_grad():
        return dilate_tensor((pred_seg.detach() > threshold).to(pred_seg.dtype), radius)


def local_loss(recon, pred_seg, gt_attention_map, radius: int, threshold: float = SEG_THRESHOLD):
    """L1 between ``dilate(pred_seg > threshold) * recon`` and the target map.

    The mask is a constant: gradients reach the decoder output only.
    """
    _check_shapes(recon, pred_seg, gt_attention_map)
    mask = predicted_attention_mask(pred_seg, radius, threshold)
    return mae_loss(mask * recon, gt_attention_map)


def uncertainty_weighted_loss(l_seg, l_loc, log_sigma1_sq, log_sigma2_sq):
    """``l_seg / (2 s1) + l_loc / (2 s2) + log(sqrt(s1 * s2))`` with ``si = exp(log_sigmai_sq)``."""
    terms = [torch.as_tensor(t, dtype=torch.get_default_dtype()) if not torch.is_tensor(t) else t
             for t in (l_seg, l_loc, log_sigma1_sq, log_sigma2_sq)]
    l_seg, l_loc, s1, s2 = terms
    for name, t in zip(("l_seg", "l_loc", "log_sigma1_sq", "log_sigma2_sq"), terms):
        if not bool(torch.isfinite(t.detach()).all()):
            raise ValueError(f"{name} is not finite")
    return 0.5 * torch.exp(-s1) * l_seg + 0.5 * torch.exp(-s2) * l_loc + 0.5 * (s1 + s2)


def combined_from_sigmas(l_seg: float, l_loc: float, sigma1_sq: float, sigma2_sq: float) -> float:
    return l_seg / (2 * sigma1_sq) + l_loc / (2 * sigma2_sq) + 0.5 * math.log(sigma1_sq * sigma2_sq)
