"""Cropping, intensity normalisation and local attention maps.

A local attention mask is the vessel segmentation dilated slice by slice with
a square structuring element of side ``2 * radius + 1``. The attention map is
that mask multiplied voxelwise with the T2 volume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import BinaryMask, Volume


@dataclass
class AttentionMask:
    data: np.ndarray
    radius: int


@dataclass
class AttentionMap:
    data: np.ndarray
    radius: int


def crop_offsets(src_hw, target_hw) -> tuple[int, int]:
    (sh, sw), (th, tw) = src_hw, target_hw
    if th > sh or tw > sw:
        raise ValueError(f"crop target {th}x{tw} larger than source {sh}x{sw}")
    if th < 1 or tw < 1:
        raise ValueError(f"crop target must be positive, got {th}x{tw}")
    # odd remainder is dropped from the high-index side
    return (sh - th) // 2, (sw - tw) // 2


def center_crop(v, target_hw):
    """Crop the in-plane dims of a :class:`Volume` or :class:`BinaryMask` around the centre."""
    oy, ox = crop_offsets(v.data.shape[1:], target_hw)
    th, tw = target_hw
    data = v.data[:, oy : oy + th, ox : ox + tw].copy()
    return type(v)(data, v.spacing, v.id)


def normalize_intensity(v: Volume) -> Volume:
    """Min-max scale to [0, 1]; constant volumes become all zeros."""
    data = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"volume {v.id!r} contains NaN or Inf")
    lo, hi = data.min(), data.max()
    if hi > lo:
        out = (data - lo) / (hi - lo)
    else:
        out = np.zeros_like(data)
    return Volume(out.astype(np.float32), v.spacing, v.id)


def dilate_array(arr: np.ndarray, radius: int) -> np.ndarray:
    """Per-slice Chebyshev dilation of a binary ``(..., H, W)`` array."""
    if int(radius) != radius or radius < 0:
        raise ValueError(f"dilation radius must be a non-negative integer, got {radius}")
    radius = int(radius)
    arr = np.asarray(arr).astype(bool)
    if radius == 0:
        return arr.astype(np.uint8)
    size = [1] * (arr.ndim - 2) + [2 * radius + 1] * 2
    return ndimage.maximum_filter(arr.astype(np.uint8), size=size, mode="constant", cval=0)


def dilate_mask(seg: BinaryMask, radius: int) -> AttentionMask:
    return AttentionMask(dilate_array(seg.data, radius), int(radius))


def make_attention_map(t2: Volume, seg: BinaryMask, radius: int) -> AttentionMap:
    if t2.data.shape != seg.data.shape:
        raise ValueError(f"t2 shape {t2.data.shape} != seg shape {seg.data.shape}")
    mask = dilate_array(seg.data, radius)
    return AttentionMap((mask * t2.data).astype(np.float32), int(radius))


def mask_coverage(mask) -> float:
    data = np.asarray(getattr(mask, "data", mask))
    if data.size == 0:
        return 0.0
    return float(np.count_nonzero(data)) / data.size


def preprocess_pair(t2: Volume, seg: BinaryMask, target_hw=None) -> tuple[Volume, BinaryMask]:
    """Crop (optional) then normalise a registered T2/segmentation pair."""
    if target_hw is not None:
        t2, seg = center_crop(t2, target_hw), center_crop(seg, target_hw)
    return normalize_intensity(t2), seg
