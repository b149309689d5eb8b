"""Synthetic T2 volumes with dark tubular flow voids and exact vessel masks.

Each case holds a tilted ring of vessels (a loose circle-of-Willis stand-in),
a few branches leaving the ring, and vertical feeders crossing many slices.
Vessel voxels are darkened in the T2 volume; dark round blobs act as
non-vessel distractors so that intensity alone does not solve the task.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .data import (
    DEFAULT_SPLIT_FRACS,
    MANIFEST_NAME,
    BinaryMask,
    DatasetManifest,
    PairedSample,
    Volume,
    build_manifest,
    save_mask,
    save_volume,
    write_manifest,
)

log = logging.getLogger(__name__)


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (16, 96, 96)
    spacing: tuple[float, float, float] = (2.0, 1.0, 1.0)
    n_vessels: tuple[int, int] = (3, 5)
    vessel_radius: tuple[float, float] = (1.3, 2.4)
    void_contrast: float = 0.6
    n_distractors: tuple[int, int] = (2, 4)
    distractor_contrast: float = 0.5
    noise_sigma: float = 0.10
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.n_vessels = tuple(int(v) for v in self.n_vessels)
        self.vessel_radius = tuple(float(v) for v in self.vessel_radius)
        self.n_distractors = tuple(int(v) for v in self.n_distractors)

    def validate(self) -> None:
        d, h, w = self.shape
        if d < 1 or h % 16 or w % 16 or h < 32 or w < 32:
            raise ValueError(f"phantom shape {self.shape}: H and W must be multiples of 16 and >= 32")
        if self.n_vessels[1] <= 0 and self.vessel_radius[1] <= 0:
            raise ValueError("degenerate phantom config: zero vessels and zero radius")
        if self.n_vessels[0] > self.n_vessels[1] or self.vessel_radius[0] > self.vessel_radius[1]:
            raise ValueError("ranges must be (low, high) with low <= high")
        if not 0 < self.void_contrast <= 1:
            raise ValueError("void_contrast must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        # darkest background is 0.3; the void step must clear the noise
        if self.void_contrast * 0.3 <= self.noise_sigma:
            raise ValueError("void_contrast too small relative to noise_sigma")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _case_rng(cfg: PhantomConfig, case_index: int) -> np.random.Generator:
    return np.random.default_rng([int(cfg.seed), int(case_index)])


def _background(rng, shape) -> np.ndarray:
    field = rng.standard_normal(shape)
    field = ndimage.gaussian_filter(field, sigma=(1.5, 7.0, 7.0), mode="reflect")
    field -= field.min()
    field /= max(field.max(), 1e-12)
    return 0.3 + 0.5 * field


def _smooth_path(rng, start, direction, length, step=0.4, wobble=0.08):
    """Random walk with slowly turning heading, in (z, y, x) physical units."""
    n = max(int(length / step), 2)
    pts = np.empty((n, 3))
    pos = np.asarray(start, dtype=float)
    d = np.asarray(direction, dtype=float)
    d /= np.linalg.norm(d)
    for i in range(n):
        pts[i] = pos
        d = d + wobble * rng.standard_normal(3) * np.array([0.3, 1.0, 1.0])
        d /= np.linalg.norm(d)
        pos = pos + step * d
    return pts


def _vessel_centrelines(rng, cfg: PhantomConfig):
    """List of (points, radius) with points in physical (z, y, x) units."""
    d, h, w = cfg.shape
    sz, sy, sx = cfg.spacing
    r_lo, r_hi = cfg.vessel_radius
    curves = []

    # tilted ring
    cy = (h / 2 + rng.uniform(-6, 6)) * sy
    cx = (w / 2 + rng.uniform(-6, 6)) * sx
    cz = (d / 2 + rng.uniform(-1.5, 1.5)) * sz
    ry, rx = rng.uniform(0.18, 0.28, size=2) * np.array([h * sy, w * sx])
    tilt = rng.uniform(0.25, 0.45) * d * sz
    phase = rng.uniform(0, 2 * np.pi)
    theta = np.linspace(0, 2 * np.pi, int(2 * np.pi * max(ry, rx) / 0.4))
    wob = 1 + 0.08 * np.sin(3 * theta + rng.uniform(0, 2 * np.pi))
    ring = np.stack(
        [cz + tilt * np.sin(theta + phase), cy + ry * wob * np.sin(theta), cx + rx * wob * np.cos(theta)], axis=1
    )
    curves.append((ring, rng.uniform(r_lo, r_hi)))

    n_branch = int(rng.integers(cfg.n_vessels[0], cfg.n_vessels[1] + 1))
    for _ in range(n_branch):
        anchor = ring[rng.integers(len(ring))]
        if rng.random() < 0.4:
            # feeder running through the slices
            direction = np.array([rng.choice([-1.0, 1.0]), rng.normal(0, 0.25), rng.normal(0, 0.25)])
            length = rng.uniform(0.6, 1.0) * d * sz
        else:
            radial = anchor[1:] - np.array([cy, cx])
            radial /= np.linalg.norm(radial) + 1e-12
            direction = np.array([rng.normal(0, 0.15), *radial])
            length = rng.uniform(14, 30)
        pts = _smooth_path(rng, anchor, direction, length)
        curves.append((pts, rng.uniform(r_lo, 0.5 * (r_lo + r_hi)) if r_hi > 0 else 0.0))
    return curves


def _rasterise(curves, shape, spacing) -> np.ndarray:
    grid = np.stack(np.meshgrid(*[np.arange(n) * s for n, s in zip(shape, spacing)], indexing="ij"), axis=-1)
    flat = grid.reshape(-1, 3)
    seg = np.zeros(len(flat), dtype=bool)
    for pts, radius in curves:
        if radius <= 0:
            continue
        dist, _ = cKDTree(pts).query(flat, distance_upper_bound=radius + 1e-9)
        seg |= dist <= radius
    return seg.reshape(shape)


def _distractors(rng, cfg: PhantomConfig, seg: np.ndarray) -> np.ndarray:
    d, h, w = cfg.shape
    blobs = np.zeros(cfg.shape, dtype=bool)
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    n = int(rng.integers(cfg.n_distractors[0], cfg.n_distractors[1] + 1))
    for _ in range(n):
        c = rng.uniform([0, 8, 8], [d - 1, h - 8, w - 8])
        r = rng.uniform(3.0, 5.5)
        rz = rng.uniform(1.0, 2.5)
        blobs |= ((zz - c[0]) / rz) ** 2 + ((yy - c[1]) / r) ** 2 + ((xx - c[2]) / r) ** 2 <= 1.0
    return blobs & ~seg


@dataclass
class PhantomLayers:
    background: np.ndarray
    seg: np.ndarray
    distractors: np.ndarray
    clean: np.ndarray
    t2: np.ndarray


def render_phantom(cfg: PhantomConfig, case_index: int) -> PhantomLayers:
    """All intermediate layers of one case; ``t2`` is noisy and min-max normalised."""
    cfg.validate()
    rng = _case_rng(cfg, case_index)
    bg = _background(rng, cfg.shape)
    seg = _rasterise(_vessel_centrelines(rng, cfg), cfg.shape, cfg.spacing)
    blobs = _distractors(rng, cfg, seg)
    clean = bg * (1.0 - cfg.void_contrast * seg) * (1.0 - cfg.distractor_contrast * blobs)
    t2 = clean + cfg.noise_sigma * rng.standard_normal(cfg.shape)
    t2 = (t2 - t2.min()) / (t2.max() - t2.min())
    return PhantomLayers(bg, seg, blobs, clean, t2)


def generate_phantom(cfg: PhantomConfig, case_index: int, split_tag: str = "train") -> PairedSample:
    """Deterministic in ``(cfg, case_index)``."""
    layers = render_phantom(cfg, case_index)
    case_id = f"phantom_{case_index:04d}"
    return PairedSample(
        Volume(layers.t2.astype(np.float32), cfg.spacing, case_id),
        BinaryMask(layers.seg.astype(np.uint8), cfg.spacing, case_id),
        split_tag,
    )


def generate_dataset(
    cfg: PhantomConfig, n_cases: int, out_dir: str | Path, split_fracs=DEFAULT_SPLIT_FRACS
) -> DatasetManifest:
    """Write ``n_cases`` phantom pairs plus ``manifest.json`` into ``out_dir``."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_cases):
        sample = generate_phantom(cfg, i)
        save_volume(sample.t2, out_dir / f"{sample.id}_t2.nii.gz")
        save_mask(sample.seg, out_dir / f"{sample.id}_seg.nii.gz")
    manifest = build_manifest(out_dir, split_fracs, cfg.seed)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    log.info("wrote %d phantom cases to %s", n_cases, out_dir)
    return manifest
