"""Per-case Dice and HD95 on 3D volumes, with mean +/- 95% CI summaries."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

Z_95 = 1.96


@dataclass
class EvalRecord:
    case_id: str
    dice: float
    hd95: float | None


@dataclass
class EvalSummary:
    n_cases: int
    dice_mean: float
    dice_ci_halfwidth: float
    hd95_mean: float | None
    hd95_ci_halfwidth: float | None
    missing_hd95: int = 0

    def format_row(self) -> str:
        hd = "n/a" if self.hd95_mean is None else f"{self.hd95_mean:.1f} ± {self.hd95_ci_halfwidth:.1f}"
        return f"Dice {self.dice_mean:.3f} ± {self.dice_ci_halfwidth:.3f}, HD95 {hd}"


def _as_bool(a) -> np.ndarray:
    return np.asarray(getattr(a, "data", a)).astype(bool)


def dice_score(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def boundary_voxels(mask) -> np.ndarray:
    """Foreground voxels with at least one face-neighbour in the background.

    Voxels outside the array count as background.
    """
    m = _as_bool(mask)
    struct = ndimage.generate_binary_structure(m.ndim, 1)
    interior = ndimage.binary_erosion(m, structure=struct, border_value=0)
    return np.argwhere(m & ~interior)


def _percentile95(d: np.ndarray) -> float:
    return float(np.percentile(d, 95, method="linear"))


def hd95(pred, gt, spacing=None) -> float:
    """Symmetric 95th-percentile Hausdorff distance between mask boundaries."""
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        raise ValueError("hd95 is undefined for an empty mask")
    scale = np.ones(p.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    bp = boundary_voxels(p) * scale
    bg = boundary_voxels(g) * scale
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    return max(_percentile95(d_pg), _percentile95(d_gp))


def score_case(case_id: str, pred, gt, spacing=None) -> EvalRecord:
    dice = dice_score(pred, gt)
    try:
        hd = hd95(pred, gt, spacing)
    except ValueError:
        hd = None
    return EvalRecord(case_id, dice, hd)


def _mean_ci(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if len(values) < 2:
        return mean, 0.0
    return mean, float(Z_95 * values.std(ddof=1) / math.sqrt(len(values)))


def summarize(records: list[EvalRecord]) -> EvalSummary:
    if not records:
        raise ValueError("cannot summarise an empty set of records")
    dice_mean, dice_ci = _mean_ci([r.dice for r in records])
    hds = [r.hd95 for r in records if r.hd95 is not None]
    missing = len(records) - len(hds)
    if missing:
        log.warning("%d of %d cases have no HD95 (empty prediction or ground truth)", missing, len(records))
    hd_mean, hd_ci = _mean_ci(hds) if hds else (None, None)
    return EvalSummary(len(records), dice_mean, dice_ci, hd_mean, hd_ci, missing)


def write_records_csv(records: list[EvalRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "dice", "hd95"])
        for r in records:
            w.writerow([r.case_id, repr(r.dice), "" if r.hd95 is None else repr(r.hd95)])
    return path


def write_summary_json(summary: EvalSummary, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(asdict(summary), indent=2, sort_keys=True))
    return path
