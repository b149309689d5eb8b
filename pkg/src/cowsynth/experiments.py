"""Run configuration and multi-step experiments (full training, evaluation, dilation ablation)."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CaseEntry, DatasetManifest, load_mask, load_volume, save_mask, save_volume
from .metrics import EvalRecord, EvalSummary, score_case, summarize, write_records_csv, write_summary_json
from .model import ArchitectureConfig, SynthModel, build_model, load_checkpoint, predict_slices
from .phantom import PhantomConfig
from .preprocess import dilate_array, mask_coverage
from .training import (
    PHASE1_CKPT,
    PHASE2_BEST,
    SliceData,
    TrainingConfig,
    start_phase2,
    train_phase1,
    train_phase2,
)

log = logging.getLogger(__name__)

RUN_CONFIG_NAME = "run_config.json"
DEFAULT_RADII = (0, 5, 10, 15, 20)
NO_MASK = "none"


def _default_phase1() -> TrainingConfig:
    return TrainingConfig(phase=1, learning_rate=0.05, batch_size=16, max_epochs=2)


def _default_phase2() -> TrainingConfig:
    return TrainingConfig(phase=2, learning_rate=0.05, batch_size=16, max_epochs=8)


@dataclass
class RunConfig:
    """Everything needed to reproduce a run; serialised next to its outputs."""

    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    phase1: TrainingConfig = field(default_factory=_default_phase1)
    phase2: TrainingConfig = field(default_factory=_default_phase2)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model_seed: int = 0
    data_dir: str | None = None
    manifest: str | None = None
    out_dir: str | None = None
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture.to_dict(),
            "phase1": self.phase1.to_dict(),
            "phase2": self.phase2.to_dict(),
            "phantom": self.phantom.to_dict(),
            "model_seed": self.model_seed,
            "data_dir": self.data_dir,
            "manifest": self.manifest,
            "out_dir": self.out_dir,
            "checkpoint": self.checkpoint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        if "architecture" in d:
            cfg.architecture = ArchitectureConfig.from_dict(d["architecture"])
        for phase in ("phase1", "phase2"):
            if phase in d:
                base = getattr(cfg, phase).to_dict()
                setattr(cfg, phase, TrainingConfig.from_dict({**base, **d[phase]}))
        if "phantom" in d:
            cfg.phantom = PhantomConfig(**{**cfg.phantom.to_dict(), **d["phantom"]})
        for key in ("model_seed", "data_dir", "manifest", "out_dir", "checkpoint"):
            if key in d:
                setattr(cfg, key, d[key])
        cfg.phase1.phase, cfg.phase2.phase = 1, 2
        return cfg

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def run_training(cfg: RunConfig, manifest: DatasetManifest, out_dir: str | Path, phases=(1, 2)):
    """Train the requested phases into ``out_dir`` and return the final state."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / RUN_CONFIG_NAME)
    train, val = SliceData(manifest.split("train")), SliceData(manifest.split("val"))
    state = None
    if 1 in phases:
        model = build_model(cfg.architecture, cfg.model_seed)
        state = train_phase1(model, train, val, cfg.phase1, out_dir)
    if 2 in phases:
        if state is None:
            if not cfg.checkpoint:
                raise FileNotFoundError("phase 2 needs a phase-1 checkpoint")
            state = start_phase2(cfg.checkpoint)
        state = train_phase2(state, train, val, cfg.phase2, out_dir)
    return state


def predict_case(model: SynthModel, t2: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Slice-wise inference re-stacked into a volume; returns (binary mask, probabilities)."""
    _, prob = predict_slices(model, t2.astype(np.float32))
    return (prob > threshold).astype(np.uint8), prob


def evaluate_model(
    model: SynthModel | str | Path,
    entries: list[CaseEntry],
    seg_threshold: float = 0.5,
    use_spacing: bool = False,
) -> tuple[list[EvalRecord], EvalSummary]:
    """Score every case in ``entries``; HD95 is in voxels unless ``use_spacing``."""
    if not entries:
        raise ValueError("empty test set")
    if not isinstance(model, SynthModel):
        model, _ = load_checkpoint(model)
    records = []
    for e in sorted(entries, key=lambda e: e.id):
        t2, gt = load_volume(e.t2), load_mask(e.seg)
        pred, _ = predict_case(model, t2.data, seg_threshold)
        records.append(score_case(e.id, pred, gt.data, gt.spacing if use_spacing else None))
    return records, summarize(records)


def write_evaluation(records, summary, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return write_records_csv(records, out_dir / "cases.csv"), write_summary_json(summary, out_dir / "summary.json")


def infer_volume(checkpoint: str | Path, t2_path: str | Path, out_path: str | Path,
                 prob_path: str | Path | None = None, threshold: float = 0.5):
    model, _ = load_checkpoint(checkpoint)
    t2 = load_volume(t2_path)
    h, w = model.cfg.input_hw
    if t2.data.shape[1:] != (h, w):
        raise ValueError(f"input slices are {t2.data.shape[1]}x{t2.data.shape[2]}, checkpoint expects {h}x{w}")
    from .data import BinaryMask, Volume

    pred, prob = predict_case(model, t2.data, threshold)
    save_mask(BinaryMask(pred, t2.spacing, t2.id), out_path)
    if prob_path is not None:
        save_volume(Volume(prob.astype(np.float32), t2.spacing, t2.id), prob_path)
    return pred, prob


@dataclass
class AblationRow:
    radius: str
    dice: float
    dice_ci: float
    hd95: float | None
    coverage: float | None
    val_dice: float


def dilation_coverage(entries: list[CaseEntry], radius: int) -> float:
    fg, total = 0, 0
    for e in entries:
        m = dilate_array(load_mask(e.seg).data, radius)
        fg += int(np.count_nonzero(m))
        total += m.size
    return fg / total


def ablate_dilation(
    cfg: RunConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    radii=DEFAULT_RADII,
    include_control: bool = True,
    phase1_checkpoint: str | Path | None = None,
) -> list[AblationRow]:
    """Phase 2 once per radius (plus the no-mask control) from one shared phase-1 model.

    Writes ``ablation.csv`` and ``ablation.png`` into ``out_dir``.
    """
    radii = [int(r) for r in radii]
    if not radii:
        raise ValueError("empty radius list")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / RUN_CONFIG_NAME)
    train, val = SliceData(manifest.split("train")), SliceData(manifest.split("val"))
    test = manifest.split("test")

    if phase1_checkpoint is None:
        phase1_checkpoint = out_dir / "phase1" / PHASE1_CKPT
        if not Path(phase1_checkpoint).exists():
            train_phase1(build_model(cfg.architecture, cfg.model_seed), train, val, cfg.phase1, out_dir / "phase1")

    settings = [(str(r), r, True) for r in sorted(radii)]
    if include_control:
        settings.append((NO_MASK, 0, False))
    rows = []
    for label, radius, local in settings:
        p2 = TrainingConfig.from_dict({**cfg.phase2.to_dict(), "dilation_radius": radius, "local_attention": local})
        run_dir = out_dir / f"radius_{label}"
        state = train_phase2(start_phase2(phase1_checkpoint), train, val, p2, run_dir)
        records, summary = evaluate_model(run_dir / PHASE2_BEST, test, p2.seg_threshold)
        write_evaluation(records, summary, run_dir)
        coverage = dilation_coverage(test, radius) if local else None
        rows.append(AblationRow(label, summary.dice_mean, summary.dice_ci_halfwidth, summary.hd95_mean,
                                coverage, state.best_val_dice))
        log.info("ablation %s: test dice %.4f", label, summary.dice_mean)

    write_ablation_csv(rows, out_dir / "ablation.csv")
    from .report import plot_ablation

    plot_ablation(rows, out_dir / "ablation.png")
    return rows


def write_ablation_csv(rows: list[AblationRow], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["radius", "dice", "dice_ci", "hd95", "coverage", "val_dice"])
        for r in rows:
            w.writerow([r.radius, repr(r.dice), repr(r.dice_ci), "" if r.hd95 is None else repr(r.hd95),
                        "" if r.coverage is None else repr(r.coverage), repr(r.val_dice)])
    return path
