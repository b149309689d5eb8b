"""Two-phase training, slope-based early stopping and hyperparameter grid search.

Phase 1 trains encoder + decoder branch as a T2 autoencoder (L1 loss) with the
synthesis branch frozen. Phase 2 unfreezes everything and minimises the
uncertainty-weighted sum of the Dice loss and the local attention loss.
"""

from __future__ import annotations

import copy
import csv
import itertools
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses
from .data import CaseEntry, load_pair
from .metrics import dice_score
from .model import (
    SynthModel,
    freeze_synthesis_branch,
    load_checkpoint,
    predict_slices,
    save_checkpoint,
    set_uncertainty_trainable,
    sigma_squares,
)
from .preprocess import dilate_array

log = logging.getLogger(__name__)

DETERMINISTIC_ENV = "COWSYNTH_DETERMINISTIC"
LOG_COLUMNS = ["epoch", "phase", "l_recon", "l_seg", "l_loc", "combined", "sigma1_sq", "sigma2_sq", "val_loss", "val_dice"]
PHASE1_CKPT = "phase1.pt"
PHASE2_BEST = "phase2_best.pt"
PHASE2_LAST = "phase2_last.pt"
TRAIN_LOG = "train_log.csv"


@dataclass
class EarlyStopConfig:
    window_epochs: int = 10
    slope_tol: float = 1e-4


@dataclass
class TrainingConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    max_epochs: int = 50
    momentum: float = 0.9
    dilation_radius: int = 10
    seg_threshold: float = losses.SEG_THRESHOLD
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    seed: int = 0
    phase: int = 1
    # False selects the control run: phase 2 supervises the decoder with plain reconstruction
    local_attention: bool = True
    dice_smooth: float = losses.DICE_SMOOTH

    def __post_init__(self):
        if isinstance(self.early_stop, dict):
            self.early_stop = EarlyStopConfig(**self.early_stop)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.early_stop.window_epochs < 2:
            raise ValueError("early_stop.window_epochs must be >= 2")
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be >= 0")
        if self.phase not in (1, 2):
            raise ValueError("phase must be 1 or 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainState:
    model: SynthModel
    phase: int = 1
    epoch: int = 0
    loss_history: list[dict] = field(default_factory=list)
    log_rows: list[dict] = field(default_factory=list)
    optimizer_state: dict | None = None
    best_val_dice: float = -1.0
    best_epoch: int = -1
    out_dir: Path | None = None
    stopped_early: bool = False


def set_deterministic(enabled: bool | None = None) -> bool:
    """Enable deterministic kernels; defaults to the ``COWSYNTH_DETERMINISTIC`` env var."""
    if enabled is None:
        enabled = os.environ.get(DETERMINISTIC_ENV, "0").lower() not in ("", "0", "false", "no")
    torch.use_deterministic_algorithms(bool(enabled))
    return bool(enabled)


class SliceData:
    """All slices of a set of cases held in memory."""

    def __init__(self, entries: list[CaseEntry]):
        if not entries:
            raise ValueError("empty case list")
        t2s, segs, self.case_ids, self.case_slices, self.spacings = [], [], [], [], []
        start = 0
        for e in entries:
            s = load_pair(e)
            t2s.append(s.t2.data.astype(np.float32))
            segs.append(s.seg.data.astype(np.float32))
            self.case_ids.append(e.id)
            self.spacings.append(s.t2.spacing)
            n = s.t2.data.shape[0]
            self.case_slices.append(slice(start, start + n))
            start += n
        self.t2 = np.concatenate(t2s)
        self.seg = np.concatenate(segs)
        self._maps: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.t2)

    @property
    def hw(self):
        return self.t2.shape[1:]

    def attention_maps(self, radius: int) -> np.ndarray:
        if radius not in self._maps:
            self._maps[radius] = (dilate_array(self.seg, radius) * self.t2).astype(np.float32)
        return self._maps[radius]


def early_stop_check(loss_history, window: int, tol: float) -> bool:
    """Stop when the least-squares slope of the last ``window`` losses exceeds ``-tol``."""
    if window < 2:
        raise ValueError("window must be >= 2")
    if len(loss_history) < window:
        return False
    y = np.asarray(loss_history[-window:], dtype=np.float64)
    x = np.arange(window, dtype=np.float64)
    x -= x.mean()
    slope = float((x * (y - y.mean())).sum() / (x * x).sum())
    return slope > -tol


def _batches(n: int, batch_size: int, seed: int, phase: int, epoch: int):
    order = np.random.default_rng([seed, phase, epoch]).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _optimizer(model: SynthModel, cfg: TrainingConfig, state_dict=None):
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)
    if state_dict is not None:
        opt.load_state_dict(state_dict)
    return opt


def _check_finite(value: torch.Tensor, what: str, epoch: int):
    if not torch.isfinite(value):
        raise FloatingPointError(f"non-finite {what} at epoch {epoch}: {value.item()}")


def validation_scores(model: SynthModel, data: SliceData, cfg: TrainingConfig, with_seg: bool = True):
    """Return (mean validation loss, mean per-case 3D Dice or NaN)."""
    recon, prob = predict_slices(model, data.t2)
    if not with_seg:
        return float(np.abs(recon - data.t2).mean()), float("nan")
    r, p = torch.from_numpy(recon), torch.from_numpy(prob)
    l_seg = losses.dice_loss(p, torch.from_numpy(data.seg), cfg.dice_smooth)
    if cfg.local_attention:
        gt_map = torch.from_numpy(data.attention_maps(cfg.dilation_radius))
        l_loc = losses.local_loss(r, p, gt_map, cfg.dilation_radius, cfg.seg_threshold)
    else:
        l_loc = losses.mae_loss(r, torch.from_numpy(data.t2))
    val_loss = losses.uncertainty_weighted_loss(l_seg, l_loc, model.log_var_seg, model.log_var_loc).item()
    pred = prob > cfg.seg_threshold
    dices = [dice_score(pred[sl], data.seg[sl] > 0.5) for sl in data.case_slices]
    return val_loss, float(np.mean(dices))


def _row(epoch, phase, report: losses.LossReport, val_loss, val_dice) -> dict:
    return {"epoch": epoch, "phase": phase, **report.as_dict(), "val_loss": val_loss, "val_dice": val_dice}


def write_log_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_COLUMNS})
    return path


def read_log_csv(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [
            {k: (int(v) if k in ("epoch", "phase") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def _run_epoch_phase1(model, opt, data: SliceData, cfg: TrainingConfig, epoch: int) -> losses.LossReport:
    model.train()
    total, n = 0.0, 0
    for idx in _batches(len(data), cfg.batch_size, cfg.seed, 1, epoch):
        x = torch.from_numpy(data.t2[idx])
        recon, _ = model(x)
        loss = losses.mae_loss(recon, x)
        _check_finite(loss, "phase-1 loss", epoch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        total += loss.item() * len(idx)
        n += len(idx)
    s1, s2 = sigma_squares(model)
    return losses.LossReport(l_recon=total / n, sigma1_sq=s1, sigma2_sq=s2)


def _run_epoch_phase2(model, opt, data: SliceData, cfg: TrainingConfig, epoch: int) -> losses.LossReport:
    model.train()
    sums = np.zeros(4)
    n = 0
    gt_maps = data.attention_maps(cfg.dilation_radius) if cfg.local_attention else None
    for idx in _batches(len(data), cfg.batch_size, cfg.seed, 2, epoch):
        x = torch.from_numpy(data.t2[idx])
        y = torch.from_numpy(data.seg[idx])
        recon, prob = model(x)
        l_seg = losses.dice_loss(prob, y, cfg.dice_smooth)
        if cfg.local_attention:
            l_loc = losses.local_loss(recon, prob, torch.from_numpy(gt_maps[idx]), cfg.dilation_radius, cfg.seg_threshold)
        else:
            l_loc = losses.mae_loss(recon, x)
        combined = losses.uncertainty_weighted_loss(l_seg, l_loc, model.log_var_seg, model.log_var_loc)
        _check_finite(combined, "phase-2 loss", epoch)
        opt.zero_grad(set_to_none=True)
        combined.backward()
        opt.step()
        with torch.no_grad():
            l_recon = losses.mae_loss(recon, x)
        sums += np.array([l_recon.item(), l_seg.item(), l_loc.item(), combined.item()]) * len(idx)
        n += len(idx)
    s1, s2 = sigma_squares(model)
    m = sums / n
    return losses.LossReport(float(m[0]), float(m[1]), float(m[2]), float(m[3]), s1, s2)


def train_phase1(
    model: SynthModel,
    train: list[CaseEntry] | SliceData,
    val: list[CaseEntry] | SliceData,
    cfg: TrainingConfig,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
) -> TrainState:
    """Autoencoder pre-training with the synthesis branch frozen.

    Stops at ``cfg.max_epochs`` or when the validation-loss slope flattens.
    Pass ``state`` to resume an interrupted run.
    """
    cfg.validate()
    train = train if isinstance(train, SliceData) else SliceData(train)
    val = val if isinstance(val, SliceData) else SliceData(val)
    state = state or TrainState(model, phase=1)
    model = state.model
    out_dir = Path(out_dir) if out_dir else state.out_dir
    state.out_dir = out_dir
    freeze_synthesis_branch(model, True)
    set_uncertainty_trainable(model, False)
    opt = _optimizer(model, cfg, state.optimizer_state)
    val_losses = [r["val_loss"] for r in state.loss_history]

    while state.epoch < cfg.max_epochs:
        report = _run_epoch_phase1(model, opt, train, cfg, state.epoch)
        val_loss, _ = validation_scores(model, val, cfg, with_seg=False)
        if not math.isfinite(val_loss):
            raise FloatingPointError(f"non-finite validation loss at epoch {state.epoch}")
        row = _row(state.epoch, 1, report, val_loss, float("nan"))
        state.loss_history.append(row)
        state.log_rows.append(row)
        state.epoch += 1
        val_losses.append(val_loss)
        log.info("phase 1 epoch %d: train L1 %.5f, val L1 %.5f", row["epoch"], report.l_recon, val_loss)
        if early_stop_check(val_losses, cfg.early_stop.window_epochs, cfg.early_stop.slope_tol):
            state.stopped_early = True
            log.info("phase 1 early stop after %d epochs", state.epoch)
            break

    state.optimizer_state = copy.deepcopy(opt.state_dict())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / PHASE1_CKPT, phase=1, epoch=state.epoch, seed=cfg.seed, training=cfg.to_dict())
        write_log_csv(state.log_rows, out_dir / TRAIN_LOG)
    return state


def start_phase2(state_or_checkpoint) -> TrainState:
    """Build a fresh phase-2 state from a phase-1 state or checkpoint path."""
    if isinstance(state_or_checkpoint, TrainState):
        src = state_or_checkpoint
        if src.phase != 1:
            raise ValueError("phase 2 must start from a phase-1 state")
        return TrainState(src.model, phase=2, log_rows=list(src.log_rows), out_dir=src.out_dir)
    path = Path(state_or_checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"phase-1 checkpoint not found: {path}")
    model, meta = load_checkpoint(path)
    if meta.get("phase") != 1:
        raise ValueError(f"{path} is not a phase-1 checkpoint")
    rows = []
    log_path = path.parent / TRAIN_LOG
    if log_path.exists():
        rows = [r for r in read_log_csv(log_path) if r["phase"] == 1]
    return TrainState(model, phase=2, log_rows=rows, out_dir=path.parent)


def train_phase2(
    state: TrainState,
    train: list[CaseEntry] | SliceData,
    val: list[CaseEntry] | SliceData,
    cfg: TrainingConfig,
    out_dir: str | Path | None = None,
) -> TrainState:
    """Joint multi-task training; keeps the best-validation-Dice checkpoint.

    ``state`` may be a phase-1 state (a new phase-2 state is started) or an
    unfinished phase-2 state to resume.
    """
    cfg.validate()
    if state.phase == 1:
        state = start_phase2(state)
    train = train if isinstance(train, SliceData) else SliceData(train)
    val = val if isinstance(val, SliceData) else SliceData(val)
    model = state.model
    out_dir = Path(out_dir) if out_dir else state.out_dir
    state.out_dir = out_dir
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    freeze_synthesis_branch(model, False)
    set_uncertainty_trainable(model, True)
    for p in model.parameters():
        p.requires_grad_(True)
    opt = _optimizer(model, cfg, state.optimizer_state)

    while state.epoch < cfg.max_epochs:
        report = _run_epoch_phase2(model, opt, train, cfg, state.epoch)
        val_loss, val_dice = validation_scores(model, val, cfg)
        if not math.isfinite(val_loss):
            raise FloatingPointError(f"non-finite validation loss at epoch {state.epoch}")
        row = _row(state.epoch, 2, report, val_loss, val_dice)
        state.loss_history.append(row)
        state.log_rows.append(row)
        log.info(
            "phase 2 epoch %d: dice loss %.4f, local %.5f, val dice %.4f, sigma^2 (%.4f, %.4f)",
            state.epoch, report.l_seg, report.l_loc, val_dice, report.sigma1_sq, report.sigma2_sq,
        )
        if val_dice > state.best_val_dice:
            state.best_val_dice, state.best_epoch = val_dice, state.epoch
            if out_dir is not None:
                save_checkpoint(model, out_dir / PHASE2_BEST, phase=2, epoch=state.epoch, seed=cfg.seed,
                                val_dice=val_dice, training=cfg.to_dict())
        state.epoch += 1

    state.optimizer_state = copy.deepcopy(opt.state_dict())
    if out_dir is not None:
        save_checkpoint(model, out_dir / PHASE2_LAST, phase=2, epoch=state.epoch, seed=cfg.seed,
                        best_val_dice=state.best_val_dice, training=cfg.to_dict())
        write_log_csv(state.log_rows, out_dir / TRAIN_LOG)
    return state


def save_train_state(state: TrainState, path: str | Path) -> Path:
    """Persist everything needed to resume: weights, optimizer, histories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "architecture": state.model.cfg.to_dict(),
            "model": state.model.state_dict(),
            "optimizer": state.optimizer_state,
            "phase": state.phase,
            "epoch": state.epoch,
            "loss_history": state.loss_history,
            "log_rows": state.log_rows,
            "best_val_dice": state.best_val_dice,
            "best_epoch": state.best_epoch,
        },
        path,
    )
    return path


def load_train_state(path: str | Path) -> TrainState:
    from .model import ArchitectureConfig

    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = SynthModel(ArchitectureConfig.from_dict(blob["architecture"]))
    model.load_state_dict(blob["model"])
    state = TrainState(
        model,
        phase=blob["phase"],
        epoch=blob["epoch"],
        loss_history=blob["loss_history"],
        log_rows=blob["log_rows"],
        optimizer_state=blob["optimizer"],
        best_val_dice=blob["best_val_dice"],
        best_epoch=blob["best_epoch"],
    )
    if state.phase == 1:
        freeze_synthesis_branch(model, True)
        set_uncertainty_trainable(model, False)
    return state


GRID_KEYS = ("batch_size", "learning_rate", "max_epochs", "momentum")


@dataclass
class GridResult:
    batch_size: int
    learning_rate: float
    max_epochs: int
    momentum: float
    val_dice: float


def grid_search(
    space: dict[str, list],
    train: list[CaseEntry] | SliceData,
    val: list[CaseEntry] | SliceData,
    arch,
    phase1_cfg: TrainingConfig,
    phase2_cfg: TrainingConfig,
    model_seed: int = 0,
    out_csv: str | Path | None = None,
) -> tuple[TrainingConfig, list[GridResult]]:
    """Train both phases for every grid point and rank by best validation Dice.

    Unlisted keys keep their value from ``phase2_cfg``. Grid points are visited
    in sorted order and ties go to the first point visited.
    """
    from .model import build_model

    grid = {k: sorted(space.get(k, [getattr(phase2_cfg, k)])) for k in GRID_KEYS}
    unknown = set(space) - set(GRID_KEYS)
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    points = list(itertools.product(*(grid[k] for k in GRID_KEYS)))
    if not points or any(len(v) == 0 for v in grid.values()):
        raise ValueError("empty hyperparameter grid")
    train = train if isinstance(train, SliceData) else SliceData(train)
    val = val if isinstance(val, SliceData) else SliceData(val)

    results: list[GridResult] = []
    best_i = 0
    for i, point in enumerate(points):
        overrides = dict(zip(GRID_KEYS, point))
        p1 = TrainingConfig.from_dict({**phase1_cfg.to_dict(), **overrides, "phase": 1})
        p2 = TrainingConfig.from_dict({**phase2_cfg.to_dict(), **overrides, "phase": 2})
        model = build_model(arch, model_seed)
        state = train_phase1(model, train, val, p1)
        state = train_phase2(state, train, val, p2)
        results.append(GridResult(**overrides, val_dice=state.best_val_dice))
        log.info("grid point %s: val dice %.4f", overrides, state.best_val_dice)
        if state.best_val_dice > results[best_i].val_dice:
            best_i = i
    best = results[best_i]
    best_cfg = TrainingConfig.from_dict({**phase2_cfg.to_dict(), **{k: getattr(best, k) for k in GRID_KEYS}})
    if out_csv is not None:
        with Path(out_csv).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*GRID_KEYS, "val_dice"])
            for r in results:
                w.writerow([r.batch_size, r.learning_rate, r.max_epochs, r.momentum, repr(r.val_dice)])
    return best_cfg, results
