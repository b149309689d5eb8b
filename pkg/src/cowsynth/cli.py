"""Command-line entry point: ``cowsynth <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
Set ``COWSYNTH_DETERMINISTIC=1`` for deterministic kernels.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .data import (
    MANIFEST_NAME,
    build_manifest,
    load_mask,
    load_volume,
    read_manifest,
    save_mask,
    save_volume,
    write_manifest,
)
from .model import load_checkpoint
from .phantom import PhantomConfig, generate_dataset
from .preprocess import make_attention_map, preprocess_pair
from .training import (
    GRID_KEYS,
    PHASE1_CKPT,
    PHASE2_BEST,
    TRAIN_LOG,
    grid_search,
    read_log_csv,
    set_deterministic,
)

log = logging.getLogger("cowsynth")


class UsageError(Exception):
    pass


def _load_run_config(args) -> ex.RunConfig:
    cfg = ex.RunConfig.load(args.config) if getattr(args, "config", None) else ex.RunConfig()
    overrides = {
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "lr", None),
        "max_epochs": getattr(args, "epochs", None),
        "momentum": getattr(args, "momentum", None),
        "dilation_radius": getattr(args, "radius", None),
        "seed": getattr(args, "seed", None),
    }
    for key, value in overrides.items():
        if value is not None:
            for phase in (cfg.phase1, cfg.phase2):
                setattr(phase, key, value)
    if getattr(args, "manifest", None):
        cfg.manifest = str(args.manifest)
    if getattr(args, "out", None):
        cfg.out_dir = str(args.out)
    return cfg


def _manifest(cfg: ex.RunConfig):
    if not cfg.manifest:
        raise UsageError("a manifest is required (--manifest or 'manifest' in the config)")
    return read_manifest(cfg.manifest)


def cmd_synth_data(args) -> int:
    cfg = ex.RunConfig.load(args.config).phantom if args.config else PhantomConfig()
    cfg.seed = args.seed
    if args.shape:
        cfg.shape = tuple(args.shape)
    manifest = generate_dataset(cfg, args.n, args.out)
    path = Path(args.out) / MANIFEST_NAME
    counts = manifest.counts()
    print(f"{path}  (train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


def cmd_preprocess(args) -> int:
    src, dst = Path(args.input), Path(args.out)
    dst.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(src, seed=args.seed)
    for e in manifest.entries:
        t2, seg = preprocess_pair(load_volume(e.t2), load_mask(e.seg), tuple(args.crop) if args.crop else None)
        save_volume(t2, dst / f"{e.id}_t2.nii.gz")
        save_mask(seg, dst / f"{e.id}_seg.nii.gz")
        if args.radius is not None:
            amap = make_attention_map(t2, seg, args.radius)
            from .data import Volume

            save_volume(Volume(amap.data, t2.spacing, e.id), dst / f"{e.id}_attn_r{args.radius}.nii.gz")
    out_manifest = build_manifest(dst, manifest.split_fracs, args.seed)
    print(write_manifest(out_manifest, dst / MANIFEST_NAME))
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if not cfg.out_dir:
        raise UsageError("an output directory is required (--out)")
    if args.phase == 2:
        resume = args.resume or cfg.checkpoint
        if not resume:
            raise UsageError(f"phase 2 needs the phase-1 checkpoint: pass --resume {Path(cfg.out_dir) / PHASE1_CKPT}")
        if not Path(resume).exists():
            raise FileNotFoundError(f"phase-1 checkpoint not found: {resume}")
        cfg.checkpoint = str(resume)
    state = ex.run_training(cfg, _manifest(cfg), cfg.out_dir, phases=(args.phase,))
    out = Path(cfg.out_dir)
    ckpt = out / (PHASE1_CKPT if args.phase == 1 else PHASE2_BEST)
    print(f"checkpoint: {ckpt}")
    print(f"log: {out / TRAIN_LOG}")
    if args.phase == 2:
        print(f"best validation Dice {state.best_val_dice:.4f} at epoch {state.best_epoch}")
    return 0


def cmd_evaluate(args) -> int:
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    manifest = read_manifest(args.manifest)
    entries = manifest.split(args.split)
    if not entries:
        raise ValueError(f"the {args.split} split is empty")
    records, summary = ex.evaluate_model(args.checkpoint, entries, args.threshold, use_spacing=args.mm)
    cases, summ = ex.write_evaluation(records, summary, args.out)
    print(summary.format_row())
    print(f"per-case: {cases}\nsummary: {summ}")
    return 0


def cmd_infer(args) -> int:
    ex.infer_volume(args.checkpoint, args.input, args.output, args.save_prob, args.threshold)
    print(args.output)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    radii = [int(r) for r in args.radii.split(",") if r.strip()]
    if not radii:
        raise UsageError("empty radius list")
    rows = ex.ablate_dilation(cfg, _manifest(cfg), args.out, radii, include_control=not args.no_control,
                              phase1_checkpoint=args.phase1)
    for r in rows:
        cov = "NA" if r.coverage is None else f"{100 * r.coverage:.1f}%"
        print(f"radius {r.radius:>4}: Dice {r.dice:.3f} ± {r.dice_ci:.3f}  coverage {cov}")
    return 0


def cmd_report(args) -> int:
    from . import report

    run = Path(args.run)
    log_path = run / TRAIN_LOG
    if not log_path.exists():
        raise FileNotFoundError(f"no training log in {run}")
    rows = read_log_csv(log_path)
    out = Path(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = [report.plot_loss_curves(rows, p, out / f"loss_phase{p}.png") for p in (1, 2)]
    sigma = report.plot_sigma_trajectory(rows, out / "sigma.png")
    if sigma is None:
        print("notice: no phase-2 sigma log, sigma plot skipped")
    written.append(sigma)

    ckpt = run / PHASE2_BEST
    manifest_path = args.manifest or _run_manifest(run)
    if ckpt.exists() and manifest_path:
        written.append(_montage(ckpt, read_manifest(manifest_path), out / "montage.png"))
    else:
        print("notice: no phase-2 checkpoint or manifest, montage skipped")
    for p in written:
        if p is not None:
            print(p)
    return 0


def _run_manifest(run: Path):
    cfg_path = run / ex.RUN_CONFIG_NAME
    if cfg_path.exists():
        return json.loads(cfg_path.read_text()).get("manifest")
    return None


def _montage(ckpt: Path, manifest, path: Path) -> Path:
    from . import report
    from .metrics import dice_score

    model, meta = load_checkpoint(ckpt)
    threshold = meta.get("training", {}).get("seg_threshold", 0.5)
    radius = meta.get("training", {}).get("dilation_radius", 10)
    entries = {e.id: e for e in manifest.split("test") or manifest.entries}
    preds, dices = {}, {}
    for cid, e in sorted(entries.items()):
        t2, seg = load_volume(e.t2), load_mask(e.seg)
        pred, _ = ex.predict_case(model, t2.data, threshold)
        preds[cid] = (t2, seg, pred)
        dices[cid] = dice_score(pred, seg.data)
    panels = {}
    for label, cid in report.pick_cases(dices).items():
        t2, seg, pred = preds[cid]
        z = int(np.argmax(seg.data.sum(axis=(1, 2))))
        amap = make_attention_map(t2, seg, radius).data
        panels[f"{label}: {cid} (Dice {dices[cid]:.2f})"] = {
            "T2": t2.data[z], "ground truth": seg.data[z], "synthesised": pred[z], "attention map": amap[z],
        }
    return report.plot_montage(panels, path)


def cmd_grid_search(args) -> int:
    cfg = _load_run_config(args)
    space = json.loads(Path(args.grid).read_text())
    unknown = set(space) - set(GRID_KEYS)
    if unknown:
        raise UsageError(f"unknown grid keys {sorted(unknown)}; allowed: {', '.join(GRID_KEYS)}")
    manifest = _manifest(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / ex.RUN_CONFIG_NAME)
    best, results = grid_search(space, manifest.split("train"), manifest.split("val"), cfg.architecture,
                                cfg.phase1, cfg.phase2, cfg.model_seed, out / "grid_results.csv")
    (out / "best_config.json").write_text(json.dumps(best.to_dict(), indent=2, sort_keys=True))
    print(f"best: {', '.join(f'{k}={getattr(best, k)}' for k in GRID_KEYS)}")
    print(out / "grid_results.csv")
    return 0


def _add_training_flags(p):
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--manifest", help="dataset manifest JSON")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--radius", type=int, help="dilation radius of the local attention mask")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cowsynth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--shape", type=int, nargs=3, metavar=("D", "H", "W"))
    p.add_argument("--config", help="run configuration JSON (phantom section)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("preprocess", help="crop and normalise a directory of case pairs")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--radius", type=int, help="also write attention maps at this radius")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="run training phase 1 or 2")
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    p.add_argument("--out", help="run directory")
    p.add_argument("--resume", help="phase-1 checkpoint (required for phase 2)")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Dice / HD95 on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--mm", action="store_true", help="report HD95 in mm instead of voxels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="synthesise a vessel mask from a T2 volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--save-prob", help="also write the probability volume here")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate-dilation", help="train/evaluate across dilation radii")
    p.add_argument("--radii", default="0,5,10,15,20")
    p.add_argument("--no-control", action="store_true", help="skip the no-local-attention control")
    p.add_argument("--phase1", help="reuse this phase-1 checkpoint")
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="plots and montage for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("grid-search", help="grid search over batch size, lr, epochs, momentum")
    p.add_argument("--grid", required=True, help="JSON mapping hyperparameter -> list of values")
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_grid_search)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    set_deterministic()
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
