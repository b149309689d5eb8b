"""Acceptance suite: one PASS/FAIL line per criterion in the terminal summary.

Criteria 5 and 6 share one desk-scale training session (about half an hour on
a single CPU core).
"""

import json
import math
import time

import numpy as np
import pytest
import torch
from test_losses import finite_difference_grad
from test_metrics import brute_boundary, brute_hd95, random_small_mask
from test_preprocess import brute_dilate

from cowsynth import losses
from cowsynth.data import read_manifest
from cowsynth.experiments import RunConfig, ablate_dilation, dilation_coverage, evaluate_model, run_training
from cowsynth.metrics import dice_score, hd95
from cowsynth.model import (
    ArchitectureConfig,
    build_model,
    freeze_synthesis_branch,
    parameter_count,
    full_scale_config,
    set_uncertainty_trainable,
)
from cowsynth.phantom import PhantomConfig, generate_dataset
from cowsynth.preprocess import dilate_array
from cowsynth.training import TRAIN_LOG, set_deterministic

# desk-scale settings shared by criteria 5 and 6
N_PHANTOMS = 150
PHANTOM_SEED = 7
DESK_PHASE1_EPOCHS = 2
DESK_PHASE2_EPOCHS = 4
COVERAGE_RADII = (0, 5, 10, 15, 20)

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, checks: dict[str, bool], detail: str = ""):
    failed = [k for k, ok in checks.items() if not ok]
    RESULTS[n] = (not failed, detail if not failed else f"failed: {', '.join(failed)}; {detail}")
    assert not failed, RESULTS[n][1]


def summary_lines():
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        yield f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"


# --- 1: loss math -----------------------------------------------------------


def test_criterion_1_math():
    t0 = time.perf_counter()
    c = {}
    f = torch.tensor
    c["dice self"] = float(losses.dice_loss(f([1.0, 0, 1, 1]), f([1.0, 0, 1, 1]), 0.0)) == pytest.approx(0.0)
    c["dice disjoint"] = float(losses.dice_loss(f([1.0, 1, 0, 0]), f([0.0, 0, 1, 1]), 0.0)) == pytest.approx(1.0)
    c["dice 2/3"] = 1 - float(losses.dice_loss(f([1.0, 1, 0, 0]), f([1.0, 0, 0, 0]), 0.0)) == pytest.approx(2 / 3)
    c["metric dice"] = dice_score(np.array([1, 1, 0, 0]), np.array([1, 0, 0, 0])) == pytest.approx(2 / 3)
    a = torch.rand(4, 6)
    c["mae self"] = float(losses.mae_loss(a, a)) == 0.0
    c["mae const"] = float(losses.mae_loss(torch.zeros(3), torch.full((3,), 0.25))) == pytest.approx(0.25)
    c["weighted 0.3"] = float(losses.uncertainty_weighted_loss(0.4, 0.2, 0.0, 0.0)) == pytest.approx(0.3, abs=1e-7)
    c["weighted 0.5466"] = float(losses.uncertainty_weighted_loss(0.4, 0.2, math.log(2), 0.0)) == pytest.approx(
        0.5466, abs=1e-4)

    ok = True
    for point in [(0.0, 0.0), (0.5, -1.0), (-1.5, 2.0)]:
        s = torch.tensor(point, dtype=torch.float64, requires_grad=True)
        losses.uncertainty_weighted_loss(torch.tensor(0.37, dtype=torch.float64),
                                         torch.tensor(0.05, dtype=torch.float64), s[0], s[1]).backward()
        fd = finite_difference_grad(
            lambda x: 0.37 / (2 * math.exp(x[0])) + 0.05 / (2 * math.exp(x[1])) + 0.5 * (x[0] + x[1]),
            np.array(point))
        ok &= bool(np.allclose(s.grad.numpy(), fd, rtol=1e-4, atol=0))
    c["fd gradient"] = ok

    s = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.SGD([s], lr=0.2)
    for _ in range(2000):
        opt.zero_grad()
        losses.uncertainty_weighted_loss(0.4, 0.03, s[0], s[1]).backward()
        opt.step()
    c["argmin sigma^2 = L"] = bool(np.allclose(torch.exp(s).detach().numpy(), [0.4, 0.03], rtol=0.01))
    elapsed = time.perf_counter() - t0
    c["runtime < 60 s"] = elapsed < 60
    record(1, c, f"{elapsed:.2f} s")


# --- 2: morphology ------------------------------------------------------------


def test_criterion_2_morphology():
    rng = np.random.default_rng(2)
    c = {"brute force": True, "containment": True, "monotone": True, "composition": True}
    for _ in range(60):
        m = (rng.random((1, 16, 16)) < rng.uniform(0.01, 0.15)).astype(np.uint8)
        for r in range(4):
            d = dilate_array(m, r)
            c["brute force"] &= bool(np.array_equal(d[0], brute_dilate(m[0], r)))
            c["containment"] &= bool(np.all(d >= m))
            if r:
                c["monotone"] &= bool(np.all(d >= dilate_array(m, r - 1)))
            for r2 in range(4):
                c["composition"] &= bool(np.array_equal(dilate_array(d, r2), dilate_array(m, r + r2)))
    record(2, c, "60 random 16x16 masks, r <= 3")


# --- 3: HD95 ------------------------------------------------------------------


def test_criterion_3_hd95():
    rng = np.random.default_rng(3)
    worst = 0.0
    doubled = True
    for _ in range(200):
        a, b = random_small_mask(rng), random_small_mask(rng)
        assert len(brute_boundary(a)) <= 50 and len(brute_boundary(b)) <= 50
        worst = max(worst, abs(hd95(a, b) - brute_hd95(a, b)))
        sp = tuple(rng.uniform(0.5, 2.0, 3))
        doubled &= hd95(a, b, tuple(2 * s for s in sp)) == 2 * hd95(a, b, sp)
    record(3, {"oracle 1e-9": worst <= 1e-9, "spacing doubling exact": doubled}, f"max |diff| {worst:.1e}")


# --- 4: architecture ----------------------------------------------------------


def test_criterion_4_architecture():
    c = {}
    cfg = ArchitectureConfig(input_hw=(32, 48), base_channels=4)
    m = build_model(cfg, seed=0)
    x = torch.rand(3, 32, 48)
    recon, seg = m(x)
    c["output shapes"] = recon.shape == seg.shape == x.shape

    freeze_synthesis_branch(m, True)
    set_uncertainty_trainable(m, False)
    before = {k: v.clone() for k, v in m.synthesis.state_dict().items()}
    opt = torch.optim.SGD([p for p in m.parameters() if p.requires_grad], lr=0.1, momentum=0.9)
    for _ in range(3):
        opt.zero_grad()
        losses.mae_loss(m(x)[0], x).backward()
        opt.step()
    c["frozen bit-unchanged"] = all(torch.equal(v, before[k]) for k, v in m.synthesis.state_dict().items())

    m = build_model(cfg, seed=1)
    recon, seg = m(x)
    m.zero_grad()
    losses.local_loss(recon, seg, torch.rand_like(x), radius=3).backward()
    c["local loss no synthesis grad"] = all(p.grad is None or not p.grad.any() for p in m.synthesis.parameters())

    n = parameter_count(build_model(full_scale_config()))
    c["full-scale count within 15%"] = abs(n - 26.7e6) <= 0.15 * 26.7e6
    record(4, c, f"full-scale parameters {n / 1e6:.2f}M")


# --- 5 and 6: desk-scale training -------------------------------------------


@pytest.fixture(scope="module")
def desk_ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    manifest = generate_dataset(PhantomConfig(seed=PHANTOM_SEED), N_PHANTOMS, root / "data")
    cfg = RunConfig()
    cfg.phase1.max_epochs = DESK_PHASE1_EPOCHS
    cfg.phase2.max_epochs = DESK_PHASE2_EPOCHS
    cfg.phase2.dilation_radius = 10
    t0 = time.perf_counter()
    rows = ablate_dilation(cfg, manifest, root / "ablation", radii=(0, 10), include_control=True)
    return root, manifest, {r.radius: r for r in rows}, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_5_end_to_end(desk_ablation):
    root, manifest, rows, elapsed = desk_ablation
    r10 = rows["10"]
    cases = (root / "ablation" / "radius_10" / "cases.csv").read_text().splitlines()[1:]
    finite = [c.split(",")[2] != "" and math.isfinite(float(c.split(",")[2])) for c in cases]
    frac = sum(finite) / len(finite)
    c = {
        "test Dice >= 0.70": r10.dice >= 0.70,
        "hd95 finite >= 90%": frac >= 0.90,
        "test split size": len(cases) == len(manifest.split("test")),
    }
    record(5, c, f"Dice {r10.dice:.3f} ± {r10.dice_ci:.3f}, hd95 finite {100 * frac:.0f}%, "
                 f"{len(cases)} test cases, ablation wall time {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_6_ablation_trend(desk_ablation):
    root, manifest, rows, _ = desk_ablation
    test = manifest.split("test")
    cov = [dilation_coverage(test, r) for r in COVERAGE_RADII]
    c = {
        "Dice(10) > Dice(0)": rows["10"].dice > rows["0"].dice,
        "Dice(10) > Dice(none)": rows["10"].dice > rows["none"].dice,
        "coverage nondecreasing": all(b >= a for a, b in zip(cov, cov[1:])),
    }
    detail = ", ".join(f"{k}: {rows[k].dice:.3f}" for k in ("10", "0", "none"))
    detail += "; coverage " + " ".join(f"{100 * v:.1f}%" for v in cov)
    record(6, c, detail)


# --- 7: reproducibility -------------------------------------------------------


def _small_run(out, manifest):
    cfg = RunConfig(architecture=ArchitectureConfig(input_hw=(32, 32), base_channels=4))
    for p in (cfg.phase1, cfg.phase2):
        p.max_epochs, p.batch_size, p.dilation_radius = 2, 4, 3
    run_training(cfg, manifest, out)
    _, summary = evaluate_model(out / "phase2_best.pt", manifest.split("test"))
    return (out / TRAIN_LOG).read_bytes(), json.dumps(summary.__dict__, sort_keys=True)


def test_criterion_7_reproducibility(tmp_path):
    set_deterministic(True)
    try:
        data = tmp_path / "data"
        generate_dataset(PhantomConfig(shape=(4, 32, 32), seed=9), 8, data, split_fracs=(0.5, 0.25, 0.25))
        manifest = read_manifest(data / "manifest.json")
        log_a, sum_a = _small_run(tmp_path / "a", manifest)
        log_b, sum_b = _small_run(tmp_path / "b", manifest)
    finally:
        set_deterministic(False)
    record(7, {"identical log CSV": log_a == log_b, "identical summary": sum_a == sum_b},
           f"log {len(log_a)} bytes")
