import hashlib

import numpy as np
import pytest
import torch

from cowsynth.data import read_manifest
from cowsynth.metrics import dice_score
from cowsynth.model import ArchitectureConfig, build_model
from cowsynth.phantom import PhantomConfig, _background, _case_rng, generate_dataset, generate_phantom, render_phantom

CFG = PhantomConfig(seed=11)


def test_deterministic():
    a, b = generate_phantom(CFG, 3), generate_phantom(CFG, 3)
    np.testing.assert_array_equal(a.t2.data, b.t2.data)
    np.testing.assert_array_equal(a.seg.data, b.seg.data)
    c = generate_phantom(CFG, 4)
    assert not np.array_equal(a.seg.data, c.seg.data)


def test_shape_range_and_model_compatibility():
    s = generate_phantom(CFG, 0)
    assert s.t2.shape == s.seg.shape == CFG.shape
    assert s.t2.data.min() == 0.0 and s.t2.data.max() == pytest.approx(1.0)
    model = build_model(ArchitectureConfig(input_hw=CFG.shape[1:]))
    model._check_input(torch.zeros((1, 1, *CFG.shape[1:])))


def test_foreground_fraction_and_darkness_over_many_seeds():
    for seed in range(100):
        s = generate_phantom(PhantomConfig(seed=seed, shape=(8, 64, 64)), 0)
        seg = s.seg.data.astype(bool)
        assert 0 < seg.mean() < 0.05
        assert s.t2.data[seg].mean() < s.t2.data[~seg].mean()


def test_background_range():
    bg = _background(np.random.default_rng(0), (4, 32, 32))
    assert bg.min() == pytest.approx(0.3) and bg.max() == pytest.approx(0.8)


def test_seg_within_darkened_voxels():
    for i in range(5):
        layers = render_phantom(CFG, i)
        seg = layers.seg.astype(bool)
        darkened = layers.clean < layers.background
        assert np.all(darkened[seg])


def test_threshold_classifier_is_informative_but_imperfect():
    dices = []
    for i in range(6):
        s = generate_phantom(CFG, i)
        seg = s.seg.data.astype(bool)
        dices.append(max(dice_score(s.t2.data < t, seg) for t in np.linspace(0.05, 0.6, 23)))
    assert 0.0 < np.mean(dices) < 0.70


def test_degenerate_and_invalid_configs():
    with pytest.raises(ValueError):
        PhantomConfig(n_vessels=(0, 0), vessel_radius=(0.0, 0.0)).validate()
    with pytest.raises(ValueError):
        PhantomConfig(shape=(4, 90, 96)).validate()
    with pytest.raises(ValueError):
        PhantomConfig(void_contrast=0.1, noise_sigma=0.2).validate()


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_generate_dataset(tmp_path):
    cfg = PhantomConfig(seed=5, shape=(4, 32, 32))
    m = generate_dataset(cfg, 6, tmp_path / "a")
    files = sorted(p.name for p in (tmp_path / "a").glob("*.nii.gz"))
    assert len(files) == 12 and len(m.entries) == 6
    assert read_manifest(tmp_path / "a" / "manifest.json").counts() == m.counts()
    generate_dataset(cfg, 6, tmp_path / "b")
    for name in files:
        assert _digest(tmp_path / "a" / name) == _digest(tmp_path / "b" / name)
    with pytest.raises(ValueError):
        generate_dataset(cfg, 0, tmp_path / "c")
