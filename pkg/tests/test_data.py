import gzip
import json

import nibabel as nib
import numpy as np
import pytest

from cowsynth.data import (
    BinaryMask,
    PairedSample,
    Volume,
    build_manifest,
    load_mask,
    load_volume,
    read_manifest,
    save_mask,
    save_volume,
    write_manifest,
)


def _touch_case(d, case, seg=True):
    v = Volume(np.zeros((1, 16, 16), np.float32), (1, 1, 1), case)
    save_volume(v, d / f"{case}_t2.nii.gz")
    if seg:
        save_mask(BinaryMask(np.zeros((1, 16, 16), np.uint8)), d / f"{case}_seg.nii.gz")


def test_volume_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(rng.random((16, 96, 96)).astype(np.float32), (2.0, 0.9, 1.1), "case_a")
    p = save_volume(v, tmp_path / "case_a_t2.nii.gz")
    back = load_volume(p)
    assert back.shape == (16, 96, 96)
    np.testing.assert_array_equal(back.data, v.data)
    assert back.spacing == pytest.approx(v.spacing, abs=0)
    assert back.id == "case_a"


def test_zero_volume_round_trip_uncompressed(tmp_path):
    v = Volume(np.zeros((3, 4, 5), np.float32))
    back = load_volume(save_volume(v, tmp_path / "z.nii"))
    assert back.shape == (3, 4, 5) and not back.data.any()


def test_non_3d_payload(tmp_path):
    p = tmp_path / "flat.nii.gz"
    nib.save(nib.Nifti1Image(np.zeros((8, 8), np.float32), np.eye(4)), str(p))
    with pytest.raises(ValueError, match="non-3D payload"):
        load_volume(p)


def test_missing_and_malformed(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.nii.gz")
    bad = tmp_path / "bad.nii.gz"
    with gzip.open(bad, "wb") as fh:
        fh.write(b"not a nifti header")
    with pytest.raises(ValueError, match="malformed"):
        load_volume(bad)


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_volume(Volume(np.zeros((1, 2, 2), np.float32)), tmp_path / "missing_dir" / "x.nii.gz")


def test_mask_binarised_on_load(tmp_path):
    p = tmp_path / "m_seg.nii.gz"
    save_volume(Volume(np.array([[[0.2, 0.6], [1.0, 0.5]]], np.float32)), p)
    m = load_mask(p)
    np.testing.assert_array_equal(m.data, [[[0, 1], [1, 0]]])
    assert m.data.dtype == np.uint8


def test_type_invariants():
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4), np.float32))
    with pytest.raises(ValueError):
        Volume(np.array([[[np.inf]]], np.float32))
    with pytest.raises(ValueError):
        BinaryMask(np.full((1, 2, 2), 2))
    with pytest.raises(ValueError):
        PairedSample(Volume(np.zeros((1, 2, 2), np.float32)), BinaryMask(np.zeros((1, 2, 3), np.uint8)))


def test_manifest_181_case_split(tmp_path):
    for i in range(181):
        _touch_case(tmp_path, f"c{i:03d}")
    fracs = (150 / 181, 20 / 181, 11 / 181)
    m = build_manifest(tmp_path, fracs, seed=7)
    assert m.counts() == {"train": 150, "val": 20, "test": 11}
    again = build_manifest(tmp_path, fracs, seed=7)
    assert again == m
    ids = [e.id for e in m.entries]
    assert len(set(ids)) == 181
    other = build_manifest(tmp_path, fracs, seed=8)
    assert [e.split for e in other.entries] != [e.split for e in m.entries]


def test_manifest_json_round_trip(tmp_path):
    for i in range(5):
        _touch_case(tmp_path, f"c{i}")
    m = build_manifest(tmp_path, (0.6, 0.2, 0.2), seed=1)
    path = write_manifest(m, tmp_path / "manifest.json")
    doc = json.loads(path.read_text())
    assert set(doc) >= {"cases", "seed"}
    assert set(doc["cases"][0]) == {"id", "t2", "seg", "split"}
    back = read_manifest(path)
    assert [(e.id, e.split) for e in back.entries] == [(e.id, e.split) for e in m.entries]
    assert back.seed == 1


def test_manifest_errors(tmp_path):
    with pytest.raises(ValueError):
        build_manifest(tmp_path)
    _touch_case(tmp_path, "ok")
    _touch_case(tmp_path, "lonely", seg=False)
    with pytest.raises(ValueError, match="lonely"):
        build_manifest(tmp_path)


def test_manifest_missing_file_at_load(tmp_path):
    _touch_case(tmp_path, "a")
    _touch_case(tmp_path, "b")
    path = write_manifest(build_manifest(tmp_path, (1, 0, 0)), tmp_path / "manifest.json")
    (tmp_path / "b_seg.nii.gz").unlink()
    with pytest.raises(FileNotFoundError, match="b"):
        read_manifest(path)
