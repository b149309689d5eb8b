"""Volumes, masks, NIfTI I/O and dataset manifests.

Arrays are held as ``(slices, height, width)``. On disk the NIfTI axes are
``(x=width, y=height, z=slice)`` so that slices run along the scanner z-axis.

Case files follow ``<case>_t2.nii[.gz]`` / ``<case>_seg.nii[.gz]`` in one
directory.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import nibabel as nib
import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_FRACS = (150 / 181, 20 / 181, 11 / 181)
MANIFEST_NAME = "manifest.json"
_CASE_RE = re.compile(r"^(?P<case>.+)_(?P<kind>t2|seg)\.nii(\.gz)?$")


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"volume {self.id!r} contains NaN or Inf")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class BinaryMask:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {data.shape}")
        if data.dtype != np.uint8:
            if not np.isin(data, (0, 1)).all():
                raise ValueError("mask values must be exactly 0 or 1")
            data = data.astype(np.uint8)
        self.data = data
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class PairedSample:
    t2: Volume
    seg: BinaryMask
    split_tag: str = "train"

    def __post_init__(self):
        if self.t2.shape != self.seg.shape:
            raise ValueError(f"t2 shape {self.t2.shape} != seg shape {self.seg.shape}")
        if not np.allclose(self.t2.spacing, self.seg.spacing):
            raise ValueError(f"t2 spacing {self.t2.spacing} != seg spacing {self.seg.spacing}")
        if self.split_tag not in SPLITS:
            raise ValueError(f"unknown split tag {self.split_tag!r}")

    @property
    def id(self) -> str:
        return self.t2.id


@dataclass(frozen=True)
class CaseEntry:
    id: str
    t2: Path
    seg: Path
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[CaseEntry, ...]
    seed: int = 0
    split_fracs: tuple[float, float, float] = field(default=DEFAULT_SPLIT_FRACS)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate case ids in manifest")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"case {e.id}: unknown split {e.split!r}")

    def split(self, tag: str) -> list[CaseEntry]:
        return [e for e in self.entries if e.split == tag]

    def counts(self) -> dict[str, int]:
        return {tag: len(self.split(tag)) for tag in SPLITS}

    def to_json(self, root: Path | None = None) -> dict:
        def rel(p: Path) -> str:
            if root is not None:
                try:
                    return str(Path(p).resolve().relative_to(Path(root).resolve()))
                except ValueError:
                    pass
            return str(p)

        return {
            "cases": [{"id": e.id, "t2": rel(e.t2), "seg": rel(e.seg), "split": e.split} for e in self.entries],
            "seed": self.seed,
            "split_fracs": list(self.split_fracs),
        }


def case_id_from_path(path: str | Path) -> str:
    name = Path(path).name
    m = _CASE_RE.match(name)
    if m:
        return m.group("case")
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return Path(name).stem


def _read_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        img = nib.load(str(path))
        if not isinstance(img, (nib.Nifti1Image, nib.Nifti2Image)):
            raise ValueError(f"{path} is not a NIfTI image")
        arr = np.asanyarray(img.dataobj)
        zooms = img.header.get_zooms()
    except (nib.filebasedimages.ImageFileError, EOFError, OSError) as exc:
        raise ValueError(f"malformed NIfTI header in {path}: {exc}") from exc
    while arr.ndim > 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise ValueError(f"non-3D payload in {path}: shape {arr.shape}")
    # NIfTI (x, y, z) -> (slice, row, col)
    data = np.ascontiguousarray(np.transpose(arr, (2, 1, 0)))
    # header stores float32; the shortest float32 repr recovers e.g. 0.9 exactly
    spacing = tuple(float(str(np.float32(zooms[i]))) for i in (2, 1, 0))
    return data, spacing


def _write_nifti(data: np.ndarray, spacing, path: str | Path) -> Path:
    path = Path(path)
    arr = np.transpose(data, (2, 1, 0))
    img = nib.Nifti1Image(arr, np.diag([spacing[2], spacing[1], spacing[0], 1.0]))
    img.header.set_zooms((spacing[2], spacing[1], spacing[0]))
    img.header.set_xyzt_units("mm")
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc
    return path


def load_volume(path: str | Path) -> Volume:
    data, spacing = _read_nifti(path)
    return Volume(data.astype(np.float32, copy=False), spacing, case_id_from_path(path))


def save_volume(v: Volume, path: str | Path) -> Path:
    return _write_nifti(np.asarray(v.data, dtype=np.float32), v.spacing, path)


def load_mask(path: str | Path, threshold: float = 0.5) -> BinaryMask:
    """Load a segmentation and binarise it with ``value > threshold``."""
    data, spacing = _read_nifti(path)
    return BinaryMask((data > threshold).astype(np.uint8), spacing, case_id_from_path(path))


def save_mask(m: BinaryMask, path: str | Path) -> Path:
    return _write_nifti(np.asarray(m.data, dtype=np.uint8), m.spacing, path)


def load_pair(entry: CaseEntry) -> PairedSample:
    t2 = load_volume(entry.t2)
    seg = load_mask(entry.seg)
    t2.id = seg.id = entry.id
    return PairedSample(t2, seg, entry.split)


def _split_sizes(n: int, fracs) -> tuple[int, int, int]:
    fracs = tuple(float(f) for f in fracs)
    if len(fracs) != 3 or any(f < 0 for f in fracs) or sum(fracs) <= 0:
        raise ValueError(f"split fractions must be three non-negative numbers, got {fracs}")
    total = sum(fracs)
    n_train = int(round(n * fracs[0] / total))
    n_val = int(round(n * fracs[1] / total))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def build_manifest(data_dir: str | Path, split_fracs=DEFAULT_SPLIT_FRACS, seed: int = 0) -> DatasetManifest:
    """Pair ``*_t2`` / ``*_seg`` files in ``data_dir`` and assign splits.

    Cases are sorted by id and shuffled with ``seed``; the first block of the
    permutation is train, then val, then test.
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"not a directory: {data_dir}")
    found: dict[str, dict[str, Path]] = {}
    for p in sorted(data_dir.iterdir()):
        m = _CASE_RE.match(p.name)
        if m:
            found.setdefault(m.group("case"), {})[m.group("kind")] = p
    if not found:
        raise ValueError(f"no <case>_t2 / <case>_seg NIfTI files in {data_dir}")
    for case, kinds in sorted(found.items()):
        missing = {"t2", "seg"} - kinds.keys()
        if missing:
            raise ValueError(f"case {case}: missing {'/'.join(sorted(missing))} file")

    ids = sorted(found)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train, n_val, _ = _split_sizes(len(ids), split_fracs)
    entries = []
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        case = ids[idx]
        entries.append(CaseEntry(case, found[case]["t2"], found[case]["seg"], split))
    entries.sort(key=lambda e: e.id)
    return DatasetManifest(tuple(entries), seed, tuple(float(f) for f in split_fracs))


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_json(root=path.parent), indent=2))
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = []
    for c in doc["cases"]:
        t2, seg = (Path(c[k]) if Path(c[k]).is_absolute() else path.parent / c[k] for k in ("t2", "seg"))
        for p in (t2, seg):
            if not p.exists():
                raise FileNotFoundError(f"case {c['id']}: referenced file missing: {p}")
        entries.append(CaseEntry(c["id"], t2, seg, c["split"]))
    fracs = tuple(doc.get("split_fracs", DEFAULT_SPLIT_FRACS))
    return DatasetManifest(tuple(entries), int(doc.get("seed", 0)), fracs)
