"""On-disk acquisition container, in-memory volume types, and label coding.

An acquisition lives in its own directory:

    meta.json        dims, channel names, dtype, grade, id, format version,
                     per-array manifest (file, shape, sha256) and a digest of
                     the manifest itself
    flow.raw         (X, Y, Z) float32 little-endian, x-major then y then z
    structure.raw    (X, Y, Z) float32 little-endian
    lso.raw          (X, Z)    float32 little-endian, x-major then z
    ilm.raw          (X, Z)    float32 little-endian (integer-valued depths)
    chorio.raw       (X, Z)    float32 little-endian (integer-valued depths)

The format is deliberately dependency-free: a JSON sidecar plus raw C-order
float32 arrays, writable from any language. `meta_digest` protects the
declared geometry against accidental edits; readers verify it when present
but do not require it, so hand-written bundles remain valid.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = "discover-bundle/1"
CHANNEL_NAMES = ("flow", "structure", "lso")
N_CUTOFFS = 4
GRADE_MIN, GRADE_MAX = 0, 4

_RAW_DTYPE = np.dtype("<f4")


class BundleError(ValueError):
    """A bundle (in memory or on disk) violates the format contract."""


@dataclass
class SurfaceMap:
    """Integer voxel depth along y for every (x, z) A-scan position."""

    depths: np.ndarray  # (X, Z) int32

    def __post_init__(self):
        self.depths = np.asarray(self.depths)
        if self.depths.ndim != 2:
            raise BundleError(f"surface map must be 2-D, got shape {self.depths.shape}")
        if not np.issubdtype(self.depths.dtype, np.integer):
            rounded = np.rint(self.depths)
            if not np.array_equal(rounded, self.depths):
                raise BundleError("surface depths must be integer voxel indices")
            self.depths = rounded
        self.depths = self.depths.astype(np.int32)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depths.shape


@dataclass
class Volume3C:
    """3-channel volume indexed (c, x, y, z) with channels (flow, structure, lso)."""

    data: np.ndarray                       # (3, X, Y, Z) float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)  # mm per voxel, informational

    def validate(self) -> list[str]:
        problems = []
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            problems.append(f"expected (3, X, Y, Z) data, got {self.data.shape}")
            return problems
        if any(s < 1 for s in self.data.shape[1:]):
            problems.append(f"degenerate dims {self.data.shape[1:]}")
        if not np.isfinite(self.data).all():
            problems.append("non-finite intensities")
        elif self.data.min() < 0.0 or self.data.max() > 1.0:
            problems.append("intensities outside [0, 1]")
        return problems


@dataclass
class OctaBundle:
    """One acquisition: two volumes, the en-face localizer, two surfaces, a grade."""

    flow: np.ndarray          # (X, Y, Z) float32 in [0, 1]
    structure: np.ndarray     # (X, Y, Z) float32 in [0, 1]
    lso: np.ndarray           # (X, Z) float32 in [0, 1]
    ilm_surface: SurfaceMap
    chorio_surface: SurfaceMap
    grade: int
    id: str = "unnamed"

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.flow.shape)

    def validate(self) -> list[str]:
        problems = []
        if self.flow.ndim != 3:
            problems.append(f"flow must be 3-D, got shape {self.flow.shape}")
            return problems
        x, y, z = self.flow.shape
        if self.structure.shape != (x, y, z):
            problems.append(
                f"structure dims {self.structure.shape} differ from flow dims {(x, y, z)}")
        if self.lso.shape != (x, z):
            problems.append(f"lso dims {self.lso.shape} do not match (X, Z) = {(x, z)}")
        for name, surf in (("ilm", self.ilm_surface), ("chorio", self.chorio_surface)):
            if surf.shape != (x, z):
                problems.append(f"{name} surface dims {surf.shape} do not match (X, Z) = {(x, z)}")
        if not problems:
            ilm, chorio = self.ilm_surface.depths, self.chorio_surface.depths
            if ilm.min() < 0 or chorio.max() >= y:
                problems.append("surface depths outside [0, Y)")
            if (ilm > chorio).any():
                problems.append("ilm surface must lie at or above the chorioretinal surface")
        for name, arr in (("flow", self.flow), ("structure", self.structure), ("lso", self.lso)):
            if not np.isfinite(arr).all():
                problems.append(f"{name} contains non-finite values")
            elif arr.min() < 0.0 or arr.max() > 1.0:
                problems.append(f"{name} intensities outside [0, 1]")
        if not GRADE_MIN <= self.grade <= GRADE_MAX:
            problems.append(f"grade {self.grade} outside [{GRADE_MIN}, {GRADE_MAX}]")
        return problems


def encode_labels(grade: int) -> np.ndarray:
    """Binary cutoff labels: labels[n-1] = 1 iff grade >= n, for n = 1..4."""
    if not GRADE_MIN <= int(grade) <= GRADE_MAX:
        raise ValueError(f"grade {grade} outside [{GRADE_MIN}, {GRADE_MAX}]")
    return (np.arange(1, N_CUTOFFS + 1) <= int(grade)).astype(np.int64)


def decode_grade(labels: np.ndarray) -> int:
    """Inverse of encode_labels for monotone label vectors (count of ones)."""
    labels = np.asarray(labels)
    if labels.shape != (N_CUTOFFS,):
        raise ValueError(f"expected {N_CUTOFFS} labels, got shape {labels.shape}")
    return int(labels.sum())


def _array_entries(bundle: OctaBundle) -> dict[str, np.ndarray]:
    return {
        "flow": bundle.flow,
        "structure": bundle.structure,
        "lso": bundle.lso,
        "ilm": bundle.ilm_surface.depths,
        "chorio": bundle.chorio_surface.depths,
    }


_DIGEST_KEYS = ("format_version", "id", "grade", "dims", "channels", "dtype", "arrays")


def _canonical_meta_digest(meta: dict) -> str:
    # covers only the known geometry keys, so unknown meta keys stay ignorable
    body = {k: meta[k] for k in _DIGEST_KEYS if k in meta}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_bundle(bundle: OctaBundle, path: str | Path) -> None:
    """Write a validated bundle into directory `path` (created if needed)."""
    problems = bundle.validate()
    if problems:
        raise BundleError("refusing to write invalid bundle: " + "; ".join(problems))
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    x, y, z = bundle.dims
    arrays = {}
    for name, arr in _array_entries(bundle).items():
        raw = np.ascontiguousarray(arr, dtype=_RAW_DTYPE).tobytes()
        (path / f"{name}.raw").write_bytes(raw)
        arrays[name] = {
            "file": f"{name}.raw",
            "shape": list(arr.shape),
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
    meta = {
        "format_version": FORMAT_VERSION,
        "id": bundle.id,
        "grade": int(bundle.grade),
        "dims": [x, y, z],
        "channels": list(CHANNEL_NAMES),
        "dtype": "float32-le",
        "arrays": arrays,
    }
    meta["meta_digest"] = _canonical_meta_digest(meta)
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _expected_shapes(dims: list[int]) -> dict[str, tuple[int, ...]]:
    x, y, z = dims
    return {
        "flow": (x, y, z),
        "structure": (x, y, z),
        "lso": (x, z),
        "ilm": (x, z),
        "chorio": (x, z),
    }


def read_bundle(path: str | Path) -> OctaBundle:
    """Read a bundle directory; unknown meta keys are ignored."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise BundleError(f"missing meta.json in {path}")
    meta = json.loads(meta_path.read_text())

    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise BundleError(f"unsupported format version {version!r}")
    for key in ("dims", "grade", "id"):
        if key not in meta:
            raise BundleError(f"meta.json missing required key {key!r}")
    if meta.get("dtype", "float32-le") != "float32-le":
        raise BundleError(f"unsupported dtype {meta.get('dtype')!r} (expected float32-le)")
    if "meta_digest" in meta and meta["meta_digest"] != _canonical_meta_digest(meta):
        raise BundleError("meta.json digest mismatch: declared geometry was modified")

    dims = meta["dims"]
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise BundleError(f"invalid dims {dims}")
    shapes = _expected_shapes([int(d) for d in dims])
    declared = meta.get("arrays", {})

    loaded = {}
    for name, shape in shapes.items():
        entry = declared.get(name, {})
        filename = entry.get("file", f"{name}.raw")
        raw_path = path / filename
        if not raw_path.is_file():
            raise BundleError(f"missing array file {filename}")
        raw = raw_path.read_bytes()
        expected_bytes = int(np.prod(shape)) * _RAW_DTYPE.itemsize
        if len(raw) != expected_bytes:
            kind = "truncated" if len(raw) < expected_bytes else "oversized"
            raise BundleError(
                f"{kind} array file {filename}: {len(raw)} bytes, expected {expected_bytes}")
        if "sha256" in entry and hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise BundleError(f"checksum mismatch for {filename}")
        loaded[name] = np.frombuffer(raw, dtype=_RAW_DTYPE).reshape(shape).copy()

    bundle = OctaBundle(
        flow=loaded["flow"],
        structure=loaded["structure"],
        lso=loaded["lso"],
        ilm_surface=SurfaceMap(loaded["ilm"]),
        chorio_surface=SurfaceMap(loaded["chorio"]),
        grade=int(meta["grade"]),
        id=str(meta["id"]),
    )
    problems = bundle.validate()
    if problems:
        raise BundleError(f"bundle at {path} fails validation: " + "; ".join(problems))
    return bundle
