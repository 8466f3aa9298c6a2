"""Labeled synthetic OCTA phantoms for desk-scale training and testing.

A phantom is built from seed-derived random streams so that the anatomy
(surfaces, layers, vessels, texture, noise) is identical across grades for a
fixed seed; the grade only selects which planted lesions are applied. The
lesion plan is itself a pure function of (dims, seed, grade), which makes
lesion footprints recomputable from the manifest for oracle checks.

Lesion plan by grade:
  grade >= 1   `grade` circular en-face flow-void disks (flow zeroed in a
               cylinder spanning the retina), enlarged 2x from grade 3 on
  grade >= 2   one depth-localized hypo-reflective cyst in the structure
               channel, confined to a thin z-slab (< 10% of Z) so its
               evidence concentrates in few B-scans
  grade == 4   a high-intensity flow tuft just above the ILM near the
               volume periphery
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .octa_store import OctaBundle, SurfaceMap, write_bundle

SPLIT_NAMES = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.18, 0.12)
MANIFEST_NAME = "manifest.json"

# stream ids for per-purpose RNGs
_S_SURFACE, _S_TEXTURE, _S_VESSEL, _S_LESION, _S_NOISE, _S_LSO = range(6)


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 96, 64)
    seed: int = 0
    grade: int = 0
    noise_level: float = 0.02
    n_layers: int = 4

    def validate(self) -> None:
        x, y, z = self.dims
        if x < 16 or y < 32 or z < 16:
            raise ValueError(f"dims {self.dims} below supported minimum (16, 32, 16)")
        if not 0 <= self.grade <= 4:
            raise ValueError(f"grade {self.grade} outside [0, 4]")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        # geometry must leave head room below the deepest chorioretinal point
        if _ilm_ceiling(y) + _retina_thickness(y) + 2 >= y:
            raise ValueError(f"depth {y} too small for surface geometry")


@dataclass(frozen=True)
class Lesion:
    type: str                       # flow_void | cyst | flow_tuft
    center: tuple[int, int, int]    # (x, y, z)
    extent: tuple[int, ...]         # (radius,) or (rx, ry, rz)

    def to_json(self) -> dict:
        return {"type": self.type, "center": list(self.center), "extent": list(self.extent)}


def _retina_thickness(y: int) -> int:
    return int(round(0.30 * y))


def _ilm_base(y: int) -> int:
    return int(round(0.18 * y))


def _ilm_ceiling(y: int) -> int:
    return _ilm_base(y) + max(2, int(round(0.06 * y)))


def _rng(spec: PhantomSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(stream,)))


def _surfaces(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Smooth ILM height field plus a parallel chorioretinal surface."""
    x, y, z = spec.dims
    rng = _rng(spec, _S_SURFACE)
    amp = max(2, int(round(0.06 * y)))
    xs = np.arange(x)[:, None] / x
    zs = np.arange(z)[None, :] / z
    ilm = np.full((x, z), float(_ilm_base(y)))
    for fx, fz in ((1, 1), (2, 1), (1, 2)):
        phase_x, phase_z = rng.uniform(0, 2 * np.pi, size=2)
        weight = rng.uniform(0.3, 1.0)
        ilm += amp * weight / 2.0 * np.cos(2 * np.pi * fx * xs + phase_x) \
            * np.cos(2 * np.pi * fz * zs + phase_z)
    thickness = _retina_thickness(y)
    ilm = np.clip(np.rint(ilm), 2, y - thickness - 3).astype(np.int32)
    chorio = ilm + thickness
    return ilm, chorio


def _layer_intensities(n_layers: int) -> np.ndarray:
    # alternating bright/dark bands with a small tilt to keep all means distinct
    vals = np.empty(n_layers)
    for j in range(n_layers):
        vals[j] = (0.85 - 0.03 * j) if j % 2 == 0 else (0.50 - 0.03 * (j - 1))
    return vals


def _vessel_pattern(x: int, z: int, rng: np.random.Generator) -> np.ndarray:
    """En-face branching pattern in [0, 1] drawn with biased random walks."""
    canvas = np.zeros((x, z))
    stack = []
    for _ in range(5):
        # start on a random border, heading inward
        side = rng.integers(4)
        if side == 0:
            pos, ang = np.array([0.0, rng.uniform(0, z)]), rng.uniform(-0.6, 0.6)
        elif side == 1:
            pos, ang = np.array([x - 1.0, rng.uniform(0, z)]), np.pi + rng.uniform(-0.6, 0.6)
        elif side == 2:
            pos, ang = np.array([rng.uniform(0, x), 0.0]), np.pi / 2 + rng.uniform(-0.6, 0.6)
        else:
            pos, ang = np.array([rng.uniform(0, x), z - 1.0]), -np.pi / 2 + rng.uniform(-0.6, 0.6)
        stack.append((pos, ang, int(1.3 * max(x, z))))
    segments = 0
    while stack and segments < 60:
        pos, ang, steps = stack.pop()
        segments += 1
        for _ in range(steps):
            xi, zi = int(round(pos[0])), int(round(pos[1]))
            if not (0 <= xi < x and 0 <= zi < z):
                break
            canvas[max(0, xi - 1):xi + 2, max(0, zi - 1):zi + 2] = 1.0
            ang += rng.normal(0, 0.18)
            pos = pos + np.array([np.cos(ang), np.sin(ang)])
            if rng.random() < 0.04 and len(stack) < 12:
                stack.append((pos.copy(), ang + rng.choice([-1.0, 1.0]), steps // 2))
    blurred = gaussian_filter(canvas, 1.0)
    peak = blurred.max()
    return blurred / peak if peak > 0 else blurred


def _smooth_field(shape, rng, sigma=3.0):
    return gaussian_filter(rng.normal(0.0, 1.0, size=shape), sigma)


def _disk_radius(x: int) -> int:
    return max(2, x // 16)


def plan_lesions(spec: PhantomSpec) -> list[Lesion]:
    """Deterministic lesion plan for (dims, seed, grade).

    All candidate lesions are drawn from the lesion stream regardless of
    grade, so plans for different grades at the same seed share geometry and
    the zeroed-flow footprint grows monotonically with grade.
    """
    spec.validate()
    x, y, z = spec.dims
    rng = _rng(spec, _S_LESION)
    ilm, chorio = _surfaces(spec)
    r_base = _disk_radius(x)
    r_big = 2 * r_base + 1
    margin = r_big + 2

    # four void centers, best-effort mutual separation
    centers: list[tuple[int, int]] = []
    for _ in range(4):
        best, best_dist = None, -1.0
        for _attempt in range(60):
            cx = int(rng.integers(margin, max(margin + 1, x - margin)))
            cz = int(rng.integers(margin, max(margin + 1, z - margin)))
            dist = min((np.hypot(cx - px, cz - pz) for px, pz in centers), default=np.inf)
            if dist >= 2 * r_big + 2:
                best = (cx, cz)
                break
            if dist > best_dist:
                best, best_dist = (cx, cz), dist
        centers.append(best)
    radii = [int(r_base + rng.integers(0, 2)) for _ in range(4)]

    # cyst: thin z-slab, mid-retina
    cyst_rx = max(4, x // 6)
    cyst_ry = max(3, _retina_thickness(y) // 5)
    cyst_rz = max(1, int(np.floor(0.05 * z)) - 1)    # slab 2*rz+1 < 10% of Z
    ccx = int(rng.integers(cyst_rx + 2, x - cyst_rx - 2))
    ccz = int(rng.integers(cyst_rz + 2, z - cyst_rz - 2))
    ccy = int(ilm[ccx, ccz] + _retina_thickness(y) // 2)

    # tuft: small sphere centered above the ILM, near the periphery
    # (best-effort at tiny dims where the periphery ring may be unreachable)
    tuft_r = 3
    tcx = tcz = None
    best_dist = -1.0
    for _attempt in range(100):
        px = int(rng.integers(tuft_r + 2, x - tuft_r - 2))
        pz = int(rng.integers(tuft_r + 2, z - tuft_r - 2))
        dist = float(np.hypot(px - x / 2, pz - z / 2))
        if dist >= 0.30 * min(x, z):
            tcx, tcz = px, pz
            break
        if dist > best_dist:
            tcx, tcz, best_dist = px, pz, dist
    tcy = int(ilm[tcx, tcz] - 2)

    lesions: list[Lesion] = []
    scale = 2 if spec.grade >= 3 else 1
    for i in range(spec.grade):
        cx, cz = centers[i]
        cy = int((ilm[cx, cz] + chorio[cx, cz]) // 2)
        lesions.append(Lesion("flow_void", (cx, cy, cz), (scale * radii[i],)))
    if spec.grade >= 2:
        lesions.append(Lesion("cyst", (ccx, ccy, ccz), (cyst_rx, cyst_ry, cyst_rz)))
    if spec.grade == 4:
        lesions.append(Lesion("flow_tuft", (tcx, tcy, tcz), (tuft_r,)))
    return lesions


def generate_phantom(spec: PhantomSpec) -> OctaBundle:
    """Render one phantom bundle; deterministic given the spec."""
    spec.validate()
    x, y, z = spec.dims
    ilm, chorio = _surfaces(spec)
    thickness = _retina_thickness(y)

    yy = np.arange(y)[None, :, None]
    ilm3 = ilm[:, None, :]
    chorio3 = chorio[:, None, :]
    inside = (yy >= ilm3) & (yy <= chorio3)
    rel_depth = np.clip((yy - ilm3) / max(thickness, 1), 0.0, 1.0)

    # structure: layered bands inside the retina, texture outside
    tex_rng = _rng(spec, _S_TEXTURE)
    bands = np.clip((rel_depth * spec.n_layers).astype(np.int32), 0, spec.n_layers - 1)
    structure = _layer_intensities(spec.n_layers)[bands]
    vitreous_tex = 0.06 + 0.03 * np.tanh(_smooth_field((x, z), tex_rng))
    choroid_tex = 0.30 + 0.08 * np.tanh(_smooth_field((x, z), tex_rng))
    structure = np.where(yy < ilm3, vitreous_tex[:, None, :], structure)
    structure = np.where(yy > chorio3, choroid_tex[:, None, :], structure)

    # flow: vessel pattern in the superficial retina over a capillary floor
    vessel_rng = _rng(spec, _S_VESSEL)
    vessels = _vessel_pattern(x, z, vessel_rng)
    profile = np.where(rel_depth < 0.6, 1.0, 0.4)
    flow = (0.20 + 0.70 * vessels[:, None, :] * profile) * inside
    choroid_flow = 0.25 + 0.10 * np.tanh(_smooth_field((x, z), vessel_rng))
    flow = np.where(yy > chorio3, choroid_flow[:, None, :], flow)

    # lesions on top of the grade-independent base
    for lesion in plan_lesions(spec):
        cx, cy, cz = lesion.center
        if lesion.type == "flow_void":
            (radius,) = lesion.extent
            xs = np.arange(x)[:, None]
            zs = np.arange(z)[None, :]
            disk = (xs - cx) ** 2 + (zs - cz) ** 2 <= radius ** 2
            flow[disk[:, None, :] & inside] = 0.0
        elif lesion.type == "cyst":
            rx, ry, rz = lesion.extent
            ell = (((np.arange(x)[:, None, None] - cx) / rx) ** 2
                   + ((np.arange(y)[None, :, None] - cy) / ry) ** 2
                   + ((np.arange(z)[None, None, :] - cz) / rz) ** 2) <= 1.0
            structure = np.where(ell, structure * 0.12, structure)
        elif lesion.type == "flow_tuft":
            (radius,) = lesion.extent
            sph = ((np.arange(x)[:, None, None] - cx) ** 2
                   + (np.arange(y)[None, :, None] - cy) ** 2
                   + (np.arange(z)[None, None, :] - cz) ** 2) <= radius ** 2
            flow = np.where(sph, 0.95, flow)
        else:
            raise ValueError(f"unknown lesion type {lesion.type}")

    # LSO: smoothed en-face mean of structure plus independent noise
    lso_rng = _rng(spec, _S_LSO)
    lso = gaussian_filter(structure.mean(axis=1), 1.5)
    lso = np.clip(lso + lso_rng.normal(0, max(spec.noise_level, 1e-9), size=(x, z)), 0.0, 1.0)

    noise_rng = _rng(spec, _S_NOISE)
    if spec.noise_level > 0:
        flow = flow + noise_rng.normal(0, spec.noise_level, size=flow.shape)
        structure = structure + noise_rng.normal(0, spec.noise_level, size=structure.shape)
    flow = np.clip(flow, 0.0, 1.0).astype(np.float32)
    structure = np.clip(structure, 0.0, 1.0).astype(np.float32)

    return OctaBundle(
        flow=flow,
        structure=structure,
        lso=lso.astype(np.float32),
        ilm_surface=SurfaceMap(ilm),
        chorio_surface=SurfaceMap(chorio),
        grade=spec.grade,
        id=f"phantom-s{spec.seed}-g{spec.grade}",
    )


def split_quotas(total: int, fractions=SPLIT_FRACTIONS) -> tuple[int, ...]:
    """Largest-remainder apportionment of `total` into len(fractions) splits.

    Floors are assigned first; remaining units go to the splits with the
    largest fractional remainders, ties broken by split order.
    """
    raw = [total * f for f in fractions]
    floors = [int(np.floor(r)) for r in raw]
    remainder = total - sum(floors)
    order = sorted(range(len(fractions)), key=lambda i: (-(raw[i] - floors[i]), i))
    for i in order[:remainder]:
        floors[i] += 1
    return tuple(floors)


@dataclass
class DatasetManifest:
    seed: int
    dims: tuple[int, int, int]
    n_per_grade: int
    noise_level: float
    bundles: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "format": "discover-manifest/1",
            "seed": self.seed,
            "dims": list(self.dims),
            "n_per_grade": self.n_per_grade,
            "noise_level": self.noise_level,
            "bundles": self.bundles,
        }

    def spec_for(self, entry: dict) -> PhantomSpec:
        return PhantomSpec(dims=tuple(self.dims), seed=int(entry["phantom_seed"]),
                           grade=int(entry["grade"]), noise_level=self.noise_level)

    def ids_for_split(self, split: str) -> list[str]:
        return [e["id"] for e in self.bundles if e["split"] == split]


def load_manifest(path: str | Path) -> DatasetManifest:
    data = json.loads(Path(path).read_text())
    return DatasetManifest(
        seed=int(data["seed"]),
        dims=tuple(data["dims"]),
        n_per_grade=int(data["n_per_grade"]),
        noise_level=float(data["noise_level"]),
        bundles=list(data["bundles"]),
    )


def generate_dataset(n_per_grade: int,
                     dims: tuple[int, int, int] = (64, 96, 64),
                     seed: int = 0,
                     noise_level: float = 0.02,
                     out_dir: str | Path | None = None) -> DatasetManifest:
    """Plan (and optionally write) a stratified 5-grade phantom dataset.

    Bundles are ordered round-robin over grades (grade varies fastest) and
    the 70/18/12 split boundaries fall at the largest-remainder quotas of
    the total count, so every split mixes grades as evenly as possible.
    """
    if n_per_grade < 1:
        raise ValueError("n_per_grade must be >= 1")
    total = 5 * n_per_grade
    quotas = split_quotas(total)
    boundaries = np.cumsum(quotas)

    manifest = DatasetManifest(seed=seed, dims=tuple(dims), n_per_grade=n_per_grade,
                               noise_level=noise_level)
    specs: list[PhantomSpec] = []
    position = 0
    for idx in range(n_per_grade):
        for grade in range(5):
            child = np.random.SeedSequence(entropy=seed, spawn_key=(grade, idx))
            phantom_seed = int(child.generate_state(1)[0])
            split = SPLIT_NAMES[int(np.searchsorted(boundaries, position, side="right"))]
            spec = PhantomSpec(dims=tuple(dims), seed=phantom_seed, grade=grade,
                               noise_level=noise_level)
            entry = {
                "id": f"g{grade}-i{idx:03d}",
                "grade": grade,
                "split": split,
                "phantom_seed": phantom_seed,
                "lesions": [l.to_json() for l in plan_lesions(spec)],
            }
            manifest.bundles.append(entry)
            specs.append(spec)
            position += 1

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for spec, entry in zip(specs, manifest.bundles):
            bundle = generate_phantom(spec)
            bundle.id = entry["id"]
            write_bundle(bundle, out_dir / entry["id"])
        (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return manifest
