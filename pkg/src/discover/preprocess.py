"""Volume preprocessing: LSO duplication, retina masking, flattening, cropping.

The stages compose in a fixed order (mask before flatten, then crop):

    stack [flow, structure, duplicated LSO] -> multiply by retina mask
    -> shift each A-scan so the ILM sits at depth y0 -> keep depths [0, y1)

All operations act per A-scan: the output at (x, z) depends only on inputs
at (x, z). Shifts are whole-voxel with zero fill; surfaces are stored as
integer depths, so no interpolation is involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .octa_store import OctaBundle, SurfaceMap


@dataclass
class PreprocessConfig:
    y0: int = 8     # depth at which the ILM is aligned after flattening
    y1: int = 56    # crop depth; output volumes have Y1 = y1

    def validate(self, y_extent: int | None = None) -> None:
        if not 0 < self.y0 < self.y1:
            raise ValueError(f"require 0 < y0 < y1, got y0={self.y0}, y1={self.y1}")
        if y_extent is not None and self.y1 > y_extent:
            raise ValueError(f"y1={self.y1} exceeds volume depth {y_extent}")


@dataclass
class PreprocessedVolume:
    data: np.ndarray            # (3, X, Y1, Z) float32, channels (flow, structure, lso)
    provenance: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


def build_lso_volume(lso: np.ndarray, y_extent: int) -> np.ndarray:
    """Duplicate the 2-D localizer along depth: L(x, y, z) = lso(x, z)."""
    lso = np.asarray(lso)
    if lso.ndim != 2:
        raise ValueError(f"lso must be 2-D, got shape {lso.shape}")
    if not np.isfinite(lso).all():
        raise ValueError("lso contains non-finite values")
    return np.broadcast_to(lso[:, None, :], (lso.shape[0], y_extent, lso.shape[1])).copy()


def build_mask(ilm: SurfaceMap, chorio: SurfaceMap, y_extent: int) -> np.ndarray:
    """Binary retina mask: 1 where ilm(x,z) <= y <= chorio(x,z)."""
    if (ilm.depths > chorio.depths).any():
        raise ValueError("ilm surface must lie at or above the chorioretinal surface")
    yy = np.arange(y_extent)[None, :, None]
    return ((yy >= ilm.depths[:, None, :]) & (yy <= chorio.depths[:, None, :])).astype(np.float32)


def stack_and_mask(flow: np.ndarray, structure: np.ndarray, lso_volume: np.ndarray,
                   mask: np.ndarray) -> np.ndarray:
    """Stack (flow, structure, lso) and zero everything outside the mask."""
    for name, arr in (("structure", structure), ("lso_volume", lso_volume), ("mask", mask)):
        if arr.shape != flow.shape:
            raise ValueError(f"{name} shape {arr.shape} does not match flow shape {flow.shape}")
    stacked = np.stack([flow, structure, lso_volume]).astype(np.float32)
    return stacked * mask[None].astype(np.float32)


def flatten(volume: np.ndarray, ilm: SurfaceMap, y0: int) -> np.ndarray:
    """Shift each A-scan so the ILM depth maps to y0.

    output(c, x, y0 + d, z) = input(c, x, ilm(x, z) + d, z); reads past the
    bottom of the input and the region above y0 are zero-filled.
    """
    if y0 < 0:
        raise ValueError("y0 must be >= 0")
    c, x, y_extent, z = volume.shape
    out = np.zeros_like(volume)
    yy = np.arange(y_extent)[None, :, None]                     # target depth
    src = yy - y0 + ilm.depths[:, None, :]                      # (X, Y, Z) source depth
    valid = (yy >= y0) & (src < y_extent)
    src_clipped = np.clip(src, 0, y_extent - 1)
    gathered = np.take_along_axis(volume, np.broadcast_to(src_clipped[None], volume.shape), axis=2)
    out[:] = np.where(valid[None], gathered, 0.0)
    return out


def crop_depth(volume: np.ndarray, y1: int) -> np.ndarray:
    """Discard all voxels deeper than y1 (exclusive)."""
    if y1 > volume.shape[2]:
        raise ValueError(f"y1={y1} exceeds volume depth {volume.shape[2]}")
    return volume[:, :, :y1, :].copy()


def preprocess_bundle(bundle: OctaBundle, config: PreprocessConfig) -> PreprocessedVolume:
    """Full pipeline: LSO volume, mask, stack, flatten on the ILM, crop."""
    x, y, z = bundle.dims
    config.validate(y)
    lso_volume = build_lso_volume(bundle.lso, y)
    mask = build_mask(bundle.ilm_surface, bundle.chorio_surface, y)
    stacked = stack_and_mask(bundle.flow, bundle.structure, lso_volume, mask)
    flattened = flatten(stacked, bundle.ilm_surface, config.y0)
    cropped = crop_depth(flattened, config.y1)
    return PreprocessedVolume(
        data=cropped,
        provenance={"id": bundle.id, "grade": bundle.grade, "y0": config.y0, "y1": config.y1},
    )


# --- on-disk form (a bundle variant with a reduced array set) ---------------

def write_preprocessed(volume: PreprocessedVolume, path: str | Path) -> None:
    import hashlib
    import json

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for i, name in enumerate(("flow", "structure", "lso")):
        raw = np.ascontiguousarray(volume.data[i], dtype="<f4").tobytes()
        (path / f"{name}.raw").write_bytes(raw)
        arrays[name] = {"file": f"{name}.raw", "shape": list(volume.data[i].shape),
                        "sha256": hashlib.sha256(raw).hexdigest()}
    meta = {
        "format_version": "discover-bundle/1",
        "preprocessed": True,
        "dims": list(volume.data.shape[1:]),
        "channels": ["flow", "structure", "lso"],
        "dtype": "float32-le",
        "arrays": arrays,
        **volume.provenance,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def read_preprocessed(path: str | Path) -> PreprocessedVolume:
    import json

    from .octa_store import BundleError

    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    if not meta.get("preprocessed"):
        raise BundleError(f"{path} is not a preprocessed bundle")
    dims = tuple(int(d) for d in meta["dims"])
    channels = []
    for name in ("flow", "structure", "lso"):
        raw = (path / f"{name}.raw").read_bytes()
        expected = int(np.prod(dims)) * 4
        if len(raw) != expected:
            raise BundleError(f"array file {name}.raw has {len(raw)} bytes, expected {expected}")
        channels.append(np.frombuffer(raw, dtype="<f4").reshape(dims).copy())
    provenance = {k: meta[k] for k in ("id", "grade", "y0", "y1") if k in meta}
    return PreprocessedVolume(data=np.stack(channels), provenance=provenance)
