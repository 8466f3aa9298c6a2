import numpy as np
import pytest

from discover.octa_store import OctaBundle, SurfaceMap
from discover.preprocess import PreprocessConfig, preprocess_bundle
from discover.synthgen import PhantomSpec, generate_phantom

TINY_DIMS = (16, 32, 16)
TINY_PRE = PreprocessConfig(y0=4, y1=24)


def make_bundle(x=6, y=16, z=5, grade=1, seed=0):
    """Small hand-built valid bundle (not a phantom)."""
    rng = np.random.default_rng(seed)
    ilm = np.full((x, z), 4, dtype=np.int32)
    chorio = np.full((x, z), 9, dtype=np.int32)
    return OctaBundle(
        flow=rng.uniform(0.1, 0.9, size=(x, y, z)).astype(np.float32),
        structure=rng.uniform(0.1, 0.9, size=(x, y, z)).astype(np.float32),
        lso=rng.uniform(0.1, 0.9, size=(x, z)).astype(np.float32),
        ilm_surface=SurfaceMap(ilm),
        chorio_surface=SurfaceMap(chorio),
        grade=grade,
        id=f"hand-{seed}",
    )


@pytest.fixture
def bundle():
    return make_bundle()


@pytest.fixture
def tiny_phantom():
    return generate_phantom(PhantomSpec(dims=TINY_DIMS, seed=11, grade=2, noise_level=0.02))


@pytest.fixture
def tiny_volume(tiny_phantom):
    return preprocess_bundle(tiny_phantom, TINY_PRE)
