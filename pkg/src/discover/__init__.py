"""Ordinal severity grading of multi-channel OCTA volumes.

The pipeline summarizes a 3-channel 3-D acquisition into a learned 2-D
en-face image, classifies it with a member-dropout ensemble, selects the
most relevant cross-sectional B-scans by gradient attribution, classifies
those in a second branch, and fuses both branches into per-cutoff
probabilities.
"""

__version__ = "0.1.0"

from .octa_store import (BundleError, OctaBundle, SurfaceMap, Volume3C, decode_grade,
                         encode_labels, read_bundle, write_bundle)
from .preprocess import PreprocessConfig, PreprocessedVolume, preprocess_bundle
from .synthgen import DatasetManifest, PhantomSpec, generate_dataset, generate_phantom

__all__ = [
    "BundleError", "OctaBundle", "SurfaceMap", "Volume3C",
    "decode_grade", "encode_labels", "read_bundle", "write_bundle",
    "PreprocessConfig", "PreprocessedVolume", "preprocess_bundle",
    "DatasetManifest", "PhantomSpec", "generate_dataset", "generate_phantom",
    "__version__",
]
