"""Fiber clustering atlas toolkit for cranial nerve tractography."""

__version__ = "0.1.0"

from .core import (
    AffineTransform,
    DistanceKind,
    MaskVolume,
    Space,
    Streamline,
    Tractogram,
    TrackingPreset,
    DEFAULT_TRACKING_PRESETS,
    fiber_distance,
    filter_by_length,
    resample_streamline,
    sample_tractogram,
    streamline_length,
    streamline_passes_mask,
    transform_tractogram,
)
from .errors import CnAtlasError

__all__ = [
    "AffineTransform",
    "CnAtlasError",
    "DEFAULT_TRACKING_PRESETS",
    "DistanceKind",
    "MaskVolume",
    "Space",
    "Streamline",
    "Tractogram",
    "TrackingPreset",
    "fiber_distance",
    "filter_by_length",
    "resample_streamline",
    "sample_tractogram",
    "streamline_length",
    "streamline_passes_mask",
    "transform_tractogram",
    "__version__",
]
