"""Bridge from torch segmentation models to the oodkit on-disk layout."""

from .errors import BridgeError, GeometryMismatch, UnresolvableTap
from .export import (
    ExportSettings,
    SubjectVolume,
    TapSpec,
    export_dataset,
    export_subject,
    sample_seeds,
)
from .grid import axis_starts, patch_origins
from .toy import ToySegNet, toy_model

__all__ = [
    "BridgeError",
    "GeometryMismatch",
    "UnresolvableTap",
    "ExportSettings",
    "SubjectVolume",
    "TapSpec",
    "export_dataset",
    "export_subject",
    "sample_seeds",
    "axis_starts",
    "patch_origins",
    "ToySegNet",
    "toy_model",
]
