"""Post-hoc out-of-distribution detection for patch-based segmentation.

Fit a Gaussian over pooled encoder features from training subjects,
score new subjects by squared Mahalanobis distance per patch, blend
patch scores into subject-level uncertainties, and evaluate detection
and calibration against confidence-based reference scorers.
"""

from .errors import (
    BadMagic,
    CholeskyFailure,
    DegenerateScores,
    DimensionMismatch,
    InvalidHeader,
    IOFailure,
    ManifestError,
    MissingFile,
    MissingPatch,
    MixedTap,
    NumericError,
    OodkitError,
    TapMismatch,
    TensorFormatError,
    TruncatedData,
    UnknownDtype,
    ValidationError,
)
from .tensorio import Tensor, read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor
from .manifest import SubjectManifest, load_manifest, write_manifest
from .projection import ProjectedFeature, avg_pool, project
from .gaussian import GaussianModel, fit, load, save
from .mahalanobis import batch_mahalanobis, mahalanobis
from .patches import (
    ImportanceMap,
    PatchGrid,
    UncertaintyMask,
    aggregate,
    aggregate_fields,
    gaussian_importance,
    make_grid,
    normalize_scores,
    subject_score,
)
from .baselines import (
    energy_uncertainty,
    kl_from_uniform_uncertainty,
    max_softmax_uncertainty,
    sample_spread_uncertainty,
    temperature_scaled_uncertainty,
)
from .metrics import (
    EvalReport,
    QuadrantCounts,
    ScoredSubject,
    auroc,
    detection_error,
    dice,
    esce,
    fpr,
    quadrant_report,
    tpr95_threshold,
)
from .synth import SynthConfig, anisotropy_demo, generate
from .experiment import (
    ExperimentResult,
    METHODS,
    distance_mask,
    fit_from_manifest,
    predicted_mask,
    run_experiment,
    subject_dice,
    write_reports,
)

__version__ = "0.1.0"
