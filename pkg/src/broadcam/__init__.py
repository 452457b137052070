"""Outcome-agnostic seed maps from pooled multi-layer deep features.

The package fits a broad learning system on globally pooled feature
channels, collapses it to one weight per channel per class, and turns
those weights into normalized per-class activation seed maps. It also
ships the matching evaluation metrics, weight-reliability analyses, a
synthetic benchmark with planted channel relevance, and a
gradient-descent classifier as the outcome-driven reference point.
"""

from .bls import (
    BLSModel,
    BroadFeatureMatrix,
    build_broad_matrix,
    enhance_map,
    fit_bls,
    gap,
    load_broad_matrix,
    load_model,
    ridge_solve,
    save_broad_matrix,
    save_model,
    theta_from_init,
)
from .cam import (
    CamSeed,
    cam_to_mask,
    generate_cam,
    generate_cam_topk,
    load_cam,
    normalize_cam,
    save_cam,
    topk_channels,
)
from .errors import (
    BroadCAMError,
    DivergedError,
    DuplicateLayerError,
    DuplicateSampleError,
    EmptyLabelError,
    EmptySubsetError,
    MissingLayerError,
    NonFiniteInputError,
    NotSingleChannelError,
    OutOfRangeError,
    ShapeMismatchError,
    SingularSystemError,
    UnsupportedDtypeError,
)
from .metrics import (
    DEFAULT_THRESHOLDS,
    EvalReport,
    MpxapResult,
    RelevanceReport,
    ThresholdResult,
    confusion_matrix,
    evaluate_seeds,
    feature_relevance_iou,
    fwiou,
    iou_from_confusion,
    miou_from_confusion,
    miou_sweep,
    mpxap,
    pearson_r,
    relevance_matrix,
    weight_relevance_report,
)
from .pipeline import (
    DEFAULT_PROPORTIONS,
    ExperimentSpec,
    fit_model,
    load_any_model,
    run_ablation,
    run_analysis,
    run_eval,
    run_fit,
    run_gamut,
)
from .resize import resize_bilinear
from .synth import (
    GDClassifier,
    LayerSpec,
    SynthConfig,
    SynthDataset,
    fit_gd_classifier,
    load_gd_classifier,
    relevance_table,
    save_gd_classifier,
    subsample_split,
    synth_dataset,
    write_dataset,
)
from .tensor_io import (
    IGNORE_VALUE,
    FeatureStack,
    LabelTable,
    Manifest,
    load_features,
    load_labels,
    load_manifest,
    load_mask,
    save_features,
    save_labels,
    save_manifest,
    save_mask,
)

__all__ = [name for name in dir() if not name.startswith("_")]
