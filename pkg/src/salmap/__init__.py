"""Activation-based saliency maps, occlusion baselines, and localization
metrics on a small pure-numpy CNN."""

from .attribution import (
    AttributionResult,
    OcclusionMaskBatch,
    cosine_similarity,
    gradcam,
    lafam,
    read_result,
    relax,
    sample_masks,
    write_result,
)
from .metrics import (
    BinaryMask,
    MetricReport,
    aggregate,
    auc,
    evaluate_sample,
    pointing_game,
    relevance_mass_accuracy,
    relevance_rank_accuracy,
    sparseness,
    top_k_intersection,
)
from .tensors import (
    ActivationVolume,
    CaptureConfig,
    MalformedHeaderError,
    PayloadMismatchError,
    RawGrid,
    SaliencyMap,
    TensorFileError,
    UnsupportedElementTypeError,
    channel_mean,
    minmax_normalize,
    read_tensor,
    upsample_bilinear,
    upsample_nearest,
    write_tensor,
)
from .tinycnn import (
    ForwardTrace,
    NumericError,
    TinyCnnModel,
    backward_class_score,
    default_model,
    forward,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    train_sgd,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationVolume",
    "AttributionResult",
    "BinaryMask",
    "CaptureConfig",
    "ForwardTrace",
    "MalformedHeaderError",
    "MetricReport",
    "NumericError",
    "OcclusionMaskBatch",
    "PayloadMismatchError",
    "RawGrid",
    "SaliencyMap",
    "TensorFileError",
    "TinyCnnModel",
    "UnsupportedElementTypeError",
    "aggregate",
    "auc",
    "backward_class_score",
    "channel_mean",
    "cosine_similarity",
    "default_model",
    "evaluate_sample",
    "forward",
    "grad_check",
    "gradcam",
    "lafam",
    "load_checkpoint",
    "minmax_normalize",
    "pointing_game",
    "read_result",
    "read_tensor",
    "relax",
    "relevance_mass_accuracy",
    "relevance_rank_accuracy",
    "sample_masks",
    "save_checkpoint",
    "sparseness",
    "top_k_intersection",
    "train_sgd",
    "upsample_bilinear",
    "upsample_nearest",
    "write_result",
    "write_tensor",
]
