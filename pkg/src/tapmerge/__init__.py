"""Weight-space merging of fine-tuned checkpoints, with hyperparameters chosen by
feature alignment (TAP) instead of downstream evaluation."""
from .errors import (
    FormatError,
    NonFiniteError,
    NumericalError,
    ProviderError,
    SchemaMismatchError,
    SpecError,
    TapMergeError,
)
from .merge_methods import METHODS, MergedModel, MergeSpec, merge
from .tap import FeatureSet, TapReport, select, tap_average, tap_report, tap_task
from .task_vector import LayerGrouping, TaskVector, compute_task_vector, cosine_analysis, norms
from .tensor_store import WeightMap, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "FeatureSet",
    "FormatError",
    "LayerGrouping",
    "METHODS",
    "MergeSpec",
    "MergedModel",
    "NonFiniteError",
    "NumericalError",
    "ProviderError",
    "SchemaMismatchError",
    "SpecError",
    "TapMergeError",
    "TapReport",
    "TaskVector",
    "WeightMap",
    "compute_task_vector",
    "cosine_analysis",
    "load_checkpoint",
    "merge",
    "norms",
    "save_checkpoint",
    "select",
    "tap_average",
    "tap_report",
    "tap_task",
]
