"""Graph inference learning for semi-supervised node classification."""

from .dataio import DatasetBundle, Split, load_dataset, save_dataset, subsample_labels
from .errors import (
    ConfigError,
    DatasetError,
    GraphError,
    GraphInferError,
    NondeterminismError,
    ShapeError,
    TrainingError,
)
from .graphs import (
    SparseGraph,
    SparseMatrix,
    degree_vector,
    normalized_laplacian,
    power_iteration_lambda_max,
    scaled_laplacian,
    transition_matrix,
)
from .model import (
    ClassIndex,
    GilModel,
    GilParameters,
    ModelSpec,
    ScoreVector,
    predict,
)
from .reachability import ReachabilityTable, build_table, estimate_dp, reach_from
from .trainer import (
    RunConfig,
    TrainingContext,
    adapt_and_evaluate,
    meta_step,
    meta_train,
    pretrain,
    run_ablation,
    run_training,
)

__all__ = [
    "ConfigError",
    "DatasetError",
    "GraphError",
    "GraphInferError",
    "NondeterminismError",
    "ShapeError",
    "TrainingError",
    "SparseGraph",
    "SparseMatrix",
    "degree_vector",
    "normalized_laplacian",
    "power_iteration_lambda_max",
    "scaled_laplacian",
    "transition_matrix",
    "ReachabilityTable",
    "build_table",
    "estimate_dp",
    "reach_from",
    "ClassIndex",
    "GilModel",
    "GilParameters",
    "ModelSpec",
    "ScoreVector",
    "predict",
    "DatasetBundle",
    "Split",
    "load_dataset",
    "save_dataset",
    "subsample_labels",
    "RunConfig",
    "TrainingContext",
    "adapt_and_evaluate",
    "meta_step",
    "meta_train",
    "pretrain",
    "run_ablation",
    "run_training",
]

__version__ = "0.1.0"
