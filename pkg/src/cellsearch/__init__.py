"""Gradient-based convolutional cell search and training for small images."""

__version__ = "0.1.0"

from .tensor import Tensor, ShapeError
from .layers import ParamStore
from .search_space import AlphaParams, OperatorKind, softmax_coefficients
from .genotype import AlphaSnapshot, Genotype, derive
from .network import NetworkConfig, SuperNet, count_parameters
from .optim import ArchOptConfig, EpochRecord, WeightOptConfig, search, train_fixed
from .data import Dataset, SplitSpec, load_image_dir, split, synthetic_shapes
from .metrics import ConfusionMatrix, overall_accuracy, summarize

__all__ = [
    "Tensor", "ShapeError", "ParamStore", "AlphaParams", "OperatorKind",
    "softmax_coefficients", "AlphaSnapshot", "Genotype", "derive",
    "NetworkConfig", "SuperNet", "count_parameters", "ArchOptConfig",
    "EpochRecord", "WeightOptConfig", "search", "train_fixed", "Dataset",
    "SplitSpec", "load_image_dir", "split", "synthetic_shapes",
    "ConfusionMatrix", "overall_accuracy", "summarize", "__version__",
]
