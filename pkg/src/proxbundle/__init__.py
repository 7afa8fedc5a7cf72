"""proxbundle: unrolled proximal self-expression on vision-transformer class
tokens, plus exact optimal-transport and t-SNE feature diagnostics."""

from .errors import ConfigError, DimensionError, FormatError, UsageError
from .rng import Rng
from .tensor import Tape, Tensor, backward, spectral_norm_sq
from .prox import ProxSchedule, SelfRepresentation, default_step, shrink_relu, unroll
from .vit import PatchEmbedConfig, VitConfig, encode, init_vit
from .pipeline import TrainConfig, train, evaluate, placement_sweep
from .geometry import TsneConfig, class_distance_matrix, tsne_embed, wasserstein1

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "FormatError", "UsageError",
    "Rng", "Tape", "Tensor", "backward", "spectral_norm_sq",
    "ProxSchedule", "SelfRepresentation", "default_step", "shrink_relu", "unroll",
    "PatchEmbedConfig", "VitConfig", "encode", "init_vit",
    "TrainConfig", "train", "evaluate", "placement_sweep",
    "TsneConfig", "class_distance_matrix", "tsne_embed", "wasserstein1",
    "__version__",
]
