"""Small numpy networks whose spatial layers can be swapped for parameter-free operators."""

from .architect import ArchSpec, build_preset, build_resnet, build_single, build_vit, describe
from .blocks import BlockSpec
from .costmodel import count, count_diff
from .engine import Parameter, Tape, Tensor, backward, grad_check
from .errors import (ConfigError, FormatError, GeometryError, PfnetError, ResourceError, ShapeError,
                     TrainingDiverged, UsageError)
from .network import Network

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "BlockSpec", "Network", "Parameter", "Tape", "Tensor",
    "backward", "build_preset", "build_resnet", "build_single", "build_vit",
    "count", "count_diff", "describe", "grad_check",
    "ConfigError", "FormatError", "GeometryError", "PfnetError", "ResourceError",
    "ShapeError", "TrainingDiverged", "UsageError",
]
