"""Single-image point cloud reconstruction by deforming a random initial cloud.

A small numpy autodiff engine drives GraphX point-mixing layers, image/point
feature blending (projection sampling and 2D-to-3D AdaIN) and Chamfer
training on procedurally generated shapes.
"""
from .errors import (ConfigError, ContractError, DomainError, PCDNetError, SerializationError, ShapeError,
                     TrainingDiverged)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "PCDNetError", "ShapeError", "DomainError", "ConfigError", "ContractError",
           "SerializationError", "TrainingDiverged", "__version__"]
