"""Rotation-equivariant symbol recognition with cyclic filter banks, on numpy."""

from .errors import RinnError
from .network import Model, ModelSpec, PoseMap, forward_pose, load_model, save_model
from .tensor import GroupLayout, cyclic_shift_orientation, rotate_plane
from .training import TrainConfig, train_pipeline

__version__ = "0.1.0"

__all__ = [
    "GroupLayout",
    "Model",
    "ModelSpec",
    "PoseMap",
    "RinnError",
    "TrainConfig",
    "cyclic_shift_orientation",
    "forward_pose",
    "load_model",
    "rotate_plane",
    "save_model",
    "train_pipeline",
]
