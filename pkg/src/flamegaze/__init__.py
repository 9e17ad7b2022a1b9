"""Multimodal gaze estimation from eye patches and facial-landmark heatmaps.

A small numpy network stack with explicit forward/backward passes; the hot
kernels run through numba unless ``FLAME_NUMBA=0``.
"""
from ._kernels import backend
from .geometry import angles_to_vector, angular_error, vector_loss, vector_to_angles
from .model import Checkpoint, GazeNet, ModelSpec, build_model, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate, lr_at_epoch, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "GazeNet",
    "ModelSpec",
    "TrainConfig",
    "angles_to_vector",
    "angular_error",
    "backend",
    "build_model",
    "evaluate",
    "load_checkpoint",
    "lr_at_epoch",
    "save_checkpoint",
    "train",
    "vector_loss",
    "vector_to_angles",
]
