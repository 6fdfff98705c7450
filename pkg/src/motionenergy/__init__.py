"""Motion-energy convolutional network for optical flow estimation."""

from ._backend import get_backend, set_backend
from .network import MotionNet, NetworkConfig, estimate_flow, forward_multiscale, forward_recurrent
from .training import TrainConfig, Trainer, train

__all__ = [
    "MotionNet",
    "NetworkConfig",
    "TrainConfig",
    "Trainer",
    "estimate_flow",
    "forward_multiscale",
    "forward_recurrent",
    "get_backend",
    "set_backend",
    "train",
]

__version__ = "0.1.0"
