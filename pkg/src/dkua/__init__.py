"""Lifelong person re-identification with per-domain transfer modules,
adaptive knowledge unification, and covariance-based distribution transfer."""

from .estimator import DkuaLifelongReID, check_images
from .model import BackboneConfig, DkuaModel, ForwardOutputs
from .numerics import Tensor

__all__ = [
    "BackboneConfig",
    "DkuaLifelongReID",
    "DkuaModel",
    "ForwardOutputs",
    "Tensor",
    "check_images",
]

__version__ = "0.1.0"
