"""Patch-attention forecaster with a spectral branch and exogenous-robust training.

Everything runs on numpy with a small reverse-mode autodiff engine; the DFT
kernels are compiled with numba when it is available.
"""
from .model import ConfigError, FTimeXer, ModelConfig, load_checkpoint, save_checkpoint
from .metrics import Metrics, compute_metrics
from .training import TrainConfig, TrainingDiverged, fit

__version__ = "0.1.0"

__all__ = ["FTimeXer", "ModelConfig", "ConfigError", "TrainConfig", "TrainingDiverged", "fit",
           "Metrics", "compute_metrics", "load_checkpoint", "save_checkpoint"]
