"""Segment-wise recurrent forecasting with implicit segmentation, a residual
bypass around the recurrence, and selective state-space preprocessing."""

from .data import load_csv, make_windows, prepare
from .model import IsmrnnModel, ModelConfig
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint

__all__ = ["IsmrnnModel", "ModelConfig", "TrainConfig", "fit", "load_csv", "make_windows", "prepare",
           "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
