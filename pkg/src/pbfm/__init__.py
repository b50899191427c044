"""Flow-matching generative models trained jointly against physical residuals."""

__version__ = "0.1.0"

from .combiner import GradientPair, combine, config_update
from .data import GridDataset
from .fileio import read_checkpoint, read_dataset, write_checkpoint, write_dataset
from .kernels import BACKEND
from .models import NetConfig, VelocityNet
from .sampler import SamplerConfig, sample
from .trainer import TrainConfig, Trainer

__all__ = [
    "BACKEND", "GradientPair", "GridDataset", "NetConfig", "SamplerConfig", "TrainConfig", "Trainer",
    "VelocityNet", "combine", "config_update", "read_checkpoint", "read_dataset", "sample",
    "write_checkpoint", "write_dataset",
]
