"""Hyperspectral single-image super-resolution with a spatial-spectral feedback network."""

from .data import DatasetManifest, DegradationSpec, HsiCube, load_cube, save_cube
from .metrics import MetricReport, evaluate_pair
from .model import ModelConfig, forward, group_bands, init_params, param_count
from .train import Checkpoint, TrainConfig, evaluate_checkpoint, resume, train

__version__ = "0.1.0"
