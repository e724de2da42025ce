"""Multi-task crystal graph convolutional networks in numpy."""

__version__ = "0.1.0"

from .graph import CrystalGraph, CrystalStructure, GraphConfig, build_graph, parse_structure, periodic_neighbors
from .model import ModelConfig, ModelParams, forward, init_params, predict
from .training import Dataset, Normalizer, TrainConfig, split_dataset, train

__all__ = [
    "CrystalGraph",
    "CrystalStructure",
    "Dataset",
    "GraphConfig",
    "ModelConfig",
    "ModelParams",
    "Normalizer",
    "TrainConfig",
    "build_graph",
    "forward",
    "init_params",
    "parse_structure",
    "periodic_neighbors",
    "predict",
    "split_dataset",
    "train",
]
