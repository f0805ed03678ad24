"""PRISM: denoised, graph-coupled, physics-regularised long-horizon forecasting on numpy."""

from ._accel import BACKEND
from .data_store import Dataset, PhysicsBudgets, load_csv
from .graph_builder import GraphParams, build_graph
from .model import ModelConfig, PrismModel
from .trainer import TrainConfig, evaluate, infer, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Dataset",
    "GraphParams",
    "ModelConfig",
    "PhysicsBudgets",
    "PrismModel",
    "TrainConfig",
    "build_graph",
    "evaluate",
    "infer",
    "load_csv",
    "train",
]
