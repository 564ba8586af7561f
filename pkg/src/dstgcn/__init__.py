"""DSTGCN: dynamic spatiotemporal graph convolution for traffic-speed imputation."""
from .data import DataError, SpeedMatrix, load_speed_matrix, save_speed_matrix, synthesize_dataset
from .evaluation import MetricsReport, compute_metrics, run_experiment, sliding_impute, split
from .graph import GraphKind, TrafficGraph, build_binary_adjacency, build_gaussian_adjacency, compute_transitions
from .masking import MaskMatrix, Pattern, apply_mask, generate_mask
from .model import ModelConfig, Normalizer, dstgcn_forward, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainedModel, TrainingDiverged, gradient_check, train

__all__ = [
    "DataError", "SpeedMatrix", "load_speed_matrix", "save_speed_matrix", "synthesize_dataset",
    "MetricsReport", "compute_metrics", "run_experiment", "sliding_impute", "split",
    "GraphKind", "TrafficGraph", "build_binary_adjacency", "build_gaussian_adjacency", "compute_transitions",
    "MaskMatrix", "Pattern", "apply_mask", "generate_mask",
    "ModelConfig", "Normalizer", "dstgcn_forward", "init_params", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "TrainedModel", "TrainingDiverged", "gradient_check", "train",
]
