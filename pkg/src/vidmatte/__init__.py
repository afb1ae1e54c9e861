"""Trimap-free video matting with query-based temporal modelling, in numpy."""
from .estimator import VideoMatter
from .losses import LossConfig, total_loss
from .metrics import MetricReport, evaluate_clip
from .model import MattingNetwork, ModelConfig
from .synthcomp import CompositeSample, SynthConfig, synthesize_sample
from .trainer import (
    TrainConfig,
    infer,
    load_checkpoint,
    save_checkpoint,
    train,
    train_samples,
)

__version__ = "0.1.0"

__all__ = [
    "CompositeSample",
    "LossConfig",
    "MattingNetwork",
    "MetricReport",
    "ModelConfig",
    "SynthConfig",
    "TrainConfig",
    "VideoMatter",
    "evaluate_clip",
    "infer",
    "load_checkpoint",
    "save_checkpoint",
    "synthesize_sample",
    "total_loss",
    "train",
    "train_samples",
]
