"""Few-shot bi-temporal building change detection with MC-dropout uncertainty."""
from .checkpoint import load_checkpoint, save_checkpoint, transfer_weights
from .data import BitemporalSample, DatasetManifest, levircd_template, read_manifest, synth_dataset
from .estimator import ChangeDetector
from .metrics import MetricsReport, confusion, iou
from .model import Fusion, ModelConfig, Task, build_model, forward
from .rng import RngStream
from .tensor import ForwardMode, Tape, Tensor
from .training import Episode, TrainConfig, finetune_episode, pretrain, train
from .uncertainty import McConfig, binary_entropy, decompose, mc_uncertainty

__version__ = "0.1.0"

__all__ = [
    "BitemporalSample", "ChangeDetector", "DatasetManifest", "Episode", "ForwardMode", "Fusion", "McConfig",
    "MetricsReport", "ModelConfig", "RngStream", "Tape", "Task", "Tensor", "TrainConfig", "binary_entropy",
    "build_model", "confusion", "decompose", "finetune_episode", "forward", "iou", "levircd_template",
    "load_checkpoint", "mc_uncertainty", "pretrain", "read_manifest", "save_checkpoint", "synth_dataset",
    "train", "transfer_weights",
]
