"""Adversarial microscopy cell segmentation on a small numpy autodiff core."""
from .data import LabeledSample, SynthConfig, augment, decode_rgb, encode_rgb, synth_generate
from .estimator import AdversarialSegmenter
from .evaluation import compute_metrics, extract_instances, match_instances, probmap_to_classes
from .trainer import TrainConfig, checkpoint_load, checkpoint_save, init_state, train_step

__all__ = [
    "AdversarialSegmenter",
    "LabeledSample",
    "SynthConfig",
    "TrainConfig",
    "augment",
    "checkpoint_load",
    "checkpoint_save",
    "compute_metrics",
    "decode_rgb",
    "encode_rgb",
    "extract_instances",
    "init_state",
    "match_instances",
    "probmap_to_classes",
    "synth_generate",
    "train_step",
]

__version__ = "0.1.0"
