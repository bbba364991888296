"""Weakly-paired H&E to IHC stain translation with style, structure and
pathology-pattern constraints, plus a synthetic data generator and the
evaluation metrics used to compare variants."""

from .data import (
    AugmentationSpec,
    DatasetManifest,
    generate_synthetic_dataset,
    load_manifest,
    load_split,
    normalize_illumination,
    simulate_weak_pairing,
)
from .generator import StainTranslator
from .metrics import MetricsReport, l1_od, psnr, ssim, vif, weighted_acc_auc
from .networks import GeneratorConfig
from .stains import optical_density
from .training import PRESETS, Checkpoint, TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "AugmentationSpec", "Checkpoint", "DatasetManifest", "GeneratorConfig", "MetricsReport",
    "PRESETS", "StainTranslator", "TrainConfig", "Trainer", "generate_synthetic_dataset",
    "l1_od", "load_manifest", "load_split", "normalize_illumination", "optical_density", "psnr",
    "simulate_weak_pairing", "ssim", "vif", "weighted_acc_auc",
]
