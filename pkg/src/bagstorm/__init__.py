"""Label-free, patch-selective adversarial attacks on two-stage slide models."""

__version__ = "0.1.0"

from .attacks import AttackConfig, run_attack
from .data import GenConfig, generate_dataset
from .model import ModelBundle, forward_slide, load_weights, save_weights

__all__ = [
    "AttackConfig",
    "GenConfig",
    "ModelBundle",
    "forward_slide",
    "generate_dataset",
    "load_weights",
    "run_attack",
    "save_weights",
]
