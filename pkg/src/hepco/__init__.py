"""Desk-scale simulator of continual federated learning with data-free prompt consolidation."""

from .encoder import Dataset, SyntheticSpec, load_embeddings, synth_generate
from .harness import ExperimentConfig, ablation_suite, load_config, run_experiment
from .promptmodel import FrozenAttention, PromptState

__all__ = [
    "Dataset",
    "ExperimentConfig",
    "FrozenAttention",
    "PromptState",
    "SyntheticSpec",
    "ablation_suite",
    "load_config",
    "load_embeddings",
    "run_experiment",
    "synth_generate",
]
__version__ = "0.1.0"
