"""Decoder-aware contrastive pre-training at desk scale."""

from decon.config import ExperimentConfig, preset, validate_config

__all__ = ["ExperimentConfig", "preset", "validate_config"]
__version__ = "0.1.0"
