"""Hybrid Mamba2 / shared-attention language model: scan kernels, model,
training, constant-state inference, 4-bit quantization and evaluation harnesses."""

from .errors import (CapacityError, ConfigError, ContractError, DimensionError, HybridSSMError, InputError,
                     InvariantViolation, NonFiniteLossError, PolicyError, ResumeError)
from .estimator import HybridLMEstimator, Int4Quantizer, check_token_rows
from .model import (PRESETS, HybridLM, ModelConfig, PureTransformerLM, analytic_cache_bytes, build_model,
                    build_pure_baseline, preset, shrink)

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigError", "ContractError", "DimensionError", "HybridSSMError", "InputError",
    "InvariantViolation", "NonFiniteLossError", "PolicyError", "ResumeError",
    "HybridLMEstimator", "Int4Quantizer", "check_token_rows",
    "PRESETS", "HybridLM", "ModelConfig", "PureTransformerLM", "analytic_cache_bytes", "build_model",
    "build_pure_baseline", "preset", "shrink",
]
