"""Relevance-guided finetuning of a small vision transformer on a synthetic spurious-cue benchmark."""

from .relevance import RelevanceMap, relevance_map
from .tensor import ContractError, DimensionError, Tensor
from .vit import ViTConfig, ViTModel, forward, init_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DimensionError",
    "RelevanceMap",
    "Tensor",
    "ViTConfig",
    "ViTModel",
    "forward",
    "init_model",
    "load_checkpoint",
    "relevance_map",
    "save_checkpoint",
]
