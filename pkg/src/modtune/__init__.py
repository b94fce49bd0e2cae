"""Mixture-of-Depths tuning for small decoder-only transformers, on numpy."""

__version__ = "0.1.0"

from .errors import ConfigError, ModtuneError, NumericalError, ShapeError, StateError, ValidationError
from .model import ModelConfig, TransformerModel, closed_form_param_count, count_params, forward, init_model
from .lora import LoraConfig, inject, merge_check
from .mod_head import ModConfig, ModHead, ensemble, init_head
from .objectives import LossBundle, combined_loss, distill_loss, mod_losses, task_loss
from .trainer import PRESETS, TrainConfig, TrainResult, evaluate, setup_preset, train
from .inference import ComputeLedger, GenConfig, generate, generate_early_exit
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .data import DatasetSpec, build_dataset

__all__ = [
    "ComputeLedger", "ConfigError", "DatasetSpec", "GenConfig", "LoraConfig", "LossBundle",
    "ModConfig", "ModHead", "ModelConfig", "ModtuneError", "NumericalError", "PRESETS",
    "RunConfig", "ShapeError", "StateError", "TrainConfig", "TrainResult", "TransformerModel",
    "ValidationError", "build_dataset", "closed_form_param_count", "combined_loss",
    "count_params", "distill_loss", "ensemble", "evaluate", "forward", "generate",
    "generate_early_exit", "init_head", "init_model", "inject", "load_checkpoint",
    "load_config", "merge_check", "mod_losses", "parse_config", "save_checkpoint",
    "setup_preset", "task_loss", "train",
]
