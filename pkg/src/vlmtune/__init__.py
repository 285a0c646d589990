"""vlmtune: desk-scale vision-language fine-tuning with PEFT adapters.

A self-contained stack: numpy-backed reverse-mode autodiff, a three-component
vision-language transformer, four attachable PEFT mechanisms with exact
parameter accounting, instruction-format data generation, and a generative
train/evaluate harness.
"""

from .autograd import GradTape, Tensor, backward
from .config import ModelConfig, config_from_preset, full_config, micro_config, toy_config
from .evaluation import EvalReport, evaluate
from .model import VLModel, build_model
from .optim import AdamW, cosine_lr_at
from .plans import Mode, ParamReport, TuningPlan, apply_plan, count_params, verify_masking
from .tokenizer import ByteTokenizer
from .training import RunLog, TrainConfig, train, train_two_stage

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "ByteTokenizer",
    "EvalReport",
    "GradTape",
    "Mode",
    "ModelConfig",
    "ParamReport",
    "RunLog",
    "Tensor",
    "TrainConfig",
    "TuningPlan",
    "VLModel",
    "apply_plan",
    "backward",
    "build_model",
    "config_from_preset",
    "cosine_lr_at",
    "count_params",
    "evaluate",
    "full_config",
    "micro_config",
    "toy_config",
    "train",
    "train_two_stage",
    "verify_masking",
    "__version__",
]
