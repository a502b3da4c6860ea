from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import SPECIAL_TOKENS, ModelConfig
from .network import Model, ModelOutputs

__all__ = [
    "SPECIAL_TOKENS",
    "CheckpointError",
    "Model",
    "ModelConfig",
    "ModelOutputs",
    "load_checkpoint",
    "save_checkpoint",
]
