"""Pyramidal LSTM encoder with a dual-attention CTC decoder, in numpy."""

from .network import decode, encode, head_logits
from .params import (
    CheckpointError,
    ModelCheckpoint,
    ModelConfig,
    init_model,
    load_checkpoint,
    save_checkpoint,
    transfer_parameters,
)
from .train import (
    ASR_CHARS,
    ENCODER_ONLY,
    FULL,
    SLU_CONCEPTS,
    StageHyper,
    StageResult,
    TrainingDiverged,
    TrainingError,
    train_stage,
)

__all__ = [
    "ASR_CHARS",
    "ENCODER_ONLY",
    "FULL",
    "SLU_CONCEPTS",
    "CheckpointError",
    "ModelCheckpoint",
    "ModelConfig",
    "StageHyper",
    "StageResult",
    "TrainingDiverged",
    "TrainingError",
    "decode",
    "encode",
    "head_logits",
    "init_model",
    "load_checkpoint",
    "save_checkpoint",
    "train_stage",
    "transfer_parameters",
]
