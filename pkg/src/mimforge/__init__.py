"""Desk-scale masked image modeling with a codebook tokenizer and open-set evaluation."""

from .data import Dataset, ShiftSpec, augment, corrupt, generate_shapes_dataset, make_ood_mesh
from .metrics import EvalReport, accuracy, auroc, evaluate, known_score
from .model import ModelConfig, ModelState, init_model
from .patches import MaskPlan, PatchSequence, apply_mask, blockwise_mask, patchify
from .tensor import Tensor, backward
from .tokenizer import Codebook, TokenGrid, decode_tokens, encode_tokens, train_codebook
from .training import TrainConfig, cosine_lr, pretrain_step, run_finetune, run_pretrain

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "Dataset",
    "EvalReport",
    "MaskPlan",
    "ModelConfig",
    "ModelState",
    "PatchSequence",
    "ShiftSpec",
    "Tensor",
    "TokenGrid",
    "TrainConfig",
    "accuracy",
    "apply_mask",
    "augment",
    "auroc",
    "backward",
    "blockwise_mask",
    "corrupt",
    "cosine_lr",
    "decode_tokens",
    "encode_tokens",
    "evaluate",
    "generate_shapes_dataset",
    "init_model",
    "known_score",
    "make_ood_mesh",
    "patchify",
    "pretrain_step",
    "run_finetune",
    "run_pretrain",
    "train_codebook",
]
