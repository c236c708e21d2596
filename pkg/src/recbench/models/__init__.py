from .graph import NormalizedBipartiteGraph, normalize_adjacency, propagate_lightgcn, propagate_stacked
from .losses import l2_penalty, loss_bce, loss_bpr, loss_ultragcn, softplus, ultragcn_weight
from .optim import OptimizerState, adam_step
from .params import ModelParams, init_params, load_checkpoint, save_checkpoint, score
from .sampling import sample_negatives, sample_negatives_batch
from .train import Batch, ModelKind, TrainResult, batch_objective, fit, scoring_params, train_epoch

__all__ = [
    "Batch",
    "ModelKind",
    "ModelParams",
    "NormalizedBipartiteGraph",
    "OptimizerState",
    "TrainResult",
    "adam_step",
    "batch_objective",
    "fit",
    "init_params",
    "l2_penalty",
    "load_checkpoint",
    "loss_bce",
    "loss_bpr",
    "loss_ultragcn",
    "normalize_adjacency",
    "propagate_lightgcn",
    "propagate_stacked",
    "sample_negatives",
    "sample_negatives_batch",
    "save_checkpoint",
    "score",
    "scoring_params",
    "softplus",
    "train_epoch",
    "ultragcn_weight",
]
