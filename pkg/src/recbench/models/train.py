"""Mini-batch training for MF, LightGCN and UltraGCN-core."""
from __future__ import annotations

import csv
import enum
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..context import EvalContext, LossKind, TrainConfig
from ..data import InteractionStore, Split
from ..errors import DimensionError, UsageError
from .graph import NormalizedBipartiteGraph, normalize_adjacency, propagate_lightgcn, propagate_stacked
from .losses import l2_penalty, loss_bce, loss_bpr, loss_ultragcn, ultragcn_weight
from .optim import OptimizerState, adam_step
from .params import ModelParams, init_params
from .sampling import sample_negatives_batch

_logger = logging.getLogger(__name__)


class ModelKind(str, enum.Enum):
    MF = "mf"
    LIGHTGCN = "lightgcn"
    ULTRAGCN = "ultragcn"


DISPLAY_NAMES = {ModelKind.MF: "MF", ModelKind.ULTRAGCN: "UltraGCN", ModelKind.LIGHTGCN: "LightGCN"}


def check_compatible(model_kind, ctx: EvalContext) -> None:
    if ModelKind(model_kind) is ModelKind.ULTRAGCN and ctx.loss_kind is not LossKind.BCE:
        raise UsageError("ultragcn is a weighted BCE model and needs loss_kind=bce")


@dataclass
class Batch:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray  # (B, n)


def _sum_rows(idx: np.ndarray, vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows, inv = np.unique(idx, return_inverse=True)
    out = np.zeros((len(rows), vals.shape[-1]), dtype=vals.dtype)
    np.add.at(out, inv.ravel(), vals.reshape(-1, vals.shape[-1]))
    return rows, out


def pair_losses(loss_kind, s_pos, s_neg, beta=None, gamma=0.0):
    """Per-positive loss and score gradients; negatives are summed."""
    loss_kind = LossKind(loss_kind)
    if beta is not None:
        return loss_ultragcn(s_pos, s_neg, beta, gamma)
    if loss_kind is LossKind.BPR:
        loss, g_pos, g_neg = loss_bpr(s_pos[:, None], s_neg)
        return loss.sum(axis=1), g_pos.sum(axis=1), g_neg
    return loss_bce(s_pos, s_neg)


def _embedding_grads(user_vecs, pos_vecs, neg_vecs, g_pos, g_neg, scale):
    g_user = g_pos[:, None] * pos_vecs + np.einsum("bn,bnd->bd", g_neg, neg_vecs)
    g_posv = g_pos[:, None] * user_vecs
    g_negv = g_neg[:, :, None] * user_vecs[:, None, :]
    return g_user * scale, g_posv * scale, g_negv * scale


def batch_objective(
    model_kind,
    params: ModelParams,
    batch: Batch,
    loss_kind,
    l2: float,
    graph: NormalizedBipartiteGraph | None = None,
    layers: int = 0,
    beta: np.ndarray | None = None,
    gamma: float = 0.0,
):
    """Mini-batch objective ``(sum of pair losses + L2 penalty) / B``.

    Returns ``(objective, mean_pair_loss, gradients)``. Gradients are row-sparse
    ``(rows, values)`` pairs, except for LightGCN where propagation spreads them
    over every row and dense arrays are returned.
    """
    model_kind = ModelKind(model_kind)
    u, i, j = batch.users, batch.pos_items, batch.neg_items
    B = len(u)
    scale = 1.0 / B
    if model_kind is ModelKind.LIGHTGCN:
        if graph is None:
            raise DimensionError("LightGCN needs a normalized graph")
        final = propagate_lightgcn(graph, params, layers)
    else:
        final = params
    uv = final.user_emb[u]
    pv = final.item_emb[i]
    nv = final.item_emb[j]
    s_pos = np.einsum("bd,bd->b", uv, pv)
    s_neg = np.einsum("bd,bnd->bn", uv, nv)
    if model_kind is ModelKind.ULTRAGCN:
        if beta is None:
            raise DimensionError("UltraGCN needs per-positive weights")
        loss, g_pos, g_neg = pair_losses(loss_kind, s_pos, s_neg, beta=beta, gamma=gamma)
    else:
        loss, g_pos, g_neg = pair_losses(loss_kind, s_pos, s_neg)
    g_u, g_p, g_n = _embedding_grads(uv, pv, nv, g_pos, g_neg, scale)

    touched = {"user": np.unique(u), "item": np.unique(np.concatenate([i, j.ravel()]))}
    penalty, reg = l2_penalty(params, touched, l2)
    loss_sum = float(loss.sum())
    objective = (loss_sum + penalty) * scale

    item_idx = np.concatenate([i, j.ravel()])
    item_vals = np.concatenate([g_p, g_n.reshape(-1, g_n.shape[-1])])
    if model_kind is ModelKind.LIGHTGCN:
        n_u = params.num_users
        G = np.zeros((graph.num_nodes, params.dim), dtype=params.user_emb.dtype)
        np.add.at(G, u, g_u)
        np.add.at(G, n_u + item_idx, item_vals)
        G = propagate_stacked(graph, G, layers)
        G[n_u + reg["item"][0]] += reg["item"][1] * scale
        G[reg["user"][0]] += reg["user"][1] * scale
        grads = {"user": G[:n_u], "item": G[n_u:]}
    else:
        ur, ug = _sum_rows(u, g_u)
        ir, ig = _sum_rows(item_idx, item_vals)
        # np.unique output is sorted, so the L2 rows line up with the loss rows
        ug += reg["user"][1] * scale
        ig += reg["item"][1] * scale
        grads = {"user": (ur, ug), "item": (ir, ig)}
    return objective, loss_sum * scale, grads


def _as_store(split) -> InteractionStore:
    return split.train if isinstance(split, Split) else split


def train_epoch(
    model_kind,
    split,
    ctx: EvalContext,
    cfg: TrainConfig,
    params: ModelParams,
    opt_state: OptimizerState,
    rng: np.random.Generator,
    graph: NormalizedBipartiteGraph | None = None,
):
    """One pass over all training positives in a seeded shuffle.

    Parameters and optimizer state are updated in place and returned. The
    third element is the mean per-positive loss, or ``None`` when the training
    store is empty.
    """
    model_kind = ModelKind(model_kind)
    check_compatible(model_kind, ctx)
    train = _as_store(split)
    if (params.num_users, params.num_items) != (train.num_users, train.num_items):
        raise DimensionError("params do not match the training store")
    if params.dim != ctx.embedding_dim:
        raise DimensionError(f"params have dim {params.dim}, context says {ctx.embedding_dim}")
    if train.nnz == 0:
        return params, opt_state, None
    if model_kind is ModelKind.LIGHTGCN and graph is None:
        graph = normalize_adjacency(train)
    users, items = train.pairs()
    beta_all = None
    if model_kind is ModelKind.ULTRAGCN:
        beta_all = ultragcn_weight(train.user_degrees()[users], train.item_degrees()[items])
    order = rng.permutation(train.nnz)
    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        u = users[idx]
        negs = sample_negatives_batch(train, u, ctx.num_negatives, rng, ctx.sampler_kind)
        batch = Batch(u, items[idx], negs)
        beta = beta_all[idx] if beta_all is not None else None
        _, mean_loss, grads = batch_objective(
            model_kind,
            params,
            batch,
            ctx.loss_kind,
            cfg.l2_coefficient,
            graph=graph,
            layers=cfg.lightgcn_layers,
            beta=beta,
            gamma=cfg.ultragcn_gamma,
        )
        adam_step(opt_state, params, grads, cfg.learning_rate)
        total += mean_loss * len(idx)
    return params, opt_state, total / train.nnz


def scoring_params(model_kind, params: ModelParams, train: InteractionStore, layers: int, graph=None) -> ModelParams:
    """Embeddings used for retrieval: propagated for LightGCN, as-is otherwise."""
    if ModelKind(model_kind) is not ModelKind.LIGHTGCN or layers == 0:
        return params
    if graph is None:
        graph = normalize_adjacency(train)
    return propagate_lightgcn(graph, params, layers)


def append_loss_trace(path, epoch: int, mean_loss, wall_seconds: float) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "mean_loss", "wall_seconds"])
        w.writerow([epoch, "" if mean_loss is None else repr(float(mean_loss)), f"{wall_seconds:.6f}"])


@dataclass
class TrainResult:
    params: ModelParams
    scoring: ModelParams
    trace: list = field(default_factory=list)
    best_epoch: int | None = None
    best_score: float | None = None
    epochs_run: int = 0


def fit(
    model_kind,
    split,
    ctx: EvalContext,
    cfg: TrainConfig,
    validate: Callable[[ModelParams], float] | None = None,
    eval_every: int = 1,
    patience: int | None = None,
    trace_path=None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs.

    With ``validate`` given, it is called on the scoring embeddings every
    ``eval_every`` epochs; the best-scoring parameters are kept, and training
    stops early after ``patience`` evaluations without improvement.
    """
    model_kind = ModelKind(model_kind)
    check_compatible(model_kind, ctx)
    train = _as_store(split)
    params = init_params(train.num_users, train.num_items, ctx.embedding_dim, cfg.seed)
    state = OptimizerState.zeros_like(params)
    rng = np.random.default_rng([cfg.seed, 1])
    graph = normalize_adjacency(train) if model_kind is ModelKind.LIGHTGCN else None
    result = TrainResult(params=params, scoring=params)
    best = None
    stale = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        params, state, loss = train_epoch(model_kind, train, ctx, cfg, params, state, rng, graph=graph)
        wall = time.perf_counter() - t0
        result.trace.append((epoch, loss, wall))
        result.epochs_run = epoch
        if trace_path is not None:
            append_loss_trace(trace_path, epoch, loss, wall)
        _logger.info("epoch %d loss %s (%.1fs)", epoch, loss, wall)
        if loss is None:
            break
        if validate is not None and (epoch % eval_every == 0 or epoch == cfg.epochs):
            value = validate(scoring_params(model_kind, params, train, cfg.lightgcn_layers, graph))
            if result.best_score is None or value > result.best_score:
                result.best_score, result.best_epoch = value, epoch
                best = params.copy()
                stale = 0
            else:
                stale += 1
                if patience is not None and stale >= patience:
                    _logger.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                    break
    if best is not None:
        params = best
    result.params = params
    result.scoring = scoring_params(model_kind, params, train, cfg.lightgcn_layers, graph)
    return result
