"""Symmetric-normalized user-item graph and linear (LightGCN-style) propagation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..data import InteractionStore
from ..errors import DimensionError
from .params import ModelParams


@dataclass(frozen=True)
class NormalizedBipartiteGraph:
    """CSR adjacency over users ``0..U-1`` followed by items ``U..U+I-1``.

    Each training edge (u, i) appears as (u, U+i) and (U+i, u), both with
    coefficient ``1/sqrt(d_u * d_i)``.
    """

    num_users: int
    num_items: int
    matrix: sp.csr_matrix

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def coefficient(self, user: int, item: int) -> float:
        return float(self.matrix[user, self.num_users + item])


def normalize_adjacency(train: InteractionStore, dtype=np.float64) -> NormalizedBipartiteGraph:
    users, items = train.pairs()
    du = train.user_degrees().astype(np.float64)
    di = train.item_degrees().astype(np.float64)
    coef = 1.0 / np.sqrt(du[users] * di[items])
    n_u, n_i = train.num_users, train.num_items
    rows = np.concatenate([users, n_u + items])
    cols = np.concatenate([n_u + items, users])
    data = np.concatenate([coef, coef]).astype(dtype)
    mat = sp.csr_matrix((data, (rows, cols)), shape=(n_u + n_i, n_u + n_i))
    mat.sort_indices()
    return NormalizedBipartiteGraph(n_u, n_i, mat)


def propagate_stacked(graph: NormalizedBipartiteGraph, emb: np.ndarray, layers: int) -> np.ndarray:
    """Mean of ``A^k @ emb`` for k = 0..layers.

    The map is linear and ``A`` is symmetric, so this same function is also
    its own adjoint: it turns gradients w.r.t. the output into gradients
    w.r.t. ``emb``.
    """
    if layers < 0:
        raise ValueError("layers must be >= 0")
    if emb.shape[0] != graph.num_nodes:
        raise DimensionError(f"embedding has {emb.shape[0]} rows, graph has {graph.num_nodes} nodes")
    if layers == 0:
        return emb
    acc = emb.copy()
    cur = emb
    for _ in range(layers):
        cur = graph.matrix @ cur
        acc += cur
    acc /= layers + 1
    return acc


def propagate_lightgcn(graph: NormalizedBipartiteGraph, params: ModelParams, layers: int) -> ModelParams:
    if params.num_users != graph.num_users or params.num_items != graph.num_items:
        raise DimensionError(
            f"params ({params.num_users}x{params.num_items}) do not match graph "
            f"({graph.num_users}x{graph.num_items})"
        )
    if layers == 0:
        return params
    out = propagate_stacked(graph, params.stacked(), layers)
    return ModelParams.from_stacked(out, graph.num_users)
