"""Ranking losses with analytic gradients.

All functions accept scalars or arrays and broadcast elementwise. Negative
scores carry a trailing axis, one entry per sampled negative.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import DimensionError


def softplus(x):
    return np.logaddexp(0.0, x)


def loss_bpr(s_pos, s_neg):
    """``softplus(s_neg - s_pos)`` and its gradients w.r.t. both scores."""
    diff = np.subtract(s_neg, s_pos)
    g = expit(diff)
    return softplus(diff), -g, g


def loss_bce(s_pos, s_neg):
    """Positive labelled 1, each negative labelled 0, summed over negatives."""
    loss_pos, g_pos, g_neg = _bce_parts(s_pos, s_neg)
    return loss_pos + softplus(np.asarray(s_neg)).sum(axis=-1), g_pos, g_neg


def ultragcn_weight(d_u, d_i):
    """Degree weight ``(1/d_u) * sqrt((d_u + 1) / (d_i + 1))`` of a positive pair."""
    d_u = np.asarray(d_u, dtype=np.float64)
    d_i = np.asarray(d_i, dtype=np.float64)
    if np.any(d_u < 1):
        raise DimensionError("user degree must be >= 1 for a training positive")
    if np.any(d_i < 0):
        raise DimensionError("item degree must be non-negative")
    w = np.sqrt((d_u + 1.0) / (d_i + 1.0)) / d_u
    return float(w) if w.ndim == 0 else w


def loss_ultragcn(s_pos, s_neg, beta_pos, gamma):
    """BCE with the positive term scaled by ``1 + gamma * beta_pos``.

    With ``gamma == 0`` the result is bit-identical to :func:`loss_bce`.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    loss_pos, g_pos, g_neg = _bce_parts(s_pos, s_neg)
    w = 1.0 + gamma * np.asarray(beta_pos, dtype=np.float64)
    return w * loss_pos + softplus(np.asarray(s_neg)).sum(axis=-1), w * g_pos, g_neg


def _bce_parts(s_pos, s_neg):
    s_pos = np.asarray(s_pos)
    return softplus(-s_pos), -expit(-s_pos), expit(np.asarray(s_neg))


def l2_penalty(params, touched_rows, lam):
    """``lam * sum ||row||^2`` over the rows touched by a mini-batch.

    ``touched_rows`` maps ``"user"``/``"item"`` to unique row indices. Returns the
    penalty and, per table, ``(rows, 2 * lam * row_values)``.
    """
    if lam < 0:
        raise ValueError("L2 coefficient must be non-negative")
    tables = {"user": params.user_emb, "item": params.item_emb}
    penalty = 0.0
    grads = {}
    for name, rows in touched_rows.items():
        vals = tables[name][rows]
        penalty += lam * float(np.einsum("ij,ij->", vals, vals))
        grads[name] = (rows, 2.0 * lam * vals)
    return penalty, grads
