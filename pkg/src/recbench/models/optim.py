"""Adam with lazy (row-sparse) moment updates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, PoisonedUpdateError
from .params import ModelParams

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimizerState:
    m_user: np.ndarray
    v_user: np.ndarray
    m_item: np.ndarray
    v_item: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            np.zeros_like(params.user_emb),
            np.zeros_like(params.user_emb),
            np.zeros_like(params.item_emb),
            np.zeros_like(params.item_emb),
        )

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.m_user.copy(), self.v_user.copy(), self.m_item.copy(), self.v_item.copy(), self.step)


def adam_step(state: OptimizerState, params: ModelParams, gradients: dict, lr: float) -> ModelParams:
    """Apply one Adam update in place and return ``params``.

    ``gradients`` maps ``"user"``/``"item"`` to either a dense array shaped like
    the table or a ``(rows, values)`` pair with unique ``rows``. Only the listed
    rows have their moments advanced. The bias correction uses the global step.
    """
    tables = {
        "user": (params.user_emb, state.m_user, state.v_user),
        "item": (params.item_emb, state.m_item, state.v_item),
    }
    prepared = []
    for name, grad in gradients.items():
        table, m, v = tables[name]
        if isinstance(grad, tuple):
            rows, g = grad
            rows = np.asarray(rows, dtype=np.int64)
        else:
            rows, g = None, grad
        expect = table.shape if rows is None else (len(rows), table.shape[1])
        if g.shape != expect:
            raise DimensionError(f"{name} gradient has shape {g.shape}, expected {expect}")
        if not np.isfinite(g).all():
            raise PoisonedUpdateError(f"non-finite {name} gradient")
        prepared.append((table, m, v, rows, g))

    state.step += 1
    c1 = 1.0 - BETA1**state.step
    c2 = 1.0 - BETA2**state.step
    for table, m, v, rows, g in prepared:
        if rows is None:
            m *= BETA1
            m += (1.0 - BETA1) * g
            v *= BETA2
            v += (1.0 - BETA2) * g * g
            table -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)
            if not np.isfinite(table).all():
                raise PoisonedUpdateError("parameters became non-finite")
        else:
            mr = BETA1 * m[rows] + (1.0 - BETA1) * g
            vr = BETA2 * v[rows] + (1.0 - BETA2) * g * g
            m[rows] = mr
            v[rows] = vr
            new = table[rows] - lr * (mr / c1) / (np.sqrt(vr / c2) + EPS)
            if not np.isfinite(new).all():
                raise PoisonedUpdateError("parameters became non-finite")
            table[rows] = new
    return params
