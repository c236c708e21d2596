"""Uniform negative sampling over the item catalog."""
from __future__ import annotations

import numpy as np

from ..context import SamplerKind
from ..data import InteractionStore
from ..errors import ExhaustionError

RETRY_FACTOR = 100


def sample_negatives(
    train: InteractionStore,
    user_id: int,
    n: int,
    rng: np.random.Generator,
    kind: SamplerKind = SamplerKind.UNIFORM_REJECT,
) -> np.ndarray:
    """Draw ``n`` negative item ids for one user.

    ``UNIFORM_REJECT`` redraws items found in the user's training row, giving
    up after ``100 * n`` draws and finishing with exact sampling from the
    complement. ``UNIFORM_FREE`` draws from the full catalog.
    """
    kind = SamplerKind(kind)
    num_items = train.num_items
    if kind is SamplerKind.UNIFORM_FREE:
        return rng.integers(0, num_items, size=n)
    pos = train.row(user_id)
    if len(pos) >= num_items:
        raise ExhaustionError(f"user {user_id} interacted with every item")
    out = np.empty(n, dtype=np.int64)
    filled = 0
    draws = 0
    while filled < n and draws < RETRY_FACTOR * n:
        cand = rng.integers(0, num_items, size=n - filled)
        draws += len(cand)
        idx = np.searchsorted(pos, cand)
        hit = idx < len(pos)
        hit[hit] = pos[idx[hit]] == cand[hit]
        good = cand[~hit]
        out[filled : filled + len(good)] = good
        filled += len(good)
    if filled < n:
        complement = np.setdiff1d(np.arange(num_items), pos, assume_unique=True)
        out[filled:] = complement[rng.integers(0, len(complement), size=n - filled)]
    return out


def sample_negatives_batch(
    train: InteractionStore,
    users: np.ndarray,
    n: int,
    rng: np.random.Generator,
    kind: SamplerKind = SamplerKind.UNIFORM_REJECT,
) -> np.ndarray:
    """Vectorized :func:`sample_negatives` for a batch of users; shape (B, n)."""
    kind = SamplerKind(kind)
    users = np.asarray(users, dtype=np.int64)
    num_items = train.num_items
    out = rng.integers(0, num_items, size=(len(users), n))
    if kind is SamplerKind.UNIFORM_FREE:
        return out
    deg = train.user_degrees()[users]
    if np.any(deg >= num_items):
        bad = int(users[np.argmax(deg >= num_items)])
        raise ExhaustionError(f"user {bad} interacted with every item")
    rows = np.broadcast_to(users[:, None], out.shape)
    bad = train.contains(rows, out)
    for _ in range(RETRY_FACTOR):
        if not bad.any():
            return out
        out[bad] = rng.integers(0, num_items, size=int(bad.sum()))
        bad[bad] = train.contains(rows[bad], out[bad])
    for r, c in zip(*np.nonzero(bad)):
        pos = train.row(users[r])
        complement = np.setdiff1d(np.arange(num_items), pos, assume_unique=True)
        out[r, c] = complement[rng.integers(0, len(complement))]
    return out
