"""Mini-batched, masked full-catalog evaluation."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .context import EvalContext
from .data import Split
from .errors import ContractError, DimensionError, EmptyEvaluationError
from .metrics import METRICS, MetricScore, RunRecord, batch_metrics
from .models.params import ModelParams
from .search import ITEM_BLOCK, QUERY_BLOCK, MaskSpec, build_exact, merge_topk, search, tiled_scores

DEFAULT_BATCH_SIZE = 1024


@dataclass
class EvalRequest:
    params: ModelParams
    split: Split
    ctx: EvalContext
    batch_size: int = DEFAULT_BATCH_SIZE
    mask_train: bool = True
    model_id: str = "model"
    hyper_point: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise DimensionError("batch_size must be >= 1")
        p, s = self.params, self.split
        if (p.num_users, p.num_items) != (s.num_users, s.num_items):
            raise DimensionError(
                f"params cover {p.num_users}x{p.num_items}, split has {s.num_users}x{s.num_items}"
            )


@dataclass
class PartialSums:
    sums: dict
    count: int


@dataclass
class MetricReport:
    means: dict
    counts: dict
    wall_seconds: float = 0.0
    peak_batch: tuple[int, int] = (0, 0)

    @property
    def evaluated_users(self) -> int:
        return max(self.counts.values(), default=0)

    def as_partial(self) -> PartialSums:
        return PartialSums({key: self.means[key] * self.counts[key] for key in self.means}, self.evaluated_users)

    def scores(self, k_list: Sequence[int]) -> list[MetricScore]:
        return [MetricScore(m, k, float(self.means[(m, k)])) for k in k_list for m in METRICS]


def aggregate(partials: Sequence[PartialSums]) -> MetricReport:
    """Combine per-batch sums into means using correctly rounded summation."""
    partials = [p for p in partials if p.count > 0]
    if not partials:
        raise EmptyEvaluationError("no evaluated users")
    keys = partials[0].sums.keys()
    total = sum(p.count for p in partials)
    means = {k: math.fsum(p.sums[k] for p in partials) / total for k in keys}
    return MetricReport(means, {k: total for k in keys})


def _eval_users(split: Split) -> np.ndarray:
    users = np.flatnonzero(split.test.user_degrees() > 0)
    if len(users) == 0:
        raise EmptyEvaluationError("every user has an empty test row")
    return users


def _partial(split: Split, users, ranked_ids, k_list) -> PartialSums:
    valid = ranked_ids >= 0
    hits = np.zeros(ranked_ids.shape, dtype=bool)
    hits[valid] = split.test.contains(np.broadcast_to(users[:, None], ranked_ids.shape)[valid], ranked_ids[valid])
    values = batch_metrics(hits, split.test.user_degrees()[users], k_list)
    return PartialSums({key: math.fsum(v.tolist()) for key, v in values.items()}, len(users))


def _record(report: MetricReport, ctx: EvalContext, model_id, hyper_point) -> RunRecord:
    return RunRecord.for_context(
        model_id,
        ctx,
        report.scores(ctx.k_list),
        hyper_point=dict(hyper_point or {}),
        wall_seconds=report.wall_seconds,
        evaluated_users=report.evaluated_users,
    )


def evaluate(req: EvalRequest, return_report: bool = False):
    """Rank the whole catalog for every user with test items and score it.

    Training positives are masked unless ``req.mask_train`` is false.
    """
    t0 = time.perf_counter()
    split, ctx = req.split, req.ctx
    users = _eval_users(split)
    index = build_exact(req.params.item_emb)
    kmax = ctx.max_k
    partials = []
    for b0 in range(0, len(users), req.batch_size):
        ub = users[b0 : b0 + req.batch_size]
        masks = MaskSpec.from_store(split.train, ub) if req.mask_train else MaskSpec.none(len(ub))
        top = search(index, req.params.user_emb[ub], kmax, masks)
        partials.append(_partial(split, ub, top.ids, ctx.k_list))
    report = aggregate(partials)
    report.wall_seconds = time.perf_counter() - t0
    report.peak_batch = (min(req.batch_size, QUERY_BLOCK, len(users)), min(ITEM_BLOCK, split.num_items))
    record = _record(report, ctx, req.model_id, req.hyper_point)
    return (record, report) if return_report else record


def evaluate_with_scorer(
    score_fn: Callable[[np.ndarray], np.ndarray],
    split: Split,
    ctx: EvalContext,
    batch_size: int = DEFAULT_BATCH_SIZE,
    mask_train: bool = True,
    model_id: str = "model",
    hyper_point: dict | None = None,
) -> RunRecord:
    """Like :func:`evaluate`, with scores from ``score_fn(user_ids) -> (B, num_items)``."""
    if batch_size < 1:
        raise DimensionError("batch_size must be >= 1")
    t0 = time.perf_counter()
    users = _eval_users(split)
    kmax = ctx.max_k
    m = split.num_items
    partials = []
    for b0 in range(0, len(users), batch_size):
        ub = users[b0 : b0 + batch_size]
        scores = np.array(score_fn(ub), copy=True)
        if not np.issubdtype(scores.dtype, np.floating):
            scores = scores.astype(np.float64)
        if scores.shape != (len(ub), m):
            raise ContractError(f"score_fn returned shape {scores.shape}, expected {(len(ub), m)}")
        if mask_train:
            mrows, mitems = MaskSpec.from_store(split.train, ub).block(0, len(ub))
            scores[mrows, mitems] = -np.inf
        run_ids = np.full((len(ub), kmax), -1, dtype=np.int64)
        run_sc = np.full((len(ub), kmax), -np.inf, dtype=scores.dtype)
        for s0 in range(0, m, ITEM_BLOCK):
            s1 = min(s0 + ITEM_BLOCK, m)
            run_ids, run_sc = merge_topk(run_ids, run_sc, np.arange(s0, s1), scores[:, s0:s1], kmax)
        partials.append(_partial(split, ub, run_ids, ctx.k_list))
    report = aggregate(partials)
    report.wall_seconds = time.perf_counter() - t0
    return _record(report, ctx, model_id, hyper_point)


def dot_scorer(params: ModelParams) -> Callable[[np.ndarray], np.ndarray]:
    """Dot-product scorer; tiles like EXACT search so results agree bitwise."""

    def score_fn(users):
        return tiled_scores(params.user_emb[users], params.item_emb)

    return score_fn
