"""Ranking metrics and the relative gain over a tuned MF baseline.

NDCG uses binary relevance: an item at 1-based position ``p`` contributes
``1 / log2(p + 1)`` and the ideal DCG is truncated at ``min(K, |truth|)``.
Users with an empty ground-truth set are excluded (functions return ``None``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .context import EvalContext
from .errors import ContextViolationError, InvariantError, MissingScoreError, UndefinedGainError

METRICS = ("ndcg", "recall", "precision")
_DISPLAY = {"ndcg": "NDCG", "recall": "Recall", "precision": "Precision"}


@dataclass(frozen=True)
class MetricScore:
    metric_id: str
    k: int
    value: float

    def __post_init__(self):
        if self.metric_id in METRICS and not 0.0 <= self.value <= 1.0:
            raise InvariantError(f"{self.metric_id}@{self.k}={self.value} outside [0, 1]")

    @property
    def label(self) -> str:
        return f"{_DISPLAY.get(self.metric_id, self.metric_id)}@{self.k}"


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2, dtype=np.float64))


def _gain_sum(flags) -> float:
    # shared by DCG and IDCG so a perfect ranking divides to exactly 1.0
    total = 0.0
    for p, hit in enumerate(flags):
        if hit:
            total += 1.0 / math.log2(p + 2)
    return total


def dcg_at_k(ranked: Sequence[int], truth: Iterable[int], k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    truth = set(truth)
    return _gain_sum(item in truth for item in list(ranked)[:k])


def ndcg_at_k(ranked, truth, k: int) -> MetricScore | None:
    truth = set(truth)
    if not truth:
        return None
    idcg = _gain_sum([True] * min(k, len(truth)))
    return MetricScore("ndcg", k, dcg_at_k(ranked, truth, k) / idcg)


def _hits(ranked, truth, k):
    return sum(1 for item in list(ranked)[:k] if item in truth)


def recall_at_k(ranked, truth, k: int) -> MetricScore | None:
    truth = set(truth)
    if not truth:
        return None
    return MetricScore("recall", k, _hits(ranked, truth, k) / len(truth))


def precision_at_k(ranked, truth, k: int) -> MetricScore | None:
    if k < 1:
        raise ValueError("K must be >= 1")
    truth = set(truth)
    if not truth:
        return None
    return MetricScore("precision", k, _hits(ranked, truth, k) / k)


def batch_metrics(hits: np.ndarray, n_truth: np.ndarray, k_list: Sequence[int]) -> dict:
    """Per-user metric values for a batch of ranked lists.

    ``hits`` is a (B, K_max) boolean matrix marking relevant positions and
    ``n_truth`` the ground-truth sizes (all positive). Returns
    ``{(metric_id, K): array of B values}``.
    """
    hits = np.asarray(hits, dtype=bool)
    n_truth = np.asarray(n_truth, dtype=np.int64)
    if np.any(n_truth < 1):
        raise ValueError("users with empty ground truth must be filtered out first")
    kmax = hits.shape[1]
    if k_list[-1] > kmax:
        raise ValueError(f"ranked lists hold {kmax} items, K={k_list[-1]} requested")
    disc = _discounts(kmax)
    cum_dcg = np.cumsum(hits * disc, axis=1)
    cum_hits = np.cumsum(hits, axis=1)
    ideal = np.concatenate([[0.0], np.cumsum(disc)])
    out = {}
    for k in k_list:
        dcg = cum_dcg[:, k - 1]
        h = cum_hits[:, k - 1].astype(np.float64)
        out[("ndcg", k)] = dcg / ideal[np.minimum(n_truth, k)]
        out[("recall", k)] = h / n_truth
        out[("precision", k)] = h / k
    return out


@dataclass
class RunRecord:
    """Scores of one model under one evaluation context."""

    model_id: str
    ctx_fingerprint: str
    scores: list[MetricScore]
    hyper_point: dict = field(default_factory=dict)
    ctx: EvalContext | None = None
    wall_seconds: float | None = None
    evaluated_users: int | None = None

    def __post_init__(self):
        if self.ctx is not None and self.ctx.fingerprint() != self.ctx_fingerprint:
            raise InvariantError("ctx_fingerprint does not match the stored context")

    @classmethod
    def for_context(cls, model_id: str, ctx: EvalContext, scores, **kwargs) -> "RunRecord":
        return cls(model_id=model_id, ctx_fingerprint=ctx.fingerprint(), scores=list(scores), ctx=ctx, **kwargs)

    def get(self, metric_id: str, k: int) -> float:
        for s in self.scores:
            if s.metric_id == metric_id and s.k == k:
                return s.value
        raise MissingScoreError(f"{self.model_id} has no {metric_id}@{k} score")

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "ctx": None if self.ctx is None else self.ctx.to_dict(),
            "ctx_fingerprint": self.ctx_fingerprint,
            "hyper_point": self.hyper_point,
            "metrics": [{"metric": s.metric_id, "k": s.k, "value": s.value} for s in self.scores],
            "wall_seconds": self.wall_seconds,
            "evaluated_users": self.evaluated_users,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            model_id=d["model_id"],
            ctx_fingerprint=d["ctx_fingerprint"],
            scores=[MetricScore(m["metric"], int(m["k"]), float(m["value"])) for m in d["metrics"]],
            hyper_point=d.get("hyper_point") or {},
            ctx=None if d.get("ctx") is None else EvalContext.from_dict(d["ctx"]),
            wall_seconds=d.get("wall_seconds"),
            evaluated_users=d.get("evaluated_users"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls.from_dict(json.loads(text))


def gain_ratio(candidate_score: float, baseline_score: float) -> float:
    if not baseline_score > 0:
        raise UndefinedGainError(f"baseline score {baseline_score} must be positive")
    return candidate_score / baseline_score - 1.0


def grmf_x(candidate: RunRecord, baseline_mf: RunRecord, metric_id: str = "ndcg", k: int = 20) -> float:
    """Gain of ``candidate`` relative to the tuned MF run, as a ratio.

    Refuses to compare runs whose context fingerprints differ.
    """
    if candidate.ctx_fingerprint != baseline_mf.ctx_fingerprint:
        raise ContextViolationError(
            f"{candidate.model_id} (context {candidate.ctx_fingerprint}) cannot be compared with "
            f"{baseline_mf.model_id} (context {baseline_mf.ctx_fingerprint})"
        )
    return gain_ratio(candidate.get(metric_id, k), baseline_mf.get(metric_id, k))


def format_percent(ratio: float) -> str:
    return f"{ratio * 100.0:.2f}%"
