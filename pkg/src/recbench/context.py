"""Evaluation contexts and training configurations.

An :class:`EvalContext` holds every setting that must be equal for two runs to
be comparable (dataset, loss, negative sampling, embedding size, cutoffs).
Tunables such as learning rate and L2 strength live in :class:`TrainConfig`
and are deliberately excluded from the fingerprint.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass

from .errors import InvariantError


class LossKind(str, enum.Enum):
    BPR = "bpr"
    BCE = "bce"


class SamplerKind(str, enum.Enum):
    UNIFORM_REJECT = "uniform_reject"
    UNIFORM_FREE = "uniform_free"


@dataclass(frozen=True)
class EvalContext:
    dataset_id: str
    loss_kind: LossKind = LossKind.BPR
    num_negatives: int = 1
    embedding_dim: int = 64
    sampler_kind: SamplerKind = SamplerKind.UNIFORM_REJECT
    k_list: tuple[int, ...] = (20,)

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        object.__setattr__(self, "sampler_kind", SamplerKind(self.sampler_kind))
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        if not self.dataset_id:
            raise InvariantError("dataset_id must be non-empty")
        if self.num_negatives < 1:
            raise InvariantError("num_negatives must be >= 1")
        if self.embedding_dim < 1:
            raise InvariantError("embedding_dim must be >= 1")
        if not self.k_list or self.k_list[0] < 1:
            raise InvariantError("k_list must be non-empty with positive cutoffs")
        if any(b <= a for a, b in zip(self.k_list, self.k_list[1:])):
            raise InvariantError("k_list must be strictly increasing")

    @property
    def max_k(self) -> int:
        return self.k_list[-1]

    def canonical(self) -> str:
        """Field-ordered serialization hashed by :meth:`fingerprint`."""
        return json.dumps(
            [
                ["dataset_id", self.dataset_id],
                ["loss_kind", self.loss_kind.value],
                ["num_negatives", self.num_negatives],
                ["embedding_dim", self.embedding_dim],
                ["sampler_kind", self.sampler_kind.value],
                ["k_list", list(self.k_list)],
            ],
            separators=(",", ":"),
        )

    def fingerprint(self) -> str:
        return hashlib.blake2b(self.canonical().encode(), digest_size=8).hexdigest()

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "loss_kind": self.loss_kind.value,
            "num_negatives": self.num_negatives,
            "embedding_dim": self.embedding_dim,
            "sampler_kind": self.sampler_kind.value,
            "k_list": list(self.k_list),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalContext":
        return cls(
            dataset_id=d["dataset_id"],
            loss_kind=d["loss_kind"],
            num_negatives=int(d["num_negatives"]),
            embedding_dim=int(d["embedding_dim"]),
            sampler_kind=d["sampler_kind"],
            k_list=tuple(d["k_list"]),
        )


L2_GRID = (1e-5, 1e-4, 1e-3, 1e-2)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    l2_coefficient: float = 1e-4
    batch_size: int = 8192
    epochs: int = 100
    seed: int = 0
    lightgcn_layers: int = 3
    ultragcn_gamma: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvariantError("learning_rate must be positive")
        if self.l2_coefficient < 0:
            raise InvariantError("l2_coefficient must be non-negative")
        if self.batch_size < 1:
            raise InvariantError("batch_size must be >= 1")
        if self.epochs < 0:
            raise InvariantError("epochs must be non-negative")
        if self.lightgcn_layers < 0:
            raise InvariantError("lightgcn_layers must be non-negative")
        if self.ultragcn_gamma < 0:
            raise InvariantError("ultragcn_gamma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})
