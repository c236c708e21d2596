"""Embedding matrices, initialization, scoring and checkpoint files."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import CorruptDataError, DimensionError, PoisonedUpdateError

INIT_STD = 0.01

_CKPT_MAGIC = b"RBCKPT\x00\x00"
_CKPT_VERSION = 1
_MODEL_CODES = {"mf": 0, "lightgcn": 1, "ultragcn": 2}
_DTYPE_CODES = {np.dtype(np.float64): 8, np.dtype(np.float32): 4}


@dataclass
class ModelParams:
    user_emb: np.ndarray
    item_emb: np.ndarray

    def __post_init__(self):
        if self.user_emb.ndim != 2 or self.item_emb.ndim != 2:
            raise DimensionError("embeddings must be 2-d")
        if self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise DimensionError("user and item embeddings differ in width")

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    def stacked(self) -> np.ndarray:
        """Users then items as one (num_users + num_items, dim) matrix."""
        return np.concatenate([self.user_emb, self.item_emb], axis=0)

    @classmethod
    def from_stacked(cls, emb: np.ndarray, num_users: int) -> "ModelParams":
        return cls(emb[:num_users], emb[num_users:])

    def copy(self) -> "ModelParams":
        return ModelParams(self.user_emb.copy(), self.item_emb.copy())

    def check_finite(self) -> None:
        if not (np.isfinite(self.user_emb).all() and np.isfinite(self.item_emb).all()):
            raise PoisonedUpdateError("non-finite entries in model parameters")


def init_params(num_users: int, num_items: int, dim: int, seed: int, dtype=np.float64) -> ModelParams:
    """Draw entries i.i.d. from normal(0, 0.01^2) with a seeded PCG64 stream."""
    if num_users < 1 or num_items < 1 or dim < 1:
        raise DimensionError("num_users, num_items and dim must all be >= 1")
    rng = np.random.default_rng(seed)
    user = rng.normal(0.0, INIT_STD, size=(num_users, dim)).astype(dtype, copy=False)
    item = rng.normal(0.0, INIT_STD, size=(num_items, dim)).astype(dtype, copy=False)
    return ModelParams(user, item)


def score(params: ModelParams, user_id: int, item_id: int) -> float:
    if not 0 <= user_id < params.num_users:
        raise IndexError(f"user id {user_id} out of range")
    if not 0 <= item_id < params.num_items:
        raise IndexError(f"item id {item_id} out of range")
    return float(params.user_emb[user_id] @ params.item_emb[item_id])


def save_checkpoint(path, params: ModelParams, model_kind: str = "mf", layers: int = 0) -> None:
    dtype = np.dtype(params.user_emb.dtype)
    if dtype not in _DTYPE_CODES:
        raise DimensionError(f"unsupported dtype {dtype}")
    le = dtype.newbyteorder("<")
    head = _CKPT_MAGIC + struct.pack(
        "<IIIIQQQ",
        _CKPT_VERSION,
        _MODEL_CODES[model_kind],
        layers,
        _DTYPE_CODES[dtype],
        params.num_users,
        params.num_items,
        params.dim,
    )
    body = head + params.user_emb.astype(le).tobytes() + params.item_emb.astype(le).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ModelParams, str, int]:
    """Returns ``(params, model_kind, layers)``."""
    data = Path(path).read_bytes()
    hsize = len(_CKPT_MAGIC) + struct.calcsize("<IIIIQQQ")
    if len(data) < hsize + 4 or not data.startswith(_CKPT_MAGIC):
        raise CorruptDataError(f"{path}: not a checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptDataError(f"{path}: checkpoint checksum mismatch")
    version, kind, layers, width, nu, ni, dim = struct.unpack_from("<IIIIQQQ", body, len(_CKPT_MAGIC))
    if version != _CKPT_VERSION:
        raise CorruptDataError(f"{path}: unsupported checkpoint version {version}")
    dtype = np.dtype("<f8" if width == 8 else "<f4")
    need = hsize + width * dim * (nu + ni)
    if len(body) != need:
        raise CorruptDataError(f"{path}: checkpoint size mismatch")
    user = np.frombuffer(body, dtype=dtype, count=nu * dim, offset=hsize).reshape(nu, dim)
    item = np.frombuffer(body, dtype=dtype, count=ni * dim, offset=hsize + width * nu * dim).reshape(ni, dim)
    kind_name = {v: k for k, v in _MODEL_CODES.items()}[kind]
    native = dtype.newbyteorder("=")
    return ModelParams(user.astype(native), item.astype(native)), kind_name, layers
