"""Dataset lifecycle: fetch, parse, validate, cache and summarize interaction splits.

Raw files use the adjacency-list text layout of the LightGCN data release: one
line per user, the user id followed by the ids of the items it interacted with.
"""
from __future__ import annotations

import hashlib
import io
import logging
import os
import re
import shutil
import struct
import tempfile
import time
import urllib.error
import urllib.request
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from filelock import FileLock

from .errors import (
    CorruptDataError,
    FetchError,
    InvariantError,
    LeakageError,
    ParseError,
    UndefinedDensityError,
    UsageError,
)

_logger = logging.getLogger(__name__)

CACHE_ENV_VAR = "RECBENCH_CACHE"
REQUIRED_FILES = ("train.txt", "test.txt")

_SPLIT_MAGIC = b"RBSPLIT\x00"
_SPLIT_VERSION = 1
_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
_SYNTH_RE = re.compile(r"^synthetic:(\d+)x(\d+):rank(\d+):seed(\d+)$")


def default_cache_root() -> Path:
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env).expanduser()
    return Path.home() / ".cache" / "recbench"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.int64)
    a.flags.writeable = False
    return a


class InteractionStore:
    """Immutable CSR rows of positive item ids per user.

    Construction validates the invariants: ``row_offsets`` starts at 0 and is
    non-decreasing, every item id is below ``num_items``, and each row is
    strictly increasing.
    """

    __slots__ = ("num_users", "num_items", "row_offsets", "item_ids", "_keys")

    def __init__(self, num_users: int, num_items: int, row_offsets, item_ids):
        num_users = int(num_users)
        num_items = int(num_items)
        offsets = _frozen(row_offsets)
        items = _frozen(item_ids)
        if num_users < 0 or num_items < 0:
            raise InvariantError("counts must be non-negative")
        if offsets.ndim != 1 or len(offsets) != num_users + 1:
            raise InvariantError(f"row_offsets must have length num_users+1={num_users + 1}")
        if offsets[0] != 0 or offsets[-1] != len(items):
            raise InvariantError("row_offsets must start at 0 and end at len(item_ids)")
        if np.any(np.diff(offsets) < 0):
            raise InvariantError("row_offsets must be non-decreasing")
        if len(items):
            if items.min() < 0 or items.max() >= num_items:
                raise InvariantError("item id out of range [0, num_items)")
            # strictly increasing within rows; row starts are exempt
            step = np.diff(items) > 0
            starts = offsets[1:-1]
            starts = starts[(starts > 0) & (starts < len(items))]
            step[starts - 1] = True
            if not step.all():
                raise InvariantError("items within a row must be strictly increasing")
        object.__setattr__(self, "num_users", num_users)
        object.__setattr__(self, "num_items", num_items)
        object.__setattr__(self, "row_offsets", offsets)
        object.__setattr__(self, "item_ids", items)
        object.__setattr__(self, "_keys", None)

    def __setattr__(self, name, value):
        raise AttributeError("InteractionStore is immutable")

    @classmethod
    def from_pairs(cls, users, items, num_users=None, num_items=None) -> "InteractionStore":
        """Build from parallel (user, item) arrays; duplicates are dropped."""
        users = np.asarray(users, dtype=np.int64).ravel()
        items = np.asarray(items, dtype=np.int64).ravel()
        if users.shape != items.shape:
            raise InvariantError("users and items must have equal length")
        if len(users) and (users.min() < 0 or items.min() < 0):
            raise InvariantError("ids must be non-negative")
        n_u = int(users.max()) + 1 if len(users) else 0
        n_i = int(items.max()) + 1 if len(items) else 0
        num_users = n_u if num_users is None else int(num_users)
        num_items = n_i if num_items is None else int(num_items)
        if n_u > num_users or n_i > num_items:
            raise InvariantError("ids exceed the declared counts")
        keys = np.unique(users * max(num_items, 1) + items)
        u = keys // max(num_items, 1)
        i = keys % max(num_items, 1)
        offsets = np.zeros(num_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(u, minlength=num_users), out=offsets[1:])
        return cls(num_users, num_items, offsets, i)

    @classmethod
    def from_rows(cls, rows: Sequence[Iterable[int]], num_items=None) -> "InteractionStore":
        rows = [np.asarray(list(r), dtype=np.int64) for r in rows]
        users = np.concatenate([np.full(len(r), u, dtype=np.int64) for u, r in enumerate(rows)] or [np.empty(0, np.int64)])
        items = np.concatenate(rows or [np.empty(0, np.int64)])
        return cls.from_pairs(users, items, num_users=len(rows), num_items=num_items)

    @classmethod
    def empty(cls, num_users=0, num_items=0) -> "InteractionStore":
        return cls(num_users, num_items, np.zeros(num_users + 1, np.int64), np.empty(0, np.int64))

    @property
    def nnz(self) -> int:
        return len(self.item_ids)

    def row(self, user: int) -> np.ndarray:
        return self.item_ids[self.row_offsets[user] : self.row_offsets[user + 1]]

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.item_ids, minlength=self.num_items).astype(np.int64)

    def user_index(self) -> np.ndarray:
        """The user id of each entry of ``item_ids``."""
        return np.repeat(np.arange(self.num_users, dtype=np.int64), self.user_degrees())

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return self.user_index(), self.item_ids

    def keys(self) -> np.ndarray:
        """Sorted ``user * num_items + item`` codes, cached."""
        if self._keys is None:
            k = self.user_index() * self.num_items + self.item_ids
            k.flags.writeable = False
            object.__setattr__(self, "_keys", k)
        return self._keys

    def contains(self, users, items) -> np.ndarray:
        """Vectorized membership test for (user, item) pairs."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        keys = self.keys()
        if len(keys) == 0:
            return np.zeros(np.broadcast(users, items).shape, dtype=bool)
        q = users * self.num_items + items
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, len(keys) - 1)
        return keys[pos] == q

    def empty_users(self) -> np.ndarray:
        return np.flatnonzero(self.user_degrees() == 0)

    def reshaped(self, num_users: int, num_items: int) -> "InteractionStore":
        """Same interactions in a larger id space."""
        if num_users < self.num_users or num_items < self.num_items:
            raise InvariantError("cannot shrink an id space")
        pad = np.full(num_users - self.num_users, self.row_offsets[-1], dtype=np.int64)
        return InteractionStore(num_users, num_items, np.concatenate([self.row_offsets, pad]), self.item_ids)

    def to_csr(self, dtype=np.float64):
        import scipy.sparse as sp

        data = np.ones(self.nnz, dtype=dtype)
        return sp.csr_matrix((data, self.item_ids, self.row_offsets), shape=(self.num_users, self.num_items))

    def __eq__(self, other):
        if not isinstance(other, InteractionStore):
            return NotImplemented
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.item_ids, other.item_ids)
        )

    __hash__ = None

    def __repr__(self):
        return f"InteractionStore(num_users={self.num_users}, num_items={self.num_items}, nnz={self.nnz})"


@dataclass(frozen=True)
class Split:
    train: InteractionStore
    test: InteractionStore

    def __post_init__(self):
        if (self.train.num_users, self.train.num_items) != (self.test.num_users, self.test.num_items):
            raise InvariantError("train and test must share one id space")
        both = np.intersect1d(self.train.keys(), self.test.keys(), assume_unique=True)
        if len(both):
            n = self.train.num_items
            raise LeakageError(zip((both // n).tolist(), (both % n).tolist()))

    @property
    def num_users(self) -> int:
        return self.train.num_users

    @property
    def num_items(self) -> int:
        return self.train.num_items


@dataclass(frozen=True)
class DatasetStats:
    users: int
    items: int
    interactions: int
    density: float

    def __post_init__(self):
        if min(self.users, self.items, self.interactions) < 0:
            raise InvariantError("counts must be non-negative")
        if not 0.0 <= self.density <= 1.0:
            raise InvariantError("density must lie in [0, 1]")

    def as_row(self) -> dict:
        return {
            "User": f"{self.users:,}",
            "Item": f"{self.items:,}",
            "Interaction": f"{self.interactions:,}",
            "Density": f"{self.density:.5f}",
        }


@dataclass(frozen=True)
class DatasetDescriptor:
    """Where a dataset's raw files come from and where they are cached.

    ``source_urls`` maps each required filename to a URL (``http(s)://`` or
    ``file://``). It may be left empty when the raw files are placed in the
    cache by hand.
    """

    name: str
    source_urls: Mapping[str, str] = field(default_factory=dict)
    checksums: Mapping[str, str] = field(default_factory=dict)
    cache_root: Path | None = None
    files: tuple[str, ...] = REQUIRED_FILES

    def __post_init__(self):
        if not self.name or not _NAME_RE.match(self.name):
            raise InvariantError(f"dataset name {self.name!r} is not filesystem-safe")
        unknown = set(self.source_urls) - set(self.files)
        if unknown:
            raise InvariantError(f"source_urls for unknown files: {sorted(unknown)}")

    @property
    def root(self) -> Path:
        base = Path(self.cache_root) if self.cache_root is not None else default_cache_root()
        return base / self.name

    @property
    def raw_dir(self) -> Path:
        return self.root / "raw"

    @property
    def processed_path(self) -> Path:
        return self.root / "processed" / "split.bin"

    def lock(self) -> FileLock:
        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.root / ".lock"))


KNOWN_DATASETS = ("yelp2018", "gowalla")


def get_descriptor(name: str, source: str | None = None, cache_root: Path | None = None) -> DatasetDescriptor:
    """Descriptor for a registered dataset.

    No canonical download location ships with the toolkit. ``source`` is a base
    URL or local directory holding ``train.txt`` and ``test.txt``.
    """
    if name not in KNOWN_DATASETS:
        raise UsageError(f"unknown dataset {name!r}; known: {', '.join(KNOWN_DATASETS)} or synthetic:<U>x<I>:rank<r>:seed<s>")
    urls = {}
    if source:
        if "://" not in source:
            source = Path(source).resolve().as_uri()
        urls = {f: source.rstrip("/") + "/" + f for f in REQUIRED_FILES}
    return DatasetDescriptor(name=name, source_urls=urls, cache_root=cache_root)


# --------------------------------------------------------------------- parsing


def parse_adjacency_list(stream, num_items_hint: int | None = None) -> InteractionStore:
    """Parse ``user item item ...`` lines into a store.

    Items are deduplicated and sorted per user; users absent from the text get
    empty rows. ``stream`` may be a text stream, a string or any iterable of lines.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    users: list[np.ndarray] = []
    items: list[np.ndarray] = []
    max_user = -1
    for lineno, line in enumerate(stream, start=1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            ids = np.array([int(t) for t in tokens], dtype=np.int64)
        except ValueError:
            bad = next(t for t in tokens if not _is_int(t))
            raise ParseError(f"non-integer token {bad!r}", line=lineno) from None
        if ids.min() < 0:
            raise ParseError("negative id", line=lineno)
        max_user = max(max_user, int(ids[0]))
        users.append(np.full(len(ids) - 1, ids[0], dtype=np.int64))
        items.append(ids[1:])
    u = np.concatenate(users) if users else np.empty(0, np.int64)
    i = np.concatenate(items) if items else np.empty(0, np.int64)
    num_items = int(i.max()) + 1 if len(i) else 0
    if num_items_hint is not None:
        num_items = max(num_items, int(num_items_hint))
    return InteractionStore.from_pairs(u, i, num_users=max_user + 1, num_items=num_items)


def _is_int(token: str) -> bool:
    try:
        int(token)
    except ValueError:
        return False
    return True


def serialize_adjacency_list(store: InteractionStore) -> str:
    """Inverse of :func:`parse_adjacency_list`; every user gets a line."""
    out = io.StringIO()
    for u in range(store.num_users):
        row = store.row(u)
        if len(row):
            out.write(f"{u} " + " ".join(map(str, row.tolist())) + "\n")
        else:
            out.write(f"{u}\n")
    return out.getvalue()


def build_split(train: InteractionStore, test: InteractionStore) -> Split:
    num_users = max(train.num_users, test.num_users)
    num_items = max(train.num_items, test.num_items)
    return Split(train.reshaped(num_users, num_items), test.reshaped(num_users, num_items))


def stats(split: Split, train_only: bool = False) -> DatasetStats:
    """Counts and density. Interactions cover train+test unless ``train_only``."""
    users, items = split.num_users, split.num_items
    if users == 0 or items == 0:
        raise UndefinedDensityError("density is undefined for zero users or items")
    interactions = split.train.nnz + (0 if train_only else split.test.nnz)
    return DatasetStats(users, items, interactions, interactions / (users * items))


# --------------------------------------------------------------- binary cache


def _pack_store(store: InteractionStore) -> bytes:
    head = struct.pack("<QQQ", store.num_users, store.num_items, store.nnz)
    return head + store.row_offsets.astype("<i8").tobytes() + store.item_ids.astype("<i8").tobytes()


def _unpack_store(buf: memoryview, pos: int) -> tuple[InteractionStore, int]:
    if pos + 24 > len(buf):
        raise CorruptDataError("truncated store header")
    num_users, num_items, nnz = struct.unpack_from("<QQQ", buf, pos)
    pos += 24
    need = 8 * (num_users + 1 + nnz)
    if pos + need > len(buf):
        raise CorruptDataError("truncated store body")
    offsets = np.frombuffer(buf, dtype="<i8", count=num_users + 1, offset=pos)
    pos += 8 * (num_users + 1)
    items = np.frombuffer(buf, dtype="<i8", count=nnz, offset=pos)
    pos += 8 * nnz
    try:
        store = InteractionStore(num_users, num_items, offsets, items)
    except InvariantError as exc:
        raise CorruptDataError(f"cached store violates invariants: {exc}") from exc
    return store, pos


def split_to_bytes(split: Split) -> bytes:
    body = _SPLIT_MAGIC + struct.pack("<II", _SPLIT_VERSION, 0) + _pack_store(split.train) + _pack_store(split.test)
    return body + struct.pack("<I", zlib.crc32(body))


def split_from_bytes(data: bytes) -> Split:
    if len(data) < len(_SPLIT_MAGIC) + 12 or not data.startswith(_SPLIT_MAGIC):
        raise CorruptDataError("not a split cache file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptDataError("split cache checksum mismatch")
    version, _flags = struct.unpack_from("<II", body, len(_SPLIT_MAGIC))
    if version != _SPLIT_VERSION:
        raise CorruptDataError(f"unsupported split cache version {version}")
    buf = memoryview(body)
    pos = len(_SPLIT_MAGIC) + 8
    train, pos = _unpack_store(buf, pos)
    test, pos = _unpack_store(buf, pos)
    if pos != len(body):
        raise CorruptDataError("trailing bytes in split cache")
    return Split(train, test)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_split(split: Split, path: Path) -> None:
    _atomic_write(Path(path), split_to_bytes(split))


def load_split(path: Path) -> Split:
    return split_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------- fetch/prepare


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _download(url: str, dest: Path, retries: int, timeout: float) -> None:
    dest.parent.mkdir(parents=True, exist_ok=True)
    last = None
    for attempt in range(retries):
        tmp = dest.with_name(dest.name + ".part")
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp, open(tmp, "wb") as fh:
                shutil.copyfileobj(resp, fh)
            os.replace(tmp, dest)
            return
        except (urllib.error.URLError, OSError) as exc:
            last = exc
            tmp.unlink(missing_ok=True)
            if attempt + 1 < retries:
                time.sleep(min(2.0**attempt, 10.0))
    raise FetchError(f"failed to download {url}: {last}")


def fetch(descriptor: DatasetDescriptor, retries: int = 3, timeout: float = 60.0) -> dict[str, Path]:
    """Ensure the raw files are cached and return their paths.

    Files already present (and matching any declared checksum) are reused
    without touching the network.
    """
    paths = {}
    with descriptor.lock():
        for name in descriptor.files:
            path = descriptor.raw_dir / name
            expected = descriptor.checksums.get(name)
            if path.exists() and expected and _sha256(path) != expected.lower():
                _logger.warning("cached %s fails checksum; invalidating", path)
                path.unlink()
                if name not in descriptor.source_urls:
                    raise CorruptDataError(f"{path}: checksum mismatch and no source to re-download from")
            if not path.exists():
                url = descriptor.source_urls.get(name)
                if not url:
                    raise FetchError(
                        f"{descriptor.name}: {name} is not cached at {path} and no source URL is configured"
                    )
                _logger.info("downloading %s", url)
                _download(url, path, retries, timeout)
                if expected and _sha256(path) != expected.lower():
                    path.unlink()
                    raise CorruptDataError(f"{url}: downloaded file does not match checksum")
            paths[name] = path
    return paths


def is_prepared(descriptor: DatasetDescriptor) -> bool:
    return descriptor.processed_path.exists()


def prepare(descriptor: DatasetDescriptor, **fetch_kwargs) -> Split:
    """Fetch, parse and validate a dataset, caching the result in binary form."""
    cache = descriptor.processed_path
    if cache.exists():
        try:
            return load_split(cache)
        except CorruptDataError as exc:
            _logger.warning("discarding split cache %s: %s", cache, exc)
    paths = fetch(descriptor, **fetch_kwargs)
    with descriptor.lock():
        with open(paths["train.txt"], encoding="utf-8") as fh:
            train = parse_adjacency_list(fh)
        with open(paths["test.txt"], encoding="utf-8") as fh:
            test = parse_adjacency_list(fh)
        split = build_split(train, test)
        n_empty = len(split.train.empty_users())
        if n_empty:
            _logger.warning("%s: %d users have empty training rows", descriptor.name, n_empty)
        save_split(split, cache)
    return split


# ------------------------------------------------------------------ synthetic


def parse_synthetic_name(name: str) -> tuple[int, int, int, int] | None:
    m = _SYNTH_RE.match(name)
    if not m:
        return None
    return tuple(int(g) for g in m.groups())


def synthetic_split(num_users: int, num_items: int, rank: int, seed: int, test_fraction: float = 0.2) -> Split:
    """Interactions drawn from a seeded low-rank preference model.

    Each user receives 10 to 30 items chosen without replacement with
    probabilities proportional to ``exp(3 * <u, v> / sqrt(rank))`` (Gumbel
    top-k), then a per-user fraction is held out as test.
    """
    if num_users < 1 or num_items < 2 or rank < 1:
        raise InvariantError("synthetic dataset needs >=1 user, >=2 items, rank >=1")
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((num_users, rank))
    V = rng.standard_normal((num_items, rank))
    logits = 3.0 * (U @ V.T) / np.sqrt(rank)
    cap = max(2, num_items // 2)
    counts = np.minimum(rng.integers(10, 31, size=num_users), cap)
    train_u, train_i, test_u, test_i = [], [], [], []
    for u in range(num_users):
        g = logits[u] + rng.gumbel(size=num_items)
        chosen = np.argpartition(-g, counts[u] - 1)[: counts[u]]
        chosen = rng.permutation(chosen)
        n_test = max(1, int(round(test_fraction * counts[u])))
        test_u.append(np.full(n_test, u))
        test_i.append(chosen[:n_test])
        train_u.append(np.full(counts[u] - n_test, u))
        train_i.append(chosen[n_test:])
    train = InteractionStore.from_pairs(np.concatenate(train_u), np.concatenate(train_i), num_users, num_items)
    test = InteractionStore.from_pairs(np.concatenate(test_u), np.concatenate(test_i), num_users, num_items)
    return Split(train, test)


def holdout_split(train: InteractionStore, fraction: float = 0.05, seed: int = 0) -> Split:
    """Carve a validation set out of training positives.

    Each positive goes to validation independently with probability
    ``fraction``, except that a user's last remaining positive always stays in
    training.
    """
    rng = np.random.default_rng(seed)
    users, items = train.pairs()
    pick = rng.random(len(items)) < fraction
    deg = train.user_degrees()
    kept = np.bincount(users[~pick], minlength=train.num_users)
    starved = np.flatnonzero((deg > 0) & (kept == 0))
    pick[train.row_offsets[starved]] = False
    fit = InteractionStore.from_pairs(users[~pick], items[~pick], train.num_users, train.num_items)
    valid = InteractionStore.from_pairs(users[pick], items[pick], train.num_users, train.num_items)
    return Split(fit, valid)


def load_dataset(name: str, source: str | None = None, cache_root: Path | None = None) -> Split:
    """Resolve a dataset id (registered name or synthetic name) to a Split."""
    synth = parse_synthetic_name(name)
    if synth is not None:
        return synthetic_split(*synth)
    return prepare(get_descriptor(name, source=source, cache_root=cache_root))
