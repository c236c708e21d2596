"""Top-K maximum inner product search over item embeddings.

The exact path scores queries against the catalog one (query block x item
tile) at a time and folds every tile into a running top-K buffer, so the full
query x item score matrix is never materialized. An IVF index restricts
scoring to the items of the ``nprobe`` clusters whose centroids have the
largest inner product with the query.

Ordering is by descending score, ties by ascending item id. Masked items are
never returned; when fewer than K unmasked items exist the row is padded with
id -1 / score -inf and reported as short.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BuildError, CorruptDataError, DimensionError

QUERY_BLOCK = 256
ITEM_BLOCK = 4096
KMEANS_ITERATIONS = 25
# Score tiles are zero-padded to at least _MIN_TILE rows and columns. BLAS
# switches to gemv or small-matrix kernels (with different rounding) for thin
# products, which would make tie order depend on how the work was blocked.
_MIN_TILE = 256
_COL_ALIGN = 64

_INDEX_MAGIC = b"RBINDEX\x00"
_INDEX_VERSION = 1


class MaskSpec:
    """Per-query sets of excluded item ids, stored as CSR with sorted rows."""

    def __init__(self, offsets, items):
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)

    @classmethod
    def from_rows(cls, rows: Sequence) -> "MaskSpec":
        rows = [np.unique(np.asarray(r, dtype=np.int64)) for r in rows]
        offsets = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum([len(r) for r in rows], out=offsets[1:])
        items = np.concatenate(rows) if rows else np.empty(0, np.int64)
        return cls(offsets, items)

    @classmethod
    def from_store(cls, store, users) -> "MaskSpec":
        """Training rows of ``users`` from an InteractionStore."""
        users = np.asarray(users, dtype=np.int64)
        starts = store.row_offsets[users]
        lens = store.row_offsets[users + 1] - starts
        offsets = np.zeros(len(users) + 1, dtype=np.int64)
        np.cumsum(lens, out=offsets[1:])
        idx = np.repeat(starts - offsets[:-1], lens) + np.arange(offsets[-1])
        return cls(offsets, store.item_ids[idx])

    @classmethod
    def none(cls, n_queries: int) -> "MaskSpec":
        return cls(np.zeros(n_queries + 1, np.int64), np.empty(0, np.int64))

    def __len__(self):
        return len(self.offsets) - 1

    def row(self, q: int) -> np.ndarray:
        return self.items[self.offsets[q] : self.offsets[q + 1]]

    def block(self, start: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
        """(local query row, item id) pairs for queries ``start..stop-1``."""
        lo, hi = self.offsets[start], self.offsets[stop]
        rows = np.repeat(np.arange(stop - start), np.diff(self.offsets[start : stop + 1]))
        return rows, self.items[lo:hi]


@dataclass
class TopKResult:
    ids: np.ndarray  # (n_queries, K), -1 padded
    scores: np.ndarray  # (n_queries, K), -inf padded
    lengths: np.ndarray  # (n_queries,)

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    @property
    def short(self) -> np.ndarray:
        return self.lengths < self.k

    def row(self, q: int) -> tuple[np.ndarray, np.ndarray]:
        n = self.lengths[q]
        return self.ids[q, :n], self.scores[q, :n]


@dataclass
class ItemIndex:
    kind: str  # "exact" or "ivf"
    items: np.ndarray
    centroids: np.ndarray | None = None
    list_offsets: np.ndarray | None = None
    list_items: np.ndarray | None = None

    @property
    def num_items(self) -> int:
        return self.items.shape[0]

    @property
    def dim(self) -> int:
        return self.items.shape[1]

    @property
    def n_clusters(self) -> int:
        return 0 if self.centroids is None else self.centroids.shape[0]

    def inverted_list(self, c: int) -> np.ndarray:
        return self.list_items[self.list_offsets[c] : self.list_offsets[c + 1]]


def build_exact(item_emb) -> ItemIndex:
    items = np.asarray(item_emb)
    if items.ndim != 2:
        raise BuildError("item embeddings must be a 2-d matrix")
    if not np.isfinite(items).all():
        raise BuildError("item embeddings contain NaN or Inf")
    return ItemIndex("exact", items)


def _assign(items: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # squared distance up to the per-item constant ||x||^2
    d = (centroids * centroids).sum(1)[None, :] - 2.0 * items @ centroids.T
    labels = np.argmin(d, axis=1)
    dist = d[np.arange(len(items)), labels] + (items * items).sum(1)
    return labels, dist


def kmeans(items: np.ndarray, n_clusters: int, seed: int, iterations: int = KMEANS_ITERATIONS):
    """Lloyd's algorithm with seeded distinct-row initialization.

    A cluster that goes empty is re-seeded with the point of the largest
    cluster farthest from that cluster's centroid.
    """
    rng = np.random.default_rng(seed)
    n = len(items)
    centroids = items[rng.choice(n, size=n_clusters, replace=False)].astype(np.float64)
    labels, dist = _assign(items, centroids)
    for _ in range(iterations):
        counts = np.bincount(labels, minlength=n_clusters)
        for c in np.flatnonzero(counts == 0):
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[np.argmax(dist[members])]
            labels[far] = c
            dist[far] = 0.0
            counts[big] -= 1
            counts[c] += 1
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, items)
        centroids = sums / counts[:, None]
        labels, dist = _assign(items, centroids)
    # final repair so no inverted list is empty
    counts = np.bincount(labels, minlength=n_clusters)
    for c in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        far = members[np.argmax(dist[members])]
        labels[far] = c
        centroids[c] = items[far]
        counts[big] -= 1
        counts[c] += 1
    return centroids, labels


def build_ivf(item_emb, n_clusters: int, seed: int = 0) -> ItemIndex:
    items = build_exact(item_emb).items
    if len(items) == 0:
        raise BuildError("cannot cluster an empty item set")
    if not 1 <= n_clusters <= len(items):
        raise BuildError(f"n_clusters must lie in [1, {len(items)}]")
    centroids, labels = kmeans(items.astype(np.float64), n_clusters, seed)
    order = np.argsort(labels, kind="stable")  # item ids ascending within a list
    offsets = np.zeros(n_clusters + 1, dtype=np.int64)
    np.cumsum(np.bincount(labels, minlength=n_clusters), out=offsets[1:])
    return ItemIndex("ivf", items, centroids.astype(items.dtype), offsets, order.astype(np.int64))


# ------------------------------------------------------------------ selection


def merge_topk(run_ids, run_scores, cand_ids, cand_scores, k: int):
    """Fold a tile of candidates into per-row top-K buffers.

    ``run_*`` are (b, k) buffers sorted best-first; ``cand_ids`` is either a
    shared 1-d id array or a (b, c) matrix. Returns new (b, k) buffers sorted
    by (-score, id). Entries scored -inf (masked or padding) never survive.
    """
    b, c = cand_scores.shape
    # Anything below a row's k-th best tile score cannot reach the top K, so
    # only the tile survivors (ties included) are merged with the running buffer.
    keep = ~np.isneginf(cand_scores)
    if c > k:
        thr = np.partition(cand_scores, c - k, axis=1)[:, c - k]
        keep &= cand_scores >= thr[:, None]
    r, col = np.nonzero(keep)
    del keep
    s_new = cand_scores[r, col]
    i_new = cand_ids[col] if cand_ids.ndim == 1 else cand_ids[r, col]
    old = ~np.isneginf(run_scores)
    r_old, c_old = np.nonzero(old)
    r = np.concatenate([r_old, r])
    s = np.concatenate([run_scores[r_old, c_old], s_new])
    i = np.concatenate([run_ids[r_old, c_old], i_new])
    order = np.lexsort((i, -s, r))
    r, s, i = r[order], s[order], i[order]
    counts = np.bincount(r, minlength=b)
    starts = np.cumsum(counts) - counts
    rank = np.arange(len(r)) - starts[r]
    sel = rank < k
    out_ids = np.full((b, k), -1, dtype=np.int64)
    out_sc = np.full((b, k), -np.inf, dtype=run_scores.dtype)
    out_ids[r[sel], rank[sel]] = i[sel]
    out_sc[r[sel], rank[sel]] = s[sel]
    return out_ids, out_sc


def _round_up(n: int, step: int) -> int:
    return -(-n // step) * step


def _tile_shape(query_block: int, item_block: int, num_items: int) -> tuple[int, int]:
    """Padded (rows, cols) of a score tile.

    BLAS kernels round differently at matrix edges and on thin or small
    products, so every tile is at least 256 x 256 and both sides are multiples
    of 64. An item then gets the same score wherever it sits in a tile, which
    keeps tie order independent of blocking.
    """
    rows = _round_up(max(query_block, _MIN_TILE), _COL_ALIGN)
    cols = _round_up(max(_MIN_TILE, min(item_block, num_items)), _COL_ALIGN)
    return rows, cols


def _pad_rows(a: np.ndarray, rows: int) -> np.ndarray:
    if a.shape[0] == rows:
        return a
    out = np.zeros((rows,) + a.shape[1:], dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


def _tile_scores(q_pad: np.ndarray, items: np.ndarray, cols: int) -> np.ndarray:
    return q_pad @ _pad_rows(items, cols).T


def tiled_scores(queries, items, query_block: int = QUERY_BLOCK, item_block: int = ITEM_BLOCK) -> np.ndarray:
    """Full query x item score matrix computed tile by tile exactly as EXACT search does.

    Meant for small problems and scorer closures that must agree bitwise with
    :func:`search`.
    """
    queries, items = np.asarray(queries), np.asarray(items)
    dtype = np.result_type(queries.dtype, items.dtype)
    nq, m = len(queries), len(items)
    out = np.empty((nq, m), dtype=dtype)
    rows_pad, cols = _tile_shape(query_block, item_block, m)
    for q0 in range(0, nq, query_block):
        q1 = min(q0 + query_block, nq)
        q_pad = _pad_rows(queries[q0:q1].astype(dtype, copy=False), rows_pad)
        for s0 in range(0, m, cols):
            s1 = min(s0 + cols, m)
            out[q0:q1, s0:s1] = _tile_scores(q_pad, items[s0:s1].astype(dtype, copy=False), cols)[: q1 - q0, : s1 - s0]
    return out


def _apply_mask(scores, mask_rows, mask_items, tile_ids):
    """Set -inf where (row, item) is masked; ``tile_ids`` sorted ascending."""
    if len(mask_items) == 0 or len(tile_ids) == 0:
        return
    pos = np.searchsorted(tile_ids, mask_items)
    ok = pos < len(tile_ids)
    ok[ok] = tile_ids[pos[ok]] == mask_items[ok]
    scores[mask_rows[ok], pos[ok]] = -np.inf


def _check_queries(index: ItemIndex, queries) -> np.ndarray:
    queries = np.asarray(queries)
    if queries.ndim != 2 or queries.shape[1] != index.dim:
        raise DimensionError(f"queries must have shape (n, {index.dim}), got {queries.shape}")
    if not np.isfinite(queries).all():
        raise DimensionError("queries contain NaN or Inf")
    return queries


def _finish(ids, scores) -> TopKResult:
    lengths = (ids >= 0).sum(axis=1)
    return TopKResult(ids, scores, lengths)


def search(
    index: ItemIndex,
    queries,
    k: int,
    masks: MaskSpec | Sequence | None = None,
    nprobe: int = 1,
    query_block: int = QUERY_BLOCK,
    item_block: int = ITEM_BLOCK,
) -> TopKResult:
    if k < 1:
        raise ValueError("K must be >= 1")
    queries = _check_queries(index, queries)
    nq = len(queries)
    if masks is None:
        masks = MaskSpec.none(nq)
    elif not isinstance(masks, MaskSpec):
        masks = MaskSpec.from_rows(masks)
    if len(masks) != nq:
        raise DimensionError(f"{len(masks)} masks for {nq} queries")
    if index.kind == "ivf":
        if not 1 <= nprobe <= index.n_clusters:
            raise ValueError(f"nprobe must lie in [1, {index.n_clusters}]")
        return _search_ivf(index, queries, k, masks, nprobe, query_block)
    return _search_exact(index, queries, k, masks, query_block, item_block)


def _search_exact(index, queries, k, masks, query_block, item_block) -> TopKResult:
    nq, m = len(queries), index.num_items
    dtype = np.result_type(queries.dtype, index.items.dtype)
    out_ids = np.full((nq, k), -1, dtype=np.int64)
    out_sc = np.full((nq, k), -np.inf, dtype=dtype)
    rows_pad, cols = _tile_shape(query_block, item_block, m)
    for q0 in range(0, nq, query_block):
        q1 = min(q0 + query_block, nq)
        b = q1 - q0
        q_pad = _pad_rows(queries[q0:q1].astype(dtype, copy=False), rows_pad)
        run_ids = np.full((b, k), -1, dtype=np.int64)
        run_sc = np.full((b, k), -np.inf, dtype=dtype)
        mrows, mitems = masks.block(q0, q1)
        for s0 in range(0, m, cols):
            s1 = min(s0 + cols, m)
            tile = _tile_scores(q_pad, index.items[s0:s1].astype(dtype, copy=False), cols)[:b, : s1 - s0]
            tile_ids = np.arange(s0, s1)
            _apply_mask(tile, mrows, mitems, tile_ids)
            run_ids, run_sc = merge_topk(run_ids, run_sc, tile_ids, tile, k)
        out_ids[q0:q1], out_sc[q0:q1] = run_ids, run_sc
    return _finish(out_ids, out_sc)


def _search_ivf(index, queries, k, masks, nprobe, query_block) -> TopKResult:
    nq = len(queries)
    dtype = np.result_type(queries.dtype, index.items.dtype)
    out_ids = np.full((nq, k), -1, dtype=np.int64)
    out_sc = np.full((nq, k), -np.inf, dtype=dtype)
    C = index.n_clusters
    for q0 in range(0, nq, query_block):
        q1 = min(q0 + query_block, nq)
        b = q1 - q0
        qb = queries[q0:q1].astype(dtype, copy=False)
        cscores = qb @ index.centroids.astype(dtype, copy=False).T
        probe, _ = merge_topk(
            np.full((b, nprobe), -1, np.int64), np.full((b, nprobe), -np.inf, dtype), np.arange(C), cscores, nprobe
        )
        run_ids = np.full((b, k), -1, dtype=np.int64)
        run_sc = np.full((b, k), -np.inf, dtype=dtype)
        mrows, mitems = masks.block(q0, q1)
        for c in range(C):
            rows = np.flatnonzero((probe == c).any(axis=1))
            lst = index.inverted_list(c)
            if len(rows) == 0 or len(lst) == 0:
                continue
            rows_pad, cols = _tile_shape(query_block, len(lst), len(lst))
            q_pad = _pad_rows(qb[rows], rows_pad)
            tile = _tile_scores(q_pad, index.items[lst].astype(dtype, copy=False), cols)[: len(rows), : len(lst)]
            local = np.full(b, -1, dtype=np.int64)
            local[rows] = np.arange(len(rows))
            sel = local[mrows] >= 0
            _apply_mask(tile, local[mrows[sel]], mitems[sel], lst)
            run_ids[rows], run_sc[rows] = merge_topk(run_ids[rows], run_sc[rows], lst, tile, k)
        out_ids[q0:q1], out_sc[q0:q1] = run_ids, run_sc
    return _finish(out_ids, out_sc)


def index_recall(approx: TopKResult, exact: TopKResult, k: int) -> float:
    """Mean over queries of ``|approx ∩ exact| / K``."""
    if approx.ids.shape[0] != exact.ids.shape[0]:
        raise DimensionError("results cover different query sets")
    total = 0.0
    for q in range(approx.ids.shape[0]):
        a = approx.ids[q, :k]
        e = exact.ids[q, :k]
        total += len(np.intersect1d(a[a >= 0], e[e >= 0])) / k
    return total / max(approx.ids.shape[0], 1)


# -------------------------------------------------------------- serialization


def save_index(index: ItemIndex, path) -> None:
    dtype = np.dtype(index.items.dtype)
    width = {np.dtype(np.float64): 8, np.dtype(np.float32): 4}[dtype]
    le = dtype.newbyteorder("<")
    m, d = index.items.shape
    tag = 0 if index.kind == "exact" else 1
    parts = [_INDEX_MAGIC, struct.pack("<IIIQQQ", _INDEX_VERSION, tag, width, m, d, index.n_clusters)]
    parts.append(index.items.astype(le).tobytes())
    if tag == 1:
        parts.append(index.centroids.astype(le).tobytes())
        parts.append(index.list_offsets.astype("<i8").tobytes())
        parts.append(index.list_items.astype("<i8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_index(path) -> ItemIndex:
    data = Path(path).read_bytes()
    head = struct.calcsize("<IIIQQQ")
    if len(data) < len(_INDEX_MAGIC) + head + 4 or not data.startswith(_INDEX_MAGIC):
        raise CorruptDataError(f"{path}: not an index file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptDataError(f"{path}: index checksum mismatch")
    version, tag, width, m, d, C = struct.unpack_from("<IIIQQQ", body, len(_INDEX_MAGIC))
    if version != _INDEX_VERSION:
        raise CorruptDataError(f"{path}: unsupported index version {version}")
    dtype = np.dtype("<f8" if width == 8 else "<f4")
    pos = len(_INDEX_MAGIC) + head

    def take(dt, count):
        nonlocal pos
        arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
        pos += arr.nbytes
        return arr.astype(np.dtype(dt).newbyteorder("="))

    try:
        items = take(dtype, m * d).reshape(m, d)
        if tag == 0:
            index = ItemIndex("exact", items)
        else:
            centroids = take(dtype, C * d).reshape(C, d)
            offsets = take("<i8", C + 1)
            lists = take("<i8", m)
            index = ItemIndex("ivf", items, centroids, offsets, lists)
    except ValueError as exc:
        raise CorruptDataError(f"{path}: truncated index") from exc
    if pos != len(body):
        raise CorruptDataError(f"{path}: trailing bytes in index file")
    return index
