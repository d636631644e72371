"""Serialized point index with windowed approximate neighbor search.

Points are sorted by curve code. A query is encoded with the same curve, its
insertion position is found by binary search, and the sorted positions within
``window`` on either side become candidates. Candidates farther than ``r_max``
are dropped (false positives) and the ``k`` nearest survivors are returned.

Batched functions return padded ``(M, k)`` arrays: missing entries carry index
``-1`` and distance ``inf``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import map_chunks
from .curves import CurveKind, CurveParams, serialize_points
from .errors import EmptyCloud, ZeroDenominator

# elements per chunk of query x candidate distance work
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class SerializedIndex:
    codes: np.ndarray
    perm: np.ndarray
    params: CurveParams
    kind: CurveKind
    points: np.ndarray
    pool_size: float

    def __len__(self):
        return len(self.perm)

    @property
    def sorted_points(self):
        return self.points[self.perm]


@dataclass
class NeighborSet:
    indices: np.ndarray
    distances: np.ndarray
    k_requested: int

    def __len__(self):
        return len(self.indices)

    def index_set(self):
        return set(int(i) for i in self.indices)


@dataclass(frozen=True)
class NeighborQueryConfig:
    """``window`` defaults to ``2 * k``; ``r_max`` to 8x the level's pool size."""

    k: int = 8
    window: int | None = None
    r_max: float | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.window is not None and self.window < self.k:
            raise ValueError("window must be >= k")
        if self.r_max is not None and not self.r_max > 0:
            raise ValueError("r_max must be > 0")

    @property
    def half_window(self):
        return 2 * self.k if self.window is None else self.window

    def radius_for(self, index: SerializedIndex):
        return 8.0 * index.pool_size if self.r_max is None else self.r_max


def build_index(points, params: CurveParams | None = None, kind=CurveKind.HILBERT, pool_size=None):
    """Sort ``points`` along the curve; equal codes keep original index order."""
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    if len(points) == 0:
        raise EmptyCloud("cannot index an empty point cloud")
    if params is None:
        params = CurveParams.for_points(points)
    kind = CurveKind(kind)
    codes = serialize_points(points, params, kind)
    perm = np.argsort(codes, kind="stable")
    return SerializedIndex(
        codes=codes[perm],
        perm=perm.astype(np.int64),
        params=params,
        kind=kind,
        points=points,
        pool_size=float(params.grid_size if pool_size is None else pool_size),
    )


def _distances(cand, q):
    # identical arithmetic for the approximate and exact paths so ties agree
    dx = cand[..., 0] - q[..., 0]
    dy = cand[..., 1] - q[..., 1]
    dz = cand[..., 2] - q[..., 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def _select_k(dist, idx, k):
    """Per row, the ``k`` smallest ``(dist, idx)`` pairs in ascending order.

    ``dist`` is ``inf`` for unusable slots. Rows whose k-th distance is tied
    with an unselected slot fall back to a full lexicographic sort.
    """
    m, w = dist.shape
    kk = min(k, w)
    if w > kk:
        part = np.argpartition(dist, kk - 1, axis=1)[:, :kk]
    else:
        part = np.broadcast_to(np.arange(w), (m, w))
    d = np.take_along_axis(dist, part, axis=1)
    i = np.take_along_axis(idx, part, axis=1)
    order = np.lexsort((i, d), axis=1)
    d = np.take_along_axis(d, order, axis=1)
    i = np.take_along_axis(i, order, axis=1)

    if w > kk:
        kth = d[:, -1:]
        finite = np.isfinite(kth[:, 0])
        n_tied = (dist == kth).sum(axis=1)
        n_tied_sel = (d == kth).sum(axis=1)
        redo = np.flatnonzero(finite & (n_tied > n_tied_sel))
        for r in redo:
            o = np.lexsort((idx[r], dist[r]))[:kk]
            d[r], i[r] = dist[r, o], idx[r, o]

    i = np.where(np.isfinite(d), i, -1)
    if kk < k:
        pad = k - kk
        d = np.pad(d, ((0, 0), (0, pad)), constant_values=np.inf)
        i = np.pad(i, ((0, 0), (0, pad)), constant_values=-1)
    return i, d


def approx_neighbors_batch(index: SerializedIndex, queries, cfg: NeighborQueryConfig = NeighborQueryConfig()):
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    n = len(index)
    w = cfg.half_window
    r_max = cfg.radius_for(index)
    qcodes = serialize_points(queries, index.params, index.kind, clamp=True)
    ins = np.searchsorted(index.codes, qcodes, side="left")
    lo = np.maximum(ins - w, 0)
    hi = np.minimum(ins + w, n)
    width = min(2 * w, n)
    slots = np.arange(width)
    sorted_pts = index.sorted_points

    def run(a, b):
        pos = lo[a:b, None] + slots
        valid = pos < hi[a:b, None]
        pos = np.minimum(pos, n - 1)
        orig = index.perm[pos]
        dist = _distances(sorted_pts[pos], queries[a:b, None, :])
        dist = np.where(valid & (dist <= r_max), dist, np.inf)
        return _select_k(dist, orig, cfg.k)

    chunk = max(1, _CHUNK_ELEMS // max(width, 1))
    parts = map_chunks(run, len(queries), chunk)
    if not parts:
        return np.empty((0, cfg.k), np.int64), np.empty((0, cfg.k))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _to_set(idx, dist, k):
    keep = idx >= 0
    return NeighborSet(indices=idx[keep].copy(), distances=dist[keep].copy(), k_requested=k)


def approx_neighbors(index: SerializedIndex, q, cfg: NeighborQueryConfig = NeighborQueryConfig()):
    q = np.asarray(q, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(q)):
        raise ValueError("query must be finite")
    idx, dist = approx_neighbors_batch(index, q[None], cfg)
    return _to_set(idx[0], dist[0], cfg.k)


def exact_knn_batch(points, queries, k):
    """Brute-force k nearest neighbors; ties go to the lower point index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyCloud("exact_knn needs at least one point")
    n = len(points)
    all_idx = np.arange(n)

    def run(a, b):
        dist = _distances(points[None, :, :], queries[a:b, None, :])
        return _select_k(dist, np.broadcast_to(all_idx, dist.shape), k)

    chunk = max(1, _CHUNK_ELEMS // n)
    parts = map_chunks(run, len(queries), chunk)
    if not parts:
        return np.empty((0, k), np.int64), np.empty((0, k))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def exact_knn(points, q, k):
    idx, dist = exact_knn_batch(points, np.asarray(q, dtype=np.float64).reshape(1, 3), k)
    return _to_set(idx[0], dist[0], k)


def recall_rate(approx: NeighborSet, exact: NeighborSet):
    truth = exact.index_set()
    if not truth:
        raise ZeroDenominator("exact neighbor set is empty")
    return len(approx.index_set() & truth) / len(truth)


def partition_segments(index: SerializedIndex, n_segments):
    """Split the curve order into ``n_segments`` contiguous, near-equal runs."""
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    return [seg.copy() for seg in np.array_split(index.perm, n_segments)]


def segment_code_ranges(index: SerializedIndex, n_segments):
    """``(first_code, last_code)`` of every segment, for manifests and dumps."""
    out = []
    for pos in np.array_split(np.arange(len(index)), n_segments):
        if len(pos):
            out.append((int(index.codes[pos[0]]), int(index.codes[pos[-1]])))
        else:
            out.append((None, None))
    return out


__all__ = [
    "SerializedIndex",
    "NeighborSet",
    "NeighborQueryConfig",
    "build_index",
    "approx_neighbors",
    "approx_neighbors_batch",
    "exact_knn",
    "exact_knn_batch",
    "recall_rate",
    "partition_segments",
    "segment_code_ranges",
]
