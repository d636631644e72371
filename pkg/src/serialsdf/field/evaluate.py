"""Evaluating the distance field: neighborhood aggregation, fusion and heads.

For a query ``q`` and level ``s`` the aggregated feature is the
inverse-distance weighted mean of the encoder applied to every neighbor::

    A_s(q) = sum_p w(p, q) E_s((p - q) / pool_s, f_p) / (eps + sum_p w(p, q))
    w(p, q) = 1 / max(|p - q|, eps_w)

Neighbor offsets are divided by the level's pool size so every encoder sees
inputs of similar magnitude. Level features are summed and fed to the SDF head
(``sdf_scale * tanh``) and the mask head (a logit). A query with no neighbor on
any level is unsupported: batched calls report it as NaN, single-query calls
raise :class:`~serialsdf.errors.NoSupport`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NoSupport
from ..pyramid import FeaturePyramid, Level, PointCloud
from ..spatial import NeighborQueryConfig, NeighborSet, SerializedIndex, approx_neighbors_batch, exact_knn_batch
from .decoder import DecoderParams, head_backward, head_forward, zero_grads

EPS = 1e-8
EPS_W = 1e-8


def inverse_distance_weights(dist):
    return 1.0 / np.maximum(dist, EPS_W)


@dataclass
class LevelInputs:
    """Encoder inputs of the valid (query, neighbor) pairs on one level."""

    x: np.ndarray
    rows: np.ndarray
    wnorm: np.ndarray
    empty: np.ndarray


def gather_level(level: Level, points, cfg: NeighborQueryConfig):
    idx, dist = approx_neighbors_batch(level.index, points, cfg)
    valid = idx >= 0
    w = np.where(valid, inverse_distance_weights(dist), 0.0)
    wnorm = w / (EPS + w.sum(axis=1, keepdims=True))
    rows, cols = np.nonzero(valid)
    nb = idx[rows, cols]
    rel = (level.cloud.positions[nb] - points[rows]) / level.pool_size
    x = np.concatenate([rel, level.cloud.features[nb]], axis=1)
    return LevelInputs(x=x, rows=rows, wnorm=wnorm[rows, cols], empty=~valid.any(axis=1))


def gather(pyramid: FeaturePyramid, points, cfg: NeighborQueryConfig):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pyramid.feature_dim == 0:
        raise ValueError("pyramid has no per-point features; run estimate_local_geometry first")
    return [gather_level(lv, points, cfg) for lv in pyramid.levels]


def _segment_sum(values, rows, m):
    out = np.zeros((m, values.shape[1]))
    if len(rows) == 0:
        return out
    starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
    out[rows[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


def forward(params: DecoderParams, inputs, m):
    """Field values of ``m`` queries from pre-gathered level inputs."""
    if len(inputs) != params.S:
        raise ValueError(f"decoder has {params.S} levels, pyramid has {len(inputs)}")
    feat = np.zeros((m, params.hidden))
    enc_caches = []
    supported = np.zeros(m, dtype=bool)
    for s, li in enumerate(inputs):
        enc = params.encoder(s)
        e, cache = enc.forward(li.x)
        feat += _segment_sum(e * li.wnorm[:, None], li.rows, m)
        enc_caches.append(cache)
        supported |= ~li.empty
    u, sdf_cache = head_forward(params, "sdf", feat)
    t = np.tanh(u)
    logit, mask_cache = head_forward(params, "mask", feat)
    sdf = params.sdf_scale * t
    cache = (inputs, enc_caches, t, sdf_cache, mask_cache)
    return sdf, logit, supported, cache


def backward(params: DecoderParams, cache, dsdf, dlogit):
    inputs, enc_caches, t, sdf_cache, mask_cache = cache
    grads = zero_grads(params)
    du = dsdf * params.sdf_scale * (1.0 - t * t)
    dfeat = head_backward(params, "sdf", sdf_cache, du, grads)
    dfeat += head_backward(params, "mask", mask_cache, dlogit, grads)
    for s, li in enumerate(inputs):
        de = dfeat[li.rows] * li.wnorm[:, None]
        params.encoder(s).backward(enc_caches[s], de, grads)
    return grads


def aggregate_level(q, level: Level, neighbors: NeighborSet, encoder):
    """Aggregated feature of one query on one level.

    Returns ``(feature, empty)``; an empty neighborhood gives the zero vector
    with ``empty=True``.
    """
    q = np.asarray(q, dtype=np.float64).reshape(3)
    width = encoder.b3.shape[0]
    if len(neighbors) == 0:
        return np.zeros(width), True
    nb = np.asarray(neighbors.indices)
    rel = (level.cloud.positions[nb] - q) / level.pool_size
    x = np.concatenate([rel, level.cloud.features[nb]], axis=1)
    e = encoder(x)
    w = inverse_distance_weights(np.linalg.norm(level.cloud.positions[nb] - q, axis=1))
    return (w @ e) / (EPS + w.sum()), False


def evaluate_field_batch(points, pyramid: FeaturePyramid, params: DecoderParams, cfg=NeighborQueryConfig(), batch=8192):
    """``(sdf, logit, supported)`` for every point; unsupported sdf is NaN."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    sdf = np.empty(n)
    logit = np.empty(n)
    supported = np.empty(n, dtype=bool)
    for a in range(0, n, batch):
        b = min(a + batch, n)
        s_, l_, ok, _ = forward(params, gather(pyramid, points[a:b], cfg), b - a)
        sdf[a:b] = np.where(ok, s_, np.nan)
        logit[a:b] = l_
        supported[a:b] = ok
    return sdf, logit, supported


def evaluate_field(q, pyramid: FeaturePyramid, params: DecoderParams, cfg=NeighborQueryConfig()):
    sdf, logit, ok = evaluate_field_batch(np.asarray(q, dtype=np.float64).reshape(1, 3), pyramid, params, cfg)
    if not ok[0]:
        raise NoSupport(f"no neighbors on any level for query {np.ravel(q).tolist()}")
    return float(sdf[0]), float(logit[0])


class DecoderField:
    """Callable field backed by a trained decoder: ``f(points) -> (sdf, logit)``."""

    def __init__(self, pyramid: FeaturePyramid, params: DecoderParams, cfg=NeighborQueryConfig(), batch=8192):
        self.pyramid = pyramid
        self.params = params
        self.cfg = cfg
        self.batch = batch

    def __call__(self, points):
        sdf, logit, _ = evaluate_field_batch(points, self.pyramid, self.params, self.cfg, self.batch)
        return sdf, logit


# -- implicit moving least squares ------------------------------------------


def imls_distance(q, cloud: PointCloud, neighbors: NeighborSet):
    """Weighted mean of signed point-plane distances, same weights as above."""
    if len(neighbors) == 0:
        raise NoSupport("imls_distance needs at least one neighbor")
    if cloud.normals is None:
        raise ValueError("imls_distance needs oriented normals")
    q = np.asarray(q, dtype=np.float64).reshape(3)
    nb = np.asarray(neighbors.indices)
    diff = q - cloud.positions[nb]
    plane = np.einsum("ij,ij->i", cloud.normals[nb], diff)
    w = inverse_distance_weights(np.linalg.norm(diff, axis=1))
    return float((w @ plane) / (EPS + w.sum()))


def _imls_from_neighbors(cloud, queries, idx):
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    diff = queries[:, None, :] - cloud.positions[safe]
    dist = np.sqrt(np.einsum("mki,mki->mk", diff, diff))
    plane = np.einsum("mki,mki->mk", cloud.normals[safe], diff)
    w = np.where(valid, inverse_distance_weights(dist), 0.0)
    out = (w * plane).sum(axis=1) / (EPS + w.sum(axis=1))
    return np.where(valid.any(axis=1), out, np.nan)


class ImlsField:
    """Training-free field over an oriented cloud; NaN where unsupported.

    ``neighbors="approx"`` uses the serialized index (the fast path);
    ``"exact"`` uses brute-force KNN and ignores the window and ``r_max``.
    """

    def __init__(self, cloud: PointCloud, index: SerializedIndex, cfg=NeighborQueryConfig(), neighbors="approx", batch=65536):
        if cloud.normals is None:
            raise ValueError("ImlsField needs oriented normals")
        if neighbors not in ("approx", "exact"):
            raise ValueError("neighbors must be 'approx' or 'exact'")
        self.cloud = cloud
        self.index = index
        self.cfg = cfg
        self.neighbors = neighbors
        self.batch = batch

    def __call__(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(points))
        for a in range(0, len(points), self.batch):
            q = points[a : a + self.batch]
            if self.neighbors == "approx":
                idx, _ = approx_neighbors_batch(self.index, q, self.cfg)
            else:
                idx, _ = exact_knn_batch(self.cloud.positions, q, self.cfg.k)
            out[a : a + len(q)] = _imls_from_neighbors(self.cloud, q, idx)
        return out
