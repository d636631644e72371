"""Reconstruction metrics and the neighborhood recall benchmark."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .curves import CurveKind
from .errors import EmptySet
from .pyramid import FeaturePyramid
from .spatial import NeighborQueryConfig, approx_neighbors_batch, exact_knn_batch


@dataclass(frozen=True)
class ChamferReport:
    cd: float
    completeness: float
    accuracy: float

    def scaled(self, factor=100.0):
        """Values in the conventional x10^-2 reporting unit."""
        return ChamferReport(self.cd * factor, self.completeness * factor, self.accuracy * factor)


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptySet("metrics need non-empty point sets")
    return pred, gt


def _dist(a, b):
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def nearest_distances(src, dst):
    """Distance from every ``src`` point to its nearest ``dst`` point.

    The tree picks candidates; distances are recomputed with a fixed
    expression so results do not depend on the tree's internal arithmetic.
    """
    k = min(2, len(dst))
    _, idx = cKDTree(dst).query(src, k=k)
    idx = idx.reshape(len(src), k)
    return _dist(src[:, None, :], dst[idx]).min(axis=1)


def _mean(x):
    # correctly rounded, so the value does not depend on summation order
    return math.fsum(x.tolist()) / len(x)


def chamfer_l1(pred, gt):
    """Accuracy (pred -> gt), completeness (gt -> pred) and their mean."""
    pred, gt = _check(pred, gt)
    acc = _mean(nearest_distances(pred, gt))
    comp = _mean(nearest_distances(gt, pred))
    return ChamferReport(cd=(acc + comp) / 2.0, completeness=comp, accuracy=acc)


def precision_recall(pred, gt, delta):
    if not delta > 0:
        raise ValueError("delta must be > 0")
    pred, gt = _check(pred, gt)
    precision = int(np.count_nonzero(nearest_distances(pred, gt) <= delta)) / len(pred)
    recall = int(np.count_nonzero(nearest_distances(gt, pred) <= delta)) / len(gt)
    return precision, recall


def fscore(pred, gt, delta=0.01):
    p, r = precision_recall(pred, gt, delta)
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


@dataclass
class RecallTable:
    """``values[m, c]``: mean recall using ``m`` extra scales with curve ``kinds[c]``."""

    kinds: tuple
    values: np.ndarray
    k: int
    window: int

    def column(self, kind):
        return self.values[:, self.kinds.index(CurveKind(kind))]

    def rows(self):
        for m in range(self.values.shape[0]):
            for c, kind in enumerate(self.kinds):
                yield m, kind.value, float(self.values[m, c])


def coverage(pyramid: FeaturePyramid, truth, level_hits):
    """Per-query, per-scale-count fraction of ``truth`` neighbors recovered.

    A true neighbor counts as recovered with ``m`` extra scales when it was
    retrieved on level 0 or its pooled parent was retrieved on any level
    ``1..m``. Returns an ``(M, S)`` array.
    """
    valid = truth >= 0
    safe = np.where(valid, truth, 0)
    n_true = np.maximum(valid.sum(axis=1), 1)
    found = np.zeros(truth.shape, dtype=bool)
    out = np.zeros((len(truth), pyramid.S))
    for s, hits in enumerate(level_hits):
        parents = pyramid.levels[s].parent[safe]
        found |= (parents[:, :, None] == hits[:, None, :]).any(axis=2) & valid
        out[:, s] = found.sum(axis=1) / n_true
    return out


def recall_benchmark(pyramid: FeaturePyramid, queries, kinds=(CurveKind.HILBERT, CurveKind.MORTON), cfg=NeighborQueryConfig()):
    """Mean multi-scale recall against exact level-0 KNN, for each curve kind."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    kinds = tuple(CurveKind(k) for k in kinds)
    truth, _ = exact_knn_batch(pyramid.levels[0].cloud.positions, queries, cfg.k)
    values = np.zeros((pyramid.S, len(kinds)))
    for c, kind in enumerate(kinds):
        pyr = pyramid if pyramid.levels[0].index.kind == kind else pyramid.with_kind(kind)
        hits = [approx_neighbors_batch(lv.index, queries, cfg)[0] for lv in pyr.levels]
        values[:, c] = coverage(pyr, truth, hits).mean(axis=0)
    return RecallTable(kinds=kinds, values=values, k=cfg.k, window=cfg.half_window)
