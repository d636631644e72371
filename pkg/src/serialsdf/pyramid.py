"""Multi-level point hierarchy built by grid pooling.

Level 0 is the input cloud. Level ``s > 0`` pools level 0 on a grid of size
``base_pool * 2**(s - 1)``: each occupied cell becomes one point at the
centroid of its members, carrying the mean of their features. Every level is
serialized on the same fine curve grid.

Per-point features come from :func:`estimate_local_geometry`, an analytic
stand-in for a learned backbone. The 8 channels are::

    [normal (3), neighborhood centroid - p (3), mean neighbor distance, plane residual]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from .curves import CurveKind, CurveParams
from .errors import EmptyCloud
from .spatial import SerializedIndex, build_index

log = logging.getLogger(__name__)

FEATURE_DIM = 8


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray | None = None
    normals: np.ndarray | None = None
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")
        n = len(self.positions)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64).reshape(n, -1)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(n, 3)
            norms = np.linalg.norm(self.normals, axis=1)
            # zero normals are allowed only as the degenerate-neighborhood fallback
            ok = (np.abs(norms - 1.0) <= 1e-6) | (norms == 0.0)
            if not np.all(ok):
                raise ValueError("normals must be unit length (or zero for degenerate points)")
        if self.degenerate is not None:
            self.degenerate = np.asarray(self.degenerate, dtype=bool).reshape(n)

    def __len__(self):
        return len(self.positions)

    @property
    def feature_dim(self):
        return 0 if self.features is None else self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return PointCloud(self.positions[idx], pick(self.features), pick(self.normals), pick(self.degenerate))


@dataclass
class Level:
    cloud: PointCloud
    index: SerializedIndex
    pool_size: float
    # level-0 point -> pooled point on this level (identity on level 0)
    parent: np.ndarray


@dataclass
class FeaturePyramid:
    levels: list = field(default_factory=list)

    @property
    def S(self):
        return len(self.levels)

    @property
    def feature_dim(self):
        return self.levels[0].cloud.feature_dim

    @property
    def params(self) -> CurveParams:
        return self.levels[0].index.params

    def with_kind(self, kind):
        """Same clouds re-serialized with another curve."""
        levels = [
            replace(
                lv,
                index=build_index(lv.cloud.positions, lv.index.params, kind, pool_size=lv.pool_size),
            )
            for lv in self.levels
        ]
        return FeaturePyramid(levels)


def _pool(positions, features, normals, origin, size):
    cells = np.floor((positions - origin) / size).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)

    def mean(values):
        out = np.zeros((m, values.shape[1]))
        np.add.at(out, inverse, values)
        return out / counts[:, None]

    pooled_pos = mean(positions)
    pooled_feat = None if features is None else mean(features)
    pooled_normals = None
    if normals is not None:
        avg = mean(normals)
        norm = np.linalg.norm(avg, axis=1, keepdims=True)
        pooled_normals = np.where(norm > 1e-12, avg / np.where(norm > 0, norm, 1.0), 0.0)
    return pooled_pos, pooled_feat, pooled_normals, inverse


def build_pyramid(
    cloud: PointCloud,
    S=4,
    base_pool=0.02,
    curve_params: CurveParams | None = None,
    kind=CurveKind.HILBERT,
):
    """Grid-pool ``cloud`` into ``S`` levels, each with its own serialized index.

    Level 0 keeps the input; its nominal pool size is ``base_pool / 2`` so the
    size doubles from every level to the next.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    if len(cloud) == 0:
        raise EmptyCloud("cannot build a pyramid from an empty cloud")
    if curve_params is None:
        curve_params = CurveParams.for_points(cloud.positions)
    origin = np.asarray(curve_params.origin)

    levels = []
    n = len(cloud)
    pool0 = base_pool / 2.0
    levels.append(
        Level(cloud, build_index(cloud.positions, curve_params, kind, pool_size=pool0), pool0, np.arange(n))
    )
    for s in range(1, S):
        size = base_pool * 2 ** (s - 1)
        pos, feat, nrm, parent = _pool(cloud.positions, cloud.features, cloud.normals, origin, size)
        pooled = PointCloud(pos, feat, nrm)
        levels.append(Level(pooled, build_index(pos, curve_params, kind, pool_size=size), size, parent))
    return FeaturePyramid(levels)


def _orient(positions, normals, nbr, valid, reference):
    """Make normals consistent along a minimum spanning tree of the kNN graph.

    Edge cost is ``1 - |n_i . n_j|`` so propagation prefers nearly parallel
    neighbors. Each connected component is then flipped so that its normals
    point away from ``reference`` on balance.
    """
    n, k = nbr.shape
    rows = np.repeat(np.arange(n), k)
    cols = nbr.reshape(-1)
    keep = valid[rows] & valid[cols] & (rows != cols)
    rows, cols = rows[keep], cols[keep]
    cost = 1.0 - np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols])) + 1e-9
    graph = coo_matrix((cost, (rows, cols)), shape=(n, n)).tocsr()
    graph = graph.maximum(graph.T)
    tree = minimum_spanning_tree(graph)
    tree = tree + tree.T
    n_comp, labels = connected_components(tree, directed=False)

    out = normals.copy()
    seen = np.zeros(n, dtype=bool)
    for start in range(n):
        if seen[start] or not valid[start]:
            continue
        order, pred = breadth_first_order(tree, start, directed=False, return_predecessors=True)
        seen[order] = True
        for node in order[1:]:
            if out[node] @ out[pred[node]] < 0:
                out[node] = -out[node]

    outward = np.einsum("ij,ij->i", out, positions - reference)
    votes = np.bincount(labels, weights=outward, minlength=n_comp)
    flip = (votes[labels] < 0) & valid
    out[flip] = -out[flip]
    return out


def estimate_local_geometry(cloud: PointCloud, k=16, reference=None, orient=True):
    """Per-point plane fit over the ``k`` exact nearest neighbors.

    Returns a new cloud with ``normals``, 8-channel ``features`` and a
    ``degenerate`` flag for rank-deficient neighborhoods (their normal and
    normal features are zero). ``reference`` is the point normals face away
    from after orientation; defaults to the cloud centroid.
    """
    pos = cloud.positions
    n = len(pos)
    if not n > k >= 3:
        raise ValueError(f"need N > k >= 3, got N={n}, k={k}")

    # exact neighbors via a kd-tree; self is dropped from the neighborhood
    _, nbr = cKDTree(pos).query(pos, k=k + 1)
    nbr = nbr[:, 1:]
    local = pos[nbr]
    centroid = local.mean(axis=1)
    centered = local - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-12 * scale
    degenerate |= evals[:, 2] <= 0

    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = 0.0
    if degenerate.any():
        log.warning("%d of %d points have degenerate neighborhoods", int(degenerate.sum()), n)

    if orient:
        ref = pos.mean(axis=0) if reference is None else np.asarray(reference, dtype=np.float64)
        normals = _orient(pos, normals, nbr, ~degenerate, ref)

    mean_dist = np.linalg.norm(local - pos[:, None, :], axis=2).mean(axis=1)
    residual = np.sqrt(np.maximum(evals[:, 0], 0.0))
    residual[degenerate] = 0.0
    features = np.concatenate(
        [normals, centroid - pos, mean_dist[:, None], residual[:, None]], axis=1
    )
    return PointCloud(pos, features, normals, degenerate)
