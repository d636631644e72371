"""Dual marching cubes over a regular grid, and area-weighted mesh sampling.

The field is sampled at grid corners. Every cell whose corners change sign
gets one vertex at the mean of the zero crossings on its edges (each crossing
linearly interpolated from the two corner values). Every sign-changing grid
edge whose four surrounding cells all carry a vertex emits a quad, split into
two triangles wound so that normals point toward positive values.

Corners where the field is unsupported (NaN) disable the cells touching them.
With the mask gate on, cells whose corners all have mask logit below zero
(probability < 0.5 of being near the surface) are disabled as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMesh


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def triangle_areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def triangle_normals(self):
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


@dataclass(frozen=True)
class ExtractionConfig:
    bounds: tuple
    cell: float
    mask_gate: bool = False
    mask_threshold: float = 0.5
    batch: int = 65536

    def __post_init__(self):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        if not self.cell > 0:
            raise ValueError("cell must be > 0")
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValueError("bounds must be a non-degenerate (lo, hi) box")

    def grid_shape(self):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        return tuple(int(math.ceil((h - l) / self.cell - 1e-9)) for l, h in zip(lo, hi))


def _evaluate(field, points, batch, want_mask):
    sdf = np.empty(len(points))
    logit = np.full(len(points), np.inf)
    for a in range(0, len(points), batch):
        out = field(points[a : a + batch])
        if isinstance(out, tuple):
            sdf[a : a + batch] = out[0]
            if want_mask:
                logit[a : a + batch] = out[1]
        else:
            sdf[a : a + batch] = out
    return sdf, logit


def corner_grid(cfg: ExtractionConfig):
    lo = np.asarray(cfg.bounds[0], dtype=np.float64)
    nx, ny, nz = cfg.grid_shape()
    axes = [lo[i] + cfg.cell * np.arange(n + 1) for i, n in enumerate((nx, ny, nz))]
    return axes


def extract_mesh(field, cfg: ExtractionConfig):
    """Triangle mesh of the zero level set of ``field`` inside ``cfg.bounds``.

    ``field(points)`` returns SDF values (NaN where unsupported) or a
    ``(sdf, mask_logit)`` pair. An empty mesh is a valid result.
    """
    axes = corner_grid(cfg)
    shape = tuple(len(a) for a in axes)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    sdf, logit = _evaluate(field, pts, cfg.batch, cfg.mask_gate)
    return mesh_from_grid(sdf.reshape(shape), axes, logit.reshape(shape) if cfg.mask_gate else None, cfg.mask_threshold)


def _cell_all(a):
    return (
        a[:-1, :-1, :-1] & a[1:, :-1, :-1] & a[:-1, 1:, :-1] & a[1:, 1:, :-1]
        & a[:-1, :-1, 1:] & a[1:, :-1, 1:] & a[:-1, 1:, 1:] & a[1:, 1:, 1:]
    )


def mesh_from_grid(values, axes, logits=None, mask_threshold=0.5):
    values = np.asarray(values, dtype=np.float64)
    nx, ny, nz = (s - 1 for s in values.shape)
    if min(nx, ny, nz) < 1:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    finite = np.isfinite(values)
    inside = np.where(finite, values < 0, False)
    valid = _cell_all(finite)
    if logits is not None:
        thr = math.log(mask_threshold / (1.0 - mask_threshold))
        far = np.where(np.isfinite(logits) | np.isinf(logits), logits < thr, True)
        valid &= ~_cell_all(far)
    n_inside = sum(
        inside[i : i + nx, j : j + ny, k : k + nz].astype(np.int8)
        for i in (0, 1) for j in (0, 1) for k in (0, 1)
    )
    active = valid & (n_inside > 0) & (n_inside < 8)

    # zero crossings on grid edges along each axis, accumulated into cells
    vsum = np.zeros((nx, ny, nz, 3))
    vcnt = np.zeros((nx, ny, nz))
    coords = np.meshgrid(*axes, indexing="ij")
    crossings = []
    for ax in range(3):
        sl0 = [slice(None)] * 3
        sl1 = [slice(None)] * 3
        sl0[ax] = slice(0, -1)
        sl1[ax] = slice(1, None)
        v0, v1 = values[tuple(sl0)], values[tuple(sl1)]
        change = (inside[tuple(sl0)] != inside[tuple(sl1)]) & np.isfinite(v0) & np.isfinite(v1)
        denom = np.where(change, v0 - v1, 1.0)
        t = np.where(change, v0 / denom, 0.0)
        pos = np.stack([c[tuple(sl0)] for c in coords], axis=-1)
        step = axes[ax][1] - axes[ax][0]
        pos[..., ax] += t * step
        crossings.append((change, inside[tuple(sl0)]))
        # an edge along ``ax`` touches the 4 cells offset in the two other axes
        others = [a for a in range(3) if a != ax]
        for da in (0, 1):
            for db in (0, 1):
                src = [slice(None)] * 3
                src[others[0]] = slice(da, da + (nx, ny, nz)[others[0]])
                src[others[1]] = slice(db, db + (nx, ny, nz)[others[1]])
                c = change[tuple(src)]
                vsum += np.where(c[..., None], pos[tuple(src)], 0.0)
                vcnt += c

    vid = np.full((nx, ny, nz), -1, dtype=np.int64)
    vid[active] = np.arange(int(active.sum()))
    verts = vsum[active] / vcnt[active][:, None]

    quads = []
    for ax, (change, start_inside) in enumerate(crossings):
        a, b = [x for x in range(3) if x != ax]
        dims = [nx, ny, nz]
        # interior edges only: need cells on both sides in axes a and b
        idx = np.argwhere(change)
        keep = (idx[:, a] >= 1) & (idx[:, a] <= dims[a] - 1) & (idx[:, b] >= 1) & (idx[:, b] <= dims[b] - 1)
        keep &= idx[:, ax] < dims[ax]
        idx = idx[keep]
        flip = start_inside[tuple(idx.T)]

        def cell(da, db):
            c = idx.copy()
            c[:, a] -= da
            c[:, b] -= db
            return vid[tuple(c.T)]

        # counter-clockwise in the (a, b) plane gives a normal along +ax
        q = np.stack([cell(1, 1), cell(0, 1), cell(0, 0), cell(1, 0)], axis=1)
        if (a, b) == (0, 2):
            # (z, x) is the right-handed order for ax = y
            q = q[:, ::-1]
        q = np.where(flip[:, None], q, q[:, ::-1])
        quads.append(q[np.all(q >= 0, axis=1)])
    quads = np.concatenate(quads) if quads else np.zeros((0, 4), np.int64)
    tris = np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]])
    return Mesh(verts, tris)


def sample_surface(mesh: Mesh, n, seed=0):
    """``n`` area-weighted uniform samples on the mesh surface."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return np.zeros((0, 3))
    if mesh.is_empty:
        raise EmptyMesh("cannot sample points from an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    over = u + v > 1.0
    u[over], v[over] = 1.0 - u[over], 1.0 - v[over]
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)
