"""Synthetic scenes built from analytic primitives, with exact SDF oracles.

A scene is a union of spheres, axis-aligned boxes and z-axis tori. The union
SDF is the minimum of the member SDFs, which is exact outside overlapping
regions; :meth:`SceneOracle.overlap` flags probes inside two or more members.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec
from .pyramid import PointCloud


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    kind = "sphere"

    def validate(self):
        if not self.radius > 0:
            raise InvalidSpec("sphere radius must be > 0")

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def area(self):
        return 4.0 * np.pi * self.radius**2

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius

    def sample(self, n, rng):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * d, d


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple

    kind = "box"

    def validate(self):
        if len(self.half_extents) != 3 or min(self.half_extents) <= 0:
            raise InvalidSpec("box half extents must be three positive values")

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def _face_areas(self):
        hx, hy, hz = self.half_extents
        return np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0

    def area(self):
        return float(self._face_areas().sum())

    def bounds(self):
        c, h = np.asarray(self.center, dtype=np.float64), np.asarray(self.half_extents, dtype=np.float64)
        return c - h, c + h

    def sample(self, n, rng):
        areas = self._face_areas()
        face = rng.choice(6, size=n, p=areas / areas.sum())
        h = np.asarray(self.half_extents, dtype=np.float64)
        pts = rng.uniform(-h, h, size=(n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        rows = np.arange(n)
        pts[rows, axis] = sign * h[axis]
        normals = np.zeros((n, 3))
        normals[rows, axis] = sign
        return pts + np.asarray(self.center), normals


@dataclass(frozen=True)
class Torus:
    center: tuple
    major: float
    minor: float

    kind = "torus"

    def validate(self):
        if not (self.major > 0 and self.minor > 0):
            raise InvalidSpec("torus radii must be > 0")
        if self.minor >= self.major:
            raise InvalidSpec("torus minor radius must be smaller than the major radius")

    def sdf(self, p):
        d = p - np.asarray(self.center)
        ring = np.hypot(d[..., 0], d[..., 1]) - self.major
        return np.hypot(ring, d[..., 2]) - self.minor

    def area(self):
        return 4.0 * np.pi**2 * self.major * self.minor

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        e = np.array([self.major + self.minor, self.major + self.minor, self.minor])
        return c - e, c + e

    def sample(self, n, rng):
        R, r = self.major, self.minor
        out_v = np.empty(0)
        # area element is proportional to R + r cos(v): rejection sampling
        while out_v.size < n:
            v = rng.uniform(0, 2 * np.pi, size=2 * n)
            keep = rng.uniform(0, R + r, size=2 * n) < R + r * np.cos(v)
            out_v = np.concatenate([out_v, v[keep]])
        v = out_v[:n]
        u = rng.uniform(0, 2 * np.pi, size=n)
        normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
        ring = np.stack([R * np.cos(u), R * np.sin(u), np.zeros(n)], axis=1)
        return np.asarray(self.center) + ring + r * normals, normals


_PRIMITIVES = {"sphere": Sphere, "box": Box, "torus": Torus}


def primitive_from_dict(doc):
    doc = dict(doc)
    kind = doc.pop("type", None)
    if kind not in _PRIMITIVES:
        raise InvalidSpec(f"unknown primitive type {kind!r}")
    try:
        prim = _PRIMITIVES[kind](**doc)
    except TypeError as exc:
        raise InvalidSpec(f"bad {kind} parameters: {exc}") from None
    return prim


def primitive_to_dict(prim):
    doc = {"type": prim.kind}
    doc.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in prim.__dict__.items()})
    return doc


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    count: int = 10000
    noise: float = 0.0
    sampling: str = "uniform"
    seed: int = 0
    block_difference: int = 200
    blocks: str = "octants"

    def validate(self):
        if not self.primitives:
            raise InvalidSpec("scene needs at least one primitive")
        for p in self.primitives:
            p.validate()
        if self.count < 1:
            raise InvalidSpec("count must be >= 1")
        if self.noise < 0:
            raise InvalidSpec("noise must be >= 0")
        if self.sampling not in ("uniform", "nonuniform"):
            raise InvalidSpec(f"sampling must be 'uniform' or 'nonuniform', got {self.sampling!r}")
        if self.blocks not in ("octants", "slabs"):
            raise InvalidSpec(f"blocks must be 'octants' or 'slabs', got {self.blocks!r}")

    def to_dict(self):
        return {
            "primitives": [primitive_to_dict(p) for p in self.primitives],
            "count": self.count,
            "noise": self.noise,
            "sampling": self.sampling,
            "seed": self.seed,
            "block_difference": self.block_difference,
            "blocks": self.blocks,
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        prims = tuple(primitive_from_dict(p) for p in doc.pop("primitives", ()))
        try:
            spec = cls(primitives=prims, **doc)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None
        spec.validate()
        return spec


@dataclass
class SceneOracle:
    primitives: tuple
    bounds: tuple = field(init=False)

    def __post_init__(self):
        lo = np.min([p.bounds()[0] for p in self.primitives], axis=0)
        hi = np.max([p.bounds()[1] for p in self.primitives], axis=0)
        self.bounds = (lo, hi)

    def member_sdf(self, points):
        p = np.asarray(points, dtype=np.float64)
        return np.stack([prim.sdf(p) for prim in self.primitives], axis=-1)

    def sdf(self, points):
        return self.member_sdf(points).min(axis=-1)

    __call__ = sdf

    def overlap(self, points):
        """True where a probe lies inside two or more primitives."""
        return (self.member_sdf(points) < 0).sum(axis=-1) >= 2

    def sample_surface(self, n, rng):
        """Area-weighted surface samples of the union, with outward normals.

        Samples that fall strictly inside another primitive are not on the
        union surface and are redrawn.
        """
        rng = np.random.default_rng(rng)
        areas = np.array([p.area() for p in self.primitives])
        pts_out, nrm_out, have = [], [], 0
        while have < n:
            need = n - have
            which = rng.choice(len(self.primitives), size=need, p=areas / areas.sum())
            pts = np.empty((need, 3))
            nrm = np.empty((need, 3))
            for i, prim in enumerate(self.primitives):
                sel = np.flatnonzero(which == i)
                if sel.size:
                    pts[sel], nrm[sel] = prim.sample(sel.size, rng)
            if len(self.primitives) > 1:
                member = self.member_sdf(pts)
                member[np.arange(need), which] = np.inf
                keep = member.min(axis=1) >= 0
                pts, nrm = pts[keep], nrm[keep]
            pts_out.append(pts)
            nrm_out.append(nrm)
            have += len(pts)
        return np.concatenate(pts_out)[:n], np.concatenate(nrm_out)[:n]


def arithmetic_block_counts(total, n_blocks=8, difference=200):
    """Per-block counts ``a, a + d, ..., a + (n-1) d`` with the last block padded.

    ``a`` is the largest start that keeps the sequence sum within ``total``;
    the remainder goes to the final block.
    """
    base = (total - difference * n_blocks * (n_blocks - 1) // 2) // n_blocks
    if base < 0:
        raise InvalidSpec(f"{total} points cannot hold {n_blocks} blocks with difference {difference}")
    counts = base + difference * np.arange(n_blocks)
    counts[-1] += total - counts.sum()
    return counts


def block_ids(points, lo, hi, layout="octants"):
    """Block index of each point in an 8-way split of the box ``[lo, hi]``."""
    mid = (np.asarray(lo) + np.asarray(hi)) / 2.0
    if layout == "octants":
        bits = (points > mid).astype(np.int64)
        return bits[:, 0] | (bits[:, 1] << 1) | (bits[:, 2] << 2)
    t = (points[:, 0] - lo[0]) / max(hi[0] - lo[0], 1e-300)
    return np.clip((t * 8).astype(np.int64), 0, 7)


def _nonuniform_surface(oracle, spec, rng):
    counts = arithmetic_block_counts(spec.count, 8, spec.block_difference)
    lo, hi = oracle.bounds
    chosen_p, chosen_n = [], []
    need = counts.copy()
    pool = 4 * spec.count
    while need.sum() > 0:
        pts, nrm = oracle.sample_surface(pool, rng)
        ids = block_ids(pts, lo, hi, spec.blocks)
        for b in range(8):
            if need[b] == 0:
                continue
            sel = np.flatnonzero(ids == b)[: need[b]]
            chosen_p.append(pts[sel])
            chosen_n.append(nrm[sel])
            need[b] -= sel.size
        if pool > 1000 * spec.count and need.sum() > 0:
            raise InvalidSpec("scene surface does not reach every block")
        pool *= 2
    pts = np.concatenate(chosen_p)
    nrm = np.concatenate(chosen_n)
    order = np.argsort(block_ids(pts, lo, hi, spec.blocks), kind="stable")
    return pts[order], nrm[order]


def generate_scene(spec: SceneSpec):
    """Sample a point cloud from ``spec``; returns ``(cloud, oracle)``.

    Surface samples carry the exact outward normal of their primitive and are
    displaced along it by Gaussian noise of std ``spec.noise``.
    """
    spec.validate()
    oracle = SceneOracle(tuple(spec.primitives))
    rng = np.random.default_rng(spec.seed)
    if spec.sampling == "uniform":
        pts, nrm = oracle.sample_surface(spec.count, rng)
    else:
        pts, nrm = _nonuniform_surface(oracle, spec, rng)
    if spec.noise > 0:
        pts = pts + rng.normal(0.0, spec.noise, size=(len(pts), 1)) * nrm
    return PointCloud(pts, normals=nrm), oracle


def uniform_box_cloud(n, lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), seed=0, difference=None):
    """Volumetric random cloud in a box.

    With ``difference`` set, the box is split into octants whose counts follow
    :func:`arithmetic_block_counts`.
    """
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    if difference is None:
        return rng.uniform(lo, hi, size=(n, 3))
    counts = arithmetic_block_counts(n, 8, difference)
    mid = (lo + hi) / 2.0
    parts = []
    for b, c in enumerate(counts):
        bits = np.array([(b >> i) & 1 for i in range(3)], dtype=bool)
        blo = np.where(bits, mid, lo)
        bhi = np.where(bits, hi, mid)
        parts.append(rng.uniform(blo, bhi, size=(c, 3)))
    return np.concatenate(parts)


def sphere_scene(count=10000, radius=1.0, noise=0.0, seed=0, center=(0.0, 0.0, 0.0)):
    return SceneSpec(primitives=(Sphere(tuple(center), radius),), count=count, noise=noise, seed=seed)
