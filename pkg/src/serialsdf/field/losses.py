"""Training losses, finite-difference field derivatives and query sampling.

Every sample is evaluated on a 7-point stencil ``[q, q+h e_x, q-h e_x, ...]``.
The centre gives the SDF and mask terms, the six offsets give the
central-difference gradient (Eikonal term) and, together with the centre, the
second-difference Laplacian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import AllUnsupported

STENCIL = np.array(
    [[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.float64,
)


@dataclass(frozen=True)
class TrainConfig:
    lambda_sdf: float = 300.0
    lambda_eikonal: float = 10.0
    lambda_mask: float = 150.0
    lambda_laplacian: float = 0.0
    mask_band: float = 0.015
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 500
    batch_size: int = 256
    fd_step: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_sdf", "lambda_eikonal", "lambda_mask", "lambda_laplacian"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be > 0")
        if not self.mask_band > 0:
            raise ValueError("mask_band must be > 0")

    @property
    def lambdas(self):
        return (self.lambda_sdf, self.lambda_eikonal, self.lambda_mask, self.lambda_laplacian)


@dataclass
class LossBreakdown:
    l_sdf: float
    l_eikonal: float
    l_mask: float
    l_laplacian: float
    total: float
    n_used: int = 0
    n_skipped: int = 0

    @classmethod
    def combine(cls, l_sdf, l_eikonal, l_mask, l_laplacian, cfg: TrainConfig, n_used=0, n_skipped=0):
        ls, le, lm, ll = cfg.lambdas
        total = ls * l_sdf + le * l_eikonal + lm * l_mask + ll * l_laplacian
        return cls(l_sdf, l_eikonal, l_mask, l_laplacian, total, n_used, n_skipped)


@dataclass
class QuerySamples:
    positions: np.ndarray
    gt_sdf: np.ndarray
    mask_label: np.ndarray
    source: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.positions)

    def subset(self, idx):
        src = None if self.source is None else self.source[idx]
        return QuerySamples(self.positions[idx], self.gt_sdf[idx], self.mask_label[idx], src)


def _values(evaluator, points):
    out = evaluator(points)
    if isinstance(out, tuple):
        sdf, logit = out
        return np.asarray(sdf, dtype=np.float64), np.asarray(logit, dtype=np.float64)
    return np.asarray(out, dtype=np.float64), None


def field_gradient(evaluator, q, h=1e-3):
    """Central differences ``(f(q + h e_i) - f(q - h e_i)) / 2h`` per axis.

    Works on a single point (returns a 3-vector) or an ``(M, 3)`` batch. NaN
    from unsupported evaluations propagates.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, 3)
    pts = (q[:, None, :] + h * STENCIL[None, 1:, :]).reshape(-1, 3)
    v = _values(evaluator, pts)[0].reshape(-1, 6)
    g = (v[:, 0::2] - v[:, 1::2]) / (2.0 * h)
    return g[0] if single else g


def field_laplacian(evaluator, q, h=1e-3):
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, 3)
    pts = (q[:, None, :] + h * STENCIL[None, :, :]).reshape(-1, 3)
    v = _values(evaluator, pts)[0].reshape(-1, 7)
    lap = (v[:, 1::2] + v[:, 2::2] - 2.0 * v[:, :1]).sum(axis=1) / (h * h)
    return lap[0] if single else lap


def stencil_points(positions, h):
    return (positions[:, None, :] + h * STENCIL[None, :, :]).reshape(-1, 3)


def loss_terms(v, logit, samples: QuerySamples, cfg: TrainConfig, want_grad=False):
    """Loss breakdown from stencil values ``v`` of shape ``(M, 7)``.

    ``logit`` holds the centre mask logits (or None for fields without a mask
    head, which then contribute ``l_mask = 0``). With ``want_grad`` also
    returns ``d total / d v`` and ``d total / d logit``; skipped samples get
    zero gradient.
    """
    h = cfg.fd_step
    m = len(samples)
    # NaN stencil values mark unsupported samples; a non-finite logit on a
    # supported sample is a real failure and flows into the loss
    ok = np.all(np.isfinite(v), axis=1)
    n = int(ok.sum())
    if n == 0:
        raise AllUnsupported(f"all {m} samples lack support")
    vs = v[ok]
    d = samples.gt_sdf[ok]

    r = d - vs[:, 0]
    l_sdf = np.abs(r).mean()

    g = (vs[:, 1::2] - vs[:, 2::2]) / (2.0 * h)
    gn = np.linalg.norm(g, axis=1)
    l_eik = ((gn - 1.0) ** 2).mean()

    lap = (vs[:, 1::2] + vs[:, 2::2] - 2.0 * vs[:, :1]).sum(axis=1) / (h * h)
    l_lap = np.abs(lap).mean()

    if logit is not None:
        z = logit[ok]
        c = samples.mask_label[ok].astype(np.float64)
        l_mask = (np.logaddexp(0.0, z) - c * z).mean()
    else:
        l_mask = 0.0

    out = LossBreakdown.combine(float(l_sdf), float(l_eik), float(l_mask), float(l_lap), cfg, n, m - n)
    if not want_grad:
        return out

    ls, le, lm, ll = cfg.lambdas
    dv = np.zeros_like(vs)
    dv[:, 0] += ls * -np.sign(r) / n

    coef = np.where(gn > 0, 2.0 * (gn - 1.0) / np.where(gn > 0, gn, 1.0), 0.0)
    dg = le * coef[:, None] * g / n
    dv[:, 1::2] += dg / (2.0 * h)
    dv[:, 2::2] -= dg / (2.0 * h)

    dlap = ll * np.sign(lap) / n / (h * h)
    dv[:, 1::2] += dlap[:, None]
    dv[:, 2::2] += dlap[:, None]
    dv[:, 0] -= 6.0 * dlap

    dv_full = np.zeros_like(v)
    dv_full[ok] = dv
    dlogit = np.zeros(m)
    if logit is not None:
        dlogit[ok] = lm * (0.5 * (1.0 + np.tanh(0.5 * z)) - c) / n
    return out, dv_full, dlogit


def compute_losses(samples: QuerySamples, evaluator, cfg: TrainConfig = TrainConfig()):
    """Loss breakdown of any field ``evaluator(points) -> sdf | (sdf, logit)``.

    Samples whose stencil touches an unsupported (NaN) value are skipped and
    counted in ``n_skipped``.
    """
    if len(samples) == 0:
        raise ValueError("empty sample batch")
    pts = stencil_points(samples.positions, cfg.fd_step)
    sdf, logit = _values(evaluator, pts)
    v = sdf.reshape(-1, 7)
    centre_logit = None if logit is None else logit.reshape(-1, 7)[:, 0]
    return loss_terms(v, centre_logit, samples, cfg)


def sample_training_queries(oracle, n_near, n_uniform, cfg: TrainConfig = TrainConfig(), seed=0, pad=0.05):
    """Near-surface Gaussian samples plus uniform box samples, with labels.

    Near samples perturb surface points by isotropic noise with standard
    deviation ``mask_band``; uniform samples fill the oracle bounds grown by
    ``pad``. ``mask_label`` is ``|gt_sdf| < mask_band``.
    """
    rng = np.random.default_rng(seed)
    surf, _ = oracle.sample_surface(n_near, rng)
    near = surf + rng.normal(0.0, cfg.mask_band, size=surf.shape)
    lo, hi = np.asarray(oracle.bounds[0]) - pad, np.asarray(oracle.bounds[1]) + pad
    uni = rng.uniform(lo, hi, size=(n_uniform, 3))
    pos = np.concatenate([near, uni]).reshape(-1, 3)
    gt = oracle.sdf(pos)
    source = np.r_[np.zeros(n_near, dtype=np.int8), np.ones(n_uniform, dtype=np.int8)]
    return QuerySamples(pos, gt, np.abs(gt) < cfg.mask_band, source)
