"""Shared oracles for the test suite."""

import numpy as np

from serialsdf.field import DecoderParams, QuerySamples, TrainConfig, loss_and_grad
from serialsdf.field.evaluate import forward, gather
from serialsdf.field.losses import loss_terms, stencil_points
from serialsdf.pyramid import PointCloud, build_pyramid, estimate_local_geometry
from serialsdf.spatial import NeighborQueryConfig


ACCEPTANCE = []


def record(number, title, ok, detail):
    """Log one acceptance line (printed in the pytest summary) and return ``ok``."""
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def sphere_points(n, radius, rng):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def gradient_check(seed, hidden=4, S=2, n_queries=6, lambda_laplacian=1e-3, step=1e-3):
    """Max relative error between analytic and finite-difference parameter gradients.

    Uses the fourth-order central stencil over every parameter of a small
    decoder on a random sphere cloud. Neighborhoods do not depend on the
    weights, so they are gathered once and reused for every perturbation.
    """
    rng = np.random.default_rng(seed)
    pts = sphere_points(400, 0.3, rng)
    cloud = estimate_local_geometry(PointCloud(pts), k=8)
    pyr = build_pyramid(cloud, S, base_pool=0.04)
    q = pts[:n_queries] + rng.normal(0, 0.02, size=(n_queries, 3))
    d = np.linalg.norm(q, axis=1) - 0.3
    samples = QuerySamples(q, d, np.abs(d) < 0.015)
    cfg = TrainConfig(lambda_laplacian=lambda_laplacian)
    ncfg = NeighborQueryConfig(k=8, r_max=np.inf)
    params = DecoderParams.init(S, cloud.feature_dim, hidden=hidden, seed=seed, out_gain=1.0)

    _, grads = loss_and_grad(params, pyr, samples, cfg, ncfg)
    analytic = np.concatenate([grads[n].ravel() for n in params.names])

    stencil = stencil_points(samples.positions, cfg.fd_step)
    inputs = gather(pyr, stencil, ncfg)

    def total(flat):
        sdf, logit, ok, _ = forward(params.with_flat(flat), inputs, len(stencil))
        v = np.where(ok, sdf, np.nan).reshape(-1, 7)
        return loss_terms(v, logit.reshape(-1, 7)[:, 0], samples, cfg).total

    x0 = params.flat()
    fd = np.empty_like(x0)
    for i in range(len(x0)):
        vals = []
        for o in (2, 1, -1, -2):
            x = x0.copy()
            x[i] += o * step
            vals.append(total(x))
        fd[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * step)
    rel = np.abs(analytic - fd) / np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float(rel.max()), len(x0)
