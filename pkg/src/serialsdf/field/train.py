"""Fitting the decoder with Adam on exact reverse-mode gradients.

Neighborhoods are recomputed for every stencil point of every batch but are
treated as fixed selections: gradients flow through the encoders, the
inverse-distance aggregation and both heads, never through neighbor choice.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import NonFiniteLoss
from ..pyramid import FeaturePyramid
from ..spatial import NeighborQueryConfig
from .decoder import DecoderParams
from .evaluate import backward, forward, gather
from .losses import LossBreakdown, QuerySamples, TrainConfig, loss_terms, stencil_points

log = logging.getLogger(__name__)


@dataclass
class TrainingScene:
    pyramid: FeaturePyramid
    samples: QuerySamples


def loss_and_grad(params: DecoderParams, pyramid: FeaturePyramid, samples: QuerySamples, cfg: TrainConfig, ncfg=NeighborQueryConfig()):
    pts = stencil_points(samples.positions, cfg.fd_step)
    inputs = gather(pyramid, pts, ncfg)
    sdf, logit, ok, cache = forward(params, inputs, len(pts))
    v = np.where(ok, sdf, np.nan).reshape(-1, 7)
    centre_logit = logit.reshape(-1, 7)[:, 0]
    losses, dv, dlogit_c = loss_terms(v, centre_logit, samples, cfg, want_grad=True)
    dlogit = np.zeros((len(samples), 7))
    dlogit[:, 0] = dlogit_c
    grads = backward(params, cache, dv.reshape(-1), dlogit.reshape(-1))
    return losses, grads


def evaluate_loss(params, scenes, cfg: TrainConfig, ncfg=NeighborQueryConfig(), batch=2048):
    """Sample-weighted mean loss breakdown over every sample of every scene."""
    parts = []
    for scene in scenes:
        for a in range(0, len(scene.samples), batch):
            sub = scene.samples.subset(np.arange(a, min(a + batch, len(scene.samples))))
            pts = stencil_points(sub.positions, cfg.fd_step)
            sdf, logit, ok, _ = forward(params, gather(scene.pyramid, pts, ncfg), len(pts))
            v = np.where(ok, sdf, np.nan).reshape(-1, 7)
            parts.append(loss_terms(v, logit.reshape(-1, 7)[:, 0], sub, cfg))
    used = sum(p.n_used for p in parts)
    mean = lambda attr: sum(getattr(p, attr) * p.n_used for p in parts) / used
    return LossBreakdown.combine(
        mean("l_sdf"), mean("l_eikonal"), mean("l_mask"), mean("l_laplacian"), cfg,
        used, sum(p.n_skipped for p in parts),
    )


class Adam:
    def __init__(self, params: DecoderParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: DecoderParams, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params.arrays[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train_decoder(scenes, init: DecoderParams, cfg: TrainConfig = TrainConfig(), ncfg=NeighborQueryConfig(), log_every=50):
    """Run ``cfg.steps`` Adam steps; returns ``(params, trace)``.

    Steps cycle through ``scenes``; each draws ``cfg.batch_size`` samples
    without replacement. ``trace`` holds the total training loss per step.
    """
    if not scenes:
        raise ValueError("train_decoder needs at least one scene")
    params = init.copy()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for step in range(cfg.steps):
        scene = scenes[step % len(scenes)]
        n = len(scene.samples)
        pick = np.sort(rng.choice(n, size=min(cfg.batch_size, n), replace=False))
        losses, grads = loss_and_grad(params, scene.pyramid, scene.samples.subset(pick), cfg, ncfg)
        if not np.isfinite(losses.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteLoss(f"non-finite loss at step {step}", step=step)
        opt.step(params, grads)
        trace.append(losses.total)
        if log_every and step % log_every == 0:
            log.info("step %d total %.4f (sdf %.4f eik %.4f mask %.4f)", step, losses.total, losses.l_sdf, losses.l_eikonal, losses.l_mask)
    return params, np.asarray(trace)
