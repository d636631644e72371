"""Training a small decoder on two analytic scenes.

The decoder reads multi-scale point features around each query and predicts
a signed distance and a near-surface logit. Training uses exact SDF labels
from the scene oracles plus an eikonal term on finite-difference gradients.
"""

# %%
import sys

import numpy as np

from serialsdf.curves import CurveParams
from serialsdf.field import DecoderParams, TrainConfig, TrainingScene, evaluate_loss, sample_training_queries, train_decoder
from serialsdf.mesher import sample_surface
from serialsdf.metrics import chamfer_l1
from serialsdf.pyramid import build_pyramid
from serialsdf.reconstruct import prepare_cloud, reconstruct_decoder
from serialsdf.scenes import Box, SceneSpec, Sphere, generate_scene

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200

# %% Two small scenes, each with a feature pyramid and labelled queries
specs = [
    SceneSpec((Sphere((0.0, 0.0, 0.0), 0.3),), count=8000, noise=0.002, seed=1),
    SceneSpec((Box((0.0, 0.0, 0.0), (0.25, 0.2, 0.15)),), count=8000, noise=0.002, seed=2),
]
cfg = TrainConfig(steps=steps, batch_size=256)
train, held = [], []
for i, spec in enumerate(specs):
    cloud, oracle = generate_scene(spec)
    c = prepare_cloud(cloud)
    pyr = build_pyramid(c, 4, 0.02, CurveParams.for_points(c.positions))
    train.append(TrainingScene(pyr, sample_training_queries(oracle, 1500, 500, cfg, seed=10 + i)))
    held.append(TrainingScene(pyr, sample_training_queries(oracle, 500, 250, cfg, seed=20 + i)))
    if i == 0:
        sphere_cloud, sphere_oracle = c, oracle
print("levels:", [len(lv.cloud) for lv in train[0].pyramid.levels])

# %% Held-out loss before and after
init = DecoderParams.init(4, 8, 32, seed=0)
print("parameters:", init.n_params)
before = evaluate_loss(init, held, cfg)
params, trace = train_decoder(train, init, cfg, log_every=0)
after = evaluate_loss(params, held, cfg)
print(f"held-out total {before.total:.2f} -> {after.total:.2f}")
print(f"  sdf {before.l_sdf:.4f} -> {after.l_sdf:.4f}, eikonal {before.l_eikonal:.3f} -> {after.l_eikonal:.3f}")
print("training loss every 50 steps:", np.round(trace[::50], 2).tolist())

# %% Mesh the sphere with both decoders
gt, _ = sphere_oracle.sample_surface(50_000, np.random.default_rng(5))
for name, p in (("init", init), ("trained", params)):
    mesh = reconstruct_decoder(sphere_cloud, p, cell=0.02)
    cd = chamfer_l1(sample_surface(mesh, 50_000, seed=1), gt).cd if not mesh.is_empty else float("inf")
    print(f"{name:>8}: {len(mesh.triangles)} triangles, CD {cd:.4f}")
