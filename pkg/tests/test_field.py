import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import gradient_check, sphere_points
from serialsdf.curves import CurveParams
from serialsdf.errors import AllUnsupported, NoSupport, NonFiniteLoss, ParseError, UnsupportedFormat
from serialsdf.field import (
    DecoderParams,
    ImlsField,
    LossBreakdown,
    QuerySamples,
    TrainConfig,
    TrainingScene,
    aggregate_level,
    compute_losses,
    evaluate_field,
    evaluate_field_batch,
    evaluate_loss,
    field_gradient,
    field_laplacian,
    imls_distance,
    sample_training_queries,
    train_decoder,
)
from serialsdf.field.decoder import layout
from serialsdf.pyramid import PointCloud, build_pyramid, estimate_local_geometry
from serialsdf.scenes import SceneOracle, SceneSpec, Sphere, generate_scene, sphere_scene
from serialsdf.spatial import NeighborQueryConfig, NeighborSet, approx_neighbors, approx_neighbors_batch, build_index, exact_knn

INF = NeighborQueryConfig(k=8, r_max=np.inf)


def feature_cloud(n, seed=0, d=8, spread=0.1):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.uniform(0, spread, size=(n, 3)), rng.normal(size=(n, d)))


def sphere_sdf(p, r=1.0):
    return np.linalg.norm(np.atleast_2d(p), axis=1) - r


# -- reference implementation of the field, written without vectorization

def _softplus(z):
    return np.log1p(np.exp(-abs(z))) + max(z, 0.0)


def _ref_encoder(params, s, x):
    a = params.arrays
    h1 = np.array([_softplus(v) for v in x @ a[f"enc{s}.w1"] + a[f"enc{s}.b1"]])
    h2 = h1 + np.array([_softplus(v) for v in h1 @ a[f"enc{s}.w2"] + a[f"enc{s}.b2"]])
    return h2 @ a[f"enc{s}.w3"] + a[f"enc{s}.b3"]


def _ref_head(params, name, feat):
    a = params.arrays
    h = np.array([_softplus(v) for v in feat @ a[f"{name}.w1"] + a[f"{name}.b1"]])
    return float(h @ a[f"{name}.w2"][:, 0] + a[f"{name}.b2"][0])


def reference_field(q, pyramid, params, cfg):
    feat = np.zeros(params.hidden)
    for s, lv in enumerate(pyramid.levels):
        ns = approx_neighbors(lv.index, q, cfg)
        num = np.zeros(params.hidden)
        den = 0.0
        for i in ns.indices:
            p = lv.cloud.positions[i]
            dist = np.sqrt(np.sum((p - q) ** 2))
            w = 1.0 / max(dist, 1e-8)
            x = np.concatenate([(p - q) / lv.pool_size, lv.cloud.features[i]])
            num += w * _ref_encoder(params, s, x)
            den += w
        feat += num / (1e-8 + den)
    sdf = params.sdf_scale * np.tanh(_ref_head(params, "sdf", feat))
    return sdf, _ref_head(params, "mask", feat)


# aggregate_level

def test_single_neighbor_weight_cancels():
    c = feature_cloud(20)
    pyr = build_pyramid(c, S=1)
    lv = pyr.levels[0]
    enc = DecoderParams.init(1, 8, seed=1).encoder(0)
    q = np.array([0.05, 0.05, 0.05])
    ns = NeighborSet(np.array([3]), np.array([np.linalg.norm(c.positions[3] - q)]), 1)
    out, empty = aggregate_level(q, lv, ns, enc)
    x = np.concatenate([(c.positions[3] - q) / lv.pool_size, c.features[3]])
    expected = enc(x[None])[0]
    assert not empty
    assert np.allclose(out, expected, rtol=1e-6, atol=0)


def test_two_equidistant_neighbors_average():
    pts = np.array([[0.0, 0, 0], [0.02, 0, 0], [0.3, 0.3, 0.3]])
    c = PointCloud(pts, np.random.default_rng(0).normal(size=(3, 8)))
    lv = build_pyramid(c, S=1).levels[0]
    enc = DecoderParams.init(1, 8, seed=2).encoder(0)
    q = np.array([0.01, 0.0, 0.0])
    ns = NeighborSet(np.array([0, 1]), np.array([0.01, 0.01]), 2)
    out, _ = aggregate_level(q, lv, ns, enc)
    x = np.c_[(pts[:2] - q) / lv.pool_size, c.features[:2]]
    e = enc(x)
    assert np.allclose(out, e.mean(axis=0), rtol=1e-6)


def test_coincident_neighbor_dominates():
    c = feature_cloud(30, 1)
    lv = build_pyramid(c, S=1).levels[0]
    enc = DecoderParams.init(1, 8, seed=3).encoder(0)
    q = c.positions[5].copy()
    ns = approx_neighbors(lv.index, q, INF)
    assert 5 in ns.index_set() and len(ns) > 1
    out, _ = aggregate_level(q, lv, ns, enc)
    ref = enc(np.concatenate([np.zeros(3), c.features[5]])[None])[0]
    assert np.allclose(out, ref, rtol=1e-6, atol=1e-6 * np.abs(ref).max())


def test_empty_neighborhood_flag():
    c = feature_cloud(10)
    lv = build_pyramid(c, S=1).levels[0]
    enc = DecoderParams.init(1, 8, hidden=16).encoder(0)
    out, empty = aggregate_level([0, 0, 0], lv, NeighborSet(np.array([], dtype=int), np.zeros(0), 8), enc)
    assert empty and out.shape == (16,) and not out.any()


@given(st.integers(0, 10_000))
def test_aggregate_in_scaled_hull(seed):
    rng = np.random.default_rng(seed)
    c = feature_cloud(60, seed)
    lv = build_pyramid(c, S=1).levels[0]
    enc = DecoderParams.init(1, 8, hidden=6, seed=seed).encoder(0)
    q = c.positions[rng.integers(60)] + rng.normal(0, 0.003, size=3)
    ns = approx_neighbors(lv.index, q, INF)
    out, _ = aggregate_level(q, lv, ns, enc)
    e = enc(np.c_[(c.positions[ns.indices] - q) / lv.pool_size, c.features[ns.indices]])
    w = 1.0 / np.maximum(ns.distances, 1e-8)
    total = w.sum() / (1e-8 + w.sum())
    if ns.distances.min() < 0.01:
        assert 1 - 1e-6 < total <= 1
    # per channel the result is a weight-scaled point inside [min, max] of the encodings
    assert np.all(out <= total * e.max(axis=0) + 1e-12)
    assert np.all(out >= total * e.min(axis=0) - 1e-12)


# evaluate_field

def test_single_level_fuses_to_aggregate():
    c = feature_cloud(40, 4)
    pyr = build_pyramid(c, S=1)
    params = DecoderParams.init(1, 8, hidden=8, seed=4)
    q = np.array([0.05, 0.04, 0.06])
    agg, _ = aggregate_level(q, pyr.levels[0], approx_neighbors(pyr.levels[0].index, q, INF), params.encoder(0))
    sdf, logit = evaluate_field(q, pyr, params, INF)
    assert sdf == pytest.approx(params.sdf_scale * np.tanh(_ref_head(params, "sdf", agg)), rel=1e-12)
    assert logit == pytest.approx(_ref_head(params, "mask", agg), rel=1e-12)


def test_far_query_no_support():
    c = feature_cloud(40)
    pyr = build_pyramid(c, S=2)
    params = DecoderParams.init(2, 8, hidden=4)
    with pytest.raises(NoSupport):
        evaluate_field([5.0, 5.0, 5.0], pyr, params, NeighborQueryConfig(k=4, r_max=0.1))
    sdf, _, ok = evaluate_field_batch(np.array([[5.0, 5, 5], [0.05, 0.05, 0.05]]), pyr, params, NeighborQueryConfig(k=4, r_max=0.1))
    assert np.isnan(sdf[0]) and not ok[0] and ok[1]


def test_matches_reference_reimplementation():
    rng = np.random.default_rng(5)
    c = PointCloud(rng.uniform(0, 0.05, size=(5, 3)), rng.normal(size=(5, 8)))
    pyr = build_pyramid(c, S=3, base_pool=0.02)
    params = DecoderParams.init(3, 8, hidden=32, seed=5, out_gain=1.0)
    cfg = NeighborQueryConfig(k=3, r_max=np.inf)
    for q in rng.uniform(-0.01, 0.06, size=(4, 3)):
        sdf, logit = evaluate_field(q, pyr, params, cfg)
        ref_sdf, ref_logit = reference_field(q, pyr, params, cfg)
        assert sdf == pytest.approx(ref_sdf, rel=1e-10, abs=1e-14)
        assert logit == pytest.approx(ref_logit, rel=1e-10, abs=1e-14)


def test_batch_size_changes_values_only_by_rounding():
    c = feature_cloud(300, 6)
    pyr = build_pyramid(c, S=2)
    params = DecoderParams.init(2, 8, hidden=8, seed=6)
    q = np.random.default_rng(6).uniform(0, 0.1, size=(50, 3))
    a = evaluate_field_batch(q, pyr, params, batch=7)
    b = evaluate_field_batch(q, pyr, params, batch=1000)
    assert np.allclose(a[0], b[0], rtol=1e-12, atol=1e-15)
    assert np.allclose(a[1], b[1], rtol=1e-12, atol=1e-15)
    assert np.array_equal(a[2], b[2])


def test_layer_count_mismatch():
    c = feature_cloud(30)
    with pytest.raises(ValueError):
        evaluate_field_batch(c.positions[:2], build_pyramid(c, S=2), DecoderParams.init(3, 8, hidden=4))


# decoder params

def test_layout_and_parameter_count():
    p = DecoderParams.init(4, 8, hidden=32)
    assert p.n_params == sum(int(np.prod(s)) for _, s in layout(4, 8, 32))
    assert p.arrays["enc0.w1"].shape == (11, 32)
    assert p.arrays["sdf.w2"].shape == (32, 1)


def test_binary_roundtrip_bit_exact(tmp_path):
    p = DecoderParams.init(3, 8, hidden=5, seed=9)
    path = tmp_path / "w.nksf"
    p.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"NKSF"
    assert struct.unpack_from("<IIII", raw, 4) == (1, 3, 8, 5)
    q = DecoderParams.load(path)
    assert q.flat().tobytes() == p.flat().tobytes()
    assert q.sdf_scale == p.sdf_scale and (q.S, q.D, q.hidden) == (3, 8, 5)
    assert q.to_bytes() == raw


def test_binary_errors():
    raw = DecoderParams.init(1, 2, hidden=2).to_bytes()
    with pytest.raises(UnsupportedFormat):
        DecoderParams.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ParseError):
        DecoderParams.from_bytes(raw[:-8])
    with pytest.raises(ParseError):
        DecoderParams.from_bytes(raw + b"\0" * 8)
    with pytest.raises(ParseError):
        DecoderParams.from_bytes(raw[:10])


def test_text_export():
    import json

    p = DecoderParams.init(1, 2, hidden=3, seed=1)
    doc = json.loads(p.to_text())
    assert doc["format"] == "NKSF" and doc["hidden"] == 3
    assert doc["arrays"]["enc0.w1"]["values"] == p.arrays["enc0.w1"].ravel().tolist()


# IMLS

def test_imls_single_point_plane_distance():
    c = PointCloud(np.array([[0.1, 0.2, 0.3]]), normals=np.array([[0.0, 0.6, 0.8]]))
    q = c.positions[0] + 0.07 * c.normals[0]
    ns = NeighborSet(np.array([0]), np.array([0.07]), 1)
    assert imls_distance(q, c, ns) == pytest.approx(0.07, rel=1e-7)


def test_imls_two_parallel_planes():
    pts = np.array([[0.0, 0, 0], [0.0, 0, 1.0]])
    c = PointCloud(pts, normals=np.array([[0.0, 0, 1], [0.0, 0, 1]]))
    ns = NeighborSet(np.array([0, 1]), np.array([0.5, 0.5]), 2)
    # distances +0.5 and -0.5 average to the midplane value
    assert imls_distance([0, 0, 0.5], c, ns) == pytest.approx(0.0, abs=1e-12)
    assert imls_distance([0, 0, 0.5], c, NeighborSet(np.array([0]), np.array([0.5]), 1)) == pytest.approx(0.5)


def test_imls_errors():
    c = PointCloud(np.zeros((1, 3)), normals=np.array([[0.0, 0, 1]]))
    with pytest.raises(NoSupport):
        imls_distance([0, 0, 0], c, NeighborSet(np.array([], dtype=int), np.zeros(0), 1))
    with pytest.raises(ValueError):
        imls_distance([0, 0, 0], PointCloud(np.zeros((1, 3))), NeighborSet(np.array([0]), np.zeros(1), 1))


def test_imls_sphere_accuracy():
    cloud, _ = generate_scene(sphere_scene(10_000, 1.0, 0.0, seed=2))
    rng = np.random.default_rng(3)
    dirs = sphere_points(2000, 1.0, rng)
    q = dirs * rng.uniform(0.9, 1.1, size=(2000, 1))
    gt = sphere_sdf(q)
    # the distance itself, on the 8 nearest samples
    exact = ImlsField(cloud, build_index(cloud.positions), NeighborQueryConfig(k=8), neighbors="exact")
    assert np.abs(exact(q) - gt).max() < 0.01
    # the serialized neighborhoods with the default cutoff, where supported
    approx = ImlsField(cloud, build_index(cloud.positions, pool_size=0.01), NeighborQueryConfig(k=8))
    val = approx(q)
    ok = np.isfinite(val)
    assert ok[np.abs(gt) < 0.02].mean() > 0.99
    assert np.abs(val[ok] - gt[ok]).max() < 0.01


@given(st.integers(0, 10_000))
def test_imls_plane_exact(seed):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    u = np.cross(n, [1.0, 0, 0] if abs(n[0]) < 0.9 else [0, 1.0, 0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    ab = rng.uniform(-0.2, 0.2, size=(200, 2))
    pts = ab[:, :1] * u + ab[:, 1:] * v
    c = PointCloud(pts, normals=np.tile(n, (200, 1)))
    q = rng.uniform(-0.1, 0.1, size=(20, 3))
    index = build_index(pts, pool_size=0.01)
    cfg = NeighborQueryConfig(k=8)
    val = ImlsField(c, index, cfg)(q)
    ok = np.isfinite(val)
    _, dist = approx_neighbors_batch(index, q, cfg)
    wsum = np.where(np.isfinite(dist), 1.0 / np.maximum(dist, 1e-8), 0.0).sum(axis=1)
    d = q @ n
    # exact up to the eps in the normalizer, which shrinks values by eps / sum(w)
    assert np.allclose(val[ok], (d * wsum / (1e-8 + wsum))[ok], rtol=0, atol=1e-12)
    assert np.allclose(val[ok], d[ok], rtol=0, atol=1e-9)


def test_translation_equivariance():
    rng = np.random.default_rng(11)
    pts = sphere_points(800, 0.3, rng)
    t = np.array([1.25, -0.5, 3.0])
    a = estimate_local_geometry(PointCloud(pts), k=12)
    b = estimate_local_geometry(PointCloud(pts + t), k=12)
    ia, ib = build_index(a.positions, pool_size=0.02), build_index(b.positions, pool_size=0.02)
    enc = DecoderParams.init(1, 8, hidden=8, seed=11).encoder(0)
    la = build_pyramid(a, S=1, base_pool=0.04).levels[0]
    lb = build_pyramid(b, S=1, base_pool=0.04).levels[0]
    for q in pts[:40] + rng.normal(0, 0.01, size=(40, 3)):
        na, nb = approx_neighbors(ia, q, INF), approx_neighbors(ib, q + t, INF)
        assert na.indices.tolist() == nb.indices.tolist()
        assert imls_distance(q, a, na) == pytest.approx(imls_distance(q + t, b, nb), abs=1e-9)
        fa, _ = aggregate_level(q, la, na, enc)
        fb, _ = aggregate_level(q + t, lb, nb, enc)
        assert np.allclose(fa, fb, rtol=0, atol=1e-9)


def test_imls_exact_mode_matches_brute_force():
    cloud, _ = generate_scene(sphere_scene(2000, 0.5, 0.0, seed=4))
    field = ImlsField(cloud, build_index(cloud.positions), NeighborQueryConfig(k=8), neighbors="exact")
    q = np.array([0.1, 0.2, 0.6])
    assert field(q[None])[0] == pytest.approx(imls_distance(q, cloud, exact_knn(cloud.positions, q, 8)), rel=1e-12)


# gradients

def test_gradient_of_linear_field_exact():
    g = field_gradient(lambda p: p[:, 0], np.array([0.3, -0.2, 0.7]))
    assert g.tolist() == pytest.approx([1.0, 0.0, 0.0], abs=1e-12)


def test_gradient_of_sphere():
    g = field_gradient(sphere_sdf, np.array([2.0, 0, 0]), h=1e-3)
    assert np.allclose(g, [1, 0, 0], atol=1e-6)


def test_gradient_convergence_order():
    f = lambda p: p[:, 0] ** 3 + 2 * p[:, 1] ** 3 - p[:, 2] ** 3 + p[:, 0] * p[:, 1] * p[:, 2]
    q = np.array([0.7, -0.4, 0.5])
    exact = np.array([3 * 0.49 + (-0.4 * 0.5), 6 * 0.16 + 0.7 * 0.5, -3 * 0.25 + 0.7 * -0.4])
    e1 = np.abs(field_gradient(f, q, 1e-2) - exact).max()
    e2 = np.abs(field_gradient(f, q, 5e-3) - exact).max()
    assert e1 / e2 == pytest.approx(4.0, rel=0.05)


def test_laplacian_of_sphere():
    q = np.array([[0.0, 0.0, 0.8], [1.5, 0.0, 0.0]])
    assert np.allclose(field_laplacian(sphere_sdf, q), 2 / np.linalg.norm(q, axis=1), rtol=1e-4)


def test_gradient_rejects_bad_step():
    with pytest.raises(ValueError):
        field_gradient(sphere_sdf, np.zeros(3), h=0.0)


def test_gradient_propagates_nan():
    g = field_gradient(lambda p: np.where(p[:, 0] > 0, p[:, 0], np.nan), np.array([0.0, 0, 0]))
    assert np.isnan(g[0])


# losses

def _samples(q, gt, band=0.015):
    return QuerySamples(q, gt, np.abs(gt) < band)


def test_perfect_sdf_zero_loss():
    rng = np.random.default_rng(0)
    q = rng.uniform(-2, 2, size=(500, 3))
    q = q[np.linalg.norm(q, axis=1) > 0.3]
    out = compute_losses(_samples(q, sphere_sdf(q)), sphere_sdf)
    assert out.l_sdf == pytest.approx(0.0, abs=1e-15)
    assert out.l_eikonal < 1e-4
    assert out.l_mask == 0.0


def test_total_combines_with_weights():
    out = LossBreakdown.combine(0.1, 0.2, 0.3, 0.0, TrainConfig())
    assert out.total == pytest.approx(77.0)
    out = LossBreakdown.combine(0.1, 0.2, 0.3, 5.0, TrainConfig(lambda_laplacian=1e-3))
    assert out.total == pytest.approx(77.005)


def test_mask_consistency():
    rng = np.random.default_rng(1)
    q = rng.uniform(-1.5, 1.5, size=(400, 3))
    gt = sphere_sdf(q)
    s = _samples(q, gt)
    z = np.where(s.mask_label, 1e3, -1e3)
    perfect = lambda p: (sphere_sdf(p), np.repeat(z, 7))
    flipped = lambda p: (sphere_sdf(p), -np.repeat(z, 7))
    assert compute_losses(s, perfect).l_mask == pytest.approx(0.0, abs=1e-12)
    assert compute_losses(s, flipped).l_mask > 1.0


def test_unsupported_samples_skipped():
    q = np.array([[0.5, 0, 0], [2.0, 0, 0], [-2.0, 0, 0]])
    f = lambda p: np.where(p[:, 0] > 0, sphere_sdf(p), np.nan)
    out = compute_losses(_samples(q, sphere_sdf(q)), f)
    assert (out.n_used, out.n_skipped) == (2, 1)
    with pytest.raises(AllUnsupported):
        compute_losses(_samples(q, sphere_sdf(q)), lambda p: np.full(len(p), np.nan))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_sdf=-1)
    with pytest.raises(ValueError):
        TrainConfig(fd_step=0)


# query sampling

def test_query_counts_and_labels():
    oracle = SceneOracle((Sphere((0, 0, 0), 0.5),))
    s = sample_training_queries(oracle, 1000, 1000, TrainConfig(), seed=3)
    assert len(s) == 2000
    assert np.array_equal(s.gt_sdf, oracle.sdf(s.positions))
    assert np.array_equal(s.mask_label, np.abs(s.gt_sdf) < 0.015)
    near = s.source == 0
    assert np.mean(np.abs(s.gt_sdf[near]) > 4 * 0.015) < 1e-4


def test_far_label_outside_band():
    oracle = SceneOracle((Sphere((0, 0, 0), 0.5),))
    q = np.array([[0.52, 0.0, 0.0]])
    gt = oracle.sdf(q)
    assert gt[0] == pytest.approx(0.02)
    assert not (np.abs(gt) < TrainConfig().mask_band)[0]


# training

def _scene(seed=0, n=3000, radius=0.3):
    cloud, oracle = generate_scene(SceneSpec((Sphere((0, 0, 0), radius),), count=n, seed=seed))
    cloud = estimate_local_geometry(PointCloud(cloud.positions), k=12)
    pyr = build_pyramid(cloud, 3, 0.02, CurveParams.for_points(cloud.positions))
    return pyr, oracle


def test_zero_steps_identity():
    pyr, oracle = _scene()
    init = DecoderParams.init(3, 8, hidden=8, seed=1)
    samples = sample_training_queries(oracle, 50, 20, seed=1)
    params, trace = train_decoder([TrainingScene(pyr, samples)], init, TrainConfig(steps=0))
    assert params.flat().tobytes() == init.flat().tobytes()
    assert len(trace) == 0


def test_training_reduces_loss():
    pyr, oracle = _scene(seed=2)
    cfg = TrainConfig(steps=100, batch_size=64)
    scene = TrainingScene(pyr, sample_training_queries(oracle, 400, 100, cfg, seed=2))
    init = DecoderParams.init(3, 8, hidden=16, seed=2)
    before = evaluate_loss(init, [scene], cfg)
    params, trace = train_decoder([scene], init, cfg)
    after = evaluate_loss(params, [scene], cfg)
    assert len(trace) == 100
    assert after.total < before.total


def test_non_finite_loss_aborts():
    pyr, oracle = _scene(seed=3, n=1000)
    init = DecoderParams.init(3, 8, hidden=4, seed=3)
    init.arrays["sdf.b2"][:] = np.nan
    samples = sample_training_queries(oracle, 30, 10, seed=3)
    with pytest.raises((NonFiniteLoss, AllUnsupported)):
        train_decoder([TrainingScene(pyr, samples)], init, TrainConfig(steps=3, batch_size=16))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_reports_step():
    pyr, oracle = _scene(seed=3, n=1000)
    init = DecoderParams.init(3, 8, hidden=4, seed=3)
    init.arrays["mask.w2"][:] = 1e308
    samples = sample_training_queries(oracle, 30, 10, seed=3)
    with pytest.raises(NonFiniteLoss) as info:
        train_decoder([TrainingScene(pyr, samples)], init, TrainConfig(steps=3, batch_size=16))
    assert info.value.step == 0


def test_train_requires_scenes():
    with pytest.raises(ValueError):
        train_decoder([], DecoderParams.init(1, 8, hidden=2))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_check(seed):
    err, n = gradient_check(seed)
    assert n > 100
    assert err < 1e-4
