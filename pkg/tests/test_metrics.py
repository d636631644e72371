import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from serialsdf.curves import CurveKind
from serialsdf.errors import EmptySet
from serialsdf.metrics import chamfer_l1, fscore, precision_recall, recall_benchmark
from serialsdf.pyramid import PointCloud, build_pyramid
from serialsdf.spatial import NeighborQueryConfig, approx_neighbors, exact_knn


def brute_nearest(src, dst):
    out = []
    for a in src.tolist():
        best = math.inf
        for b in dst.tolist():
            dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
            best = min(best, math.sqrt(dx * dx + dy * dy + dz * dz))
        out.append(best)
    return out


def point_sets(seed, n=None, m=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 40))
    m = m or int(rng.integers(1, 40))
    return rng.normal(size=(n, 3)), rng.normal(size=(m, 3))


def test_worked_example():
    pred = [[0.0, 0, 0]]
    gt = [[1.0, 0, 0], [0, 2.0, 0]]
    rep = chamfer_l1(pred, gt)
    assert rep.accuracy == pytest.approx(1.0)
    assert rep.completeness == pytest.approx(1.5)
    assert rep.cd == pytest.approx(1.25)
    assert precision_recall(pred, gt, 1.0) == (1.0, 0.5)
    assert fscore(pred, gt, 1.0) == pytest.approx(2 / 3)


def test_brute_force_oracle():
    for seed in range(1000):
        a, b = point_sets(seed)
        rep = chamfer_l1(a, b)
        ab, ba = brute_nearest(a, b), brute_nearest(b, a)
        acc = math.fsum(ab) / len(ab)
        comp = math.fsum(ba) / len(ba)
        assert (rep.accuracy, rep.completeness, rep.cd) == (acc, comp, (acc + comp) / 2)
        delta = 0.5
        p = sum(d <= delta for d in ab) / len(ab)
        r = sum(d <= delta for d in ba) / len(ba)
        f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        assert fscore(a, b, delta) == f


def test_separated_sets_score_zero():
    a = np.zeros((5, 3))
    b = np.full((5, 3), 10.0)
    assert fscore(a, b, 0.01) == 0.0


def test_scaled_report_unit():
    rep = chamfer_l1([[0.0, 0, 0]], [[0.01, 0, 0]]).scaled()
    assert rep.cd == pytest.approx(1.0)


@given(st.integers(0, 10_000), st.floats(1e-3, 10))
def test_identity(seed, delta):
    a, _ = point_sets(seed)
    rep = chamfer_l1(a, a)
    assert (rep.cd, rep.completeness, rep.accuracy) == (0.0, 0.0, 0.0)
    assert fscore(a, a, delta) == 1.0


@given(st.integers(0, 10_000))
def test_swap_symmetry(seed):
    a, b = point_sets(seed)
    ab, ba = chamfer_l1(a, b), chamfer_l1(b, a)
    assert ab.accuracy == ba.completeness and ab.completeness == ba.accuracy
    assert ab.cd == pytest.approx(ba.cd, rel=1e-15)
    assert ab.cd == pytest.approx((ab.accuracy + ab.completeness) / 2)


@given(st.integers(0, 10_000), st.sampled_from([0.5, 2.0, 4.0, 0.25]), st.floats(0.05, 2.0))
def test_scale_covariance(seed, alpha, delta):
    a, b = point_sets(seed)
    r1, r2 = chamfer_l1(a, b), chamfer_l1(alpha * a, alpha * b)
    assert r2.cd == pytest.approx(alpha * r1.cd, rel=1e-12)
    assert r2.accuracy == pytest.approx(alpha * r1.accuracy, rel=1e-12)
    assert r2.completeness == pytest.approx(alpha * r1.completeness, rel=1e-12)
    # powers of two keep the scaled comparisons exact
    assert fscore(alpha * a, alpha * b, alpha * delta) == fscore(a, b, delta)


@given(st.integers(0, 10_000))
def test_fscore_monotone_in_delta(seed):
    a, b = point_sets(seed)
    scores = [fscore(a, b, d) for d in np.geomspace(1e-3, 10, 25)]
    assert all(x <= y for x, y in zip(scores, scores[1:]))


def test_empty_sets():
    with pytest.raises(EmptySet):
        chamfer_l1(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(EmptySet):
        fscore(np.zeros((2, 3)), np.zeros((0, 3)), 0.1)
    with pytest.raises(ValueError):
        fscore(np.zeros((2, 3)), np.zeros((2, 3)), 0.0)


# recall benchmark

def uniform_pyramid(n, seed=0, S=4):
    pts = np.random.default_rng(seed).uniform(0, 1, size=(n, 3))
    return build_pyramid(PointCloud(pts), S=S, base_pool=0.02)


def test_exhaustive_window_gives_full_recall():
    pyr = uniform_pyramid(400)
    q = np.random.default_rng(1).uniform(0, 1, size=(50, 3))
    table = recall_benchmark(pyr, q, cfg=NeighborQueryConfig(k=8, window=400, r_max=np.inf))
    assert np.all(table.values == 1.0)


def slow_recall(pyr, queries, kind, cfg):
    pyr = pyr.with_kind(kind)
    base = pyr.levels[0].cloud.positions
    out = np.zeros(pyr.S)
    for q in queries:
        truth = set(exact_knn(base, q, cfg.k).indices.tolist())
        recovered = set()
        for s, lv in enumerate(pyr.levels):
            hits = set(approx_neighbors(lv.index, q, cfg).indices.tolist())
            recovered |= {i for i in truth if int(lv.parent[i]) in hits}
            out[s] += len(recovered) / len(truth)
    return out / len(queries)


def test_recall_matches_slow_oracle():
    pyr = uniform_pyramid(50_000, seed=5)
    q = np.random.default_rng(6).uniform(0, 1, size=(150, 3))
    cfg = NeighborQueryConfig(k=8)
    table = recall_benchmark(pyr, q, cfg=cfg)
    for kind in CurveKind:
        assert np.allclose(table.column(kind), slow_recall(pyr, q, kind, cfg), rtol=0, atol=1e-12)


def test_recall_monotone_in_scales_and_window():
    pyr = uniform_pyramid(20_000, seed=2)
    q = np.random.default_rng(3).uniform(0, 1, size=(500, 3))
    last = None
    for w in (8, 16, 32, 64):
        table = recall_benchmark(pyr, q, cfg=NeighborQueryConfig(k=8, window=w))
        assert np.all(np.diff(table.values, axis=0) >= 0)
        assert np.all((table.values >= 0) & (table.values <= 1))
        if last is not None:
            assert np.all(table.values >= last - 1e-12)
        last = table.values
    rows = list(table.rows())
    assert len(rows) == 4 * 2 and rows[0][:2] == (0, "hilbert")


def test_recall_table_row_layout():
    pyr = uniform_pyramid(2000, S=3)
    table = recall_benchmark(pyr, np.random.default_rng(0).random((20, 3)), kinds=("morton",))
    assert table.values.shape == (3, 1)
    assert [r[0] for r in table.rows()] == [0, 1, 2]
    assert table.column("morton").tolist() == table.values[:, 0].tolist()
