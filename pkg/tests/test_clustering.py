import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pseudolabel3d.aggregation import build_dense_scene
from pseudolabel3d.bench import SceneSpec, generate_drive
from pseudolabel3d.clustering import (ClusteringParams, CollinearFootprintWarning, DynamicRadiusDBSCAN,
                                      InitialLabeler, cluster, density_at, densities, dynamic_radius,
                                      fit_box, initial_labels)
from pseudolabel3d.geometry import BoxClass, PointCloud, iou_3d


def naive_dbscan(X, eps, min_points):
    """Textbook sequential DBSCAN with an O(n^2) distance matrix."""
    n = len(X)
    d = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    nbrs = [np.flatnonzero(d[i] <= eps) for i in range(n)]
    labels = np.full(n, -1)
    c = 0
    for i in range(n):
        if labels[i] != -1 or len(nbrs[i]) < min_points:
            continue
        labels[i] = c
        queue = list(nbrs[i])
        while queue:
            j = queue.pop(0)
            if labels[j] == -1:
                labels[j] = c
                if len(nbrs[j]) >= min_points:
                    queue.extend(nbrs[j])
        c += 1
    return labels


class TestDensity:
    def test_isolated_and_anchor(self):
        pts = np.vstack([[[100, 0, 0]], np.zeros((1, 3)), np.full((10, 3), 0.01)])
        assert density_at(pts, 0, 0.3) == 0.0
        assert density_at(pts, 1, 0.3, reference_count=10) == 1.0

    def test_bruteforce(self, rng):
        pts = rng.uniform(0, 3, (300, 3))
        d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        expect = ((d <= 0.3).sum(1) - 1) / 7.0
        np.testing.assert_array_equal(densities(pts, 0.3, 7.0), expect)
        assert all(density_at(pts, i, 0.3, 7.0) == expect[i] for i in range(0, 300, 17))


class TestRadius:
    def test_value(self):
        assert abs(dynamic_radius(ClusteringParams(1.0, 1.0, 0.5), 1.0) - 0.5 * (1 + math.exp(-1))) <= 1e-12
        assert abs(dynamic_radius(ClusteringParams(1.0, 1.0, 0.5), 1.0) - 0.68394) <= 1e-5

    @given(st.floats(0, 100))
    def test_beta_zero_constant(self, rho):
        assert dynamic_radius(ClusteringParams(1.3, 0.0, 0.5), rho) == pytest.approx(0.65, abs=1e-12)

    def test_limit(self):
        p = ClusteringParams(1.2, 0.8, 0.5)
        assert abs(dynamic_radius(p, 50.0) - 0.6) <= 1e-9

    @given(st.floats(0.1, 3), st.floats(0.01, 3), st.floats(0.1, 2), st.floats(0, 20), st.floats(0.01, 20))
    def test_strictly_decreasing(self, a, b, r0, rho, step):
        p = ClusteringParams(a, b, r0)
        assert dynamic_radius(p, rho + step) < dynamic_radius(p, rho)

    @pytest.mark.parametrize("kw", [dict(alpha=0), dict(beta=-1), dict(r0=0), dict(min_points=0)])
    def test_params_validated(self, kw):
        with pytest.raises(ValueError):
            ClusteringParams(**kw)


class TestCluster:
    def test_matches_fixed_radius_dbscan(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(1, 201))
            X = rng.uniform(0, 4, (n, 3)) * [1, 1, 0.3]
            est = DynamicRadiusDBSCAN(alpha=1.0, beta=0.0, r0=0.4, min_points=4).fit(X)
            np.testing.assert_array_equal(est.labels_, naive_dbscan(X, 0.4, 4))

    def test_two_blobs(self, rng):
        X = np.vstack([rng.normal(0, 0.1, (50, 3)), rng.normal(10, 0.1, (50, 3))])
        assert len(cluster(X, ClusteringParams())) == 2

    def test_sparse_blob_needs_dynamic_radius(self):
        g = np.stack(np.meshgrid(np.arange(5) * 0.8, np.arange(5) * 0.8, [0.0]), -1).reshape(-1, 3) + [40, 0, 0]
        dyn = DynamicRadiusDBSCAN(1.0, 0.6, 0.6, 5).fit(g)
        fixed = DynamicRadiusDBSCAN(1.0, 0.0, 0.6, 5).fit(g)
        assert set(dyn.labels_) == {0} or set(dyn.labels_) == {0, -1}
        assert (dyn.labels_ == 0).sum() >= 21
        np.testing.assert_array_equal(fixed.labels_, naive_dbscan(g, 0.6, 5))
        assert (fixed.labels_ == -1).all()

    @given(st.integers(0, 10_000))
    def test_partition(self, seed):
        X = np.random.default_rng(seed).uniform(0, 3, (80, 3))
        cs = cluster(X, ClusteringParams(min_points=3))
        members = np.concatenate([c.members for c in cs]) if cs else np.zeros(0, int)
        assert len(members) == len(set(members.tolist()))

    def test_estimator_api(self):
        est = DynamicRadiusDBSCAN(beta=0.2)
        assert est.get_params()["beta"] == 0.2
        with pytest.raises(ValueError):
            est.fit(np.zeros((3, 2)))


def rectangle(l, w, yaw, n=40, c=(1.0, -2.0)):
    t = np.linspace(0, 1, n, endpoint=False)
    edges = [np.column_stack([t * l - l / 2, np.full(n, -w / 2)]), np.column_stack([t * l - l / 2, np.full(n, w / 2)]),
             np.column_stack([np.full(n, -l / 2), t * w - w / 2]), np.column_stack([np.full(n, l / 2), t * w - w / 2])]
    xy = np.vstack(edges + [np.array([[l / 2, w / 2]])])
    r = np.array([[math.cos(yaw), -math.sin(yaw)], [math.sin(yaw), math.cos(yaw)]])
    xy = xy @ r.T + c
    z = np.tile([0.0, 1.5], len(xy) // 2 + 1)[:len(xy)]
    return np.column_stack([xy, z])


class TestFitBox:
    def test_axis_aligned(self):
        b = fit_box(rectangle(4, 2, 0.0), np.arange(161))
        assert (b.l, b.w) == pytest.approx((4, 2), abs=1e-9)
        assert min(abs(b.yaw), abs(abs(b.yaw) - math.pi / 2)) <= 1e-9
        assert b.h == pytest.approx(1.5) and b.cls is BoxClass.UNKNOWN

    def test_rotated_30(self):
        b = fit_box(rectangle(4, 2, math.radians(30)), np.arange(161))
        assert abs(b.yaw - math.radians(30)) <= 1e-6
        assert (b.x, b.y) == pytest.approx((1.0, -2.0), abs=1e-9)

    def test_min_over_orientation_sweep(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            xy = rng.normal(0, 1, (40, 2)) * rng.uniform(0.3, 3, 2)
            X = np.column_stack([xy, np.zeros(40)])
            b = fit_box(X, np.arange(40))
            for th in np.radians(np.arange(360)):
                u = xy @ [math.cos(th), math.sin(th)]
                v = xy @ [-math.sin(th), math.cos(th)]
                assert b.l * b.w <= np.ptp(u) * np.ptp(v) + 1e-9
            assert b.l >= b.w and -math.pi / 2 <= b.yaw < math.pi / 2

    def test_collinear_fallback(self):
        X = np.column_stack([np.linspace(0, 3, 10), np.zeros(10), np.zeros(10)])
        with pytest.warns(CollinearFootprintWarning):
            b = fit_box(X, np.arange(10))
        assert b.l == pytest.approx(3.0) and b.yaw == 0.0


class TestInitialLabels:
    def test_empty(self):
        assert initial_labels(PointCloud(np.zeros((0, 3)))) == []

    def test_duplicated_points_collapse(self):
        X = rectangle(4, 2, 0.3, n=30)
        twice = np.vstack([X, X + 1e-4])
        assert len(initial_labels(PointCloud(twice))) == 1

    def test_clean_scene(self):
        spec = SceneSpec(objects=(("VEHICLE", 3), ("PEDESTRIAN", 1), ("CYCLIST", 1)), moving_fraction=0.0,
                         sensor_range=30.0, seed=11)
        drive = generate_drive(spec)
        f = drive.frames[0]
        scene = build_dense_scene(drive.sequence(f)).scene
        truth = drive.truth(f)
        pred = initial_labels(scene)
        assert len(truth) == 5 and len(pred) == 5
        for t in truth:
            assert max(iou_3d(t, p) for p in pred) >= 0.5

    def test_deterministic(self, small_drive):
        f = small_drive.frames[0]
        scene = build_dense_scene(small_drive.sequence(f)).scene
        assert InitialLabeler().predict(scene) == InitialLabeler().predict(scene)
