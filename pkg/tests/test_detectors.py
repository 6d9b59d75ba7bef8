import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import boxes, random_box
from pseudolabel3d.aggregation import build_dense_scene
from pseudolabel3d.detectors import (DEFAULT_TTA, IDENTITY, Augmentation, DetectorDivergenceError,
                                     PassThroughDetector, ToyGridDetector, augment, decode_residual,
                                     encode_residual, tta_infer)
from pseudolabel3d.geometry import Box3D, BoxClass, PointCloud, iou_3d, points_in_box

augs = st.builds(Augmentation, st.booleans(), st.floats(-math.pi / 4, math.pi / 4), st.floats(0.95, 1.05))


def close(a, b, tol=1e-9):
    return (np.allclose(a.center, b.center, atol=tol) and np.allclose(a.dims, b.dims, atol=tol)
            and abs(math.remainder(a.yaw - b.yaw, 2 * math.pi)) <= tol and a.cls == b.cls)


class TestAugmentation:
    @given(boxes, augs)
    def test_inverse(self, b, aug):
        assert close(aug.invert_box(aug.apply_box(b)), b, 1e-7)

    @given(augs)
    def test_points_follow_boxes(self, aug):
        rng = np.random.default_rng(0)
        b = Box3D(6, 2, 0, 4, 2, 1.5, yaw=0.4)
        pts = rng.uniform(-1, 1, (500, 3)) * [3, 2, 1] + [6, 2, 0]
        inside = points_in_box(pts, b)
        moved = points_in_box(aug.apply_points(pts), aug.apply_box(b))
        # boundary points may flip by rounding
        assert len(set(inside) ^ set(moved)) <= 2

    def test_augment_keeps_base(self):
        c = PointCloud(np.ones((3, 3)), frame_id=4)
        a = augment(c, Augmentation(flip_y=True))
        assert a.base is c and a.frame_id == 4 and (a.xyz[:, 1] == -1).all()
        with pytest.raises(ValueError):
            augment(a, Augmentation(rotation=0.1))


def spread_labels(rng, n=6):
    return [random_box(rng, 2.0, cls=BoxClass(i % 3), score=0.9 - 0.1 * i).replace(x=8.0 * i, y=3.0)
            for i in range(n)]


class TestTTA:
    def test_identity_is_predict(self, rng):
        scene = PointCloud(np.zeros((0, 3)), frame_id=2)
        det = PassThroughDetector().fit([scene], [spread_labels(rng)])
        assert tta_infer(det, scene, (IDENTITY,)) == det.predict(scene)

    def test_passthrough_algebra(self, rng):
        scene = PointCloud(np.zeros((0, 3)), frame_id=0)
        labels = spread_labels(rng)
        det = PassThroughDetector().fit([scene], [labels])
        out = tta_infer(det, scene, DEFAULT_TTA, 0.1)
        assert out == sorted(labels, key=lambda b: -b.score)

    def test_flip_pair_symmetric(self):
        base = [Box3D(10, 4, 0, 4, 2, 1.5, yaw=0.3, score=0.8), Box3D(10, -4, 0, 4, 2, 1.5, yaw=-0.3, score=0.8)]
        scene = PointCloud(np.zeros((0, 3)))
        det = PassThroughDetector().fit([scene], [base])
        out = tta_infer(det, scene, (IDENTITY, Augmentation(flip_y=True)))
        flipped = [Augmentation(flip_y=True).apply_box(b) for b in out]
        assert all(any(close(f, o) for o in out) for f in flipped)


class TestResidual:
    @given(boxes, boxes)
    def test_roundtrip(self, p, t):
        r = encode_residual(p, t)
        if np.abs(r).max() >= 5:
            return
        back = decode_residual(p, r, cls=t.cls)
        np.testing.assert_allclose(back.center, t.center, atol=1e-6)
        assert iou_3d(back, t) == pytest.approx(1.0, abs=1e-6)

    def test_self_residual_zero(self):
        p = Box3D(1, 2, 3, 4, 2, 1.5, yaw=0.5)
        np.testing.assert_allclose(encode_residual(p, p), 0.0, atol=1e-15)

    def test_picks_nearest_yaw_form(self):
        p = Box3D(0, 0, 0, 4, 2, 1.5, yaw=0.0)
        t = Box3D(0, 0, 0, 2, 4, 1.5, yaw=math.pi / 2)
        np.testing.assert_allclose(encode_residual(p, t), 0.0, atol=1e-12)


@pytest.fixture(scope="module")
def drive_data(small_drive):
    frames = small_drive.frames
    scenes = [build_dense_scene(small_drive.sequence(f)).scene for f in frames]
    return scenes, [small_drive.truth(f) for f in frames]


class TestToyDetector:
    def test_fit_predict_deterministic(self, drive_data):
        scenes, truth = drive_data
        a = ToyGridDetector(epochs=100).fit(scenes, truth)
        b = ToyGridDetector(epochs=100).fit(scenes, truth)
        assert a.loss_trace_[-1] < a.loss_trace_[0]
        pa, pb = a.predict(scenes[0]), b.predict(scenes[0])
        assert pa == pb and len(pa) > 0
        assert all(0 <= x.score <= 1 for x in pa)

    def test_gradient_direction_invariant_to_omega_scale(self, drive_data):
        scenes, truth = drive_data
        det = ToyGridDetector(epochs=5).fit(scenes, truth)
        F, cls_t, reg_t, omega = det._samples(scenes, truth)
        F = det._standardize(F)
        params = (det.W_cls_, det.W_reg_)
        _, g1 = det.objective(params, F, cls_t, reg_t, omega)
        _, g2 = det.objective(params, F, cls_t, reg_t, 3.7 * omega)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a / np.linalg.norm(a), b / np.linalg.norm(b), atol=1e-9)

    def test_zero_weight_labels_do_not_train(self, drive_data):
        scenes, truth = drive_data
        zero = [[b.replace(weight=0.0) for b in lb] for lb in truth]
        det = ToyGridDetector(epochs=50, background_weight=0.0).fit(scenes, zero)
        assert not det.W_cls_.any() and not det.W_reg_.any()

    def test_divergence_raises(self, drive_data, monkeypatch):
        scenes, truth = drive_data
        det = ToyGridDetector(epochs=3)
        monkeypatch.setattr(det, "objective", lambda *a: (float("nan"), (0, 0)))
        with pytest.raises(DetectorDivergenceError):
            det.fit(scenes, truth)

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            ToyGridDetector().predict(PointCloud(np.zeros((1, 3))))

    def test_params(self):
        assert ToyGridDetector(epochs=9).get_params()["epochs"] == 9
