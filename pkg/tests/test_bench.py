import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_box
from pseudolabel3d.bench import (GROUND, CorruptionSpec, SceneSpec, average_precision_11, corrupt_labels,
                                 evaluate, generate_drive, generate_scene)
from pseudolabel3d.geometry import Box3D, BoxClass, points_in_box


class TestGenerator:
    def test_no_objects(self):
        spec = SceneSpec(objects=(), seed=1)
        seq, truth = generate_scene(spec)
        assert truth == []
        d = generate_drive(spec)
        assert all((inst == GROUND).all() for inst in d.instance)

    def test_deterministic_bytes(self):
        spec = SceneSpec(seed=5)
        a, b = generate_drive(spec), generate_drive(spec)
        for x, y in zip(a.sweeps, b.sweeps):
            assert x.xyz.tobytes() == y.xyz.tobytes() and x.intensity.tobytes() == y.intensity.tobytes()

    def test_points_per_box_follow_density(self):
        spec = SceneSpec(objects=(("VEHICLE", 4), ("PEDESTRIAN", 3), ("CYCLIST", 3)), seed=3)
        seq, truth = generate_scene(spec)
        center = seq.sweeps[seq.center]
        assert len(truth) == 10
        for b in truth:
            r = max(math.hypot(b.x, b.y), 10.0)
            expected = spec.surface_density * 10.0 / r * 2 * (b.l * b.w + b.l * b.h + b.w * b.h)
            grown = b.replace(l=b.l + 0.1, w=b.w + 0.1, h=b.h + 0.1)
            assert len(points_in_box(center, grown)) >= 0.5 * expected

    def test_truth_classes(self, small_drive):
        truth = small_drive.truth(small_drive.frames[0])
        assert {b.cls for b in truth} <= {BoxClass.VEHICLE, BoxClass.PEDESTRIAN, BoxClass.CYCLIST}


class TestCorruption:
    def truth(self):
        rng = np.random.default_rng(0)
        return [random_box(rng, 30, cls=BoxClass(i % 3)) for i in range(40)]

    def test_identity(self):
        t = self.truth()
        out, log = corrupt_labels(t, CorruptionSpec(), seed=3)
        assert out == t and all(e["ops"] == [] for e in log)

    def test_fp_count(self):
        t = self.truth()
        out, log = corrupt_labels(t, CorruptionSpec(fp_rate=0.3), seed=3)
        n_fp = sum(e["source"] is None for e in log)
        assert len(out) == len(t) + n_fp
        # binomial(40, 0.3): mean 12, sd 2.9
        assert abs(n_fp - 12) <= 4 * math.sqrt(40 * 0.3 * 0.7)
        assert out[:len(t)] == t

    def test_drop_all(self):
        assert corrupt_labels(self.truth(), CorruptionSpec(drop_rate=1.0), seed=0)[0] == []

    def test_yaw_flip_and_size(self):
        t = self.truth()
        out, log = corrupt_labels(t, CorruptionSpec(size_sigma=0.1, yaw_flip_prob=1.0), seed=1)
        for a, b, e in zip(t, out, log):
            assert e["ops"] == ["size", "yaw_flip"]
            assert abs(math.remainder(b.yaw - a.yaw - math.pi, 2 * math.pi)) <= 1e-9

    @pytest.mark.parametrize("kw", [dict(fp_rate=1.5), dict(size_sigma=-1), dict(class_confusion=((1, 0),))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            CorruptionSpec(**kw)


class TestEvaluate:
    def test_identity(self):
        rng = np.random.default_rng(4)
        t = {0: [random_box(rng, 20, cls=BoxClass(i % 3)) for i in range(5)]}
        rep = evaluate(t, t)
        for k in rep.overall.values():
            assert k["precision"] == k["recall"] == 1.0 and k["ap"] == 1.0
        assert sum(rep.iou_histogram) == rep.matched_pairs == 5

    def test_empty_pred(self):
        t = {0: [Box3D(0, 0, 0, 4, 2, 1.5, cls="VEHICLE")]}
        rep = evaluate({0: []}, t)
        assert rep.precision(0.5) == 0.0 and rep.recall(0.5) == 0.0 and rep.precision_undefined

    def test_hand_case(self):
        v = dict(cls="VEHICLE")
        truth = [Box3D(0, 0, 0, 4, 2, 2, **v), Box3D(20, 0, 0, 4, 2, 2, **v), Box3D(40, 0, 0, 4, 2, 2, **v)]
        pred = [Box3D(0, 0, 0, 4, 2, 2, score=0.9, **v),      # IoU 1
                Box3D(20.8, 0, 0, 4, 2, 2, score=0.8, **v),   # IoU 3.2/4.8 = 2/3
                Box3D(41.6, 0, 0, 4, 2, 2, score=0.7, **v),   # IoU 2.4/5.6 = 3/7
                Box3D(60, 0, 0, 4, 2, 2, score=0.6, **v)]     # unmatched
        rep = evaluate({0: pred}, {0: truth})
        assert rep.precision(0.5) == 2 / 4 and rep.recall(0.5) == 2 / 3
        assert rep.precision(0.7) == 1 / 4 and rep.recall(0.7) == 1 / 3
        # ranked hits at 0.5: T T F F; precision 1 at recall levels 0..0.6, none reach 0.7
        assert rep.overall["0.50"]["ap"] == pytest.approx(7 / 11, abs=1e-12)

    def test_ranges_and_histogram(self):
        t = [Box3D(10, 0, 0, 4, 2, 2, cls="VEHICLE"), Box3D(40, 0, 0, 4, 2, 2, cls="VEHICLE")]
        rep = evaluate({0: t}, {0: t})
        assert rep.per_range["[0,30)"]["map@0.50"] == 1.0 and rep.per_range["[30,50)"]["map@0.50"] == 1.0
        assert rep.per_range["[50,inf)"]["map@0.50"] == 0.0
        assert rep.iou_histogram[-1] == 2

    @given(st.integers(0, 1000))
    def test_threshold_monotone(self, seed):
        rng = np.random.default_rng(seed)
        truth = {0: [random_box(rng, 6, cls=BoxClass(i % 3)) for i in range(6)]}
        pred = {0: [b.replace(x=b.x + rng.normal(0, 0.5), l=b.l * rng.uniform(0.7, 1.3)) for b in truth[0]]
                + [random_box(rng, 6, cls=BoxClass.VEHICLE)]}
        rep = evaluate(pred, truth, (0.1, 0.3, 0.5, 0.7, 0.9))
        ps = [rep.overall[k]["precision"] for k in sorted(rep.overall)]
        rs = [rep.overall[k]["recall"] for k in sorted(rep.overall)]
        assert ps == sorted(ps, reverse=True) and rs == sorted(rs, reverse=True)
        assert all(0 <= x <= 1 for x in ps + rs)

    def test_ap_no_truth(self):
        assert average_precision_11([0.5], [False], 0) == 0.0


def test_class_agnostic_matching():
    truth = {0: [Box3D(5, 0, 0, 4, 2, 1.5, cls="VEHICLE"), Box3D(-5, 3, 0, 0.8, 0.8, 1.7, cls="PEDESTRIAN")]}
    pred = {0: [b.replace(cls=BoxClass.UNKNOWN, score=0.9) for b in truth[0]]}
    aware = evaluate(pred, truth)
    blind = evaluate(pred, truth, class_aware=False)
    assert aware.precision(0.5) == 0.0 and aware.matched_pairs == 0
    assert blind.precision(0.5) == blind.recall(0.5) == 1.0 and blind.matched_pairs == 2
    assert blind.to_dict()["class_aware"] is False
