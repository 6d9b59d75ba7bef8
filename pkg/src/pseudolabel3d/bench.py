"""Synthetic LiDAR drives with ground truth, label corruption, and detection metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .aggregation import SweepSequence, invert_pose
from .cues import DEFAULT_PROTOTYPES
from .geometry import KNOWN_CLASSES, Box3D, BoxClass, PointCloud, _in_box_mask, iou_3d

GROUND = -1
CLUTTER = -2

_INTENSITY = {BoxClass.VEHICLE: 0.55, BoxClass.PEDESTRIAN: 0.25, BoxClass.CYCLIST: 0.35}
_SPEEDS = {BoxClass.VEHICLE: (10.0, 14.0), BoxClass.PEDESTRIAN: (3.0, 4.0), BoxClass.CYCLIST: (5.0, 7.0)}
_LANES = (-6.0, -2.0, 2.0, 6.0)


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a synthetic drive.

    Moving objects travel along x in one of four lanes (|y| < 8 m); static
    objects stand outside the road band. Object surfaces are sampled at
    ``surface_density`` points/m^2 at 10 m, decaying as
    ``(10 / range) ** density_decay``.
    """

    objects: tuple[tuple[str, int], ...] = (("VEHICLE", 4), ("PEDESTRIAN", 2), ("CYCLIST", 2))
    moving_fraction: float = 0.4
    sensor_range: float = 50.0
    min_range: float = 6.0
    surface_density: float = 60.0
    density_decay: float = 1.0
    ground_points: int = 8000
    ground_z: float = -1.8
    ground_noise: float = 0.02
    point_noise: float = 0.01
    ego_speed: float = 5.0
    sweep_interval: float = 0.5
    n_context: int = 2
    n_frames: int = 1
    size_jitter: float = 0.05
    ground_clearance: float = 0.15
    clutter: int = 0
    min_truth_points: int = 5
    seed: int = 0

    def class_counts(self) -> dict[BoxClass, int]:
        return {BoxClass.parse(k): int(v) for k, v in self.objects}


@dataclass
class SyntheticObject:
    cls: BoxClass
    center0: np.ndarray
    dims: np.ndarray
    yaw: float
    velocity: np.ndarray
    intensity: float
    instance: int

    def box_at(self, t: float) -> Box3D:
        c = self.center0 + np.append(self.velocity * t, 0.0)
        return Box3D(c[0], c[1], c[2], *self.dims, yaw=self.yaw, cls=self.cls)

    @property
    def moving(self) -> bool:
        return bool(np.linalg.norm(self.velocity) > 0)


@dataclass
class SyntheticDrive:
    """Sweeps of one drive plus the bookkeeping needed to score pipeline stages."""

    spec: SceneSpec
    sweeps: list[PointCloud]
    poses: list[np.ndarray]
    instance: list[np.ndarray]
    moving: list[np.ndarray]
    objects: list[SyntheticObject]

    @property
    def frames(self) -> list[int]:
        n = self.spec.n_context
        return list(range(n, len(self.sweeps) - n))

    def sequence(self, frame: int) -> SweepSequence:
        n = self.spec.n_context
        return SweepSequence(self.sweeps[frame - n:frame + n + 1], self.poses[frame - n:frame + n + 1])

    def point_truth(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        """Instance ids and moving flags aligned with ``aggregate_sweeps(sequence(frame))``."""
        n = self.spec.n_context
        sl = slice(frame - n, frame + n + 1)
        return np.concatenate(self.instance[sl]), np.concatenate(self.moving[sl])

    def truth(self, frame: int) -> list[Box3D]:
        """Boxes in the frame's sensor coordinates for objects within range and visible."""
        t = frame * self.spec.sweep_interval
        to_sensor = invert_pose(self.poses[frame])
        dyaw = math.atan2(to_sensor[1, 0], to_sensor[0, 0])
        out = []
        counts = np.bincount(self.instance[frame][self.instance[frame] >= 0],
                             minlength=len(self.objects))
        for obj in self.objects:
            box = obj.box_at(t)
            c = to_sensor[:3, :3] @ box.center + to_sensor[:3, 3]
            if math.hypot(c[0], c[1]) > self.spec.sensor_range:
                continue
            if counts[obj.instance] < self.spec.min_truth_points:
                continue
            out.append(box.replace(x=c[0], y=c[1], z=c[2], yaw=box.yaw + dyaw))
        return out


def _ego_pose(spec: SceneSpec, t: float) -> np.ndarray:
    pose = np.eye(4)
    pose[0, 3] = spec.ego_speed * t
    return pose


def _place_objects(spec: SceneSpec, rng: np.random.Generator, duration: float) -> list[SyntheticObject]:
    classes = [c for c, k in spec.class_counts().items() for _ in range(k)]
    rng.shuffle(classes)
    n_moving = min(len(_LANES), int(round(spec.moving_fraction * len(classes))))
    lanes = list(rng.permutation(_LANES))
    objects: list[SyntheticObject] = []
    ego_mid = spec.ego_speed * duration / 2
    for idx, cls in enumerate(classes):
        proto = np.array(DEFAULT_PROTOTYPES[cls])
        dims = proto * (1 + rng.uniform(-spec.size_jitter, spec.size_jitter, 3))
        z = spec.ground_z + dims[2] / 2
        if idx < n_moving:
            lane = lanes[idx]
            direction = 1.0 if lane > 0 else -1.0
            speed = rng.uniform(*_SPEEDS[cls])
            velocity = np.array([direction * speed, 0.0])
            # centered so that the object is near the ego at mid-drive
            x_mid = ego_mid + rng.uniform(-0.5, 0.5) * spec.sensor_range
            x0 = x_mid - velocity[0] * duration / 2
            center = np.array([x0, lane, z])
            yaw = 0.0 if direction > 0 else math.pi
        else:
            velocity = np.zeros(2)
            for _ in range(1000):
                r = rng.uniform(spec.min_range, spec.sensor_range * 0.85)
                th = rng.uniform(-math.pi, math.pi)
                x, y = ego_mid + r * math.cos(th), r * math.sin(th)
                if abs(y) < 10.0:
                    continue
                if all(math.hypot(x - o.center0[0], y - o.center0[1])
                       > 0.5 * (math.hypot(*dims[:2]) + math.hypot(*o.dims[:2])) + 1.5
                       for o in objects if not o.moving):
                    break
            center = np.array([x, y, z])
            yaw = rng.uniform(-math.pi, math.pi)
        intensity = _INTENSITY[cls] + rng.uniform(-0.05, 0.05)
        objects.append(SyntheticObject(cls, center, dims, yaw, velocity, intensity, idx))
    return objects


def _sample_box_surface(box: Box3D, density: float, rng: np.random.Generator,
                        clearance: float = 0.0) -> np.ndarray:
    """Points on the four sides and the top of ``box`` (world frame).

    Side faces start ``clearance`` above the box bottom.
    """
    l, w = box.l, box.w
    h = box.h - clearance
    zc = clearance / 2
    faces = [  # (area, sampler in box-local coordinates)
        (l * h, lambda n: np.c_[rng.uniform(-l / 2, l / 2, n), np.full(n, w / 2), rng.uniform(-h / 2, h / 2, n)]),
        (l * h, lambda n: np.c_[rng.uniform(-l / 2, l / 2, n), np.full(n, -w / 2), rng.uniform(-h / 2, h / 2, n)]),
        (w * h, lambda n: np.c_[np.full(n, l / 2), rng.uniform(-w / 2, w / 2, n), rng.uniform(-h / 2, h / 2, n)]),
        (w * h, lambda n: np.c_[np.full(n, -l / 2), rng.uniform(-w / 2, w / 2, n), rng.uniform(-h / 2, h / 2, n)]),
        (l * w, lambda n: np.c_[rng.uniform(-l / 2, l / 2, n), rng.uniform(-w / 2, w / 2, n), np.full(n, h / 2)]),
    ]
    parts = []
    for area, sampler in faces:
        n = rng.poisson(density * area)
        if n:
            parts.append(sampler(n))
    if not parts:
        return np.zeros((0, 3))
    local = np.vstack(parts)
    local[:, 2] += zc
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return local @ rot.T + box.center


def generate_drive(spec: SceneSpec) -> SyntheticDrive:
    """Render ``n_frames + 2 * n_context`` sweeps of a reproducible synthetic drive."""
    rng = np.random.default_rng(spec.seed)
    n_sweeps = spec.n_frames + 2 * spec.n_context
    duration = (n_sweeps - 1) * spec.sweep_interval
    objects = _place_objects(spec, rng, duration)
    clutter = []
    for _ in range(spec.clutter):
        r = rng.uniform(spec.min_range, spec.sensor_range * 0.8)
        th = rng.uniform(-math.pi, math.pi)
        dims = rng.uniform([0.5, 0.5, 0.4], [6.0, 1.5, 2.5])
        x, y = spec.ego_speed * duration / 2 + r * math.cos(th), r * math.sin(th)
        if abs(y) < 10.0:
            y = math.copysign(10.0 + abs(y), y if y != 0 else 1.0)
        clutter.append(Box3D(x, y, spec.ground_z + dims[2] / 2, *dims, yaw=rng.uniform(-math.pi, math.pi)))

    sweeps, poses, instance, moving = [], [], [], []
    for k in range(n_sweeps):
        t = k * spec.sweep_interval
        pose = _ego_pose(spec, t)
        sensor = pose[:3, 3]
        pts, inst, mov, inten = [], [], [], []
        boxes = [(o.box_at(t), o) for o in objects]
        for box, obj in boxes:
            rng_dist = math.hypot(box.x - sensor[0], box.y - sensor[1])
            density = spec.surface_density * (10.0 / max(rng_dist, 10.0)) ** spec.density_decay
            p = _sample_box_surface(box, density, rng, spec.ground_clearance)
            pts.append(p)
            inst.append(np.full(len(p), obj.instance))
            mov.append(np.full(len(p), obj.moving))
            inten.append(np.clip(obj.intensity + rng.normal(0, 0.03, len(p)), 0, 1))
        for cbox in clutter:
            rng_dist = math.hypot(cbox.x - sensor[0], cbox.y - sensor[1])
            density = spec.surface_density * (10.0 / max(rng_dist, 10.0)) ** spec.density_decay
            p = _sample_box_surface(cbox, density, rng)
            pts.append(p)
            inst.append(np.full(len(p), CLUTTER))
            mov.append(np.zeros(len(p), dtype=bool))
            inten.append(np.clip(0.3 + rng.normal(0, 0.05, len(p)), 0, 1))
        # ground: uniform radius gives density falling off as 1/range
        r = rng.uniform(2.0, spec.sensor_range, spec.ground_points)
        th = rng.uniform(-math.pi, math.pi, spec.ground_points)
        g = np.c_[sensor[0] + r * np.cos(th), sensor[1] + r * np.sin(th),
                  spec.ground_z + rng.normal(0, spec.ground_noise, spec.ground_points)]
        covered = np.zeros(len(g), dtype=bool)
        for box in [b for b, _ in boxes] + clutter:
            covered |= _in_box_mask(np.c_[g[:, :2], np.full(len(g), box.z)], box)
        g = g[~covered]
        pts.append(g)
        inst.append(np.full(len(g), GROUND))
        mov.append(np.zeros(len(g), dtype=bool))
        inten.append(np.clip(0.1 + rng.normal(0, 0.02, len(g)), 0, 1))

        xyz = np.vstack(pts)
        xyz = xyz + rng.normal(0, spec.point_noise, xyz.shape) * (np.concatenate(inst) != GROUND)[:, None]
        inst_a, mov_a, inten_a = np.concatenate(inst), np.concatenate(mov).astype(bool), np.concatenate(inten)
        in_range = np.hypot(xyz[:, 0] - sensor[0], xyz[:, 1] - sensor[1]) <= spec.sensor_range
        to_sensor = invert_pose(pose)
        local = xyz[in_range] @ to_sensor[:3, :3].T + to_sensor[:3, 3]
        sweeps.append(PointCloud(local, inten_a[in_range], frame_id=k))
        poses.append(pose)
        instance.append(inst_a[in_range])
        moving.append(mov_a[in_range])
    return SyntheticDrive(spec, sweeps, poses, instance, moving, objects)


def generate_scene(spec: SceneSpec) -> tuple[SweepSequence, list[Box3D]]:
    """One 2n+1-sweep sequence and the ground truth of its center frame."""
    drive = generate_drive(spec if spec.n_frames == 1 else _with(spec, n_frames=1))
    frame = drive.frames[0]
    return drive.sequence(frame), drive.truth(frame)


def _with(spec: SceneSpec, **changes) -> SceneSpec:
    from dataclasses import replace
    return replace(spec, **changes)


@dataclass(frozen=True)
class CorruptionSpec:
    fp_rate: float = 0.0
    size_sigma: float = 0.0
    yaw_flip_prob: float = 0.0
    class_confusion: tuple[tuple[float, ...], ...] | None = None
    drop_rate: float = 0.0
    max_range: float = 50.0
    min_range: float = 5.0
    ground_z: float = -1.8

    def __post_init__(self):
        for name in ("fp_rate", "yaw_flip_prob", "drop_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.size_sigma < 0:
            raise ValueError("size_sigma must be >= 0")
        if self.class_confusion is not None:
            m = np.asarray(self.class_confusion, dtype=float)
            if m.shape != (len(KNOWN_CLASSES), len(KNOWN_CLASSES)) or (m < 0).any() \
                    or not np.allclose(m.sum(axis=1), 1):
                raise ValueError("class_confusion must be a row-stochastic 3x3 matrix")


def corrupt_labels(truth: Sequence[Box3D], cspec: CorruptionSpec, seed: int = 0):
    """Inject the usual pseudo-label errors into a clean label set.

    Returns ``(boxes, log)`` where ``log[i]`` describes output box ``i``:
    its source truth index (None for injected false positives) and the
    corruptions applied.
    """
    rng = np.random.default_rng(seed)
    out, log = [], []
    for i, box in enumerate(truth):
        if cspec.drop_rate > 0 and rng.random() < cspec.drop_rate:
            continue
        ops = []
        b = box
        if cspec.size_sigma > 0:
            f = np.clip(1 + rng.normal(0, cspec.size_sigma, 3), 0.2, None)
            b = b.replace(l=b.l * f[0], w=b.w * f[1], h=b.h * f[2])
            ops.append("size")
        if cspec.yaw_flip_prob > 0 and rng.random() < cspec.yaw_flip_prob:
            b = b.replace(yaw=b.yaw + math.pi)
            ops.append("yaw_flip")
        if cspec.class_confusion is not None and b.cls in KNOWN_CLASSES:
            row = np.asarray(cspec.class_confusion[KNOWN_CLASSES.index(b.cls)])
            new = KNOWN_CLASSES[int(rng.choice(len(KNOWN_CLASSES), p=row))]
            if new != b.cls:
                b = b.replace(cls=new)
                ops.append("class")
        out.append(b)
        log.append({"source": i, "ops": ops})
    n_fp = int(rng.binomial(len(truth), cspec.fp_rate)) if cspec.fp_rate > 0 else 0
    for _ in range(n_fp):
        cls = KNOWN_CLASSES[int(rng.integers(len(KNOWN_CLASSES)))]
        dims = np.array(DEFAULT_PROTOTYPES[cls]) * np.exp(rng.normal(0, 0.3, 3))
        r = rng.uniform(cspec.min_range, cspec.max_range)
        th = rng.uniform(-math.pi, math.pi)
        out.append(Box3D(r * math.cos(th), r * math.sin(th), cspec.ground_z + dims[2] / 2, *dims,
                         yaw=rng.uniform(-math.pi, math.pi), cls=cls, score=float(rng.uniform(0.1, 1.0))))
        log.append({"source": None, "ops": ["false_positive"]})
    return out, log


RANGE_BANDS = ((0.0, 30.0), (30.0, 50.0), (50.0, math.inf))
HIST_EDGES = tuple(np.round(np.linspace(0, 1, 11), 10))


def _as_frames(x) -> dict[int, list[Box3D]]:
    if isinstance(x, Mapping):
        return {int(k): list(v) for k, v in x.items()}
    return {i: list(v) for i, v in enumerate(x)}


def match_frame(pred: Sequence[Box3D], truth: Sequence[Box3D], threshold: float,
                class_aware: bool = True) -> list[tuple[int, int | None, float]]:
    """Greedy score-descending matching; returns ``(pred_idx, truth_idx or None, iou)`` per prediction."""
    order = sorted(range(len(pred)), key=lambda i: (-pred[i].score, i))
    taken: set[int] = set()
    result = []
    for i in order:
        best, best_iou = None, -1.0
        for j, t in enumerate(truth):
            if j in taken or (class_aware and t.cls != pred[i].cls):
                continue
            iou = iou_3d(pred[i], t)
            if iou > best_iou:
                best, best_iou = j, iou
        if best is not None and best_iou >= threshold and (threshold > 0 or best_iou > 0):
            taken.add(best)
            result.append((i, best, best_iou))
        else:
            result.append((i, None, max(best_iou, 0.0)))
    return result


def average_precision_11(scores: Sequence[float], tp: Sequence[bool], n_truth: int) -> float:
    """11-point interpolated AP of a ranked detection list."""
    if n_truth == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    hits = np.asarray(tp, dtype=float)[order]
    ctp = np.cumsum(hits)
    prec = ctp / np.arange(1, len(hits) + 1) if len(hits) else np.zeros(0)
    rec = ctp / n_truth if len(hits) else np.zeros(0)
    levels = []
    for r in np.linspace(0, 1, 11):
        p = prec[rec >= r - 1e-12]
        levels.append(float(p.max()) if len(p) else 0.0)
    return math.fsum(levels) / 11.0


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    per_class: dict[str, dict[str, dict[str, float]]]
    overall: dict[str, dict[str, float]]
    iou_histogram: list[int]
    histogram_edges: tuple[float, ...]
    matched_pairs: int
    per_range: dict[str, dict[str, float]]
    per_frame: list[dict]
    precision_undefined: bool
    branch_stats: dict[str, int] = field(default_factory=dict)
    class_aware: bool = True

    def precision(self, threshold: float) -> float:
        return self.overall[f"{threshold:.2f}"]["precision"]

    def recall(self, threshold: float) -> float:
        return self.overall[f"{threshold:.2f}"]["recall"]

    def to_dict(self) -> dict:
        return {"thresholds": list(self.thresholds), "per_class": self.per_class, "overall": self.overall,
                "iou_histogram": {"edges": list(self.histogram_edges), "counts": self.iou_histogram},
                "matched_pairs": self.matched_pairs, "per_range": self.per_range,
                "precision_undefined": self.precision_undefined, "branch_stats": self.branch_stats,
                "class_aware": self.class_aware}


def _pr_stats(pred_frames, truth_frames, threshold, keep_pred=None, keep_truth=None, class_aware=True):
    scores, tps, n_pred, n_truth, n_tp = [], [], 0, 0, 0
    for f in sorted(set(pred_frames) | set(truth_frames)):
        p = [b for b in pred_frames.get(f, []) if keep_pred is None or keep_pred(b)]
        t = [b for b in truth_frames.get(f, []) if keep_truth is None or keep_truth(b)]
        m = match_frame(p, t, threshold, class_aware)
        for i, j, _ in m:
            scores.append(p[i].score)
            tps.append(j is not None)
        n_pred += len(p)
        n_truth += len(t)
        n_tp += sum(j is not None for _, j, _ in m)
    return {"precision": n_tp / n_pred if n_pred else 0.0, "recall": n_tp / n_truth if n_truth else 0.0,
            "ap": average_precision_11(scores, tps, n_truth), "tp": n_tp, "n_pred": n_pred,
            "n_truth": n_truth}


def evaluate(pred, truth, thresholds: Sequence[float] = (0.5, 0.7), class_aware: bool = True) -> EvalReport:
    """Precision, recall and 11-point AP at each IoU threshold, per class, per range band and per frame.

    With ``class_aware=False`` the overall, per-frame and histogram figures
    match boxes on geometry alone, which is how class-agnostic proposals
    such as clustering output should be scored. Per-class and per-range
    figures always require the class to agree.
    """
    pf, tf = _as_frames(pred), _as_frames(truth)
    thresholds = tuple(float(t) for t in thresholds)
    overall, per_class, per_range = {}, {}, {}
    for thr in thresholds:
        key = f"{thr:.2f}"
        overall[key] = _pr_stats(pf, tf, thr, class_aware=class_aware)
        for cls in KNOWN_CLASSES:
            sel = (lambda b, c=cls: b.cls == c)
            per_class.setdefault(cls.name, {})[key] = _pr_stats(pf, tf, thr, sel, sel)
        for lo, hi in RANGE_BANDS:
            band = f"[{lo:g},{hi:g})"
            in_band = (lambda b, lo=lo, hi=hi: lo <= math.hypot(b.x, b.y) < hi)
            aps = []
            for cls in KNOWN_CLASSES:
                sel = (lambda b, c=cls, f=in_band: b.cls == c and f(b))
                st = _pr_stats(pf, tf, thr, sel, sel)
                if st["n_truth"]:
                    aps.append(st["ap"])
            per_range.setdefault(band, {})[f"map@{key}"] = float(np.mean(aps)) if aps else 0.0

    counts = [0] * (len(HIST_EDGES) - 1)
    matched = 0
    per_frame = []
    for f in sorted(set(pf) | set(tf)):
        p, t = pf.get(f, []), tf.get(f, [])
        for _, j, iou in match_frame(p, t, 0.0, class_aware):
            if j is not None:
                matched += 1
                counts[min(int(iou * 10), 9)] += 1
        row = {"frame": f, "n_pred": len(p), "n_truth": len(t)}
        for thr in thresholds:
            st = _pr_stats({f: p}, {f: t}, thr, class_aware=class_aware)
            row[f"precision@{thr:.2f}"] = st["precision"]
            row[f"recall@{thr:.2f}"] = st["recall"]
        per_frame.append(row)
    n_pred_total = sum(len(v) for v in pf.values())
    return EvalReport(thresholds, per_class, overall, counts, HIST_EDGES, matched, per_range, per_frame,
                      precision_undefined=n_pred_total == 0, class_aware=class_aware)
