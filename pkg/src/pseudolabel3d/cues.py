"""Instance cues for pseudo-label reasoning: tracks, motion, point statistics, prior scores."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import KNOWN_CLASSES, Box3D, BoxClass, PointCloud, iou_bev, points_in_box, transform_box_by_pose

CONSISTENCY_CAP = 0.05

DEFAULT_PROTOTYPES = {
    BoxClass.VEHICLE: (4.7, 1.9, 1.7),
    BoxClass.PEDESTRIAN: (0.8, 0.8, 1.7),
    BoxClass.CYCLIST: (1.8, 0.7, 1.7),
}


@dataclass
class SizePrototypes:
    """Per-class prototype sizes ``(l, w, h)`` in meters."""

    sizes: dict[BoxClass, tuple[float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_PROTOTYPES))

    def __post_init__(self):
        self.sizes = {BoxClass.parse(k): tuple(float(x) for x in v) for k, v in self.sizes.items()}
        for k, v in self.sizes.items():
            if len(v) != 3 or min(v) <= 0:
                raise ValueError(f"prototype for {k.name} must be three positive sizes, got {v}")

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "SizePrototypes":
        return cls({BoxClass.parse(k): tuple(v) for k, v in mapping.items()})

    def to_mapping(self) -> dict[str, list[float]]:
        return {k.name: list(v) for k, v in self.sizes.items()}

    def __getitem__(self, cls: BoxClass) -> np.ndarray:
        cls = BoxClass.parse(cls)
        if cls not in self.sizes:
            raise KeyError(f"no size prototype for class {cls.name}")
        return np.array(self.sizes[cls])

    def __contains__(self, cls) -> bool:
        return BoxClass.parse(cls) in self.sizes

    def classes(self) -> list[BoxClass]:
        return sorted(self.sizes)


def size_divergence(prototype, size, raw_sizes: bool = False) -> float:
    """``sum_k S_k log(S_k / s_k)`` over (l, w, h), on sum-normalized triplets unless ``raw_sizes``."""
    S = np.asarray(prototype, dtype=np.float64)
    s = np.asarray(size, dtype=np.float64)
    if (S <= 0).any() or (s <= 0).any():
        raise ValueError("sizes must be positive")
    if not raw_sizes:
        S, s = S / S.sum(), s / s.sum()
    return float(np.sum(S * np.log(S / s)))


def consistency_score(box: Box3D, prototypes: SizePrototypes, raw_sizes: bool = False,
                      invert: bool = False) -> float:
    """Clamped size divergence from the class prototype, scaled into [0, 1].

    0 means the box has exactly the prototype's proportions; the score
    saturates at 1 once the divergence reaches 0.05. ``invert`` returns
    ``1 - score`` so that higher means more consistent.
    """
    if box.cls not in prototypes:
        raise KeyError(f"no size prototype for class {box.cls.name}")
    total = max(0.0, size_divergence(prototypes[box.cls], box.dims, raw_sizes))
    score = min(CONSISTENCY_CAP, total) / CONSISTENCY_CAP
    return 1.0 - score if invert else score


def nearest_prototype(box: Box3D, prototypes: SizePrototypes) -> BoxClass:
    """Known class whose normalized proportions diverge least from the box's."""
    return min(prototypes.classes(),
               key=lambda k: (size_divergence(prototypes[k], box.dims), int(k)))


def instance_attributes(scene: PointCloud, box: Box3D) -> tuple[int, float]:
    idx = points_in_box(scene, box)
    if len(idx) == 0:
        return 0, 0.0
    return len(idx), float(scene.intensity[idx].mean())


def occupied_bev_cells(scene: PointCloud | np.ndarray, box: Box3D, resolution: int) -> int:
    """Number of occupied cells of an r x r grid tiled over the box footprint."""
    xyz = scene.xyz if isinstance(scene, PointCloud) else np.asarray(scene).reshape(-1, 3)
    idx = points_in_box(xyz, box)
    if len(idx) == 0:
        return 0
    d = xyz[idx] - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    i = np.clip(np.floor((lx + box.l / 2) / (box.l / resolution)), 0, resolution - 1).astype(int)
    j = np.clip(np.floor((ly + box.w / 2) / (box.w / resolution)), 0, resolution - 1).astype(int)
    return len(set(zip(i.tolist(), j.tolist())))


def distribution_score(box: Box3D, scene, resolution: int = 8, norm_range: float = 75.0) -> float:
    """``[1 - N(|center|)] + N_j / r^2`` with linear distance normalization clamped to [0, 1]."""
    if int(resolution) < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    if not norm_range > 0:
        raise ValueError("norm_range must be positive")
    dist_term = 1.0 - min(1.0, max(0.0, float(np.linalg.norm(box.center)) / norm_range))
    n_cells = occupied_bev_cells(scene, box, int(resolution))
    return dist_term + n_cells / float(resolution * resolution)


@dataclass
class Track:
    track_id: int
    frames: list[int]
    boxes: list[Box3D]
    box_indices: list[int]
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))


@dataclass(frozen=True)
class TrackingGates:
    iou_min: float = 0.05
    max_distance: float = 2.5
    k_miss: int = 2
    frame_interval: float = 0.1


def _fit_velocity(times: np.ndarray, xy: np.ndarray) -> np.ndarray:
    if len(times) < 2:
        return np.zeros(2)
    t = times - times.mean()
    denom = float(t @ t)
    if denom == 0:
        return np.zeros(2)
    return (t @ (xy - xy.mean(axis=0))) / denom


def track(label_sequence: Sequence[Sequence[Box3D]], gating: TrackingGates = TrackingGates(),
          frame_ids: Sequence[int] | None = None, poses: Sequence[np.ndarray] | None = None) -> list[Track]:
    """Greedy class-agnostic multi-object tracking.

    Boxes of consecutive frames are associated by descending BEV IoU with
    each track's constant-velocity prediction, falling back to centroid
    distance under ``max_distance``. Tracks survive up to ``k_miss``
    missed frames. When ``poses`` are given, boxes are moved to the world
    frame first so ego motion does not register as object motion.
    Velocities are least-squares fits of centroid against time (m/s).
    """
    frame_ids = list(frame_ids) if frame_ids is not None else list(range(len(label_sequence)))
    if any(b <= a for a, b in zip(frame_ids, frame_ids[1:])):
        raise ValueError("frames must be strictly increasing")
    tracks: list[Track] = []
    active: list[Track] = []
    dt = gating.frame_interval
    for f_pos, (fid, boxes) in enumerate(zip(frame_ids, label_sequence)):
        world = [transform_box_by_pose(b, poses[f_pos]) if poses is not None else b for b in boxes]
        active = [t for t in active if (fid - t.frames[-1]) <= gating.k_miss + 1]
        preds = []
        for t in active:
            vel = _fit_velocity(np.array(t.frames[-3:], dtype=float) * dt,
                                np.array([[b.x, b.y] for b in t.boxes[-3:]]))
            gap = (fid - t.frames[-1]) * dt
            last = t.boxes[-1]
            preds.append(last.replace(x=last.x + vel[0] * gap, y=last.y + vel[1] * gap))
        pairs = []
        for ti, p in enumerate(preds):
            for di, b in enumerate(world):
                iou = iou_bev(p, b)
                if iou >= gating.iou_min:
                    pairs.append((-iou, ti, di))
        pairs.sort()
        used_t, used_d = set(), set()
        matches = []
        for _, ti, di in pairs:
            if ti not in used_t and di not in used_d:
                used_t.add(ti)
                used_d.add(di)
                matches.append((ti, di))
        dist_pairs = []
        for ti, p in enumerate(preds):
            if ti in used_t:
                continue
            for di, b in enumerate(world):
                if di in used_d:
                    continue
                dist = math.hypot(p.x - b.x, p.y - b.y)
                if dist <= gating.max_distance:
                    dist_pairs.append((dist, ti, di))
        dist_pairs.sort()
        for _, ti, di in dist_pairs:
            if ti not in used_t and di not in used_d:
                used_t.add(ti)
                used_d.add(di)
                matches.append((ti, di))
        for ti, di in matches:
            t = active[ti]
            t.frames.append(fid)
            t.boxes.append(world[di])
            t.box_indices.append(di)
        for di, b in enumerate(world):
            if di not in used_d:
                t = Track(len(tracks), [fid], [b], [di])
                tracks.append(t)
                active.append(t)
    for t in tracks:
        t.velocity = _fit_velocity(np.array(t.frames, dtype=float) * dt,
                                   np.array([[b.x, b.y] for b in t.boxes]))
    return tracks


@dataclass(frozen=True)
class CueConfig:
    resolution: int = 8
    norm_range: float = 75.0
    raw_sizes: bool = False
    invert_s_cons: bool = False
    dynamic_speed: float = 0.5
    gating: TrackingGates = TrackingGates()


@dataclass
class CueRecord:
    """Per-box cues; ``cls_ref`` is the class whose prototype scored ``s_cons``."""

    frame_id: int
    box_index: int
    track_id: int
    box: Box3D
    point_count: int
    mean_intensity: float
    speed: float
    distance: float
    s_dis: float
    s_cons: float
    grid_occupancy: int
    resolution: int
    cls_ref: BoxClass
    is_dynamic: bool
    s_cons_inverted: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["box"] = box_to_dict(self.box)
        d["cls_ref"] = self.cls_ref.name
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CueRecord":
        d = dict(d)
        d["box"] = box_from_dict(d["box"])
        d["cls_ref"] = BoxClass.parse(d["cls_ref"])
        return cls(**d)


def box_to_dict(box: Box3D) -> dict:
    return {"x": box.x, "y": box.y, "z": box.z, "l": box.l, "w": box.w, "h": box.h,
            "yaw": box.yaw, "class": box.cls.name, "score": box.score, "weight": box.weight}


def box_from_dict(d: Mapping) -> Box3D:
    return Box3D(d["x"], d["y"], d["z"], d["l"], d["w"], d["h"], d["yaw"],
                 BoxClass.parse(d["class"]), d.get("score", 1.0), d.get("weight", 1.0))


def mine_cues(scenes: Sequence[PointCloud], labels: Sequence[Sequence[Box3D]],
              prototypes: SizePrototypes | None = None, config: CueConfig = CueConfig(),
              poses: Sequence[np.ndarray] | None = None) -> list[CueRecord]:
    """Track boxes across frames and compute one cue record per box.

    Boxes of unknown class are scored against their nearest prototype.
    """
    prototypes = prototypes or SizePrototypes()
    if len(scenes) != len(labels):
        raise ValueError(f"{len(scenes)} scenes but {len(labels)} label sets")
    frame_ids = [s.frame_id for s in scenes]
    tracks = track(labels, config.gating, frame_ids, poses)
    track_of: dict[tuple[int, int], Track] = {}
    for t in tracks:
        for fid, bi in zip(t.frames, t.box_indices):
            track_of[(fid, bi)] = t
    records = []
    for scene, boxes in zip(scenes, labels):
        for bi, box in enumerate(boxes):
            t = track_of[(scene.frame_id, bi)]
            count, intensity = instance_attributes(scene, box)
            ref = box.cls if box.cls in prototypes else nearest_prototype(box, prototypes)
            s_cons = consistency_score(box.replace(cls=ref), prototypes, config.raw_sizes,
                                       config.invert_s_cons)
            records.append(CueRecord(
                frame_id=scene.frame_id, box_index=bi, track_id=t.track_id, box=box,
                point_count=count, mean_intensity=intensity, speed=t.speed,
                distance=float(np.linalg.norm(box.center)),
                s_dis=distribution_score(box, scene, config.resolution, config.norm_range),
                s_cons=s_cons, grid_occupancy=occupied_bev_cells(scene, box, config.resolution),
                resolution=config.resolution, cls_ref=ref, is_dynamic=t.speed > config.dynamic_speed,
                s_cons_inverted=config.invert_s_cons))
    return records
