"""Geometric primitives: point clouds, oriented boxes, IoU, rotated NMS, voxels.

Conventions used everywhere in the package:

* yaw is counter-clockwise about +z, with yaw = 0 pointing along +x;
* a box's ``l`` runs along its heading, ``w`` across it, ``h`` vertically;
* voxel binning is lower-inclusive: a coordinate on an interior cell
  boundary belongs to the higher-index cell.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

_EPS_AREA = 1e-12


class DegenerateBoxWarning(UserWarning):
    """A box with (near) zero area or volume took part in an IoU computation."""


class BoxClass(enum.IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    CYCLIST = 2
    UNKNOWN = 3

    @classmethod
    def parse(cls, value) -> "BoxClass":
        if isinstance(value, BoxClass):
            return value
        if isinstance(value, str):
            key = value.strip().upper()
            if key.isdigit():
                return cls(int(key))
            try:
                return cls[key]
            except KeyError:
                raise ValueError(f"unknown class {value!r}") from None
        return cls(int(value))


KNOWN_CLASSES = (BoxClass.VEHICLE, BoxClass.PEDESTRIAN, BoxClass.CYCLIST)


def wrap_angle(angle: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = (angle + math.pi) % (2.0 * math.pi) - math.pi
    # float modulo can land exactly on +pi for inputs just below -pi
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


@dataclass
class PointCloud:
    """A set of LiDAR returns.

    ``xyz`` is an (N, 3) float array in meters and ``intensity`` an (N,)
    array in [0, 1]. ``source_frame`` optionally records, per point, the
    sweep index the point came from after aggregation.
    """

    xyz: np.ndarray
    intensity: np.ndarray | None = None
    frame_id: int = 0
    source_frame: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        if self.intensity is None:
            self.intensity = np.zeros(n)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(self.intensity) != n:
            raise ValueError(f"intensity has {len(self.intensity)} entries for {n} points")
        if self.source_frame is not None:
            self.source_frame = np.asarray(self.source_frame, dtype=np.int64).reshape(-1)
            if len(self.source_frame) != n:
                raise ValueError("source_frame length does not match point count")
        if self.frame_id < 0:
            raise ValueError(f"frame_id must be >= 0, got {self.frame_id}")

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, index) -> "PointCloud":
        return PointCloud(
            self.xyz[index],
            self.intensity[index],
            self.frame_id,
            None if self.source_frame is None else self.source_frame[index],
        )

    def check_finite(self) -> None:
        """Raise ``ValueError`` naming the first point with a non-finite coordinate."""
        bad = ~np.isfinite(self.xyz).all(axis=1)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise ValueError(f"point {idx} has non-finite coordinates {self.xyz[idx].tolist()}")


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box ``[x, y, z, l, w, h, yaw, class]`` with score and weight.

    ``z`` is the vertical center of the box.
    """

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    cls: BoxClass = BoxClass.UNKNOWN
    score: float = 1.0
    weight: float = 1.0

    def __post_init__(self):
        dims = (self.l, self.w, self.h)
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z, self.yaw, *dims)):
            raise ValueError(f"non-finite box parameters: {self}")
        if min(dims) <= 0:
            raise ValueError(f"box dimensions must be positive, got {dims}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.weight < 0:
            raise ValueError(f"weight must be >= 0, got {self.weight}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "cls", BoxClass.parse(self.cls))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def replace(self, **changes) -> "Box3D":
        return replace(self, **changes)

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw,
                         int(self.cls), self.score, self.weight])

    @classmethod
    def from_array(cls, row) -> "Box3D":
        row = [float(v) for v in row]
        kw = dict(zip(("x", "y", "z", "l", "w", "h", "yaw"), row[:7]))
        if len(row) > 7:
            kw["cls"] = BoxClass(int(row[7]))
        if len(row) > 8:
            kw["score"] = row[8]
        if len(row) > 9:
            kw["weight"] = row[9]
        return cls(**kw)

    def bev_corners(self) -> np.ndarray:
        """Footprint corners (4, 2), counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


def rigid_transform_box(box: Box3D, rotation_z: float = 0.0, translation=(0.0, 0.0, 0.0),
                        scale: float = 1.0, flip_y: bool = False) -> Box3D:
    """Apply ``p -> scale * Rz(rotation_z) @ F @ p + translation`` to a box.

    ``F`` mirrors the y axis when ``flip_y`` is set, which maps yaw to -yaw.
    """
    x, y, yaw = box.x, box.y, box.yaw
    if flip_y:
        y, yaw = -y, -yaw
    c, s = math.cos(rotation_z), math.sin(rotation_z)
    xr, yr = c * x - s * y, s * x + c * y
    tx, ty, tz = translation
    return box.replace(
        x=scale * xr + tx, y=scale * yr + ty, z=scale * box.z + tz,
        l=box.l * scale, w=box.w * scale, h=box.h * scale,
        yaw=yaw + rotation_z,
    )


def transform_box_by_pose(box: Box3D, pose: np.ndarray) -> Box3D:
    """Map a box through a 4x4 rigid transform whose rotation is about +z."""
    pose = np.asarray(pose, dtype=np.float64)
    center = pose[:3, :3] @ box.center + pose[:3, 3]
    dyaw = math.atan2(pose[1, 0], pose[0, 0])
    return box.replace(x=center[0], y=center[1], z=center[2], yaw=box.yaw + dyaw)


def points_in_box(cloud: PointCloud | np.ndarray, box: Box3D) -> np.ndarray:
    """Indices of points inside ``box`` (faces inclusive)."""
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(_in_box_mask(xyz, box))


def _in_box_mask(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    d = xyz - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # rotate by -yaw into the box frame
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    return ((np.abs(lx) <= box.l / 2.0) & (np.abs(ly) <= box.w / 2.0)
            & (np.abs(d[:, 2]) <= box.h / 2.0))


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the CCW convex ``clipper``."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, output = output, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    output.append(_intersect(prev, cur, sp, sc))
                output.append(cur)
            elif sp >= 0:
                output.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    return _polygon_area(_clip_convex(a.bev_corners(), b.bev_corners()))


def _degenerate(a: Box3D, b: Box3D, volume: bool) -> bool:
    measure = (lambda bx: bx.volume) if volume else (lambda bx: bx.l * bx.w)
    if measure(a) < _EPS_AREA or measure(b) < _EPS_AREA:
        warnings.warn("IoU with a degenerate box is defined as 0", DegenerateBoxWarning, stacklevel=3)
        return True
    return False


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Bird's-eye-view IoU of two oriented footprints."""
    if _degenerate(a, b, volume=False):
        return 0.0
    if math.hypot(a.x - b.x, a.y - b.y) > 0.5 * (math.hypot(a.l, a.w) + math.hypot(b.l, b.w)):
        return 0.0
    inter = bev_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: footprint intersection times vertical overlap over union volume."""
    if _degenerate(a, b, volume=True):
        return 0.0
    zmin = max(a.z - a.h / 2.0, b.z - b.h / 2.0)
    zmax = min(a.z + a.h / 2.0, b.z + b.h / 2.0)
    overlap = zmax - zmin
    if overlap <= 0:
        return 0.0
    if math.hypot(a.x - b.x, a.y - b.y) > 0.5 * (math.hypot(a.l, a.w) + math.hypot(b.l, b.w)):
        return 0.0
    inter = bev_intersection_area(a, b) * overlap
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def nms(boxes: Sequence[Box3D], iou_threshold: float) -> list[Box3D]:
    """Greedy rotated NMS on BEV IoU.

    Boxes are visited by descending score (ties: lower input index first);
    a box is suppressed when its IoU with an already kept box exceeds the
    threshold.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[Box3D] = []
    for i in order:
        cand = boxes[i]
        if all(iou_bev(cand, k) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


@dataclass
class VoxelGrid:
    """Sparse voxelization of a point cloud.

    ``cells`` maps an integer (i, j, k) cell index to the indices of the
    points it contains. ``points`` keeps the source coordinates so voxel
    centroids can be recomputed.
    """

    origin: np.ndarray
    cell_size: np.ndarray
    extents: tuple[int, int, int]
    cells: dict[tuple[int, int, int], np.ndarray]
    points: np.ndarray
    n_dropped: int = 0
    point_cell: np.ndarray = field(default=None, repr=False)

    @property
    def n_points_binned(self) -> int:
        return int(sum(len(v) for v in self.cells.values()))

    def occupied(self) -> list[tuple[int, int, int]]:
        return sorted(self.cells)

    def cell_center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.cell_size

    def in_bounds(self, idx) -> bool:
        return all(0 <= int(i) < e for i, e in zip(idx, self.extents))

    def dense_occupancy(self) -> np.ndarray:
        occ = np.zeros(self.extents, dtype=bool)
        for idx in self.cells:
            occ[idx] = True
        return occ


def voxelize(cloud: PointCloud | np.ndarray, origin, cell_size, extents) -> VoxelGrid:
    """Bin points into a regular grid with lower-inclusive cell intervals.

    Points outside ``origin + [0, extents * cell_size)`` are dropped and
    counted in ``n_dropped``.
    """
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(np.asarray(cloud, dtype=np.float64).reshape(-1, 3))
    cloud.check_finite()
    origin = np.broadcast_to(np.asarray(origin, dtype=np.float64), (3,)).copy()
    cell_size = np.broadcast_to(np.asarray(cell_size, dtype=np.float64), (3,)).copy()
    extents = tuple(int(e) for e in np.broadcast_to(np.asarray(extents), (3,)))
    if (cell_size <= 0).any():
        raise ValueError(f"cell_size must be positive, got {cell_size.tolist()}")
    if min(extents) <= 0:
        raise ValueError(f"extents must be positive, got {extents}")

    idx = np.floor((cloud.xyz - origin) / cell_size).astype(np.int64)
    ok = ((idx >= 0) & (idx < np.array(extents))).all(axis=1)
    point_cell = np.full(len(cloud), -1, dtype=np.int64)
    cells: dict[tuple[int, int, int], np.ndarray] = {}
    valid = np.flatnonzero(ok)
    if len(valid):
        flat = np.ravel_multi_index(idx[valid].T, extents)
        point_cell[valid] = flat
        order = np.argsort(flat, kind="stable")
        uniq, starts = np.unique(flat[order], return_index=True)
        groups = np.split(valid[order], starts[1:])
        for key, members in zip(uniq, groups):
            cells[tuple(int(v) for v in np.unravel_index(key, extents))] = members
    return VoxelGrid(origin, cell_size, extents, cells, cloud.xyz,
                     n_dropped=int((~ok).sum()), point_cell=point_cell)


def boxes_to_array(boxes: Iterable[Box3D]) -> np.ndarray:
    rows = [b.to_array() for b in boxes]
    return np.array(rows).reshape(-1, 10)
