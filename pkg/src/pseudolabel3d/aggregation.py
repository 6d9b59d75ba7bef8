"""Multi-sweep aggregation, motion-artifact removal and ground segmentation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_points, check_unit_interval
from .geometry import PointCloud


class GroundPlaneWarning(UserWarning):
    """No near-horizontal dominant plane was found."""


def check_pose(pose, index: int = 0) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError(f"pose {index} must be 4x4, got shape {pose.shape}")
    if not np.isfinite(pose).all():
        raise ValueError(f"pose {index} has non-finite entries")
    rot = pose[:3, :3]
    if abs(np.linalg.det(rot)) < 1e-9 or not np.allclose(pose[3], [0, 0, 0, 1]):
        raise ValueError(f"pose {index} is not invertible")
    if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
        raise ValueError(f"pose {index} rotation is not orthonormal")
    return pose


def invert_pose(pose: np.ndarray) -> np.ndarray:
    inv = np.eye(4)
    rot = pose[:3, :3]
    inv[:3, :3] = rot.T
    inv[:3, 3] = -rot.T @ pose[:3, 3]
    return inv


@dataclass
class SweepSequence:
    """2n+1 consecutive sweeps, each in its own sensor frame, with sensor-to-world poses."""

    sweeps: list[PointCloud]
    poses: list[np.ndarray]

    def __post_init__(self):
        if len(self.sweeps) != len(self.poses):
            raise ValueError(f"{len(self.sweeps)} sweeps but {len(self.poses)} poses")
        self.poses = [check_pose(p, i) for i, p in enumerate(self.poses)]
        frames = [s.frame_id for s in self.sweeps]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"sweeps must be ordered by frame index, got {frames}")

    @property
    def n_context(self) -> int:
        return (len(self.sweeps) - 1) // 2

    @property
    def center(self) -> int:
        return self.n_context

    @property
    def center_frame(self) -> int:
        return self.sweeps[self.center].frame_id

    def validate_length(self) -> None:
        m = len(self.sweeps)
        if m < 3 or m % 2 == 0:
            raise ValueError(f"expected 2n+1 sweeps with n >= 1, got {m}")


def aggregate_sweeps(seq: SweepSequence) -> PointCloud:
    """Concatenate all sweeps in the center sweep's sensor frame.

    The returned cloud's ``source_frame`` holds each point's original
    frame index.
    """
    seq.validate_length()
    to_center = invert_pose(seq.poses[seq.center])
    xyz, inten, src = [], [], []
    for sweep, pose in zip(seq.sweeps, seq.poses):
        sweep.check_finite()
        t = to_center @ pose
        xyz.append(sweep.xyz @ t[:3, :3].T + t[:3, 3])
        inten.append(sweep.intensity)
        src.append(np.full(len(sweep), sweep.frame_id, dtype=np.int64))
    return PointCloud(np.concatenate(xyz), np.concatenate(inten),
                      frame_id=seq.center_frame, source_frame=np.concatenate(src))


@dataclass
class PersistenceField:
    """Per-point persistence in [0, 1] over an aggregated cloud (1 = static)."""

    scores: np.ndarray
    cloud: PointCloud
    counts: np.ndarray | None = None


def persistence_from_aggregate(cloud: PointCloud, frames: Sequence[int], neighborhood_radius: float,
                               support: np.ndarray | None = None) -> PersistenceField:
    """Normalized entropy of per-sweep neighbor counts.

    For every point, neighbors within ``neighborhood_radius`` are counted
    separately for each source sweep. A point whose surroundings appear
    with similar density in every sweep has a near-uniform count
    distribution (score near 1); one whose surroundings exist in a single
    sweep scores 0. ``support`` restricts which points may act as
    neighbors, e.g. to keep ground returns from vouching for movers.
    Points with no supporting neighbor at all score 0.
    """
    if not neighborhood_radius > 0:
        raise ValueError(f"neighborhood_radius must be positive, got {neighborhood_radius}")
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("persistence needs at least two sweeps")
    if support is None:
        support = np.ones(len(cloud), dtype=bool)
    counts = np.zeros((len(cloud), len(frames)), dtype=np.float64)
    for k, f in enumerate(frames):
        sel = (cloud.source_frame == f) & support
        if not sel.any() or len(cloud) == 0:
            continue
        tree = cKDTree(cloud.xyz[sel])
        counts[:, k] = tree.query_ball_point(cloud.xyz, neighborhood_radius, return_length=True)
    total = counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(total > 0, counts / np.where(total > 0, total, 1.0), 0.0)
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    entropy = -plogp.sum(axis=1)
    scores = np.clip(entropy / math.log(len(frames)), 0.0, 1.0)
    return PersistenceField(scores, cloud, counts)


def persistence_scores(seq: SweepSequence, neighborhood_radius: float = 0.3,
                       support: np.ndarray | None = None) -> PersistenceField:
    seq.validate_length()
    if not neighborhood_radius > 0:
        raise ValueError(f"neighborhood_radius must be positive, got {neighborhood_radius}")
    cloud = aggregate_sweeps(seq)
    return persistence_from_aggregate(cloud, [s.frame_id for s in seq.sweeps], neighborhood_radius, support)


def motion_filter_mask(field: PersistenceField, center_frame: int, tau_static: float) -> np.ndarray:
    return (field.cloud.source_frame == center_frame) | (field.scores >= tau_static)


def filter_motion_artifacts(seq: SweepSequence, field: PersistenceField, tau_static: float = 0.7) -> PointCloud:
    """Keep the whole center sweep plus persistent points from the other sweeps."""
    if len(field.scores) != len(field.cloud):
        raise ValueError("persistence field is not aligned with its cloud")
    return field.cloud.subset(motion_filter_mask(field, seq.center_frame, tau_static))


class RansacGroundSegmenter(TransformerMixin, BaseEstimator):
    """Seeded RANSAC fit of the dominant near-horizontal plane.

    Parameters
    ----------
    inlier_distance : float
        Point-to-plane distance (m) under which a point counts as ground.
    max_iterations : int
        Number of random 3-point hypotheses.
    max_tilt_deg : float
        Largest allowed angle between the plane normal and +z.
    min_inlier_fraction : float
        A plane supported by fewer points than this fraction is rejected.
    random_state : int
        Seed for hypothesis sampling.

    Attributes
    ----------
    plane_ : ndarray of shape (4,) or None
        ``(a, b, c, d)`` with unit normal ``(a, b, c)``, ``c > 0``.
    ground_mask_ : ndarray of bool
    plane_found_ : bool
    """

    def __init__(self, inlier_distance=0.1, max_iterations=200, max_tilt_deg=15.0,
                 min_inlier_fraction=0.2, random_state=0):
        self.inlier_distance = inlier_distance
        self.max_iterations = max_iterations
        self.max_tilt_deg = max_tilt_deg
        self.min_inlier_fraction = min_inlier_fraction
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_points(X)
        rng = np.random.default_rng(self.random_state)
        cos_tilt = math.cos(math.radians(self.max_tilt_deg))
        n = len(X)
        best_count, best_plane = 0, None
        if n >= 3:
            for _ in range(self.max_iterations):
                a, b, c = X[rng.choice(n, 3, replace=False)]
                normal = np.cross(b - a, c - a)
                norm = np.linalg.norm(normal)
                if norm < 1e-9:
                    continue
                normal /= norm
                if normal[2] < 0:
                    normal = -normal
                if normal[2] < cos_tilt:
                    continue
                d = -normal @ a
                count = int((np.abs(X @ normal + d) <= self.inlier_distance).sum())
                if count > best_count:
                    best_count, best_plane = count, np.append(normal, d)
        if best_plane is not None and best_count >= self.min_inlier_fraction * n:
            best_plane = self._refine(X, best_plane, cos_tilt)
            self.plane_ = best_plane
            self.ground_mask_ = np.abs(X @ best_plane[:3] + best_plane[3]) <= self.inlier_distance
            self.plane_found_ = True
        else:
            warnings.warn("no near-horizontal ground plane found; cloud left unchanged",
                          GroundPlaneWarning, stacklevel=2)
            self.plane_ = None
            self.ground_mask_ = np.zeros(n, dtype=bool)
            self.plane_found_ = False
        return self

    def _refine(self, X, plane, cos_tilt):
        inliers = X[np.abs(X @ plane[:3] + plane[3]) <= self.inlier_distance]
        if len(inliers) < 3:
            return plane
        centroid = inliers.mean(axis=0)
        _, _, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
        normal = vt[-1]
        if normal[2] < 0:
            normal = -normal
        if normal[2] < cos_tilt:
            return plane
        return np.append(normal, -normal @ centroid)

    def transform(self, X):
        X = check_points(X)
        if self.plane_ is None:
            return X
        return X[np.abs(X @ self.plane_[:3] + self.plane_[3]) > self.inlier_distance]


class GroundSplit(NamedTuple):
    nonground: PointCloud
    ground: PointCloud
    plane_found: bool


def remove_ground(cloud: PointCloud, inlier_distance: float = 0.1, max_iterations: int = 200,
                  max_tilt_deg: float = 15.0, min_inlier_fraction: float = 0.2,
                  seed: int = 0) -> GroundSplit:
    """Split ``cloud`` into non-ground and ground partitions."""
    if len(cloud) == 0:
        raise ValueError("remove_ground needs a non-empty cloud")
    seg = RansacGroundSegmenter(inlier_distance, max_iterations, max_tilt_deg,
                                min_inlier_fraction, seed).fit(cloud.xyz)
    mask = seg.ground_mask_
    return GroundSplit(cloud.subset(~mask), cloud.subset(mask), seg.plane_found_)


@dataclass
class DenseSceneResult:
    """Intermediate products of building one dense scene."""

    aggregate: PointCloud
    field: PersistenceField
    keep_mask: np.ndarray
    ground_mask: np.ndarray
    scene: PointCloud
    plane_found: bool


def build_dense_scene(seq: SweepSequence, tau_static: float = 0.7, neighborhood_radius: float = 0.3,
                      ground_inlier_distance: float = 0.1, ground_max_iterations: int = 200,
                      seed: int = 0) -> DenseSceneResult:
    """Aggregate, drop motion artifacts and ground; returns the dense scene and diagnostics.

    Ground is segmented on the aggregate first so that ground returns do
    not count as persistent neighbors of points on moving objects; the
    final point set equals motion filtering followed by ground removal.
    """
    check_unit_interval("tau_static", min(tau_static, 1.0))
    agg = aggregate_sweeps(seq)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", GroundPlaneWarning)
        seg = RansacGroundSegmenter(ground_inlier_distance, ground_max_iterations,
                                    random_state=seed).fit(agg.xyz)
    for w in caught:
        warnings.warn(w.message, w.category, stacklevel=2)
    ground = seg.ground_mask_
    field = persistence_from_aggregate(agg, [s.frame_id for s in seq.sweeps], neighborhood_radius,
                                       support=~ground)
    keep = motion_filter_mask(field, seq.center_frame, tau_static)
    scene = agg.subset(keep & ~ground)
    return DenseSceneResult(agg, field, keep, ground, scene, seg.plane_found_)
