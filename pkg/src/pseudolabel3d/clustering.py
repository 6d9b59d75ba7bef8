"""Dynamic-radius density clustering and box fitting for initial pseudo-labels."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points
from .geometry import Box3D, BoxClass, PointCloud, nms


class CollinearFootprintWarning(UserWarning):
    """A cluster's BEV footprint had no area; an axis-aligned box was used."""


@dataclass(frozen=True)
class ClusteringParams:
    """Parameters of ``r = alpha * (1 + beta * exp(-rho)) * r0``.

    ``reference_count`` is the neighbor count that maps to ``rho = 1``
    (expected neighbors at 10 m range). ``probe_radius`` defaults to
    ``r0 / 2``.
    """

    alpha: float = 1.0
    beta: float = 0.6
    r0: float = 0.6
    min_points: int = 5
    reference_count: float = 10.0
    probe_radius: float | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not self.r0 > 0:
            raise ValueError(f"r0 must be positive, got {self.r0}")
        if int(self.min_points) < 1:
            raise ValueError(f"min_points must be >= 1, got {self.min_points}")
        if not self.reference_count > 0:
            raise ValueError("reference_count must be positive")

    @property
    def probe(self) -> float:
        return self.r0 / 2.0 if self.probe_radius is None else self.probe_radius


@dataclass
class Cluster:
    members: np.ndarray
    centroid: np.ndarray


def densities(xyz: np.ndarray, probe_radius: float, reference_count: float) -> np.ndarray:
    """Neighbor count within ``probe_radius`` (excluding the point) over ``reference_count``."""
    if not probe_radius > 0:
        raise ValueError(f"probe_radius must be positive, got {probe_radius}")
    if len(xyz) == 0:
        return np.zeros(0)
    tree = cKDTree(xyz)
    counts = tree.query_ball_point(xyz, probe_radius, return_length=True) - 1
    return counts / float(reference_count)


def density_at(cloud, point_index: int, probe_radius: float, reference_count: float = 10.0) -> float:
    xyz = check_points(cloud)
    if not probe_radius > 0:
        raise ValueError(f"probe_radius must be positive, got {probe_radius}")
    d2 = ((xyz - xyz[point_index]) ** 2).sum(axis=1)
    return (int((d2 <= probe_radius ** 2).sum()) - 1) / float(reference_count)


def dynamic_radius(params: ClusteringParams, rho):
    """Clustering radius for local density ``rho`` (scalar or array)."""
    rho = np.asarray(rho, dtype=np.float64)
    if (rho < 0).any():
        raise ValueError("rho must be non-negative")
    r = params.alpha * (1.0 + params.beta * np.exp(-rho)) * params.r0
    return float(r) if r.ndim == 0 else r


class DynamicRadiusDBSCAN(ClusterMixin, BaseEstimator):
    """DBSCAN in which each point's neighborhood radius adapts to local density.

    Every point gets ``eps_i = alpha * (1 + beta * exp(-rho_i)) * r0``;
    a point is core when at least ``min_points`` points (itself included)
    lie within its own ``eps_i``, and clusters grow through the
    neighborhoods of core points. With ``beta = 0`` this reduces to
    ordinary DBSCAN with ``eps = alpha * r0``.

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
        Cluster index per point, -1 for noise.
    core_sample_indices_ : ndarray
    radii_ : ndarray
        Per-point radius used.
    """

    def __init__(self, alpha=1.0, beta=0.6, r0=0.6, min_points=5, reference_count=10.0,
                 probe_radius=None):
        self.alpha = alpha
        self.beta = beta
        self.r0 = r0
        self.min_points = min_points
        self.reference_count = reference_count
        self.probe_radius = probe_radius

    @property
    def params(self) -> ClusteringParams:
        return ClusteringParams(self.alpha, self.beta, self.r0, self.min_points,
                                self.reference_count, self.probe_radius)

    def fit(self, X, y=None):
        X = check_points(X)
        params = self.params
        if params.beta == 0:
            radii = np.full(len(X), params.alpha * params.r0)
        else:
            radii = dynamic_radius(params, densities(X, params.probe, params.reference_count))
        tree = cKDTree(X)
        neighborhoods = tree.query_ball_point(X, radii)
        self.labels_ = _expand_clusters(neighborhoods, int(params.min_points))
        core = np.array([len(nb) >= params.min_points for nb in neighborhoods], dtype=bool)
        self.core_sample_indices_ = np.flatnonzero(core)
        self.radii_ = radii
        return self

    def clusters(self, X) -> list[Cluster]:
        check_is_fitted(self, "labels_")
        X = check_points(X)
        out = []
        for k in range(self.labels_.max() + 1 if len(self.labels_) else 0):
            members = np.flatnonzero(self.labels_ == k)
            out.append(Cluster(members, X[members].mean(axis=0)))
        return out


def _expand_clusters(neighborhoods, min_points: int) -> np.ndarray:
    """Classic sequential DBSCAN expansion over precomputed neighborhoods.

    Points are seeded in input order; a border point belongs to the first
    cluster that reaches it.
    """
    n = len(neighborhoods)
    lengths = np.fromiter((len(nb) for nb in neighborhoods), dtype=np.int64, count=n)
    flat = np.fromiter(itertools.chain.from_iterable(neighborhoods), dtype=np.int64, count=int(lengths.sum()))
    starts = np.concatenate([[0], np.cumsum(lengths)])
    is_core = lengths >= min_points
    labels = np.full(n, -1, dtype=np.int64)
    current = 0
    for i in range(n):
        if labels[i] != -1 or not is_core[i]:
            continue
        labels[i] = current
        stack = [i]
        while stack:
            j = stack.pop()
            nb = flat[starts[j]:starts[j + 1]]
            fresh = nb[labels[nb] == -1]
            labels[fresh] = current
            stack.extend(fresh[is_core[fresh]].tolist())
        current += 1
    return labels


def cluster(cloud, params: ClusteringParams) -> list[Cluster]:
    X = check_points(cloud)
    est = DynamicRadiusDBSCAN(params.alpha, params.beta, params.r0, params.min_points,
                              params.reference_count, params.probe_radius).fit(X)
    return est.clusters(X)


def _convex_hull_2d(pts: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns CCW hull without repeated endpoint."""
    pts = np.unique(pts, axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(tuple(p))
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(tuple(p))
    return np.array(lower[:-1] + upper[:-1])


def canonical_yaw(yaw: float) -> float:
    """Map a rectangle heading into [-pi/2, pi/2)."""
    yaw = math.fmod(yaw, math.pi)
    if yaw >= math.pi / 2:
        yaw -= math.pi
    elif yaw < -math.pi / 2:
        yaw += math.pi
    return yaw


def min_area_rectangle(xy: np.ndarray):
    """Rotating-calipers minimum-area rectangle.

    Returns ``(cx, cy, l, w, yaw)`` with ``l >= w`` and ``yaw`` in
    [-pi/2, pi/2), or None when the points are collinear.
    """
    hull = _convex_hull_2d(xy)
    if len(hull) < 3:
        return None
    best = None
    edges = np.roll(hull, -1, axis=0) - hull
    for ex, ey in edges:
        theta = math.atan2(ey, ex)
        c, s = math.cos(theta), math.sin(theta)
        u = hull[:, 0] * c + hull[:, 1] * s
        v = -hull[:, 0] * s + hull[:, 1] * c
        area = (u.max() - u.min()) * (v.max() - v.min())
        if best is None or area < best[0] - 1e-12:
            best = (area, theta, u.min(), u.max(), v.min(), v.max())
    area, theta, u0, u1, v0, v1 = best
    if area < 1e-12:
        return None
    c, s = math.cos(theta), math.sin(theta)
    uc, vc = (u0 + u1) / 2, (v0 + v1) / 2
    cx, cy = uc * c - vc * s, uc * s + vc * c
    du, dv = u1 - u0, v1 - v0
    if dv > du:
        du, dv = dv, du
        theta += math.pi / 2
    return cx, cy, du, dv, canonical_yaw(theta)


def fit_box(cloud, members, score_reference: float = 100.0, min_dim: float = 0.1) -> Box3D:
    """Fit an oriented box to a cluster: min-area BEV rectangle plus vertical span."""
    xyz = check_points(cloud)
    members = members.members if isinstance(members, Cluster) else np.asarray(members)
    if len(members) < 3:
        raise ValueError(f"fit_box needs at least 3 points, got {len(members)}")
    pts = xyz[members]
    rect = min_area_rectangle(pts[:, :2])
    if rect is None:
        warnings.warn("collinear cluster footprint; using an axis-aligned box",
                      CollinearFootprintWarning, stacklevel=2)
        lo, hi = pts[:, :2].min(axis=0), pts[:, :2].max(axis=0)
        ext = hi - lo
        cx, cy = (lo + hi) / 2
        if ext[0] >= ext[1]:
            length, width, yaw = ext[0], ext[1], 0.0
        else:
            length, width, yaw = ext[1], ext[0], -math.pi / 2
    else:
        cx, cy, length, width, yaw = rect
    zmin, zmax = pts[:, 2].min(), pts[:, 2].max()
    return Box3D(cx, cy, (zmin + zmax) / 2, max(length, min_dim), max(width, min_dim),
                 max(zmax - zmin, min_dim), yaw, BoxClass.UNKNOWN,
                 score=float(min(1.0, len(members) / score_reference)))


class InitialLabeler(BaseEstimator):
    """Cluster a ground-free dense scene, fit boxes, and deduplicate with NMS."""

    def __init__(self, alpha=1.0, beta=0.6, r0=0.6, min_points=5, reference_count=10.0,
                 nms_threshold=0.1, score_reference=100.0):
        self.alpha = alpha
        self.beta = beta
        self.r0 = r0
        self.min_points = min_points
        self.reference_count = reference_count
        self.nms_threshold = nms_threshold
        self.score_reference = score_reference

    def fit(self, X=None, y=None):
        return self

    def predict(self, scene) -> list[Box3D]:
        if len(scene) == 0:
            return []
        X = check_points(scene)
        est = DynamicRadiusDBSCAN(self.alpha, self.beta, self.r0, self.min_points,
                                  self.reference_count).fit(X)
        boxes = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CollinearFootprintWarning)
            for c in est.clusters(X):
                if len(c.members) >= 3:
                    boxes.append(fit_box(X, c, self.score_reference))
        return nms(boxes, self.nms_threshold)


def initial_labels(scene: PointCloud, params: ClusteringParams | None = None,
                   nms_threshold: float = 0.1) -> list[Box3D]:
    params = params or ClusteringParams()
    return InitialLabeler(params.alpha, params.beta, params.r0, params.min_points,
                          params.reference_count, nms_threshold).predict(scene)
