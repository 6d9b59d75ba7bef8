"""Occupancy-guided warm-up: distance-aware voxel masking and occupancy prediction."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geometry import Box3D, PointCloud, VoxelGrid, _in_box_mask, voxelize

PROB_CLAMP = 1e-7
FORMAT_MAGIC = b"PL3DWARM"
FORMAT_VERSION = 1
NEIGHBOR_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)])
N_FEATURES = len(NEIGHBOR_OFFSETS) + 1


class WarmupDivergenceError(RuntimeError):
    pass


class WarmupFormatError(ValueError):
    """Malformed warm-up parameter file."""


class WarmupVersionError(WarmupFormatError):
    pass


@dataclass(frozen=True)
class MaskSchedule:
    w_fr: float = 1.0
    w_bg: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("w_fr", "w_bg"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")


def mask_ratio(d, is_foreground, sched: MaskSchedule = MaskSchedule()):
    """Masking probability ``w * (0.1 + 0.5 * exp(-0.25 * floor(d / 10)))``.

    Works on scalars or arrays; the floor makes the ratio constant within
    each 10 m distance band.
    """
    d = np.asarray(d, dtype=np.float64)
    if (d < 0).any():
        raise ValueError("distance must be non-negative")
    w = np.where(np.asarray(is_foreground, dtype=bool), sched.w_fr, sched.w_bg)
    p = w * (0.1 + 0.5 * np.exp(-0.25 * np.floor(d / 10.0)))
    return float(p) if p.ndim == 0 else p


def voxel_centroid(grid: VoxelGrid, voxel) -> np.ndarray:
    members = grid.cells.get(tuple(int(v) for v in voxel))
    if members is None or len(members) == 0:
        raise ValueError(f"voxel {tuple(voxel)} is empty")
    return grid.points[members].mean(axis=0)


def voxel_center_distance(grid: VoxelGrid, voxel) -> float:
    """Distance from the sensor origin to the mean of the voxel's points."""
    return float(np.linalg.norm(voxel_centroid(grid, voxel)))


def _centroids(grid: VoxelGrid, voxels) -> np.ndarray:
    return np.array([grid.points[grid.cells[v]].mean(axis=0) for v in voxels]).reshape(-1, 3)


def foreground_flags(centroids: np.ndarray, labels: Sequence[Box3D]) -> np.ndarray:
    fg = np.zeros(len(centroids), dtype=bool)
    for box in labels:
        fg |= _in_box_mask(centroids, box)
    return fg


@dataclass
class VoxelMask:
    """Mask over the occupied voxels of a grid; ``masked[j]`` is m_j (1 = hidden)."""

    voxels: list[tuple[int, int, int]]
    masked: np.ndarray
    ratios: np.ndarray
    foreground: np.ndarray

    @property
    def masked_voxels(self) -> list[tuple[int, int, int]]:
        return [v for v, m in zip(self.voxels, self.masked) if m]

    @property
    def unmasked_voxels(self) -> list[tuple[int, int, int]]:
        return [v for v, m in zip(self.voxels, self.masked) if not m]

    @property
    def n_unmasked(self) -> int:
        return int((~self.masked).sum())


def sample_mask(grid: VoxelGrid, labels: Sequence[Box3D], sched: MaskSchedule = MaskSchedule(),
                rng: np.random.Generator | None = None) -> VoxelMask:
    """Independent Bernoulli mask per occupied voxel.

    A voxel is foreground when its centroid falls inside any label box.
    Occupied voxels are visited in sorted index order, so the draw is
    reproducible from ``sched.seed`` (or from ``rng`` when given).
    """
    voxels = grid.occupied()
    cents = _centroids(grid, voxels)
    dist = np.linalg.norm(cents, axis=1)
    fg = foreground_flags(cents, labels)
    ratios = mask_ratio(dist, fg, sched) if len(voxels) else np.zeros(0)
    rng = rng if rng is not None else np.random.default_rng(sched.seed)
    masked = rng.random(len(voxels)) < ratios
    return VoxelMask(voxels, masked, np.asarray(ratios), fg)


@dataclass
class OccupancyTargets:
    voxels: np.ndarray
    y: np.ndarray


def occupancy_loss(pred, targets) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over the prediction domain and its gradient in ``pred``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(targets.y if isinstance(targets, OccupancyTargets) else targets,
                   dtype=np.float64).reshape(-1)
    if len(pred) == 0:
        raise ValueError("prediction domain is empty")
    if len(pred) != len(y):
        raise ValueError(f"{len(pred)} predictions for {len(y)} targets")
    if not ((pred > 0) & (pred < 1)).all():
        raise ValueError("predicted occupancy must lie strictly inside (0, 1)")
    p = np.clip(pred, PROB_CLAMP, 1 - PROB_CLAMP)
    n = len(p)
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    grad = (-y / p + (1 - y) / (1 - p)) / n
    inside = (pred >= PROB_CLAMP) & (pred <= 1 - PROB_CLAMP)
    return float(loss), np.where(inside, grad, 0.0)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -30.0, 30.0)))


@dataclass
class OccupancyPredictor:
    """Two-layer scorer: ``sigmoid(w2 . tanh(W1 x + b1) + b2)``."""

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    loss_trace: list[float] = field(default_factory=list)

    @classmethod
    def initialize(cls, n_in: int = N_FEATURES, n_hidden: int = 16, seed: int = 0) -> "OccupancyPredictor":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, 1 / math.sqrt(n_in), (n_hidden, n_in)), np.zeros(n_hidden),
                   rng.normal(0, 1 / math.sqrt(n_hidden), n_hidden), np.zeros(1))

    @property
    def layer_sizes(self) -> tuple[int, int, int]:
        return (self.W1.shape[1], self.W1.shape[0], 1)

    @property
    def n_parameters(self) -> int:
        return self.W1.size + self.b1.size + self.w2.size + self.b2.size

    def parameters(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.w2, self.b2]

    def hidden(self, X: np.ndarray) -> np.ndarray:
        return np.tanh(X @ self.W1.T + self.b1)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.hidden(X) @ self.w2 + self.b2[0])

    def loss_and_grads(self, X: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
        H = self.hidden(X)
        z = H @ self.w2 + self.b2[0]
        p = _sigmoid(z)
        loss, dp = occupancy_loss(p, y)
        dz = dp * p * (1 - p)
        gw2 = H.T @ dz
        gb2 = np.array([dz.sum()])
        dH = np.outer(dz, self.w2) * (1 - H ** 2)
        gW1 = dH.T @ X
        gb1 = dH.sum(axis=0)
        return loss, [gW1, gb1, gw2, gb2]


def neighborhood_features(visible: np.ndarray, voxels: np.ndarray, grid: VoxelGrid,
                          norm_range: float = 75.0) -> np.ndarray:
    """Visible-occupancy indicators of the 3x3x3 block around each voxel plus distance.

    ``visible`` is a dense boolean grid of occupied, unmasked cells. The
    center indicator is always forced to 0 so features never reveal the
    queried cell itself. Distance uses the geometric cell center.
    """
    voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    padded = np.pad(visible, 1)
    nb = voxels[:, None, :] + NEIGHBOR_OFFSETS[None, :, :] + 1
    feats = padded[nb[..., 0], nb[..., 1], nb[..., 2]].astype(np.float64)
    feats[:, 13] = 0.0
    centers = grid.origin + (voxels + 0.5) * grid.cell_size
    dist = np.linalg.norm(centers, axis=1) / norm_range
    return np.hstack([feats, dist[:, None]])


def _empty_candidates(occ: np.ndarray) -> np.ndarray:
    """Empty cells touching at least one occupied cell (26-connectivity)."""
    dil = np.zeros_like(occ)
    padded = np.pad(occ, 1)
    sx, sy, sz = occ.shape
    for dx, dy, dz in NEIGHBOR_OFFSETS:
        dil |= padded[1 + dx:1 + dx + sx, 1 + dy:1 + dy + sy, 1 + dz:1 + dz + sz]
    return np.argwhere(dil & ~occ)


@dataclass
class WarmupScene:
    """Precomputed voxel data for one dense scene."""

    grid: VoxelGrid
    voxels: np.ndarray
    distance: np.ndarray
    foreground: np.ndarray
    occupancy: np.ndarray
    empty: np.ndarray

    @classmethod
    def build(cls, scene: PointCloud, labels: Sequence[Box3D], voxel_size: float = 0.4,
              half_range: float = 60.0, z_range=(-3.0, 3.0)) -> "WarmupScene":
        extent_xy = int(math.ceil(2 * half_range / voxel_size))
        extent_z = int(math.ceil((z_range[1] - z_range[0]) / voxel_size))
        grid = voxelize(scene, (-half_range, -half_range, z_range[0]), voxel_size,
                        (extent_xy, extent_xy, extent_z))
        voxels = grid.occupied()
        cents = _centroids(grid, voxels)
        occ = grid.dense_occupancy()
        return cls(grid, np.array(voxels, dtype=np.int64).reshape(-1, 3), np.linalg.norm(cents, axis=1),
                   foreground_flags(cents, labels), occ, _empty_candidates(occ))

    def sample_batch(self, sched: MaskSchedule, rng: np.random.Generator, norm_range: float = 75.0):
        """Draw a mask and return (features, targets) over the prediction domain."""
        ratios = mask_ratio(self.distance, self.foreground, sched)
        masked = rng.random(len(self.voxels)) < ratios
        visible = self.occupancy.copy()
        mv = self.voxels[masked]
        visible[mv[:, 0], mv[:, 1], mv[:, 2]] = False
        n_pos = len(mv)
        n_neg = min(n_pos, len(self.empty))
        neg = self.empty[rng.choice(len(self.empty), n_neg, replace=False)] if n_neg else np.zeros((0, 3), int)
        domain = np.vstack([mv, neg])
        y = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
        return neighborhood_features(visible, domain, self.grid, norm_range), y


def train_warmup(scenes: Sequence[PointCloud], labels: Sequence[Sequence[Box3D]],
                 sched: MaskSchedule = MaskSchedule(), epochs: int = 50, learning_rate: float = 0.1,
                 n_hidden: int = 16, voxel_size: float = 0.4,
                 init: OccupancyPredictor | None = None) -> OccupancyPredictor:
    """Fit the occupancy predictor by plain gradient descent, one step per scene per epoch."""
    return OccupancyWarmup(sched.w_fr, sched.w_bg, epochs, learning_rate, n_hidden, voxel_size,
                           random_state=sched.seed).fit(scenes, labels, init=init).predictor_


class OccupancyWarmup(BaseEstimator):
    """Self-supervised occupancy pretraining over masked voxel grids.

    Attributes
    ----------
    predictor_ : OccupancyPredictor
    loss_trace_ : list of float
        Mean training loss per epoch.
    """

    def __init__(self, w_fr=1.0, w_bg=0.5, epochs=50, learning_rate=0.1, n_hidden=16,
                 voxel_size=0.4, norm_range=75.0, random_state=0):
        self.w_fr = w_fr
        self.w_bg = w_bg
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.n_hidden = n_hidden
        self.voxel_size = voxel_size
        self.norm_range = norm_range
        self.random_state = random_state

    def _schedule(self) -> MaskSchedule:
        return MaskSchedule(self.w_fr, self.w_bg, self.random_state)

    def fit(self, scenes, labels=None, init: OccupancyPredictor | None = None):
        if int(self.epochs) < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if len(scenes) == 0:
            raise ValueError("need at least one scene")
        labels = labels if labels is not None else [[] for _ in scenes]
        sched = self._schedule()
        data = [WarmupScene.build(s, lb, self.voxel_size) for s, lb in zip(scenes, labels)]
        pred = init if init is not None else OccupancyPredictor.initialize(N_FEATURES, self.n_hidden,
                                                                           self.random_state)
        rng = np.random.default_rng(self.random_state)
        trace = []
        for epoch in range(int(self.epochs)):
            losses = []
            for s_idx, ws in enumerate(data):
                X, y = ws.sample_batch(sched, rng, self.norm_range)
                if len(y) == 0:
                    continue
                loss, grads = pred.loss_and_grads(X, y)
                if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                    raise WarmupDivergenceError(
                        f"non-finite loss/gradient at epoch {epoch}, scene {s_idx} (loss={loss})")
                for param, g in zip(pred.parameters(), grads):
                    param -= self.learning_rate * g
                losses.append(loss)
            trace.append(float(np.mean(losses)) if losses else float("nan"))
        pred.loss_trace = trace
        self.predictor_ = pred
        self.loss_trace_ = trace
        return self

    def score(self, scenes, labels=None) -> float:
        check_is_fitted(self, "predictor_")
        return balanced_accuracy(self.predictor_, scenes, labels, self._schedule(), self.voxel_size,
                                 self.norm_range)


def balanced_accuracy(pred: OccupancyPredictor, scenes, labels=None, sched: MaskSchedule = MaskSchedule(),
                      voxel_size: float = 0.4, norm_range: float = 75.0) -> float:
    """Balanced accuracy of thresholded occupancy predictions on freshly masked scenes."""
    labels = labels if labels is not None else [[] for _ in scenes]
    rng = np.random.default_rng(sched.seed)
    tp = tn = n_pos = n_neg = 0
    for s, lb in zip(scenes, labels):
        X, y = WarmupScene.build(s, lb, voxel_size).sample_batch(sched, rng, norm_range)
        hat = pred.predict_proba(X) >= 0.5
        tp += int((hat & (y == 1)).sum())
        tn += int((~hat & (y == 0)).sum())
        n_pos += int((y == 1).sum())
        n_neg += int((y == 0).sum())
    tpr = tp / n_pos if n_pos else 0.0
    tnr = tn / n_neg if n_neg else 0.0
    return 0.5 * (tpr + tnr)


def export_warmup(pred: OccupancyPredictor, path) -> None:
    n_in, n_hidden, n_out = pred.layer_sizes
    buf = io.BytesIO()
    buf.write(FORMAT_MAGIC)
    buf.write(struct.pack("<HH", FORMAT_VERSION, 3))
    buf.write(struct.pack("<3I", n_in, n_hidden, n_out))
    for p in pred.parameters():
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def import_warmup(path) -> OccupancyPredictor:
    data = Path(path).read_bytes()
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise WarmupFormatError(f"file truncated at offset {len(data)} while reading {what} "
                                    f"(needed {n} bytes at offset {offset})")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if take(len(FORMAT_MAGIC), "magic") != FORMAT_MAGIC:
        raise WarmupFormatError("bad magic at offset 0: not a warm-up parameter file")
    version, n_layers = struct.unpack("<HH", take(4, "version header"))
    if version != FORMAT_VERSION:
        raise WarmupVersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    if n_layers != 3:
        raise WarmupFormatError(f"expected 3 layer sizes at offset {offset - 2}, got {n_layers}")
    n_in, n_hidden, n_out = struct.unpack("<3I", take(12, "layer sizes"))
    if n_out != 1:
        raise WarmupFormatError(f"output size must be 1, got {n_out}")
    shapes = [(n_hidden, n_in), (n_hidden,), (n_hidden,), (1,)]
    params = []
    for i, shape in enumerate(shapes):
        count = int(np.prod(shape))
        raw = take(8 * count, f"parameter block {i}")
        params.append(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
    if offset != len(data):
        raise WarmupFormatError(f"{len(data) - offset} trailing bytes after offset {offset}")
    return OccupancyPredictor(*params)
