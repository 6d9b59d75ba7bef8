"""Detectors trainable on weighted pseudo-labels, and test-time augmentation."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .clustering import InitialLabeler
from .geometry import (Box3D, BoxClass, PointCloud, iou_bev, nms, points_in_box, rigid_transform_box,
                       voxelize)
from .losses import LossWeights, WeightedSample, total_loss
from .warmup import OccupancyPredictor, neighborhood_features

N_CLASSES = 5
BACKGROUND = 4


class DetectorDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Augmentation:
    """``p -> scale * Rz(rotation) @ flip_y(p)``."""

    flip_y: bool = False
    rotation: float = 0.0
    scale: float = 1.0

    def apply_points(self, xyz: np.ndarray) -> np.ndarray:
        out = np.array(xyz, dtype=np.float64, copy=True)
        if self.flip_y:
            out[:, 1] = -out[:, 1]
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        x, y = out[:, 0].copy(), out[:, 1].copy()
        out[:, 0], out[:, 1] = c * x - s * y, s * x + c * y
        return out * self.scale

    def apply_box(self, box: Box3D) -> Box3D:
        return rigid_transform_box(box, self.rotation, scale=self.scale, flip_y=self.flip_y)

    def invert_box(self, box: Box3D) -> Box3D:
        b = rigid_transform_box(box, -self.rotation, scale=1.0 / self.scale)
        return rigid_transform_box(b, flip_y=True) if self.flip_y else b

    def to_dict(self) -> dict:
        return {"flip_y": self.flip_y, "rotation": self.rotation, "scale": self.scale}


IDENTITY = Augmentation()
DEFAULT_TTA = (IDENTITY, Augmentation(flip_y=True), Augmentation(rotation=math.pi / 16, scale=1.05))


@dataclass
class AugmentedCloud(PointCloud):
    """A transformed view of ``base``; detectors may exploit the known transform."""

    base: PointCloud | None = None
    augmentation: Augmentation = field(default_factory=Augmentation)


def augment(scene: PointCloud, aug: Augmentation) -> AugmentedCloud:
    base = scene.base if isinstance(scene, AugmentedCloud) and scene.base is not None else scene
    if isinstance(scene, AugmentedCloud) and scene.augmentation != IDENTITY:
        raise ValueError("augmenting an already augmented cloud is not supported")
    return AugmentedCloud(aug.apply_points(scene.xyz), scene.intensity.copy(), scene.frame_id,
                          scene.source_frame, base=base, augmentation=aug)


def tta_infer(det, scene: PointCloud, augmentations: Sequence[Augmentation] = (IDENTITY,),
              nms_threshold: float = 0.1) -> list[Box3D]:
    """Infer under each augmentation, map boxes back, merge with NMS.

    With only the identity augmentation this is exactly ``det.predict``.
    """
    augmentations = list(augmentations)
    if augmentations == [IDENTITY]:
        return list(det.predict(scene))
    merged: list[Box3D] = []
    for aug in augmentations:
        boxes = det.predict(augment(scene, aug))
        merged.extend(aug.invert_box(b) for b in boxes)
    return nms(merged, nms_threshold)


class PassThroughDetector(BaseEstimator):
    """Echoes its training labels for each frame (mapped through any augmentation)."""

    def fit(self, scenes: Sequence[PointCloud], labels: Sequence[Sequence[Box3D]]):
        self.labels_ = {s.frame_id: list(lb) for s, lb in zip(scenes, labels)}
        return self

    def predict(self, scene: PointCloud) -> list[Box3D]:
        check_is_fitted(self, "labels_")
        boxes = self.labels_.get(scene.frame_id, [])
        aug = scene.augmentation if isinstance(scene, AugmentedCloud) else IDENTITY
        return [aug.apply_box(b) for b in boxes]


def encode_residual(proposal: Box3D, target: Box3D) -> np.ndarray:
    """Regression target on ``(x, y, z, log l, log w, log h, sin yaw, cos yaw)``.

    The target is first rewritten in whichever of its four equivalent
    (yaw, l, w) forms has yaw closest to the proposal's.
    """
    best = None
    for k in range(4):
        yaw = target.yaw + k * math.pi / 2
        l, w = (target.l, target.w) if k % 2 == 0 else (target.w, target.l)
        dyaw = abs(math.remainder(yaw - proposal.yaw, 2 * math.pi))
        if best is None or dyaw < best[0] - 1e-12:
            best = (dyaw, yaw, l, w)
    _, yaw, l, w = best
    diag = math.hypot(proposal.l, proposal.w)
    return np.array([
        (target.x - proposal.x) / diag, (target.y - proposal.y) / diag, (target.z - proposal.z) / proposal.h,
        math.log(l / proposal.l), math.log(w / proposal.w), math.log(target.h / proposal.h),
        math.sin(yaw) - math.sin(proposal.yaw), math.cos(yaw) - math.cos(proposal.yaw),
    ])


def decode_residual(proposal: Box3D, r: np.ndarray, **fields) -> Box3D:
    diag = math.hypot(proposal.l, proposal.w)
    r = np.clip(r, -5, 5)
    yaw = math.atan2(math.sin(proposal.yaw) + r[6], math.cos(proposal.yaw) + r[7])
    return Box3D(proposal.x + r[0] * diag, proposal.y + r[1] * diag, proposal.z + r[2] * proposal.h,
                 proposal.l * math.exp(r[3]), proposal.w * math.exp(r[4]), proposal.h * math.exp(r[5]),
                 yaw, **fields)


def _cloud_key(cloud: PointCloud) -> str:
    h = hashlib.sha1(np.ascontiguousarray(cloud.xyz).tobytes())
    h.update(str(cloud.frame_id).encode())
    return h.hexdigest()


class ToyGridDetector(BaseEstimator):
    """Linear proposal scorer trained with the weighted smooth-L1 + focal objective.

    Proposals are oriented boxes fitted to dynamic-radius clusters of the
    scene. Each proposal is described by point-count, size, height,
    intensity and range features; when ``backbone`` (a warm-up occupancy
    predictor) is set, the predictor's hidden activations are averaged over
    the proposal's voxels and appended, which is how warm-up weights reach
    the detector. A linear head gives class logits (four object classes
    plus background) and a box residual.
    """

    def __init__(self, epochs=300, learning_rate=0.05, score_threshold=0.5, iou_match=0.3,
                 nms_threshold=0.1, background_weight=1.0, loss_weights=None, backbone=None,
                 voxel_size=0.4, proposal_params=None):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.score_threshold = score_threshold
        self.iou_match = iou_match
        self.nms_threshold = nms_threshold
        self.background_weight = background_weight
        self.loss_weights = loss_weights
        self.backbone = backbone
        self.voxel_size = voxel_size
        self.proposal_params = proposal_params

    # proposals ---------------------------------------------------------
    def _proposals(self, scene: PointCloud) -> list[Box3D]:
        if not hasattr(self, "_cache"):
            self._cache = {}
        if isinstance(scene, AugmentedCloud) and scene.base is not None:
            return [scene.augmentation.apply_box(b) for b in self._proposals(scene.base)]
        key = _cloud_key(scene)
        if key not in self._cache:
            labeler = InitialLabeler(**(self.proposal_params or {}))
            self._cache[key] = labeler.predict(scene)
        return self._cache[key]

    def _backbone_features(self, scene: PointCloud, boxes: Sequence[Box3D]) -> np.ndarray:
        pred: OccupancyPredictor = self.backbone
        n_hidden = pred.W1.shape[0]
        if len(scene) == 0 or not boxes:
            return np.zeros((len(boxes), n_hidden))
        half = 60.0
        extent = int(math.ceil(2 * half / self.voxel_size))
        grid = voxelize(scene, (-half, -half, -3.0), self.voxel_size, (extent, extent, int(6 / self.voxel_size)))
        occ = grid.dense_occupancy()
        out = np.zeros((len(boxes), n_hidden))
        for i, b in enumerate(boxes):
            idx = points_in_box(scene, b)
            cells = grid.point_cell[idx]
            cells = np.unique(cells[cells >= 0])
            if len(cells) == 0:
                continue
            vox = np.array(np.unravel_index(cells, grid.extents)).T
            out[i] = pred.hidden(neighborhood_features(occ, vox, grid)).mean(axis=0)
        return out

    def features(self, scene: PointCloud, boxes: Sequence[Box3D]) -> np.ndarray:
        rows = []
        for b in boxes:
            idx = points_in_box(scene, b)
            n = len(idx)
            inten = float(scene.intensity[idx].mean()) if n else 0.0
            zstd = float(scene.xyz[idx, 2].std()) if n else 0.0
            rows.append([1.0, math.log1p(n) / 5, b.l / 5, b.w / 3, b.h / 2,
                         (b.l * b.w * b.h) ** (1 / 3) / 2, b.l / b.w / 3, inten,
                         math.hypot(b.x, b.y) / 75, (b.z + b.h / 2) / 2, zstd])
        feats = np.array(rows).reshape(len(boxes), -1)
        if self.backbone is not None:
            feats = np.hstack([feats, self._backbone_features(scene, boxes)])
        return feats

    # training ----------------------------------------------------------
    def _samples(self, scenes, labels):
        F, cls_t, reg_t, omega = [], [], [], []
        for scene, lb in zip(scenes, labels):
            props = self._proposals(scene)
            if not props:
                continue
            feats = self.features(scene, props)
            for p, f in zip(props, feats):
                best, best_iou = None, 0.0
                for t in lb:
                    iou = iou_bev(p, t)
                    if iou > best_iou:
                        best, best_iou = t, iou
                F.append(f)
                if best is not None and best_iou >= self.iou_match:
                    cls_t.append(int(best.cls))
                    reg_t.append(encode_residual(p, best))
                    omega.append(best.weight)
                else:
                    cls_t.append(BACKGROUND)
                    reg_t.append(None)
                    omega.append(self.background_weight)
        return np.array(F), cls_t, reg_t, np.array(omega, dtype=np.float64)

    def objective(self, params, F, cls_t, reg_t, omega):
        """Weighted total loss and its gradient in ``(W_cls, W_reg)``."""
        W_cls, W_reg = params
        logits = F @ W_cls.T
        regs = F @ W_reg.T
        samples = [WeightedSample(regs[i], logits[i], cls_t[i], float(omega[i]), reg_t[i])
                   for i in range(len(F))]
        loss, grads = total_loss(samples, self.loss_weights or LossWeights())
        g_reg = np.array([g[0] for g in grads])
        g_cls = np.array([g[1] for g in grads])
        return loss, (g_cls.T @ F, g_reg.T @ F)

    def _standardize(self, F: np.ndarray) -> np.ndarray:
        return (F - self.feature_mean_) / self.feature_scale_

    def fit(self, scenes: Sequence[PointCloud], labels: Sequence[Sequence[Box3D]]):
        F, cls_t, reg_t, omega = self._samples(scenes, labels)
        n_feat = F.shape[1] if len(F) else self.features(PointCloud(np.zeros((0, 3))), []).shape[1]
        # column 0 is the bias and stays at 1
        self.feature_mean_ = np.zeros(n_feat)
        self.feature_scale_ = np.ones(n_feat)
        if len(F):
            self.feature_mean_[1:] = F[:, 1:].mean(axis=0)
            self.feature_scale_[1:] = np.maximum(F[:, 1:].std(axis=0), 1e-6)
            F = self._standardize(F)
        W_cls = np.zeros((N_CLASSES, n_feat))
        W_reg = np.zeros((8, n_feat))
        trace = []
        if len(F):
            # Adam, full batch
            params = [W_cls, W_reg]
            m = [np.zeros_like(p) for p in params]
            v = [np.zeros_like(p) for p in params]
            b1, b2, eps = 0.9, 0.999, 1e-8
            for epoch in range(int(self.epochs)):
                loss, grads = self.objective((W_cls, W_reg), F, cls_t, reg_t, omega)
                if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                    raise DetectorDivergenceError(f"non-finite detector loss at epoch {epoch}")
                t = epoch + 1
                for p, g, mi, vi in zip(params, grads, m, v):
                    mi *= b1
                    mi += (1 - b1) * g
                    vi *= b2
                    vi += (1 - b2) * g * g
                    p -= self.learning_rate * (mi / (1 - b1 ** t)) / (np.sqrt(vi / (1 - b2 ** t)) + eps)
                trace.append(loss)
        self.W_cls_, self.W_reg_, self.loss_trace_ = W_cls, W_reg, trace
        self.n_samples_ = len(F)
        return self

    def predict(self, scene: PointCloud) -> list[Box3D]:
        check_is_fitted(self, "W_cls_")
        props = self._proposals(scene)
        if not props:
            return []
        F = self._standardize(self.features(scene, props))
        out = []
        for p, f in zip(props, F):
            z = self.W_cls_ @ f
            prob = np.exp(z - z.max())
            prob /= prob.sum()
            fg = 1.0 - prob[BACKGROUND]
            if fg < self.score_threshold:
                continue
            cls = BoxClass(int(np.argmax(prob[:BACKGROUND])))
            out.append(decode_residual(p, self.W_reg_ @ f, cls=cls, score=float(min(1.0, fg))))
        return nms(out, self.nms_threshold)
