"""The bundled synthetic refinement benchmark shared by the CLI and the acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .aggregation import build_dense_scene
from .bench import CorruptionSpec, SceneSpec, SyntheticDrive, corrupt_labels, generate_drive
from .geometry import Box3D, PointCloud

BENCH_SCENE = SceneSpec(objects=(("VEHICLE", 6), ("PEDESTRIAN", 3), ("CYCLIST", 3)), n_frames=8, clutter=6, seed=0)
BENCH_CORRUPTION = CorruptionSpec(fp_rate=0.3, size_sigma=0.1)


@dataclass
class BenchmarkData:
    drive: SyntheticDrive
    scenes: list[PointCloud]
    truth: list[list[Box3D]]
    corrupted: list[list[Box3D]]
    poses: list[np.ndarray]
    corruption_log: list[list[dict]] = field(default_factory=list)

    @property
    def frame_ids(self) -> list[int]:
        return [s.frame_id for s in self.scenes]


def build_benchmark(scene_spec: SceneSpec = BENCH_SCENE, corruption: CorruptionSpec = BENCH_CORRUPTION,
                    corruption_seed: int | None = None, dense_kwargs: dict | None = None,
                    map_fn=map) -> BenchmarkData:
    """Generate a drive, build its dense scenes, and corrupt its ground truth frame by frame.

    ``map_fn`` lets callers parallelize the per-frame scene construction;
    results are merged in frame order.
    """
    drive = generate_drive(scene_spec)
    frames = drive.frames
    kw = dict(dense_kwargs or {})
    kw.setdefault("seed", scene_spec.seed)
    scenes = list(map_fn(lambda f: build_dense_scene(drive.sequence(f), **kw).scene, frames))
    truth = [drive.truth(f) for f in frames]
    base = scene_spec.seed if corruption_seed is None else corruption_seed
    corrupted, logs = [], []
    for i, t in enumerate(truth):
        boxes, log = corrupt_labels(t, corruption, seed=base * 1000 + i)
        corrupted.append(boxes)
        logs.append(log)
    return BenchmarkData(drive, scenes, truth, corrupted, [drive.poses[f] for f in frames], logs)


def frames_dict(frame_ids: Sequence[int], labels: Sequence[Sequence[Box3D]]) -> dict[int, list[Box3D]]:
    return {int(f): list(lb) for f, lb in zip(frame_ids, labels)}
