"""Readers and writers for sweeps, poses, labels, cues and evaluation reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cues import CueRecord, box_from_dict, box_to_dict
from .geometry import Box3D, BoxClass, PointCloud

LABEL_COLUMNS = ("frame_id", "x", "y", "z", "l", "w", "h", "yaw", "class", "score", "weight")


def read_sweep_bin(path, frame_id: int = 0) -> PointCloud:
    """KITTI-style float32 ``(x, y, z, intensity)`` quadruples."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"{path}: size {raw.size * 4} bytes is not a multiple of 16")
    pts = raw.reshape(-1, 4).astype(np.float64)
    return PointCloud(pts[:, :3], pts[:, 3], frame_id)


def write_sweep_bin(path, cloud: PointCloud) -> None:
    data = np.hstack([cloud.xyz, cloud.intensity[:, None]]).astype("<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data.tofile(path)


def read_poses(path) -> list[np.ndarray]:
    """One row-major 4x4 pose per line (16 floats)."""
    poses = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 16:
            raise ValueError(f"{path}:{ln}: expected 16 values, got {len(vals)}")
        poses.append(np.array(vals).reshape(4, 4))
    return poses


def write_poses(path, poses: Iterable[np.ndarray]) -> None:
    lines = [" ".join(repr(float(v)) for v in np.asarray(p).ravel()) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def _label_row(frame_id: int, b: Box3D) -> str:
    vals = [b.x, b.y, b.z, b.l, b.w, b.h, b.yaw]
    return " ".join([str(int(frame_id))] + [repr(float(v)) for v in vals]
                    + [b.cls.name, repr(float(b.score)), repr(float(b.weight))])


def write_labels_txt(path, frames: Mapping[int, Sequence[Box3D]]) -> None:
    """``frame_id x y z l w h yaw class score weight``, one box per line, frames in order."""
    lines = ["# " + " ".join(LABEL_COLUMNS)]
    for fid in sorted(frames):
        lines.extend(_label_row(fid, b) for b in frames[fid])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels_txt(path) -> dict[int, list[Box3D]]:
    frames: dict[int, list[Box3D]] = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != len(LABEL_COLUMNS):
            raise ValueError(f"{path}:{ln}: expected {len(LABEL_COLUMNS)} fields, got {len(parts)}")
        fid = int(parts[0])
        x, y, z, l, w, h, yaw = (float(v) for v in parts[1:8])
        frames.setdefault(fid, []).append(
            Box3D(x, y, z, l, w, h, yaw, BoxClass.parse(parts[8]), float(parts[9]), float(parts[10])))
    return frames


def write_labels_jsonl(path, frames: Mapping[int, Sequence[Box3D]]) -> None:
    with open(path, "w") as fh:
        for fid in sorted(frames):
            for b in frames[fid]:
                fh.write(json.dumps({"frame_id": int(fid), **box_to_dict(b)}, sort_keys=True) + "\n")


def read_labels_jsonl(path) -> dict[int, list[Box3D]]:
    frames: dict[int, list[Box3D]] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                frames.setdefault(int(d["frame_id"]), []).append(box_from_dict(d))
    return frames


def read_labels(path) -> dict[int, list[Box3D]]:
    return read_labels_jsonl(path) if str(path).endswith(".jsonl") else read_labels_txt(path)


def write_labels(directory, frames: Mapping[int, Sequence[Box3D]], stem: str = "labels") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_labels_txt(directory / f"{stem}.txt", frames)
    write_labels_jsonl(directory / f"{stem}.jsonl", frames)


def write_cues_jsonl(path, records: Sequence[CueRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_cues_jsonl(path) -> list[CueRecord]:
    with open(path) as fh:
        return [CueRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_branches_csv(path, rows: Sequence[tuple[int, Mapping[str, int]]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame_id", "A", "B", "C"])
        for fid, counts in rows:
            wr.writerow([fid, counts.get("A", 0), counts.get("B", 0), counts.get("C", 0)])


def write_report(directory, report) -> None:
    """``report.json``, ``per_frame.csv`` and ``iou_histogram.csv`` for an ``EvalReport``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    write_json(directory / "report.json", d)
    per_frame = report.per_frame
    with open(directory / "per_frame.csv", "w", newline="") as fh:
        if per_frame:
            keys = sorted(per_frame[0])
            wr = csv.DictWriter(fh, fieldnames=keys)
            wr.writeheader()
            for row in per_frame:
                wr.writerow(row)
    hist = d.get("iou_histogram", {})
    with open(directory / "iou_histogram.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["lower", "upper", "count"])
        for lo, hi, c in zip(hist.get("edges", [])[:-1], hist.get("edges", [])[1:], hist.get("counts", [])):
            wr.writerow([lo, hi, c])
