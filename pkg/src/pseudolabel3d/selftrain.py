"""Weight-adapted self-training: train, infer with TTA, mine cues, refine, repeat."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bench import evaluate
from .cues import CueConfig, CueRecord, SizePrototypes, mine_cues
from .detectors import IDENTITY, Augmentation, DetectorDivergenceError, tta_infer
from .geometry import Box3D, PointCloud
from .io import write_branches_csv, write_json, write_labels
from .losses import LossWeights, sample_weight
from .reasoning import ReasonerRequest, ReasonerVerdict, RefineConfig, refine
from .warmup import WarmupDivergenceError

log = logging.getLogger(__name__)


@dataclass
class FrameRefinement:
    frame_id: int
    boxes: list[Box3D]
    counts: dict[str, int]
    cues: list[CueRecord]
    verdicts: list[ReasonerVerdict]


def refine_frames(scenes: Sequence[PointCloud], labels: Sequence[Sequence[Box3D]], reasoner,
                  prototypes: SizePrototypes | None = None, cue_config: CueConfig = CueConfig(),
                  refine_config: RefineConfig = RefineConfig(), weights: LossWeights = LossWeights(),
                  poses=None, sensor_range: float = 75.0) -> list[FrameRefinement]:
    """Cue mining, reasoning and refinement over aligned frames.

    Surviving boxes carry ``omega = lambda1 * s_cons + lambda2 * s_rea`` as
    their weight, times the downweight factor for replaced-size boxes.
    """
    prototypes = prototypes or SizePrototypes()
    cues = mine_cues(scenes, labels, prototypes, cue_config, poses)
    out, k = [], 0
    for scene, boxes in zip(scenes, labels):
        frame_cues = cues[k:k + len(boxes)]
        k += len(boxes)
        verdicts = list(reasoner.predict(ReasonerRequest(scene.frame_id, list(boxes), frame_cues,
                                                          sensor_range)))
        if len(verdicts) != len(boxes):
            raise RuntimeError(f"reasoner returned {len(verdicts)} verdicts for {len(boxes)} boxes")
        res = refine(boxes, verdicts, frame_cues, refine_config)
        kept = []
        for box, branch_src in zip(res.boxes, res.source_index):
            cue, v = frame_cues[branch_src], verdicts[branch_src]
            omega = sample_weight(cue.s_cons, v.s_rea, weights)
            expected = weights.lambda1 * cue.s_cons + weights.lambda2 * v.s_rea
            assert omega == expected
            factor = refine_config.downweight_factor if res.branches[branch_src] == "B" else 1.0
            kept.append(box.replace(weight=omega * factor))
        if sum(res.counts.values()) != len(boxes):
            raise RuntimeError("branch counts do not cover the input")
        out.append(FrameRefinement(scene.frame_id, kept, res.counts, frame_cues, verdicts))
    return out


@dataclass
class SelfTrainConfig:
    augmentations: tuple[Augmentation, ...] = (IDENTITY,)
    nms_threshold: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    cue: CueConfig = field(default_factory=CueConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    prototypes: SizePrototypes = field(default_factory=SizePrototypes)
    sensor_range: float = 75.0


@dataclass
class RoundRecord:
    round: int
    labels: dict[int, list[Box3D]]
    counts: dict[int, dict[str, int]]
    metrics: dict
    diverged: bool = False
    error: str = ""


def _metrics(labels: dict[int, list[Box3D]], truth) -> dict:
    n = sum(len(v) for v in labels.values())
    out: dict = {"n_labels": n}
    if truth is not None:
        rep = evaluate(labels, truth)
        out.update({f"precision@{k}": v["precision"] for k, v in rep.overall.items()})
        out.update({f"recall@{k}": v["recall"] for k, v in rep.overall.items()})
        out.update({f"ap@{k}": v["ap"] for k, v in rep.overall.items()})
    return out


def self_train(scenes: Sequence[PointCloud], initial: Sequence[Sequence[Box3D]], detector, rounds: int,
               cfg: SelfTrainConfig | None = None, reasoner=None, poses=None, truth=None,
               output_dir=None) -> list[RoundRecord]:
    """Run ``rounds`` self-training rounds and return one record per round.

    ``truth`` (per-frame boxes aligned with ``scenes``) only feeds the
    metrics trace. A round whose training diverges keeps the previous
    labels and is flagged.
    """
    if int(rounds) < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    if len(scenes) != len(initial):
        raise ValueError(f"{len(scenes)} scenes but {len(initial)} label sets")
    cfg = cfg or SelfTrainConfig()
    if reasoner is None:
        from .reasoning import RuleBasedReasoner
        reasoner = RuleBasedReasoner(prototypes=cfg.prototypes)
    truth_map = None if truth is None else {s.frame_id: list(t) for s, t in zip(scenes, truth)}
    current = [list(lb) for lb in initial]
    history = []
    for k in range(1, int(rounds) + 1):
        diverged, err = False, ""
        try:
            detector.fit(scenes, current)
            preds = [tta_infer(detector, s, cfg.augmentations, cfg.nms_threshold) for s in scenes]
            for p in preds:
                if any(not np.isfinite(b.to_array()).all() for b in p):
                    raise DetectorDivergenceError("non-finite box from detector")
            refined = refine_frames(scenes, preds, reasoner, cfg.prototypes, cfg.cue, cfg.refine,
                                    cfg.weights, poses, cfg.sensor_range)
            current = [fr.boxes for fr in refined]
            counts = {fr.frame_id: fr.counts for fr in refined}
        except (DetectorDivergenceError, WarmupDivergenceError, FloatingPointError) as exc:
            log.warning("round %d aborted: %s", k, exc)
            diverged, err = True, str(exc)
            counts = {s.frame_id: {"A": 0, "B": 0, "C": 0} for s in scenes}
        labels = {s.frame_id: list(lb) for s, lb in zip(scenes, current)}
        metrics = _metrics(labels, truth_map)
        metrics.update({"round": k, "diverged": diverged})
        for b in (b for lb in current for b in lb):
            if not (math.isfinite(b.weight) and b.l > 0 and b.w > 0 and b.h > 0):
                raise AssertionError(f"round {k} produced an invalid box {b}")
        rec = RoundRecord(k, labels, counts, metrics, diverged, err)
        history.append(rec)
        if output_dir is not None:
            persist_round(Path(output_dir), rec)
    return history


def persist_round(output_dir: Path, rec: RoundRecord) -> None:
    d = output_dir / f"round_{rec.round}"
    d.mkdir(parents=True, exist_ok=True)
    write_labels(d, rec.labels)
    write_json(d / "metrics.json", {**rec.metrics, "error": rec.error})
    write_branches_csv(d / "branches.csv", sorted(rec.counts.items()))
