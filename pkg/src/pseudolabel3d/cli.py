"""Command-line front end: one subcommand per pipeline stage plus an end-to-end run."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import SweepSequence, build_dense_scene
from .bench import evaluate, generate_drive
from .clustering import InitialLabeler
from .config import ConfigError, PipelineConfig, load_config
from .detectors import PassThroughDetector, ToyGridDetector
from .geometry import Box3D, PointCloud
from .io import (read_labels, read_poses, read_sweep_bin, write_branches_csv, write_cues_jsonl, write_json,
                 write_labels, write_poses, write_report, write_sweep_bin)
from .reasoning import (DEFAULT_TEMPLATE, ReasonerConfigError, RemoteReasoner, ReplayReasoner,
                        RuleBasedReasoner)
from .selftrain import SelfTrainConfig, refine_frames, self_train
from .warmup import OccupancyWarmup, export_warmup, import_warmup

log = logging.getLogger("pseudolabel3d")

EXIT_OK, EXIT_FAILURE, EXIT_MISSING, EXIT_CONFIG, EXIT_REASONER = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str, **details):
        super().__init__(message)
        self.code = code
        self.details = details


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"{what} not found: {p}", path=str(p))
    return p


class Context:
    """Resolved configuration plus helpers shared by the subcommands."""

    def __init__(self, cfg: PipelineConfig, output: Path, command: str):
        self.cfg = cfg
        self.output = output
        self.command = command
        self.threads = cfg.threads or os.cpu_count() or 1

    def map(self, fn, items):
        items = list(items)
        if self.threads <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    def echo(self, directory: Path | None = None, **extra) -> None:
        """Write the effective config and run metadata next to the outputs."""
        d = directory or self.output
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.yaml").write_text(self.cfg.to_yaml())
        write_json(d / "run.json", {"tool": "pseudolabel3d", "version": __version__, "command": self.command,
                                    "seed": self.cfg.seed, "template_id": DEFAULT_TEMPLATE,
                                    "s_cons_orientation": "inverted" if self.cfg.cues.invert_s_cons
                                    else "as_written", **extra})

    def reasoner(self):
        rc = self.cfg.reasoner
        protos = self.cfg.size_prototypes()
        rules = RuleBasedReasoner(prototypes=protos, size_tolerance=rc.size_tolerance, min_points=rc.min_points,
                                  density_fraction=rc.density_fraction, correction_gain=rc.correction_gain,
                                  max_correction=rc.max_correction)
        if rc.kind == "rules":
            return rules
        if rc.kind == "remote":
            endpoint = rc.endpoint or os.environ.get("OWL_LLM_ENDPOINT")
            if not endpoint:
                raise CliError(EXIT_REASONER, "remote reasoner requested but no endpoint is configured "
                                              "(set reasoner.endpoint or OWL_LLM_ENDPOINT)")
            log_path = rc.log_path or str(self.output / "reasoner_log.jsonl")
            self.output.mkdir(parents=True, exist_ok=True)
            return RemoteReasoner(endpoint, os.environ.get("OWL_LLM_API_KEY"),
                                  rc.model or os.environ.get("OWL_LLM_MODEL", "default"), rc.timeout,
                                  rc.max_retries, rc.backoff, rc.batch_size, rc.max_in_flight, log_path,
                                  protos, rules)
        if not rc.log_path:
            raise CliError(EXIT_MISSING, "replay reasoner needs reasoner.log_path")
        _require(rc.log_path, "reasoner replay log")
        return ReplayReasoner(rc.log_path, rc.batch_size, protos, rules).fit()

    def dense_scene(self, seq: SweepSequence) -> PointCloud:
        m = self.cfg.mar
        return build_dense_scene(seq, m.tau_static, m.neighborhood_radius, m.ground_inlier_distance,
                                 m.ground_max_iterations, seed=self.cfg.seed).scene

    def labeler(self) -> InitialLabeler:
        c = self.cfg.clustering
        return InitialLabeler(c.alpha, c.beta, c.r0, c.min_points, c.reference_count, c.nms_threshold)

    def detector(self, backbone=None):
        st = self.cfg.selftrain
        if st.detector == "passthrough":
            return PassThroughDetector()
        c = self.cfg.clustering
        return ToyGridDetector(epochs=st.epochs, learning_rate=st.learning_rate,
                               score_threshold=st.score_threshold, nms_threshold=st.nms_threshold,
                               loss_weights=st.loss_weights(), backbone=backbone,
                               voxel_size=self.cfg.warmup.voxel_size,
                               proposal_params=dict(alpha=c.alpha, beta=c.beta, r0=c.r0,
                                                    min_points=c.min_points,
                                                    reference_count=c.reference_count,
                                                    nms_threshold=c.nms_threshold))

    def selftrain_config(self) -> SelfTrainConfig:
        st = self.cfg.selftrain
        return SelfTrainConfig(tuple(a.augmentation() for a in st.tta), st.nms_threshold, st.loss_weights(),
                               self.cfg.cues.config(), self.cfg.refine_config(), self.cfg.size_prototypes())


# workspace layout ---------------------------------------------------------

def _sweep_path(d: Path, i: int) -> Path:
    return d / "sweeps" / f"{i:06d}.bin"


def _dense_path(d: Path, fid: int) -> Path:
    return d / "dense" / f"{fid:06d}.bin"


def _load_dense(workdir: Path):
    manifest = json.loads(_require(workdir / "dense.json", "dense-scene manifest").read_text())
    frames = [int(f) for f in manifest["frames"]]
    scenes = [read_sweep_bin(_require(_dense_path(workdir, f), "dense scene"), f) for f in frames]
    poses = read_poses(_require(workdir / "poses.txt", "pose file"))
    return scenes, [poses[i] for i in manifest["pose_index"]]


def _labels_for(scenes, frames: dict[int, list[Box3D]]) -> list[list[Box3D]]:
    return [frames.get(s.frame_id, []) for s in scenes]


# subcommands --------------------------------------------------------------

def cmd_generate(ctx: Context, args) -> dict:
    """Synthetic drive: sweeps, poses and ground truth for every center frame."""
    spec = ctx.cfg.scene.scene_spec(ctx.cfg.seed)
    drive = generate_drive(spec)
    out = ctx.output
    for i, sweep in enumerate(drive.sweeps):
        write_sweep_bin(_sweep_path(out, i), sweep)
    write_poses(out / "poses.txt", drive.poses)
    write_labels(out, {f: drive.truth(f) for f in drive.frames}, "truth")
    write_json(out / "sequence.json", {"n_sweeps": len(drive.sweeps), "n_context": spec.n_context,
                                       "frames": drive.frames})
    ctx.echo()
    return {"frames": len(drive.frames), "sweeps": len(drive.sweeps)}


def cmd_labels(ctx: Context, args) -> dict:
    """Dense scenes and clustering-based initial labels for every center frame."""
    data = _require(args.input, "input directory")
    seq_meta = json.loads(_require(data / "sequence.json", "sequence manifest").read_text())
    poses = read_poses(_require(data / "poses.txt", "pose file"))
    n = int(seq_meta["n_context"])
    frames = [int(f) for f in seq_meta["frames"]]
    sweeps = [read_sweep_bin(_require(_sweep_path(data, i), "sweep"), i) for i in range(seq_meta["n_sweeps"])]
    scenes = ctx.map(lambda f: ctx.dense_scene(SweepSequence(sweeps[f - n:f + n + 1], poses[f - n:f + n + 1])),
                     frames)
    labeler = ctx.labeler()
    labels = ctx.map(labeler.predict, scenes)
    out = ctx.output
    for s in scenes:
        write_sweep_bin(_dense_path(out, s.frame_id), s)
    write_poses(out / "poses.txt", poses)
    write_json(out / "dense.json", {"frames": frames, "pose_index": frames})
    write_labels(out, {f: lb for f, lb in zip(frames, labels)})
    ctx.echo()
    return {"frames": len(frames), "labels": sum(map(len, labels))}


def cmd_warmup(ctx: Context, args) -> dict:
    work = _require(args.input, "input directory")
    scenes, _ = _load_dense(work)
    labels = _labels_for(scenes, read_labels(_require(args.labels or work / "labels.txt", "label file")))
    w = ctx.cfg.warmup
    est = OccupancyWarmup(w.w_fr, w.w_bg, w.epochs, w.learning_rate, w.n_hidden, w.voxel_size,
                          random_state=ctx.cfg.seed).fit(scenes, labels)
    ctx.output.mkdir(parents=True, exist_ok=True)
    export_warmup(est.predictor_, ctx.output / "warmup.bin")
    write_json(ctx.output / "loss_trace.json", {"loss": est.loss_trace_})
    ctx.echo()
    return {"initial_loss": est.loss_trace_[0], "final_loss": est.loss_trace_[-1]}


def cmd_cues(ctx: Context, args) -> dict:
    from .cues import mine_cues
    work = _require(args.input, "input directory")
    scenes, poses = _load_dense(work)
    labels = _labels_for(scenes, read_labels(_require(args.labels or work / "labels.txt", "label file")))
    records = mine_cues(scenes, labels, ctx.cfg.size_prototypes(), ctx.cfg.cues.config(), poses)
    ctx.output.mkdir(parents=True, exist_ok=True)
    write_cues_jsonl(ctx.output / "cues.jsonl", records)
    ctx.echo()
    return {"records": len(records)}


def _run_refine(ctx: Context, scenes, poses, labels, out: Path) -> tuple[list[list[Box3D]], dict]:
    st = ctx.cfg.selftrain
    refined = refine_frames(scenes, labels, ctx.reasoner(), ctx.cfg.size_prototypes(), ctx.cfg.cues.config(),
                            ctx.cfg.refine_config(), st.loss_weights(), poses)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(out, {fr.frame_id: fr.boxes for fr in refined})
    write_branches_csv(out / "branches.csv", [(fr.frame_id, fr.counts) for fr in refined])
    write_cues_jsonl(out / "cues.jsonl", [c for fr in refined for c in fr.cues])
    with open(out / "verdicts.jsonl", "w") as fh:
        for fr in refined:
            for i, v in enumerate(fr.verdicts):
                fh.write(json.dumps({"frame_id": fr.frame_id, "box_index": i, **v.to_dict()}, sort_keys=True)
                         + "\n")
    totals = {k: sum(fr.counts[k] for fr in refined) for k in "ABC"}
    return [fr.boxes for fr in refined], totals


def cmd_refine(ctx: Context, args) -> dict:
    work = _require(args.input, "input directory")
    scenes, poses = _load_dense(work)
    labels = _labels_for(scenes, read_labels(_require(args.labels or work / "labels.txt", "label file")))
    _, totals = _run_refine(ctx, scenes, poses, labels, ctx.output)
    ctx.echo(branches=totals)
    return {"input": sum(map(len, labels)), **totals}


def _run_selftrain(ctx: Context, scenes, poses, labels, out: Path, backbone=None, truth=None):
    return self_train(scenes, labels, ctx.detector(backbone), ctx.cfg.selftrain.rounds, ctx.selftrain_config(),
                      ctx.reasoner(), poses=poses, truth=truth, output_dir=out)


def cmd_selftrain(ctx: Context, args) -> dict:
    work = _require(args.input, "input directory")
    scenes, poses = _load_dense(work)
    labels = _labels_for(scenes, read_labels(_require(args.labels or work / "labels.txt", "label file")))
    backbone = import_warmup(_require(args.warmup, "warm-up file")) if args.warmup else None
    truth = _labels_for(scenes, read_labels(_require(args.truth, "truth file"))) if args.truth else None
    history = _run_selftrain(ctx, scenes, poses, labels, ctx.output, backbone, truth)
    ctx.echo()
    return {"rounds": [h.metrics for h in history]}


def cmd_eval(ctx: Context, args) -> dict:
    pred = read_labels(_require(args.pred, "prediction file"))
    truth = read_labels(_require(args.truth, "truth file"))
    frames = sorted(set(truth) | set(pred))
    report = evaluate({f: pred.get(f, []) for f in frames}, {f: truth.get(f, []) for f in frames},
                      class_aware=not args.class_agnostic)
    write_report(ctx.output, report)
    ctx.echo()
    return {k: {"precision": v["precision"], "recall": v["recall"]} for k, v in report.overall.items()}


def cmd_e2e(ctx: Context, args) -> dict:
    """Generate, label, warm up, refine, self-train and evaluate on the bundled synthetic drive."""
    out = ctx.output
    stages = {}
    for name, fn, sub, extra in [("generate", cmd_generate, "data", {}),
                                 ("labels", cmd_labels, "labels", {"input": out / "data"})]:
        sub_ctx = Context(ctx.cfg, out / sub, name)
        sub_ctx.threads = ctx.threads
        stages[name] = fn(sub_ctx, argparse.Namespace(**extra))
    scenes, poses = _load_dense(out / "labels")
    truth = _labels_for(scenes, read_labels(out / "data" / "truth.txt"))
    initial = _labels_for(scenes, read_labels(out / "labels" / "labels.txt"))

    w = ctx.cfg.warmup
    est = OccupancyWarmup(w.w_fr, w.w_bg, w.epochs, w.learning_rate, w.n_hidden, w.voxel_size,
                          random_state=ctx.cfg.seed).fit(scenes, initial)
    (out / "warmup").mkdir(parents=True, exist_ok=True)
    export_warmup(est.predictor_, out / "warmup" / "warmup.bin")
    write_json(out / "warmup" / "loss_trace.json", {"loss": est.loss_trace_})
    backbone = import_warmup(out / "warmup" / "warmup.bin") if w.warm_start_detector else None

    refined, totals = _run_refine(ctx, scenes, poses, initial, out / "refine")
    history = _run_selftrain(ctx, scenes, poses, refined, out / "selftrain", backbone, truth)
    final = history[-1].labels

    fids = [s.frame_id for s in scenes]
    # clustering boxes carry no class, so they are matched on geometry alone
    write_report(out / "eval" / "initial", evaluate(dict(zip(fids, initial)), dict(zip(fids, truth)),
                                                    class_aware=False))
    write_report(out / "eval" / "refined", evaluate(dict(zip(fids, refined)), dict(zip(fids, truth))))
    report = evaluate(final, dict(zip(fids, truth)))
    report.branch_stats = totals
    write_report(out / "eval" / "final", report)
    ctx.echo(branches=totals)
    return {"branches": totals, "final": report.overall, "rounds": [h.metrics for h in history]}


COMMANDS = {"generate": cmd_generate, "labels": cmd_labels, "warmup": cmd_warmup, "cues": cmd_cues,
            "refine": cmd_refine, "selftrain": cmd_selftrain, "eval": cmd_eval, "e2e": cmd_e2e}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON pipeline configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--output", "-o", required=True, help="output directory")
    common.add_argument("--reasoner", choices=["rules", "remote", "replay"], help="label reasoner")
    common.add_argument("--threads", type=int, help="per-frame worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pseudolabel3d", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic drive")
    for name, helptext in [("labels", "dense scenes and initial labels"), ("warmup", "occupancy warm-up"),
                           ("cues", "mine per-box cues"), ("refine", "reason and refine labels"),
                           ("selftrain", "weighted self-training rounds")]:
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--input", "-i", required=True)
        if name != "labels":
            sp.add_argument("--labels", help="label file (default: INPUT/labels.txt)")
        if name == "selftrain":
            sp.add_argument("--warmup", help="warm-up parameter file for the detector")
            sp.add_argument("--truth", help="ground truth for the per-round metrics")
    ev = sub.add_parser("eval", parents=[common], help="score predictions against truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--class-agnostic", action="store_true", help="match boxes on geometry alone")
    sub.add_parser("e2e", parents=[common], help="run every stage on the bundled synthetic drive")
    return p


def _fail(code: int, message: str, **details) -> int:
    print(json.dumps({"error": message, "exit_code": code, **details}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            _require(args.config, "config file")
        cfg = load_config(args.config, {"seed": args.seed, "threads": args.threads,
                                        "reasoner.kind": args.reasoner})
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc), keys=exc.keys)
    except CliError as exc:
        return _fail(exc.code, str(exc), **exc.details)
    np.seterr(over="ignore", under="ignore")
    ctx = Context(cfg, Path(args.output), args.command)
    try:
        summary = COMMANDS[args.command](ctx, args)
    except CliError as exc:
        return _fail(exc.code, str(exc), **exc.details)
    except ReasonerConfigError as exc:
        return _fail(EXIT_REASONER, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, str(exc))
    print(json.dumps({"command": args.command, "output": str(ctx.output), **summary}, sort_keys=True,
                     default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
