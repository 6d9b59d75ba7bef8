"""Cue reasoners (rule-based, remote model, replay) and the three-branch label refiner."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import requests
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from sklearn.base import BaseEstimator

from .cues import CueRecord, SizePrototypes, nearest_prototype, size_divergence
from .geometry import KNOWN_CLASSES, Box3D, BoxClass

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "reasoner_prompt_v1"
MAX_BATCH = 32


class ReasonerConfigError(RuntimeError):
    """The remote reasoner is missing its endpoint or was refused authentication."""


class ReasonerAuthError(ReasonerConfigError):
    pass


class RefineWarning(UserWarning):
    pass


@dataclass
class ReasonerRequest:
    frame_id: int
    boxes: list[Box3D]
    cues: list[CueRecord]
    sensor_range: float = 75.0
    template_id: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if len(self.boxes) != len(self.cues):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.cues)} cue records")


@dataclass(frozen=True)
class ReasonerVerdict:
    keep: int
    s_rea: float
    delta: tuple[float, float, float]
    cls_new: BoxClass
    provenance: str = "rules"

    def __post_init__(self):
        if self.keep not in (0, 1):
            raise ValueError(f"keep must be 0 or 1, got {self.keep}")
        if not 0.0 <= self.s_rea <= 1.0:
            raise ValueError(f"s_rea must lie in [0, 1], got {self.s_rea}")
        object.__setattr__(self, "delta", tuple(float(v) for v in self.delta))
        object.__setattr__(self, "cls_new", BoxClass.parse(self.cls_new))

    def to_dict(self) -> dict:
        return {"keep": self.keep, "s_rea": self.s_rea, "delta": list(self.delta),
                "cls_new": self.cls_new.name, "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d) -> "ReasonerVerdict":
        return cls(int(d["keep"]), float(d["s_rea"]), tuple(d["delta"]), BoxClass.parse(d["cls_new"]),
                   d.get("provenance", "rules"))


class RuleBasedReasoner(BaseEstimator):
    """Deterministic stand-in for a large-model reasoner.

    Decision table, per box:

    * ``cls_new`` is the known class with the closest size proportions;
    * size is plausible when the proportion divergence is within
      ``size_tolerance`` and the volume is within ``volume_range`` times
      the prototype volume;
    * point density is plausible when the box holds at least
      ``density_fraction`` of the points expected for ``cls_new`` at its
      range (``expected_points`` at 10 m, falling off as 1/range);
    * a box is kept when it holds at least ``min_points`` points and its
      size is plausible or it is moving; density alone is not enough,
      since background structures are dense too;
    * ``s_rea`` sums fixed credits for plausible size, density and motion;
    * the size correction moves ``correction_gain`` of the way to the
      prototype, clipped to ``max_correction`` of each current dimension.
    """

    def __init__(self, prototypes=None, size_tolerance=0.02, volume_range=(0.3, 3.0), min_points=5,
                 expected_points=None, density_fraction=0.1, correction_gain=0.7, max_correction=0.3,
                 max_speed=40.0):
        self.prototypes = prototypes
        self.size_tolerance = size_tolerance
        self.volume_range = volume_range
        self.min_points = min_points
        self.expected_points = expected_points
        self.density_fraction = density_fraction
        self.correction_gain = correction_gain
        self.max_correction = max_correction
        self.max_speed = max_speed

    def fit(self, X=None, y=None):
        return self

    def _expected(self, cls: BoxClass) -> float:
        table = self.expected_points or {BoxClass.VEHICLE: 300.0, BoxClass.PEDESTRIAN: 60.0,
                                         BoxClass.CYCLIST: 80.0}
        return float(table.get(cls, 60.0))

    def judge(self, box: Box3D, cue: CueRecord) -> ReasonerVerdict:
        protos = self.prototypes or SizePrototypes()
        cls_new = nearest_prototype(box, protos)
        proto = protos[cls_new]
        divergence = max(0.0, size_divergence(proto, box.dims))
        vol_ratio = box.volume / float(np.prod(proto))
        size_ok = divergence <= self.size_tolerance and self.volume_range[0] <= vol_ratio <= self.volume_range[1]
        expected = self._expected(cls_new) * 10.0 / max(cue.distance, 10.0)
        density_ok = cue.point_count >= self.density_fraction * expected
        moving = cue.is_dynamic and cue.speed <= self.max_speed
        starved = cue.point_count < self.min_points

        keep = 0 if starved or not (size_ok or moving) else 1
        s_rea = 0.3 + 0.3 * size_ok + 0.2 * density_ok + 0.2 * moving
        if starved:
            s_rea = min(s_rea, 0.2)
        raw = self.correction_gain * (proto - box.dims)
        limit = self.max_correction * box.dims
        delta = np.clip(raw, -limit, limit)
        return ReasonerVerdict(keep, float(min(1.0, s_rea)), tuple(delta.tolist()), cls_new, "rules")

    def predict(self, request: ReasonerRequest) -> list[ReasonerVerdict]:
        return [self.judge(b, c) for b, c in zip(request.boxes, request.cues)]


class NoOpReasoner(BaseEstimator):
    """Keeps every box unchanged; used to isolate the rest of the loop."""

    def fit(self, X=None, y=None):
        return self

    def predict(self, request: ReasonerRequest) -> list[ReasonerVerdict]:
        return [ReasonerVerdict(1, 1.0, (0.0, 0.0, 0.0), b.cls, "noop") for b in request.boxes]


def reason_rule_based(request: ReasonerRequest, rules: RuleBasedReasoner | None = None) -> list[ReasonerVerdict]:
    return (rules or RuleBasedReasoner()).predict(request)


class WireVerdict(BaseModel):
    """One verdict as returned by the remote model."""

    model_config = ConfigDict(extra="ignore", populate_by_name=True)

    box_id: int
    keep: Literal[0, 1]
    score: float = Field(ge=0.0, le=1.0)
    dl: float
    dw: float
    dh: float
    cls: str = Field(alias="class")

    @field_validator("dl", "dw", "dh")
    @classmethod
    def _finite(cls, v):
        if not math.isfinite(v):
            raise ValueError("correction must be finite")
        return v

    @field_validator("cls")
    @classmethod
    def _known_class(cls, v):
        if v.upper() not in {k.name for k in KNOWN_CLASSES}:
            raise ValueError(f"unknown class {v!r}")
        return v.upper()


def load_template(template_id: str = DEFAULT_TEMPLATE) -> str:
    return resources.files("pseudolabel3d").joinpath("assets", f"{template_id}.txt").read_text()


def render_prompt(request: ReasonerRequest, box_ids: Sequence[int], prototypes: SizePrototypes) -> str:
    table = "\n".join(f"  {k.name}: {v[0]:.2f} x {v[1]:.2f} x {v[2]:.2f}" for k, v in prototypes.sizes.items())
    lines = []
    for i in box_ids:
        b, c = request.boxes[i], request.cues[i]
        lines.append(f"  {i}, {b.cls.name}, {b.l:.2f}/{b.w:.2f}/{b.h:.2f}, {c.distance:.1f}, {c.speed:.2f}, "
                     f"{c.point_count}, {c.mean_intensity:.3f}, {c.s_dis:.3f}, {c.s_cons:.3f}")
    return load_template(request.template_id).format(
        frame_id=request.frame_id, sensor_range=request.sensor_range,
        prototype_table=table, box_lines="\n".join(lines))


def cue_payload(request: ReasonerRequest, box_ids: Sequence[int]) -> list[dict]:
    out = []
    for i in box_ids:
        b, c = request.boxes[i], request.cues[i]
        out.append({"box_id": i, "class": b.cls.name, "l": b.l, "w": b.w, "h": b.h,
                    "distance": c.distance, "speed": c.speed, "point_count": c.point_count,
                    "mean_intensity": c.mean_intensity, "s_dis": c.s_dis, "s_cons": c.s_cons})
    return out


def request_key(body: dict) -> str:
    """Stable key of a request body, ignoring the model name."""
    canon = json.dumps({"prompt": body["prompt"], "cue_payload": body["cue_payload"]},
                       sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


class _StructuredReasoner(BaseEstimator):
    """Shared batching, validation and fallback for reasoners fed by structured responses."""

    def _fallback_reasoner(self):
        return self.fallback if self.fallback is not None else RuleBasedReasoner(self.prototypes)

    def _bodies(self, request: ReasonerRequest):
        protos = self.prototypes or SizePrototypes()
        ids = list(range(len(request.boxes)))
        batches = [ids[i:i + self.batch_size] for i in range(0, len(ids), self.batch_size)]
        return [(batch, {"model": self._model_name(),
                         "prompt": render_prompt(request, batch, protos),
                         "cue_payload": cue_payload(request, batch),
                         "template_id": request.template_id}) for batch in batches]

    def _model_name(self) -> str:
        return getattr(self, "model", None) or ""

    def _merge(self, request, batch, payload, provenance):
        """Validate one batch's payload; unparseable or invalid entries fall back per box."""
        verdicts: dict[int, ReasonerVerdict] = {}
        items = payload.get("verdicts") if isinstance(payload, dict) else None
        for item in items or []:
            try:
                wv = WireVerdict.model_validate(item)
            except ValidationError:
                self._bump("schema_rejections")
                continue
            if wv.box_id not in batch or wv.box_id in verdicts:
                self._bump("schema_rejections")
                continue
            box = request.boxes[wv.box_id]
            delta = (wv.dl, wv.dw, wv.dh)
            if wv.keep == 1 and min(box.l + wv.dl, box.w + wv.dw, box.h + wv.dh) <= 0:
                self._bump("schema_rejections")
                continue
            verdicts[wv.box_id] = ReasonerVerdict(wv.keep, wv.score, delta, BoxClass[wv.cls], provenance)
        missing = [i for i in batch if i not in verdicts]
        if missing:
            fb = self._fallback_reasoner()
            for i in missing:
                v = fb.predict(ReasonerRequest(request.frame_id, [request.boxes[i]], [request.cues[i]],
                                               request.sensor_range, request.template_id))[0]
                verdicts[i] = ReasonerVerdict(v.keep, v.s_rea, v.delta, v.cls_new, "fallback")
                self._bump("fallbacks")
        return [verdicts[i] for i in batch]

    def _bump(self, key: str, n: int = 1) -> None:
        with self._lock:
            self.stats_[key] = self.stats_.get(key, 0) + n

    def _reset_stats(self):
        if not hasattr(self, "_lock"):
            self._lock = threading.Lock()
        if not hasattr(self, "stats_"):
            self.stats_ = {"requests": 0, "retries": 0, "fallbacks": 0, "schema_rejections": 0}


class RemoteReasoner(_StructuredReasoner):
    """Client for an HTTP large-model reasoner with schema gate, retries and rule fallback.

    Each batch of at most ``batch_size`` boxes is POSTed as
    ``{"model", "prompt", "cue_payload"}``; the reply must carry a
    ``verdicts`` array. Timeouts, connection failures, 5xx/429 replies and
    unparseable bodies are retried with exponential backoff; once retries
    run out the whole batch falls back to ``fallback``. Individual
    verdicts failing validation fall back box by box. 401/403 raises
    :class:`ReasonerAuthError`. With ``log_path`` set, every exchange is
    appended to a JSON-lines log usable by :class:`ReplayReasoner`.
    """

    def __init__(self, endpoint=None, api_key=None, model="default", timeout=10.0, max_retries=3,
                 backoff=0.5, batch_size=MAX_BATCH, max_in_flight=4, log_path=None, prototypes=None,
                 fallback=None):
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.batch_size = batch_size
        self.max_in_flight = max_in_flight
        self.log_path = log_path
        self.prototypes = prototypes
        self.fallback = fallback

    @classmethod
    def from_env(cls, **kwargs) -> "RemoteReasoner":
        endpoint = os.environ.get("OWL_LLM_ENDPOINT")
        if not endpoint:
            raise ReasonerConfigError("OWL_LLM_ENDPOINT is not set")
        return cls(endpoint=endpoint, api_key=os.environ.get("OWL_LLM_API_KEY"),
                   model=os.environ.get("OWL_LLM_MODEL", "default"), **kwargs)

    def fit(self, X=None, y=None):
        return self

    def predict(self, request: ReasonerRequest) -> list[ReasonerVerdict]:
        if not self.endpoint:
            raise ReasonerConfigError("remote reasoner has no endpoint configured")
        if not 1 <= self.batch_size <= MAX_BATCH:
            raise ValueError(f"batch_size must be in [1, {MAX_BATCH}]")
        self._reset_stats()
        jobs = self._bodies(request)
        with ThreadPoolExecutor(max_workers=max(1, int(self.max_in_flight))) as pool:
            payloads = list(pool.map(lambda job: self._exchange(job[1]), jobs))
        out = []
        for (batch, _), payload in zip(jobs, payloads):
            if payload is None:
                self._bump("batch_failures")
            out.extend(self._merge(request, batch, payload, "remote"))
        return out

    def _exchange(self, body: dict):
        payload = self._post(body)
        if self.log_path:
            line = json.dumps({"key": request_key(body), "request": body, "response": payload},
                              sort_keys=True)
            with self._lock, open(self.log_path, "a") as fh:
                fh.write(line + "\n")
        return payload

    def _post(self, body: dict):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        for attempt in range(int(self.max_retries) + 1):
            if attempt:
                self._bump("retries")
                time.sleep(self.backoff * 2 ** (attempt - 1))
            self._bump("requests")
            try:
                resp = requests.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
            except (requests.Timeout, requests.ConnectionError) as exc:
                log.warning("reasoner request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code in (401, 403):
                raise ReasonerAuthError(f"reasoner endpoint refused credentials ({resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                log.warning("reasoner returned HTTP %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            try:
                payload = resp.json()
            except ValueError:
                log.warning("reasoner returned a non-JSON body (attempt %d)", attempt + 1)
                continue
            if not isinstance(payload, dict) or not isinstance(payload.get("verdicts"), list):
                log.warning("reasoner response lacks a verdicts array (attempt %d)", attempt + 1)
                continue
            return payload
        log.warning("reasoner retries exhausted; falling back to rules for %d boxes",
                    len(body["cue_payload"]))
        return None


class ReplayReasoner(_StructuredReasoner):
    """Answers requests from a log written by :class:`RemoteReasoner`; unseen requests fall back."""

    def __init__(self, log_path=None, batch_size=MAX_BATCH, prototypes=None, fallback=None):
        self.log_path = log_path
        self.batch_size = batch_size
        self.prototypes = prototypes
        self.fallback = fallback

    def fit(self, X=None, y=None):
        self.responses_ = {}
        if self.log_path is None or not Path(self.log_path).exists():
            raise FileNotFoundError(f"replay log not found: {self.log_path}")
        for line in Path(self.log_path).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                self.responses_[rec["key"]] = rec["response"]
        return self

    def predict(self, request: ReasonerRequest) -> list[ReasonerVerdict]:
        if not hasattr(self, "responses_"):
            self.fit()
        self._reset_stats()
        out = []
        for batch, body in self._bodies(request):
            key = request_key(body)
            if key not in self.responses_:
                self._bump("replay_misses")
            out.extend(self._merge(request, batch, self.responses_.get(key), "replay"))
        return out


@dataclass(frozen=True)
class RefineConfig:
    eta: float = 0.7
    common_sizes: SizePrototypes = field(default_factory=SizePrototypes)
    downweight_factor: float = 0.5
    demote_invalid: Literal["consistency", "drop"] = "consistency"

    def __post_init__(self):
        if not 0 <= self.eta <= 1:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if not 0 < self.downweight_factor <= 1:
            raise ValueError(f"downweight_factor must lie in (0, 1], got {self.downweight_factor}")


@dataclass
class RefineResult:
    boxes: list[Box3D]
    branches: list[str]
    source_index: list[int]
    demoted: int = 0

    @property
    def counts(self) -> dict[str, int]:
        return {k: self.branches.count(k) for k in "ABC"}


def refine(boxes: Sequence[Box3D], verdicts: Sequence[ReasonerVerdict], cues: Sequence[CueRecord],
           cfg: RefineConfig = RefineConfig()) -> RefineResult:
    """Apply the keep / replace-with-common-size / drop rule to each box.

    * A: ``keep == 1``: dimensions += correction, class := reasoner class;
    * B: rejected but ``s_cons > eta``: dimensions := common size of the
      class, weight scaled by ``downweight_factor``;
    * C: otherwise the box is dropped.

    A branch-A correction that would make a dimension non-positive is
    demoted (to B or C via the consistency test, or straight to C when
    ``demote_invalid == "drop"``).
    """
    if not (len(boxes) == len(verdicts) == len(cues)):
        raise ValueError("boxes, verdicts and cues must be aligned")
    out, branches, sources = [], [], []
    demoted = 0
    for i, (box, v, cue) in enumerate(zip(boxes, verdicts, cues)):
        keep = v.keep == 1
        if keep:
            dims = box.dims + np.array(v.delta)
            if (dims > 0).all():
                out.append(box.replace(l=float(dims[0]), w=float(dims[1]), h=float(dims[2]), cls=v.cls_new))
                branches.append("A")
                sources.append(i)
                continue
            warnings.warn(f"box {i}: correction {v.delta} gives non-positive size; demoted",
                          RefineWarning, stacklevel=2)
            demoted += 1
            if cfg.demote_invalid == "drop":
                branches.append("C")
                continue
        cls = box.cls if box.cls in cfg.common_sizes else v.cls_new
        if cue.s_cons > cfg.eta and cls in cfg.common_sizes:
            l, w, h = cfg.common_sizes[cls]
            out.append(box.replace(l=float(l), w=float(w), h=float(h), cls=cls,
                                   weight=box.weight * cfg.downweight_factor))
            branches.append("B")
            sources.append(i)
        else:
            branches.append("C")
    return RefineResult(out, branches, sources, demoted)
