"""Pipeline configuration: one validated document covering every stage."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .bench import CorruptionSpec, SceneSpec
from .clustering import ClusteringParams
from .cues import DEFAULT_PROTOTYPES, CueConfig, SizePrototypes, TrackingGates
from .detectors import Augmentation
from .losses import LossWeights
from .reasoning import RefineConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ClusteringSection(_Section):
    alpha: float = Field(1.0, gt=0)
    beta: float = Field(0.6, ge=0)
    r0: float = Field(0.6, gt=0)
    min_points: int = Field(5, ge=1)
    reference_count: float = Field(10.0, gt=0)
    nms_threshold: float = Field(0.1, ge=0, le=1)

    def params(self) -> ClusteringParams:
        return ClusteringParams(self.alpha, self.beta, self.r0, self.min_points, self.reference_count)


class MarSection(_Section):
    tau_static: float = Field(0.7, ge=0, le=1)
    neighborhood_radius: float = Field(0.3, gt=0)
    ground_inlier_distance: float = Field(0.1, gt=0)
    ground_max_iterations: int = Field(200, ge=1)


class WarmupSection(_Section):
    w_fr: float = Field(1.0, ge=0)
    w_bg: float = Field(0.5, ge=0)
    epochs: int = Field(50, ge=1)
    learning_rate: float = Field(0.1, gt=0)
    n_hidden: int = Field(16, ge=1)
    voxel_size: float = Field(0.4, gt=0)
    warm_start_detector: bool = True


class CueSection(_Section):
    resolution: int = Field(8, ge=1)
    norm_range: float = Field(75.0, gt=0)
    raw_sizes: bool = False
    # score 1 means the box matches its prototype, as the refine rule expects
    invert_s_cons: bool = True
    dynamic_speed: float = Field(0.5, ge=0)
    iou_min: float = Field(0.05, ge=0, le=1)
    # 15 m/s at the 0.5 s sweep interval
    max_distance: float = Field(7.5, gt=0)
    k_miss: int = Field(2, ge=0)
    frame_interval: float = Field(0.5, gt=0)

    def config(self) -> CueConfig:
        return CueConfig(self.resolution, self.norm_range, self.raw_sizes, self.invert_s_cons,
                         self.dynamic_speed,
                         TrackingGates(self.iou_min, self.max_distance, self.k_miss, self.frame_interval))


class ReasonerSection(_Section):
    kind: Literal["rules", "remote", "replay"] = "rules"
    endpoint: Optional[str] = None
    model: Optional[str] = None
    timeout: float = Field(10.0, gt=0)
    max_retries: int = Field(3, ge=0)
    backoff: float = Field(0.5, ge=0)
    batch_size: int = Field(32, ge=1, le=32)
    max_in_flight: int = Field(4, ge=1)
    log_path: Optional[str] = None
    size_tolerance: float = Field(0.02, ge=0)
    min_points: int = Field(5, ge=0)
    density_fraction: float = Field(0.1, ge=0)
    correction_gain: float = Field(0.7, ge=0, le=1)
    max_correction: float = Field(0.3, ge=0)


class RefineSection(_Section):
    eta: float = Field(0.7, ge=0, le=1)
    downweight_factor: float = Field(0.5, gt=0, le=1)
    demote_invalid: Literal["consistency", "drop"] = "consistency"


class AugmentationSection(_Section):
    flip_y: bool = False
    rotation: float = 0.0
    scale: float = Field(1.0, ge=0.95, le=1.05)

    def augmentation(self) -> Augmentation:
        return Augmentation(self.flip_y, self.rotation, self.scale)


class SelfTrainSection(_Section):
    rounds: int = Field(2, ge=1)
    detector: Literal["toy", "passthrough"] = "toy"
    epochs: int = Field(300, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    score_threshold: float = Field(0.5, ge=0, le=1)
    nms_threshold: float = Field(0.1, ge=0, le=1)
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(1.0, ge=0)
    alpha_reg: float = Field(1.0, ge=0)
    beta_cls: float = Field(0.5, ge=0)
    delta: float = Field(1.0, gt=0)
    gamma: float = Field(2.0, ge=0)
    alpha_balance: float = Field(0.25, ge=0)
    tta: list[AugmentationSection] = Field(default_factory=lambda: [
        AugmentationSection(), AugmentationSection(flip_y=True),
        AugmentationSection(rotation=0.19634954084936207, scale=1.05)])

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.alpha_reg, self.beta_cls, self.delta,
                           self.gamma, self.alpha_balance)


class SceneSection(_Section):
    vehicles: int = Field(6, ge=0)
    pedestrians: int = Field(3, ge=0)
    cyclists: int = Field(3, ge=0)
    moving_fraction: float = Field(0.4, ge=0, le=1)
    sensor_range: float = Field(50.0, gt=0)
    surface_density: float = Field(60.0, gt=0)
    ground_points: int = Field(8000, ge=0)
    n_context: int = Field(2, ge=1)
    n_frames: int = Field(8, ge=1)
    clutter: int = Field(6, ge=0)
    fp_rate: float = Field(0.3, ge=0, le=1)
    size_sigma: float = Field(0.1, ge=0)
    yaw_flip_prob: float = Field(0.0, ge=0, le=1)
    drop_rate: float = Field(0.0, ge=0, le=1)

    def scene_spec(self, seed: int) -> SceneSpec:
        return SceneSpec(objects=(("VEHICLE", self.vehicles), ("PEDESTRIAN", self.pedestrians),
                                  ("CYCLIST", self.cyclists)),
                         moving_fraction=self.moving_fraction, sensor_range=self.sensor_range,
                         surface_density=self.surface_density, ground_points=self.ground_points,
                         n_context=self.n_context, n_frames=self.n_frames, clutter=self.clutter, seed=seed)

    def corruption(self) -> CorruptionSpec:
        return CorruptionSpec(self.fp_rate, self.size_sigma, self.yaw_flip_prob, None, self.drop_rate,
                              max_range=self.sensor_range)


class PipelineConfig(_Section):
    seed: int = 0
    threads: Optional[int] = Field(None, ge=1)
    clustering: ClusteringSection = Field(default_factory=ClusteringSection)
    mar: MarSection = Field(default_factory=MarSection)
    warmup: WarmupSection = Field(default_factory=WarmupSection)
    cues: CueSection = Field(default_factory=CueSection)
    reasoner: ReasonerSection = Field(default_factory=ReasonerSection)
    refine: RefineSection = Field(default_factory=RefineSection)
    selftrain: SelfTrainSection = Field(default_factory=SelfTrainSection)
    scene: SceneSection = Field(default_factory=SceneSection)
    prototypes: dict[str, tuple[float, float, float]] = Field(
        default_factory=lambda: {c.name: tuple(v) for c, v in DEFAULT_PROTOTYPES.items()})

    @field_validator("prototypes")
    @classmethod
    def _known_classes(cls, v):
        SizePrototypes.from_mapping(v)
        return v

    def size_prototypes(self) -> SizePrototypes:
        return SizePrototypes.from_mapping(self.prototypes)

    def refine_config(self) -> RefineConfig:
        return RefineConfig(self.refine.eta, self.size_prototypes(), self.refine.downweight_factor,
                            self.refine.demote_invalid)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


class ConfigError(ValueError):
    """Invalid configuration; ``keys`` names the offending entries."""

    def __init__(self, message: str, keys: list[str]):
        super().__init__(message)
        self.keys = keys


def _set_path(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a YAML (or JSON) document, apply dotted-key overrides, and validate.

    Overrides win over the file.
    """
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}", ["<document>"]) from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping", ["<document>"])
    for k, v in (overrides or {}).items():
        if v is not None:
            _set_path(data, k, v)
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        keys = [".".join(str(p) for p in e["loc"]) for e in exc.errors()]
        lines = [f"  {'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid configuration:\n" + "\n".join(lines), keys) from exc
