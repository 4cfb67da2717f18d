from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from django.conf import settings
from pydantic import BaseModel, ConfigDict, Field, model_validator

from apps.meta.models import MRModule
from apps.metric.models import MetricKind
from apps.tensorcore.models import LayerParams
from apps.toydata.models import Box, Proposal, ToyScene
from core.utils.errors import ArtifactIOError, ConfigurationError, ValidationError

BACKGROUND = "__background__"


class TrainingConfig(BaseModel):
    """Run configuration read from a JSON file."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    way: int = Field(ge=2)
    shot: int = Field(ge=1)
    n_query: int = Field(ge=1)
    alpha: float = Field(gt=0)
    meta_lr: float = Field(ge=0)
    inner_steps: int = Field(ge=1)
    outer_lr: float = Field(ge=0)
    lambda_: float = Field(alias="lambda", ge=0)
    decay_step: int = Field(ge=1)
    epochs: int = Field(ge=1)
    iters: int = Field(ge=1)
    seed: int = Field(ge=0)
    metric_kind: MetricKind
    mr_enabled: bool

    decay_gamma: float = Field(default=0.1, gt=0, le=1)
    decay_policy: Literal["step", "multistep", "none"] = "step"
    decay_steps: list[int] = Field(default_factory=list)
    checkpoint_every: int | None = Field(default=None, ge=1)
    support_gradient: bool = True
    reg_gate: float = Field(default_factory=lambda: settings.FSOD_DEFAULTS["REG_GATE"], ge=0, le=1)
    n_bg_proposals: int = Field(default=4, ge=0)
    jitter: float = Field(default=0.2, ge=0, le=0.5)
    backbone_channels: list[int] = Field(default_factory=lambda: [8, 16], min_length=1)
    dataset_manifest: str | None = None

    @model_validator(mode="after")
    def check_schedule(self):
        if self.decay_policy == "multistep" and not self.decay_steps:
            raise ValueError("decay_steps is required when decay_policy is multistep")
        if self.decay_steps != sorted(self.decay_steps):
            raise ValueError("decay_steps must be increasing")
        if any(c < 1 for c in self.backbone_channels):
            raise ValueError("backbone_channels must be positive")
        return self

    @property
    def total_steps(self) -> int:
        return self.epochs * self.iters

    @property
    def checkpoint_interval(self) -> int:
        return self.checkpoint_every or self.iters

    @classmethod
    def load(cls, path) -> TrainingConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ArtifactIOError(f"Could not read config ({e.strerror})", path=path)
        try:
            data = json.loads(text)
        except ValueError as e:
            raise ConfigurationError(f"Config {path} is not valid JSON: {e}")
        return cls.model_validate(data)

    def to_dict(self):
        return self.model_dump(mode="json", by_alias=True)


@dataclass(frozen=True)
class BoxDelta:
    """Proposal-relative box offsets: centre shift over size, log size ratio."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        if not np.isfinite(self.to_array()).all():
            raise ValidationError(f"box delta must be finite, got {self.to_array().tolist()}")

    def to_array(self):
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> BoxDelta:
        tx, ty, tw, th = (float(v) for v in values)
        return cls(tx, ty, tw, th)


@dataclass
class LossReport:
    l_cls: float
    l_reg: float
    l_det: float
    lambda_: float
    n_rois: int = 0
    n_regressed: int = 0
    skipped: bool = False

    @classmethod
    def combine(cls, l_cls, l_reg, lambda_, **kwargs) -> LossReport:
        return cls(l_cls=l_cls, l_reg=l_reg, l_det=l_cls + lambda_ * l_reg, lambda_=lambda_, **kwargs)


@dataclass
class QueryScene:
    """A query scene with its proposals, RoI crops and training targets."""

    scene: ToyScene
    proposals: list[Proposal]
    roi_crops: np.ndarray
    roi_labels: np.ndarray
    targets: np.ndarray
    gt_labels: list[int]

    @property
    def proposal_array(self):
        return np.array([p.box.to_list() for p in self.proposals], dtype=np.float64).reshape(-1, 4)


@dataclass
class Episode:
    """
    One N-way K-shot task. Class index 0 is the background class; indices
    1..N-1 are the foreground classes in ``classes``.
    """

    way: int
    shot: int
    classes: list[str]
    support: dict[int, np.ndarray]
    queries: list[QueryScene]
    label_perm: tuple[int, ...]
    head_seeds: tuple[int, ...]
    seed: int
    split: str = "base"
    # class index -> [(scene, box)] each support crop was cut from
    support_sources: dict[int, list] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.classes.count(BACKGROUND) != 1 or self.classes[0] != BACKGROUND:
            raise ValidationError("an episode holds the background class exactly once, at index 0")
        if len(self.classes) != self.way or sorted(self.support) != list(range(self.way)):
            raise ValidationError(f"episode has {len(self.classes)} classes, expected {self.way}")

    @property
    def n_rois(self) -> int:
        return sum(len(q.proposals) for q in self.queries)

    def relabel(self, mapping) -> Episode:
        """
        Move foreground class ``i`` to index ``mapping[i]`` in supports,
        query labels and label permutation. ``mapping[0]`` must be 0.
        """
        mapping = list(mapping)
        if sorted(mapping) != list(range(self.way)) or mapping[0] != 0:
            raise ValidationError(f"relabel mapping must fix background and permute classes: {mapping}")
        lookup = np.array(mapping)
        classes, perm, seeds = [None] * self.way, [None] * self.way, [None] * self.way
        for old, new in enumerate(mapping):
            classes[new] = self.classes[old]
            perm[new] = self.label_perm[old]
            seeds[new] = self.head_seeds[old]
        queries = [
            QueryScene(
                scene=q.scene,
                proposals=q.proposals,
                roi_crops=q.roi_crops,
                roi_labels=lookup[q.roi_labels],
                targets=q.targets,
                gt_labels=[mapping[g] for g in q.gt_labels],
            )
            for q in self.queries
        ]
        return Episode(
            way=self.way,
            shot=self.shot,
            classes=classes,
            support={mapping[old]: crops for old, crops in self.support.items()},
            queries=queries,
            label_perm=tuple(perm),
            head_seeds=tuple(seeds),
            seed=self.seed,
            split=self.split,
            support_sources={mapping[old]: src for old, src in self.support_sources.items()},
        )


@dataclass
class Detection:
    box: Box
    class_index: int
    score: float
    scene_index: int = 0

    def to_dict(self):
        return {
            "box": self.box.to_list(),
            "class_index": int(self.class_index),
            "score": float(self.score),
            "scene_index": int(self.scene_index),
        }


@dataclass
class FewShotDetector:
    """
    Backbone W, MR parameters and the class-agnostic box head.

    ``mr`` is None for the ablation without the MR module.
    """

    backbone: list[LayerParams]
    mr: MRModule | None
    box_conv: LayerParams
    box_fc: LayerParams
    metric_kind: MetricKind = MetricKind.PEARSON
    alpha: float = 10.0

    @classmethod
    def initialise(cls, config: TrainingConfig, seed) -> FewShotDetector:
        rng = np.random.default_rng(seed)
        backbone, in_channels = [], 3
        for i, channels in enumerate(config.backbone_channels, start=1):
            backbone.append(LayerParams.conv(f"backbone.conv{i}", in_channels, channels, rng))
            in_channels = channels
        mr = MRModule.initialise(in_channels, config.way, rng) if config.mr_enabled else None
        return cls(
            backbone=backbone,
            mr=mr,
            box_conv=LayerParams.conv("box_head.conv", in_channels, in_channels, rng),
            box_fc=LayerParams.linear("box_head.fc", in_channels, 4, rng, zero=True),
            metric_kind=MetricKind(config.metric_kind),
            alpha=config.alpha,
        )

    @property
    def mr_enabled(self) -> bool:
        return self.mr is not None

    @property
    def feature_channels(self) -> int:
        return self.backbone[-1].out_units

    def parameters(self) -> list[LayerParams]:
        """Outer-loop parameters, in checkpoint order."""
        shared = self.mr.shared_layers() if self.mr is not None else []
        return [*self.backbone, *shared, self.box_conv, self.box_fc]


@dataclass
class TrainingRun:
    model: FewShotDetector
    checkpoints: list[Path]
    metrics_path: Path
    steps_run: int
    skipped: int
