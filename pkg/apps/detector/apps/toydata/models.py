from __future__ import annotations

from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from apps.toydata.shapes import SHAPES
from core.utils.errors import ValidationError
from core.utils.validators import validate_box

DEFAULT_NOVEL = ("ring", "saltire", "tee", "stripes")
BOX_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixels: top-left corner plus extent."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        validate_box((self.x, self.y, self.w, self.h))

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def centre(self):
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def inside(self, width, height) -> bool:
        return (
            self.x >= -BOX_TOLERANCE
            and self.y >= -BOX_TOLERANCE
            and self.x2 <= width + BOX_TOLERANCE
            and self.y2 <= height + BOX_TOLERANCE
        )

    def clip(self, width, height) -> Box:
        x, y = max(0.0, self.x), max(0.0, self.y)
        return Box(x, y, min(float(width), self.x2) - x, min(float(height), self.y2) - y)

    def to_list(self):
        return [float(self.x), float(self.y), float(self.w), float(self.h)]


@dataclass(frozen=True)
class SceneObject:
    class_name: str
    box: Box

    def to_dict(self):
        return {"class_name": self.class_name, "box": self.box.to_list()}


@dataclass
class ToyScene:
    """A rendered image with exact ground-truth boxes."""

    image: np.ndarray
    objects: list[SceneObject]
    seed: int

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 4:
            raise ValidationError(f"a scene holds 1 to 4 objects, got {len(self.objects)}")
        height, width = self.image.shape[1:]
        for obj in self.objects:
            if not obj.box.inside(width, height):
                raise ValidationError(f"object box {obj.box.to_list()} leaves the {width}x{height} image")

    @property
    def height(self) -> int:
        return int(self.image.shape[1])

    @property
    def width(self) -> int:
        return int(self.image.shape[2])

    @property
    def boxes(self) -> list[Box]:
        return [obj.box for obj in self.objects]

    def to_dict(self):
        return {"seed": int(self.seed), "objects": [obj.to_dict() for obj in self.objects]}


class ProposalSource(StrEnum):
    JITTERED_GT = "jittered-gt"
    RANDOM_BG = "random-bg"


@dataclass(frozen=True)
class Proposal:
    box: Box
    source: ProposalSource

    def to_dict(self):
        return {"box": self.box.to_list(), "source": str(self.source)}


class GeneratorParams(BaseModel):
    """Rendering parameters shared by every scene of a dataset."""

    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(default=96, ge=32)
    channels: int = Field(default=3, ge=1)
    support_size: int = Field(default=32, ge=8)
    min_object: int = Field(default=14, ge=8)
    max_object: int = Field(default=30, ge=8)
    max_objects: int = Field(default=4, ge=1, le=4)
    noise: float = Field(default=0.15, ge=0.0, lt=0.5)
    overlap_limit: float = Field(default=0.3, ge=0.0, le=1.0)
    placement_attempts: int = Field(default=100, ge=1)

    @model_validator(mode="after")
    def check_object_range(self):
        if self.min_object > self.max_object:
            raise ValueError("min_object must not exceed max_object")
        if self.max_object > self.image_size:
            raise ValueError("max_object must fit inside the image")
        return self


class DatasetManifest(BaseModel):
    """JSON-serialisable description of a dataset: inventory, split, generator."""

    model_config = ConfigDict(extra="forbid")

    classes: list[str] = Field(default_factory=lambda: list(SHAPES))
    base: list[str] = Field(default_factory=lambda: [c for c in SHAPES if c not in DEFAULT_NOVEL])
    novel: list[str] = Field(default_factory=lambda: list(DEFAULT_NOVEL))
    generator: GeneratorParams = Field(default_factory=GeneratorParams)

    @model_validator(mode="after")
    def check_split(self):
        unknown = sorted(set(self.classes) - set(SHAPES))
        if unknown:
            raise ValueError(f"unknown shape classes: {unknown}")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class inventory contains duplicates")
        outside = sorted((set(self.base) | set(self.novel)) - set(self.classes))
        if outside:
            raise ValueError(f"split names classes outside the inventory: {outside}")
        overlap = sorted(set(self.base) & set(self.novel))
        if overlap:
            raise ValueError(f"base and novel splits overlap: {overlap}")
        return self


@dataclass
class ToyDataset:
    """Class inventory with a disjoint base/novel split."""

    manifest: DatasetManifest = field(default_factory=DatasetManifest)

    def __post_init__(self):
        self.assert_disjoint()

    @property
    def generator(self) -> GeneratorParams:
        return self.manifest.generator

    @property
    def classes(self) -> list[str]:
        return list(self.manifest.classes)

    def split(self, name) -> list[str]:
        if name == "base":
            return list(self.manifest.base)
        if name == "novel":
            return list(self.manifest.novel)
        if name == "all":
            return self.classes
        raise ValidationError(f"unknown split {name!r}; expected base, novel or all")

    def assert_disjoint(self):
        overlap = set(self.manifest.base) & set(self.manifest.novel)
        if overlap:
            raise ValidationError(f"base and novel splits overlap: {sorted(overlap)}")
