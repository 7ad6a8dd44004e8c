"""Core value types shared by every other module.

All types are immutable after construction, validate their invariants in the
constructor, and round-trip through a canonical single-line JSON form.
Coordinates live on an integer grid with top-left origin; boxes are
axis-aligned ``[x1, y1, x2, y2]`` with strictly positive area.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

GRID_SIDE = 1000
"""Side length of the normalized coordinate grid."""


class InvalidSample(ValueError):
    """A labeled sample (or one of its parts) violates a structural invariant."""


class Judgment(Enum):
    """Binary verdict on whether a scene satisfies a prompt."""

    TRUE = "True"
    FALSE = "False"

    @classmethod
    def parse(cls, token: str) -> "Judgment":
        for member in cls:
            if member.value == token:
                return member
        raise ValueError(f"judgment token must be 'True' or 'False', got {token!r}")

    def serialize(self) -> str:
        return self.value


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box on the grid, top-left origin, positive area."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        for name in ("x1", "y1", "x2", "y2"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise InvalidSample(f"bbox coordinate {name} must be an integer, got {value!r}")
        if not (0 <= self.x1 < self.x2 <= GRID_SIDE):
            raise InvalidSample(f"bbox x-range must satisfy 0 <= x1 < x2 <= {GRID_SIDE}: {self}")
        if not (0 <= self.y1 < self.y2 <= GRID_SIDE):
            raise InvalidSample(f"bbox y-range must satisfy 0 <= y1 < y2 <= {GRID_SIDE}: {self}")

    @property
    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def center2(self) -> tuple[int, int]:
        """Center scaled by 2 so it stays integral: (x1+x2, y1+y2)."""
        return (self.x1 + self.x2, self.y1 + self.y2)

    def contains(self, point: "Point") -> bool:
        """Edge-inclusive containment."""
        return self.x1 <= point.x <= self.x2 and self.y1 <= point.y <= self.y2

    def to_payload(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_payload(cls, payload: Sequence[Any]) -> "BBox":
        if not isinstance(payload, Sequence) or isinstance(payload, (str, bytes)) or len(payload) != 4:
            raise InvalidSample(f"bbox payload must be a 4-array, got {payload!r}")
        return cls(*payload)


@dataclass(frozen=True)
class Point:
    """Single grid point, edge coordinates allowed."""

    x: int
    y: int

    def __post_init__(self) -> None:
        for name in ("x", "y"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise InvalidSample(f"point coordinate {name} must be an integer, got {value!r}")
            if not 0 <= value <= GRID_SIDE:
                raise InvalidSample(f"point coordinate {name} must lie in [0, {GRID_SIDE}]: {self}")

    def to_payload(self) -> list[int]:
        return [self.x, self.y]

    @classmethod
    def from_payload(cls, payload: Sequence[Any]) -> "Point":
        if not isinstance(payload, Sequence) or isinstance(payload, (str, bytes)) or len(payload) != 2:
            raise InvalidSample(f"point payload must be a 2-array, got {payload!r}")
        return cls(*payload)


class RationaleKind(Enum):
    NONE = "None"
    BOXES = "Boxes"
    POINTS = "Points"
    TEXT = "Text"


@dataclass(frozen=True)
class Rationale:
    """Optional symbolic or textual justification attached to a judgment.

    Boxes/Points carry at least one element; Text is a pass-through payload
    for client-side scoring and never feeds the rule-based rewards.
    """

    kind: RationaleKind
    boxes: tuple[BBox, ...] = ()
    points: tuple[Point, ...] = ()
    text: str = ""

    def __post_init__(self) -> None:
        if self.kind is RationaleKind.BOXES and not self.boxes:
            raise InvalidSample("a Boxes rationale needs at least one box")
        if self.kind is RationaleKind.POINTS and not self.points:
            raise InvalidSample("a Points rationale needs at least one point")
        if self.kind is not RationaleKind.BOXES and self.boxes:
            raise InvalidSample(f"{self.kind.value} rationale must not carry boxes")
        if self.kind is not RationaleKind.POINTS and self.points:
            raise InvalidSample(f"{self.kind.value} rationale must not carry points")
        if self.kind is not RationaleKind.TEXT and self.text:
            raise InvalidSample(f"{self.kind.value} rationale must not carry text")

    @classmethod
    def none(cls) -> "Rationale":
        return cls(RationaleKind.NONE)

    @classmethod
    def of_boxes(cls, boxes: Sequence[BBox]) -> "Rationale":
        return cls(RationaleKind.BOXES, boxes=tuple(boxes))

    @classmethod
    def of_points(cls, points: Sequence[Point]) -> "Rationale":
        return cls(RationaleKind.POINTS, points=tuple(points))

    @classmethod
    def of_text(cls, text: str) -> "Rationale":
        return cls(RationaleKind.TEXT, text=text)

    def to_payload(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"variant": self.kind.value}
        if self.kind is RationaleKind.BOXES:
            payload["boxes"] = [b.to_payload() for b in self.boxes]
        elif self.kind is RationaleKind.POINTS:
            payload["points"] = [p.to_payload() for p in self.points]
        elif self.kind is RationaleKind.TEXT:
            payload["text"] = self.text
        return payload

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "Rationale":
        kind = RationaleKind(payload["variant"])
        if kind is RationaleKind.BOXES:
            return cls.of_boxes([BBox.from_payload(b) for b in payload["boxes"]])
        if kind is RationaleKind.POINTS:
            return cls.of_points([Point.from_payload(p) for p in payload["points"]])
        if kind is RationaleKind.TEXT:
            return cls.of_text(str(payload["text"]))
        return cls.none()


@dataclass(frozen=True)
class VerifierOutput:
    """Structured emission of a verifier: reasoning, verdict, optional rationale.

    ``raw`` holds the wire string the output was parsed from (or rendered to)
    and is excluded from equality so parse/serialize round-trips compare on
    semantic content.
    """

    think: str
    judgment: Judgment
    rationale: Rationale = field(default_factory=Rationale.none)
    raw: str = field(default="", compare=False)

    def to_payload(self) -> dict[str, Any]:
        return {
            "raw": self.raw,
            "think": self.think,
            "judgment": self.judgment.serialize(),
            "rationale": self.rationale.to_payload(),
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "VerifierOutput":
        return cls(
            think=str(payload["think"]),
            judgment=Judgment.parse(payload["judgment"]),
            rationale=Rationale.from_payload(payload["rationale"]),
            raw=str(payload.get("raw", "")),
        )


@dataclass(frozen=True)
class SceneObject:
    """One attributed, positioned object inside a scene."""

    id: int
    category: str
    color: str
    region: BBox

    def __post_init__(self) -> None:
        if not isinstance(self.id, int) or isinstance(self.id, bool):
            raise InvalidSample(f"object id must be an integer, got {self.id!r}")
        for name in ("category", "color"):
            token = getattr(self, name)
            if not token or not token.isalnum():
                raise InvalidSample(f"object {name} must be a non-empty alphanumeric token, got {token!r}")

    def to_payload(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "category": self.category,
            "color": self.color,
            "region": self.region.to_payload(),
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "SceneObject":
        return cls(
            id=payload["id"],
            category=payload["category"],
            color=payload["color"],
            region=BBox.from_payload(payload["region"]),
        )


@dataclass(frozen=True)
class SceneGraph:
    """Symbolic stand-in for an image: a canvas of attributed objects."""

    canvas: int
    objects: tuple[SceneObject, ...]

    def __post_init__(self) -> None:
        if not isinstance(self.canvas, int) or not 1 <= self.canvas <= GRID_SIDE:
            raise InvalidSample(f"canvas side must be an integer in [1, {GRID_SIDE}], got {self.canvas!r}")
        object.__setattr__(self, "objects", tuple(self.objects))
        ids = [obj.id for obj in self.objects]
        if len(set(ids)) != len(ids):
            raise InvalidSample(f"object ids must be unique, got {ids}")
        for obj in self.objects:
            if obj.region.x2 > self.canvas or obj.region.y2 > self.canvas:
                raise InvalidSample(f"object {obj.id} region {obj.region} exceeds canvas {self.canvas}")

    def object_by_id(self, object_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)

    def to_payload(self) -> dict[str, Any]:
        return {
            "canvas": self.canvas,
            "objects": [obj.to_payload() for obj in self.objects],
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "SceneGraph":
        return cls(
            canvas=payload["canvas"],
            objects=tuple(SceneObject.from_payload(o) for o in payload["objects"]),
        )


class Stream(Enum):
    """Which training objective a sample feeds after decoupling."""

    JUDGMENT = "Judgment"
    GROUNDING = "Grounding"


@dataclass(frozen=True)
class LabeledSample:
    """A (scene, prompt) pair with its ground-truth verdict and error regions.

    ``gt_regions`` is non-empty exactly when the label is False; a
    Grounding-stream tag is only legal on False samples.
    """

    scene: SceneGraph
    prompt: str
    label: Judgment
    gt_regions: tuple[BBox, ...] = ()
    stream: Stream = Stream.JUDGMENT

    def __post_init__(self) -> None:
        object.__setattr__(self, "gt_regions", tuple(self.gt_regions))
        _check_sample(self)

    def to_payload(self) -> dict[str, Any]:
        return {
            "scene": self.scene.to_payload(),
            "prompt": self.prompt,
            "label": self.label.serialize(),
            "gt_regions": [b.to_payload() for b in self.gt_regions],
            "stream": self.stream.value,
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "LabeledSample":
        return cls(
            scene=SceneGraph.from_payload(payload["scene"]),
            prompt=str(payload["prompt"]),
            label=Judgment.parse(payload["label"]),
            gt_regions=tuple(BBox.from_payload(b) for b in payload["gt_regions"]),
            stream=Stream(payload["stream"]),
        )


def _check_sample(sample: LabeledSample) -> None:
    if sample.label is Judgment.TRUE and sample.gt_regions:
        raise InvalidSample("label=True samples must have empty gt_regions")
    if sample.label is Judgment.FALSE and not sample.gt_regions:
        raise InvalidSample("label=False samples must carry at least one gt region")
    if sample.stream is Stream.GROUNDING and sample.label is not Judgment.FALSE:
        raise InvalidSample("Grounding-stream samples must have label=False")


def validate_sample(sample: LabeledSample) -> None:
    """Re-check every LabeledSample invariant, raising InvalidSample on violation.

    Constructors already enforce these; this is the explicit hook for data
    that was mutated reflectively or assembled by external tooling.
    """
    if not isinstance(sample.scene, SceneGraph):
        raise InvalidSample("sample.scene must be a SceneGraph")
    _check_sample(sample)


class RewardVariant(Enum):
    BASELINE = "Baseline"
    JOINT_META = "JointMeta"
    DECOUPLED = "Decoupled"


class MetaKind(Enum):
    IOU_CONTINUOUS = "IoUContinuous"
    IOU_GATED = "IoUGated"
    POINT_GATED = "PointGated"


DEFAULT_IOU_THRESHOLD = 0.6


@dataclass(frozen=True)
class RewardMode:
    """How per-rollout rewards are composed, and which meta score backs them."""

    variant: RewardVariant
    meta_kind: MetaKind = MetaKind.IOU_GATED
    threshold: float = DEFAULT_IOU_THRESHOLD

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise InvalidSample(f"gating threshold must lie in (0, 1], got {self.threshold}")

    @classmethod
    def baseline(cls) -> "RewardMode":
        return cls(RewardVariant.BASELINE)

    @classmethod
    def joint(cls, meta_kind: MetaKind = MetaKind.IOU_GATED, threshold: float = DEFAULT_IOU_THRESHOLD) -> "RewardMode":
        return cls(RewardVariant.JOINT_META, meta_kind, threshold)

    @classmethod
    def decoupled(cls, meta_kind: MetaKind = MetaKind.IOU_GATED, threshold: float = DEFAULT_IOU_THRESHOLD) -> "RewardMode":
        return cls(RewardVariant.DECOUPLED, meta_kind, threshold)

    def to_payload(self) -> dict[str, Any]:
        return {
            "variant": self.variant.value,
            "meta_kind": self.meta_kind.value,
            "threshold": self.threshold,
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "RewardMode":
        return cls(
            variant=RewardVariant(payload["variant"]),
            meta_kind=MetaKind(payload["meta_kind"]),
            threshold=float(payload["threshold"]),
        )


@dataclass(frozen=True)
class RewardRecord:
    """Per-rollout reward breakdown; ``total`` is redundant by construction.

    ``accuracy`` is None when the composing mode never evaluated the verdict
    (grounding stream); ``meta`` is None when the meta score never fired.
    """

    format: int
    accuracy: int | None
    meta: float | None
    total: float
    mode: RewardMode

    def __post_init__(self) -> None:
        if self.format not in (0, 1):
            raise InvalidSample(f"format reward must be 0 or 1, got {self.format!r}")
        if self.accuracy not in (0, 1, None):
            raise InvalidSample(f"accuracy reward must be 0, 1 or absent, got {self.accuracy!r}")
        if self.meta is not None and not 0.0 <= self.meta <= 1.0:
            raise InvalidSample(f"meta reward must lie in [0, 1], got {self.meta!r}")
        expected = self.expected_total()
        if abs(self.total - expected) > 1e-12:
            raise InvalidSample(
                f"total {self.total} is not reproducible from parts (expected {expected}) under {self.mode}"
            )

    def expected_total(self) -> float:
        """Recompute the total from the breakdown under this record's mode."""
        if self.mode.variant is RewardVariant.BASELINE:
            if self.accuracy is None:
                raise InvalidSample("baseline records must carry an accuracy reward")
            return float(self.format + self.accuracy)
        if self.mode.variant is RewardVariant.JOINT_META:
            if self.accuracy is None:
                raise InvalidSample("joint records must carry an accuracy reward")
            # Meta present implies the gate was open (accuracy=1, label=False),
            # so format + meta; otherwise the gate contributes the accuracy term.
            if self.meta is not None:
                return float(self.format) + self.meta
            return float(self.format + self.accuracy)
        # Decoupled: exactly one of accuracy/meta was evaluated.
        if self.accuracy is not None and self.meta is None:
            return float(self.format + self.accuracy)
        if self.accuracy is None and self.meta is not None:
            return float(self.format) + self.meta
        raise InvalidSample("decoupled records carry exactly one of accuracy/meta")

    def to_payload(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"format": self.format}
        if self.accuracy is not None:
            payload["accuracy"] = self.accuracy
        if self.meta is not None:
            payload["meta"] = self.meta
        payload["total"] = self.total
        payload["mode"] = self.mode.to_payload()
        return payload

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "RewardRecord":
        return cls(
            format=payload["format"],
            accuracy=payload.get("accuracy"),
            meta=payload.get("meta"),
            total=float(payload["total"]),
            mode=RewardMode.from_payload(payload["mode"]),
        )


def to_json(value: Any) -> str:
    """Canonical single-line JSON for any type exposing to_payload()."""
    return json.dumps(value.to_payload(), separators=(",", ":"))


def from_json(cls: type, text: str) -> Any:
    return cls.from_payload(json.loads(text))
