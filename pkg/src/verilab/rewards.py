"""Rule-based rewards: accuracy, IoU/point grounding scores, and the
baseline/joint/decoupled compositions over them.

Everything here is a pure function; IoU is computed in exact rational
arithmetic so grounding scores carry no float error.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Protocol, Sequence

from .protocol import ProtocolMode, format_reward
from .types import (
    BBox,
    Judgment,
    LabeledSample,
    MetaKind,
    Point,
    RationaleKind,
    RewardMode,
    RewardRecord,
    RewardVariant,
    Stream,
    VerifierOutput,
)


class EmptyGroundTruth(ValueError):
    """Grounding rewards are undefined without at least one ground-truth region."""


class StreamLabelMismatch(ValueError):
    """A Grounding-stream sample with label=True reached a reward composition."""


class MetaVerifierClient(Protocol):
    """Scores a verifier's rationale against a sample, in [0, 1].

    Implementations shipped here are deterministic; remote clients document
    their own determinism guarantees.
    """

    def score(self, sample: LabeledSample, output: VerifierOutput) -> float: ...


def accuracy_reward(pred: Judgment, label: Judgment) -> int:
    return 1 if pred is label else 0


def iou(a: BBox, b: BBox) -> Fraction:
    """Exact intersection-over-union of two boxes on the integer grid."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return Fraction(0)
    inter = ix * iy
    union = a.area + b.area - inter
    return Fraction(inter, union)


def _greedy_iou_matching(pred: Sequence[BBox], gt: Sequence[BBox]) -> dict[int, Fraction]:
    """One-to-one gt->pred matching, best IoU pairs first; returns gt index -> IoU.

    Ties break on (gt index, pred index) so the matching is deterministic.
    """
    pairs = sorted(
        ((iou(g, p), gi, pi) for gi, g in enumerate(gt) for pi, p in enumerate(pred)),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    matched: dict[int, Fraction] = {}
    used_pred: set[int] = set()
    for score, gi, pi in pairs:
        if gi in matched or pi in used_pred:
            continue
        matched[gi] = score
        used_pred.add(pi)
    return matched


def bbox_meta_reward(
    pred: Sequence[BBox],
    gt: Sequence[BBox],
    kind: MetaKind = MetaKind.IOU_GATED,
    threshold: float = 0.6,
) -> float:
    """Grounding score of predicted boxes against ground-truth regions.

    IOU_GATED counts gt boxes whose matched IoU clears the threshold;
    IOU_CONTINUOUS averages matched IoU over gt (unmatched gt scores 0).
    """
    if not gt:
        raise EmptyGroundTruth("bbox meta reward needs at least one ground-truth box")
    if kind is MetaKind.POINT_GATED:
        raise ValueError("point-gated rewards go through point_meta_reward")
    if not pred:
        return 0.0
    matched = _greedy_iou_matching(pred, gt)
    if kind is MetaKind.IOU_GATED:
        # limit_denominator recovers the decimal the float threshold stands for,
        # so IoU == 0.6 exactly clears a 0.6 gate.
        gate = Fraction(threshold).limit_denominator(10**9)
        hits = sum(1 for score in matched.values() if score >= gate)
        return hits / len(gt)
    return float(sum(matched.values(), Fraction(0)) / len(gt))


def point_meta_reward(pred: Sequence[Point], gt: Sequence[BBox]) -> float:
    """Fraction of gt boxes claimed by a one-to-one containment matching.

    Greedy in (gt order, point order); containment includes box edges.
    """
    if not gt:
        raise EmptyGroundTruth("point meta reward needs at least one ground-truth box")
    used: set[int] = set()
    hits = 0
    for box in gt:
        for pi, point in enumerate(pred):
            if pi not in used and box.contains(point):
                used.add(pi)
                hits += 1
                break
    return hits / len(gt)


class RuleBasedMetaVerifier:
    """MetaVerifierClient backed entirely by the symbolic grounding rules."""

    def __init__(self, kind: MetaKind = MetaKind.IOU_GATED, threshold: float = 0.6):
        self.kind = kind
        self.threshold = threshold

    def score(self, sample: LabeledSample, output: VerifierOutput) -> float:
        rationale = output.rationale
        if self.kind is MetaKind.POINT_GATED:
            if rationale.kind is not RationaleKind.POINTS:
                return 0.0
            return point_meta_reward(rationale.points, sample.gt_regions)
        if rationale.kind is not RationaleKind.BOXES:
            return 0.0
        return bbox_meta_reward(rationale.boxes, sample.gt_regions, self.kind, self.threshold)


class MockTextMetaVerifier:
    """Deterministic stand-in for a model-based judge of textual rationales.

    Scores the fraction of erroneous objects whose category token appears in
    the rationale text; non-text rationales score 0.
    """

    def score(self, sample: LabeledSample, output: VerifierOutput) -> float:
        if output.rationale.kind is not RationaleKind.TEXT:
            return 0.0
        targets = [
            obj.category
            for obj in sample.scene.objects
            if any(iou(obj.region, region) > 0 for region in sample.gt_regions)
        ]
        if not targets:
            return 0.0
        mentioned = sum(1 for category in targets if category in output.rationale.text)
        return mentioned / len(targets)


def protocol_mode_for(kind: MetaKind) -> ProtocolMode:
    return ProtocolMode.POINT if kind is MetaKind.POINT_GATED else ProtocolMode.BBOX


def _clamp01(value: float) -> float:
    return min(1.0, max(0.0, value))


def compose_baseline(sample: LabeledSample, output: VerifierOutput) -> RewardRecord:
    """Format plus accuracy, nothing else."""
    mode = RewardMode.baseline()
    fmt = format_reward(output.raw, protocol_mode_for(mode.meta_kind))
    acc = accuracy_reward(output.judgment, sample.label)
    return RewardRecord(format=fmt, accuracy=acc, meta=None, total=float(fmt + acc), mode=mode)


def compose_joint(
    sample: LabeledSample,
    output: VerifierOutput,
    meta: MetaVerifierClient,
    mode: RewardMode,
) -> RewardRecord:
    """Meta-gated composition: format + accuracy * (1 if label True else meta).

    The meta client only runs when the gate is open (correct False verdict);
    a closed gate leaves the record's meta field absent.
    """
    if mode.variant is not RewardVariant.JOINT_META:
        raise ValueError(f"compose_joint requires a JointMeta mode, got {mode.variant}")
    fmt = format_reward(output.raw, protocol_mode_for(mode.meta_kind))
    acc = accuracy_reward(output.judgment, sample.label)
    if acc == 1 and sample.label is Judgment.FALSE:
        meta_score = _clamp01(meta.score(sample, output))
        return RewardRecord(format=fmt, accuracy=acc, meta=meta_score, total=fmt + meta_score, mode=mode)
    return RewardRecord(format=fmt, accuracy=acc, meta=None, total=float(fmt + acc), mode=mode)


def compose_decoupled(
    sample: LabeledSample,
    output: VerifierOutput,
    meta: MetaVerifierClient,
    mode: RewardMode,
) -> RewardRecord:
    """Stream-separated composition: judgment samples never see the meta
    reward, grounding samples never see the accuracy reward."""
    if mode.variant is not RewardVariant.DECOUPLED:
        raise ValueError(f"compose_decoupled requires a Decoupled mode, got {mode.variant}")
    fmt = format_reward(output.raw, protocol_mode_for(mode.meta_kind))
    if sample.stream is Stream.JUDGMENT:
        acc = accuracy_reward(output.judgment, sample.label)
        return RewardRecord(format=fmt, accuracy=acc, meta=None, total=float(fmt + acc), mode=mode)
    if sample.label is not Judgment.FALSE:
        raise StreamLabelMismatch("Grounding-stream rewards require a label=False sample")
    meta_score = _clamp01(meta.score(sample, output))
    return RewardRecord(format=fmt, accuracy=None, meta=meta_score, total=fmt + meta_score, mode=mode)


def compose(
    sample: LabeledSample,
    output: VerifierOutput,
    meta: MetaVerifierClient,
    mode: RewardMode,
) -> RewardRecord:
    """Dispatch to the composition matching the mode's variant."""
    if mode.variant is RewardVariant.BASELINE:
        return compose_baseline(sample, output)
    if mode.variant is RewardVariant.JOINT_META:
        return compose_joint(sample, output, meta, mode)
    return compose_decoupled(sample, output, meta, mode)
