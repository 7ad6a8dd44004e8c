"""Group-relative policy-gradient trainer over the synthetic verification task.

The optimizer is a deliberately small subset of group-based RL practice:
sample a group of rollouts per sample, normalize rewards within the group to
advantages, drop zero-variance groups, ascend the mean score-function
gradient. Updates are synchronous and strictly on-policy, which makes the
importance ratio identically 1; the asymmetric clip range is validated and
applied in the surrogate but only binds if that ever changes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .policy import PolicyFeatures, ToyPolicy, features_for
from .protocol import serialize
from .rewards import (
    MetaVerifierClient,
    RuleBasedMetaVerifier,
    compose_baseline,
    compose_decoupled,
    compose_joint,
    iou,
    protocol_mode_for,
)
from .types import (
    Judgment,
    LabeledSample,
    MetaKind,
    Point,
    Rationale,
    RewardMode,
    Stream,
    VerifierOutput,
)

THINK_PLACEHOLDER = "compare scene contents against the prompt clauses"
ADVANTAGE_EPSILON = 1e-8
HIT_IOU = 0.6


class Regime(Enum):
    BASELINE = "baseline"
    JOINT = "joint"
    DECOUPLED = "decoupled"


class RegimeDatasetMismatch(ValueError):
    """The dataset's stream structure does not fit the training regime."""


class EmptyEvalSet(ValueError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    regime: Regime
    group_size: int = 8
    learning_rate: float = 0.1
    steps: int = 100
    batch_size: int = 8
    clip_low: float = 0.8
    clip_high: float = 1.28
    drop_zero_variance_groups: bool = True
    seed: int = 0
    meta_kind: MetaKind = MetaKind.IOU_GATED
    threshold: float = 0.6
    temperature: float = 1.0
    init: str = "zero"  # zero | inverted | oracle
    init_scale: float = 2.0
    grounding_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if not self.clip_low < 1.0 < self.clip_high:
            raise ValueError("clip range must straddle 1")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("learning_rate > 0, batch_size >= 1, steps >= 0 required")
        if self.init not in ("zero", "inverted", "oracle"):
            raise ValueError("init must be one of zero|inverted|oracle")
        if self.grounding_weight <= 0:
            raise ValueError("grounding_weight must be positive")

    def make_policy(self) -> ToyPolicy:
        if self.init == "oracle":
            return ToyPolicy.oracle(self.init_scale, self.temperature)
        if self.init == "inverted":
            return ToyPolicy.inverted(self.init_scale, self.temperature)
        return ToyPolicy.zeros(self.temperature)

    def make_meta(self) -> RuleBasedMetaVerifier:
        return RuleBasedMetaVerifier(self.meta_kind, self.threshold)

    def reward_mode(self) -> RewardMode:
        if self.regime is Regime.BASELINE:
            return RewardMode.baseline()
        if self.regime is Regime.JOINT:
            return RewardMode.joint(self.meta_kind, self.threshold)
        return RewardMode.decoupled(self.meta_kind, self.threshold)


@dataclass(frozen=True)
class TrainingMetrics:
    step: int
    judgment_accuracy: float
    grounding_hit_rate: float
    mean_iou: float
    mean_reward: float
    grad_norm: float
    p_acc: float

    def to_payload(self) -> dict:
        return {
            "step": self.step,
            "judgment_accuracy": self.judgment_accuracy,
            "grounding_hit_rate": self.grounding_hit_rate,
            "mean_iou": self.mean_iou,
            "mean_reward": self.mean_reward,
            "grad_norm": self.grad_norm,
            "p_acc": self.p_acc,
        }


@dataclass(frozen=True)
class EvalReport:
    judgment_accuracy: float
    grounding_hit_rate: float
    mean_iou: float


@dataclass(frozen=True)
class RolloutAction:
    """What the policy actually chose; None marks heads that never sampled."""

    judgment: Judgment | None
    candidate: int | None


def _rationale_for_candidate(features: PolicyFeatures, candidate: int, meta_kind: MetaKind) -> Rationale:
    box = features.candidates[candidate]
    if meta_kind is MetaKind.POINT_GATED:
        return Rationale.of_points([Point((box.x1 + box.x2) // 2, (box.y1 + box.y2) // 2)])
    return Rationale.of_boxes([box])


def sample_action(
    policy: ToyPolicy, sample: LabeledSample, rng: np.random.Generator
) -> tuple[RolloutAction, PolicyFeatures]:
    """Draw one action. Grounding-stream samples skip the judgment head
    entirely (the task is conditioned as localization)."""
    features = features_for(sample.scene, sample.prompt)
    if sample.stream is Stream.GROUNDING:
        return RolloutAction(judgment=None, candidate=policy.sample_candidate(features, rng)), features
    judgment = policy.sample_judgment(features, rng)
    candidate = policy.sample_candidate(features, rng) if judgment is Judgment.FALSE else None
    return RolloutAction(judgment=judgment, candidate=candidate), features


def action_output(
    action: RolloutAction, features: PolicyFeatures, meta_kind: MetaKind
) -> VerifierOutput:
    """Render an action as a full wire-format VerifierOutput."""
    judgment = Judgment.FALSE if action.judgment is None else action.judgment
    rationale = (
        _rationale_for_candidate(features, action.candidate, meta_kind)
        if action.candidate is not None
        else Rationale.none()
    )
    output = VerifierOutput(think=THINK_PLACEHOLDER, judgment=judgment, rationale=rationale)
    return replace(output, raw=serialize(output, protocol_mode_for(meta_kind)))


def rollout(
    policy: ToyPolicy,
    sample: LabeledSample,
    rng: np.random.Generator,
    meta_kind: MetaKind = MetaKind.IOU_GATED,
) -> VerifierOutput:
    """Sample a verdict (plus a region when False or grounding-conditioned)
    and emit the full protocol string."""
    action, features = sample_action(policy, sample, rng)
    return action_output(action, features, meta_kind)


def action_log_gradient(policy: ToyPolicy, features: PolicyFeatures, action: RolloutAction) -> np.ndarray:
    """Exact score-function gradient of the sampled action's log-probability."""
    grad = np.zeros(policy.n_params)
    if action.judgment is not None:
        grad += policy.judgment_log_gradient(features, action.judgment)
    if action.candidate is not None:
        grad += policy.grounding_log_gradient(features, action.candidate)
    return grad


def group_advantages(
    rewards: Sequence[float],
    drop_zero_variance: bool = True,
    epsilon: float = ADVANTAGE_EPSILON,
) -> np.ndarray:
    """Group-relative normalization (r - mean)/max(std, eps); a zero-variance
    group is dropped to all-zero advantages when requested."""
    values = np.asarray(rewards, dtype=float)
    std = float(values.std())
    if drop_zero_variance and std < epsilon:
        return np.zeros_like(values)
    return (values - values.mean()) / max(std, epsilon)


def clipped_weight(advantage: float, ratio: float, clip_low: float, clip_high: float) -> float:
    """Pessimistic clipped surrogate weight; equals the advantage at ratio 1."""
    return min(ratio * advantage, float(np.clip(ratio, clip_low, clip_high)) * advantage)


def _compose_for_regime(
    config: TrainerConfig,
    sample: LabeledSample,
    output: VerifierOutput,
    meta: MetaVerifierClient,
):
    if config.regime is Regime.BASELINE:
        return compose_baseline(sample, output)
    if config.regime is Regime.JOINT:
        return compose_joint(sample, output, meta, config.reward_mode())
    return compose_decoupled(sample, output, meta, config.reward_mode())


def _check_regime_dataset(config: TrainerConfig, dataset: Sequence[LabeledSample]) -> None:
    has_grounding = any(s.stream is Stream.GROUNDING for s in dataset)
    if config.regime is Regime.DECOUPLED and not has_grounding:
        raise RegimeDatasetMismatch("decoupled training expects a decoupled dataset")
    if config.regime is not Regime.DECOUPLED and has_grounding:
        raise RegimeDatasetMismatch(f"{config.regime.value} training expects an undecoupled dataset")


def _sampling_weights(config: TrainerConfig, dataset: Sequence[LabeledSample]) -> np.ndarray:
    weights = np.array(
        [config.grounding_weight if s.stream is Stream.GROUNDING else 1.0 for s in dataset]
    )
    return weights / weights.sum()


def evaluate(policy: ToyPolicy, eval_set: Sequence[LabeledSample]) -> EvalReport:
    """Greedy decode: argmax verdict; argmax region probed on every False sample."""
    if not eval_set:
        raise EmptyEvalSet("evaluation needs at least one sample")
    correct = 0
    hits = 0
    iou_sum = 0.0
    n_false = 0
    for sample in eval_set:
        features = features_for(sample.scene, sample.prompt)
        if policy.greedy_judgment(features) is sample.label:
            correct += 1
        if sample.label is Judgment.FALSE:
            n_false += 1
            box = features.candidates[policy.greedy_candidate(features)]
            best = max(float(iou(box, gt)) for gt in sample.gt_regions)
            iou_sum += best
            hits += best >= HIT_IOU
    return EvalReport(
        judgment_accuracy=correct / len(eval_set),
        grounding_hit_rate=hits / n_false if n_false else 0.0,
        mean_iou=iou_sum / n_false if n_false else 0.0,
    )


def exact_p_acc(policy: ToyPolicy, eval_set: Sequence[LabeledSample]) -> float:
    """Expected judgment accuracy under the sampling policy, computed exactly."""
    total = 0.0
    for sample in eval_set:
        features = features_for(sample.scene, sample.prompt)
        total += policy.judgment_probability(features, sample.label)
    return total / len(eval_set)


def train(
    config: TrainerConfig,
    dataset: Sequence[LabeledSample],
    eval_set: Sequence[LabeledSample],
    policy: ToyPolicy | None = None,
) -> tuple[ToyPolicy, list[TrainingMetrics]]:
    """Run the configured regime; returns the trained policy and the per-step
    metrics series (element 0 is the pre-training evaluation)."""
    _check_regime_dataset(config, dataset)
    if not dataset:
        raise ValueError("training dataset is empty")
    if not eval_set:
        raise EmptyEvalSet("training needs a held-out evaluation set")
    policy = policy.clone() if policy is not None else config.make_policy()
    meta = config.make_meta()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed])))
    weights = _sampling_weights(config, dataset)

    def snapshot(step: int, mean_reward: float, grad_norm: float) -> TrainingMetrics:
        report = evaluate(policy, eval_set)
        return TrainingMetrics(
            step=step,
            judgment_accuracy=report.judgment_accuracy,
            grounding_hit_rate=report.grounding_hit_rate,
            mean_iou=report.mean_iou,
            mean_reward=mean_reward,
            grad_norm=grad_norm,
            p_acc=exact_p_acc(policy, eval_set),
        )

    metrics = [snapshot(step=0, mean_reward=0.0, grad_norm=0.0)]
    n_rollouts = config.batch_size * config.group_size
    for step in range(1, config.steps + 1):
        indices = rng.choice(len(dataset), size=config.batch_size, replace=True, p=weights)
        gradient = np.zeros(policy.n_params)
        reward_sum = 0.0
        for index in indices:
            sample = dataset[int(index)]
            actions = []
            rewards = []
            for _ in range(config.group_size):
                action, features = sample_action(policy, sample, rng)
                output = action_output(action, features, config.meta_kind)
                record = _compose_for_regime(config, sample, output, meta)
                actions.append((action, features))
                rewards.append(record.total)
            reward_sum += sum(rewards)
            advantages = group_advantages(rewards, config.drop_zero_variance_groups)
            for (action, features), advantage in zip(actions, advantages):
                if advantage == 0.0:
                    continue
                weight = clipped_weight(advantage, 1.0, config.clip_low, config.clip_high)
                gradient += weight * action_log_gradient(policy, features, action)
        gradient /= n_rollouts
        policy.set_params(policy.get_params() + config.learning_rate * gradient)
        if not np.isfinite(policy.get_params()).all():
            raise FloatingPointError(f"policy weights became non-finite at step {step}")
        metrics.append(snapshot(step, reward_sum / n_rollouts, float(np.linalg.norm(gradient))))
    return policy, metrics


# --- metrics serialization ----------------------------------------------------

METRICS_CSV_HEADER = ["step", "regime", "seed", "accuracy", "hit_rate", "mean_reward", "grad_norm", "p_acc"]


def metrics_to_csv(metrics: Sequence[TrainingMetrics], regime: Regime, seed: int) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(METRICS_CSV_HEADER)
    for m in metrics:
        writer.writerow(
            [
                m.step,
                regime.value,
                seed,
                f"{m.judgment_accuracy:.6f}",
                f"{m.grounding_hit_rate:.6f}",
                f"{m.mean_reward:.6f}",
                f"{m.grad_norm:.6f}",
                f"{m.p_acc:.6f}",
            ]
        )
    return buffer.getvalue()


def metrics_to_jsonl(metrics: Sequence[TrainingMetrics]) -> str:
    return "".join(json.dumps(m.to_payload(), separators=(",", ":")) + "\n" for m in metrics)
