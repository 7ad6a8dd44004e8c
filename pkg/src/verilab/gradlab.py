"""Numerical verification of the gated-gradient theory.

Two kinds of checks live here. Monte-Carlo checks draw (indicator, gradient)
pairs for the gated estimator G_joint = I * G_dec and test the variance
identity Var(G_joint) = p*Var(G_dec) + p(1-p)*||E[G_dec]||^2 and the SNR bound
SNR(G_joint) <= p * SNR(G_dec) against same-sample moments. Exact checks
enumerate the toy policy's full action space, so the accuracy-gating of
grounding gradients and the norm bound on them hold to arithmetic precision,
not statistically.

Scalar "variance" of a vector estimator everywhere means E||Z - E[Z]||^2,
the trace of the covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator, Sequence

import numpy as np

from .policy import JUDGMENT_DIM, PolicyFeatures, ToyPolicy, features_for
from .rewards import bbox_meta_reward
from .types import Judgment, LabeledSample, MetaKind, Stream

SHARD_SIZE = 1 << 17


class DegenerateConfig(ValueError):
    """The requested check is undefined for this configuration."""


@dataclass(frozen=True)
class GatedEstimatorConfig:
    """Distribution of one gated-estimator experiment.

    The decoupled gradient is N(dec_mean, diag(dec_cov_diag)); the gate is
    Bernoulli(p_acc), independent of it.
    """

    p_acc: float
    dec_mean: tuple[float, ...]
    dec_cov_diag: tuple[float, ...]
    n_samples: int
    seed: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_acc <= 1.0:
            raise ValueError("p_acc must lie in [0, 1]")
        if len(self.dec_mean) < 1 or len(self.dec_mean) != len(self.dec_cov_diag):
            raise ValueError("dec_mean and dec_cov_diag must share a dimension >= 1")
        if any(v < 0 for v in self.dec_cov_diag):
            raise ValueError("covariance diagonal entries must be non-negative")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")

    @property
    def dim(self) -> int:
        return len(self.dec_mean)


@dataclass
class MomentAccumulator:
    """Streaming vector mean and scalar second central moment.

    Shards are combined with the pairwise (Chan) update, so merging order
    and shard boundaries never change the mathematical result and the
    accumulation stays numerically stable at large n.
    """

    count: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m2: float = 0.0

    def add_batch(self, batch: np.ndarray) -> None:
        n = batch.shape[0]
        if n == 0:
            return
        batch_mean = batch.mean(axis=0)
        batch_m2 = float(((batch - batch_mean) ** 2).sum())
        self._merge(n, batch_mean, batch_m2)

    def merge(self, other: "MomentAccumulator") -> None:
        if other.count:
            self._merge(other.count, other.mean, other.m2)

    def _merge(self, n: int, mean: np.ndarray, m2: float) -> None:
        if self.count == 0:
            self.count, self.mean, self.m2 = n, mean.copy(), m2
            return
        total = self.count + n
        delta = mean - self.mean
        self.m2 = self.m2 + m2 + float(delta @ delta) * self.count * n / total
        self.mean = self.mean + delta * (n / total)
        self.count = total

    @property
    def variance(self) -> float:
        """Population variance E||Z - mean||^2."""
        return self.m2 / self.count if self.count else 0.0


@dataclass(frozen=True)
class VarianceReport:
    """Same-sample comparison of the gated estimator against the identity."""

    empirical_var_joint: float
    empirical_var_dec: float
    empirical_mean_dec_normsq: float
    predicted_var_joint: float
    snr_joint: float
    snr_dec: float
    relative_error: float

    def to_payload(self) -> dict[str, Any]:
        return {
            "empirical_var_joint": self.empirical_var_joint,
            "empirical_var_dec": self.empirical_var_dec,
            "empirical_mean_dec_normsq": self.empirical_mean_dec_normsq,
            "predicted_var_joint": self.predicted_var_joint,
            "snr_joint": self.snr_joint,
            "snr_dec": self.snr_dec,
            "relative_error": self.relative_error,
        }


def _draw_moments(config: GatedEstimatorConfig, corrupt_gate: bool) -> tuple[MomentAccumulator, MomentAccumulator]:
    """Accumulate dec and joint moments over fixed-size shards."""
    mean = np.array(config.dec_mean)
    std = np.sqrt(np.array(config.dec_cov_diag))
    acc_dec, acc_joint = MomentAccumulator(), MomentAccumulator()
    remaining = config.n_samples
    shard_index = 0
    while remaining > 0:
        n = min(SHARD_SIZE, remaining)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, shard_index])))
        g_dec = mean + std * rng.standard_normal((n, config.dim))
        if corrupt_gate:
            gate = np.ones(n)  # test hook: stuck-open gate breaks the identity
        else:
            gate = (rng.random(n) < config.p_acc).astype(float)
        acc_dec.add_batch(g_dec)
        acc_joint.add_batch(g_dec * gate[:, None])
        remaining -= n
        shard_index += 1
    return acc_dec, acc_joint


def _snr(mean: np.ndarray, variance: float) -> float:
    signal = float(mean @ mean)
    if variance == 0.0:
        return 0.0 if signal == 0.0 else float("inf")
    return signal / variance


def simulate_gated(config: GatedEstimatorConfig, corrupt_gate: bool = False) -> VarianceReport:
    """Draw the gated estimator and report the variance identity residual.

    The prediction uses the same sample's Var(G_dec) and E[G_dec] with the
    configured gate probability, which keeps the identity testable without
    population moments.
    """
    acc_dec, acc_joint = _draw_moments(config, corrupt_gate)
    p = config.p_acc
    mean_dec_normsq = float(acc_dec.mean @ acc_dec.mean)
    predicted = p * acc_dec.variance + p * (1.0 - p) * mean_dec_normsq
    empirical = acc_joint.variance
    if predicted == 0.0 and empirical != 0.0:
        raise DegenerateConfig("predicted joint variance is 0 but the empirical variance is not")
    relative_error = abs(empirical - predicted) / max(predicted, 1e-12) if predicted else 0.0
    return VarianceReport(
        empirical_var_joint=empirical,
        empirical_var_dec=acc_dec.variance,
        empirical_mean_dec_normsq=mean_dec_normsq,
        predicted_var_joint=predicted,
        snr_joint=_snr(acc_joint.mean, acc_joint.variance),
        snr_dec=_snr(acc_dec.mean, acc_dec.variance),
        relative_error=relative_error,
    )


@dataclass(frozen=True)
class SnrCheck:
    holds: bool
    lhs: float
    rhs: float


def check_snr(config: GatedEstimatorConfig, tolerance: float = 0.05) -> SnrCheck:
    """Empirical test of SNR(G_joint) <= p * SNR(G_dec) on one sample."""
    acc_dec, acc_joint = _draw_moments(config, corrupt_gate=False)
    if acc_dec.variance == 0.0 or acc_joint.variance == 0.0:
        raise DegenerateConfig("SNR comparison needs strictly positive variances")
    lhs = _snr(acc_joint.mean, acc_joint.variance)
    rhs = config.p_acc * _snr(acc_dec.mean, acc_dec.variance)
    return SnrCheck(holds=lhs <= rhs * (1.0 + tolerance), lhs=lhs, rhs=rhs)


def population_snr_joint(p_acc: float, dec_mean: Sequence[float], dec_cov_diag: Sequence[float]) -> float:
    """Closed form p*||mu||^2 / (sigma^2 + (1-p)*||mu||^2)."""
    signal = float(np.array(dec_mean) @ np.array(dec_mean))
    noise = float(np.sum(dec_cov_diag))
    denominator = noise + (1.0 - p_acc) * signal
    if denominator == 0.0:
        raise DegenerateConfig("population SNR undefined for zero noise and open gate")
    return p_acc * signal / denominator


def snr_monotone_in_p(dec_mean: Sequence[float], dec_cov_diag: Sequence[float], grid: int = 50) -> bool:
    """Predicted joint SNR must be strictly increasing in p when mu != 0."""
    values = [population_snr_joint(p, dec_mean, dec_cov_diag) for p in np.linspace(0.01, 0.99, grid)]
    return all(b > a for a, b in zip(values, values[1:]))


# --- exact enumeration over the toy policy ----------------------------------


class Objective(Enum):
    JOINT = "joint"
    DECOUPLED = "decoupled"


@dataclass(frozen=True)
class Term:
    """One enumerated action: its probability, reward, gate, and score gradient."""

    probability: float
    reward: float
    accuracy: int | None
    gradient: np.ndarray

    def contribution(self) -> np.ndarray:
        return self.probability * self.reward * self.gradient

    def grounding_slice(self) -> np.ndarray:
        return self.contribution()[JUDGMENT_DIM:]


def _candidate_meta_rewards(
    features: PolicyFeatures, sample: LabeledSample, kind: MetaKind, threshold: float
) -> list[float]:
    if sample.label is not Judgment.FALSE:
        return [0.0] * len(features.candidates)
    return [
        bbox_meta_reward([candidate], sample.gt_regions, kind, threshold)
        for candidate in features.candidates
    ]


def enumerate_terms(
    policy: ToyPolicy,
    sample: LabeledSample,
    objective: Objective,
    meta_kind: MetaKind = MetaKind.IOU_GATED,
    threshold: float = 0.6,
) -> Iterator[Term]:
    """Every action the policy can emit for this sample, with exact weights.

    Joint: reward = acc * (1 if label True else meta(e)); the True action has
    no grounding component. Decoupled judgment stream: reward = acc.
    Decoupled grounding stream: box-only actions, reward = meta(e).
    """
    features = features_for(sample.scene, sample.prompt)
    q = policy.grounding_probabilities(features)
    grounding_only = objective is Objective.DECOUPLED and sample.stream is Stream.GROUNDING

    if grounding_only:
        metas = _candidate_meta_rewards(features, sample, meta_kind, threshold)
        for k in range(len(features.candidates)):
            yield Term(
                probability=float(q[k]),
                reward=metas[k],
                accuracy=None,
                gradient=policy.grounding_log_gradient(features, k),
            )
        return

    p_false = policy.false_probability(features)
    acc_true = 1 if sample.label is Judgment.TRUE else 0
    acc_false = 1 - acc_true
    if objective is Objective.JOINT:
        reward_true = float(acc_true)  # gate * indicator[label True]
        metas = _candidate_meta_rewards(features, sample, meta_kind, threshold)
        reward_false = [acc_false * m for m in metas]
    else:
        reward_true = float(acc_true)
        reward_false = [float(acc_false)] * len(features.candidates)

    yield Term(
        probability=1.0 - p_false,
        reward=reward_true,
        accuracy=acc_true,
        gradient=policy.judgment_log_gradient(features, Judgment.TRUE),
    )
    judgment_grad = policy.judgment_log_gradient(features, Judgment.FALSE)
    for k in range(len(features.candidates)):
        yield Term(
            probability=p_false * float(q[k]),
            reward=reward_false[k],
            accuracy=acc_false,
            gradient=judgment_grad + policy.grounding_log_gradient(features, k),
        )


def exact_policy_gradient(
    policy: ToyPolicy,
    sample: LabeledSample,
    objective: Objective,
    meta_kind: MetaKind = MetaKind.IOU_GATED,
    threshold: float = 0.6,
) -> np.ndarray:
    """Exact expected policy gradient by full enumeration of (judgment, box)."""
    gradient = np.zeros(policy.n_params)
    for term in enumerate_terms(policy, sample, objective, meta_kind, threshold):
        gradient += term.contribution()
    return gradient


@dataclass(frozen=True)
class GatingBoundReport:
    bound_holds: bool
    lhs_norm: float
    p_acc: float
    rhs: float


def check_gating_bound(
    policy: ToyPolicy,
    dataset: Sequence[LabeledSample],
    meta_kind: MetaKind = MetaKind.IOU_GATED,
    threshold: float = 0.6,
    slack: float = 1e-12,
) -> GatingBoundReport:
    """Exact evaluation of the grounding-gradient norm bound.

    lhs is the norm of the grounding-related part of the joint objective's
    gradient; rhs multiplies the policy's exact judgment accuracy by the
    finite-dataset supremum of E_e||meta * grad log pi(e|x)||. On a single
    sample that supremum IS the sample's inner expectation, making the bound
    an identity-level theorem (Jensen); the sup keeps it a theorem across
    datasets, where the plain dataset mean provably is not (accuracy and
    gradient magnitude can correlate across samples).
    """
    if not dataset:
        raise ValueError("gating bound needs a non-empty dataset")
    lhs_vec = np.zeros(policy.n_params)
    p_acc_sum = 0.0
    rhs_inner_max = 0.0
    for sample in dataset:
        features = features_for(sample.scene, sample.prompt)
        p_false = policy.false_probability(features)
        p_acc_sum += p_false if sample.label is Judgment.FALSE else 1.0 - p_false
        if sample.label is not Judgment.FALSE:
            continue  # correct True verdicts emit no explanation
        q = policy.grounding_probabilities(features)
        metas = _candidate_meta_rewards(features, sample, meta_kind, threshold)
        inner = 0.0
        for k, meta in enumerate(metas):
            if meta == 0.0:
                continue
            e_grad = policy.grounding_log_gradient(features, k)
            lhs_vec += p_false * q[k] * meta * e_grad
            inner += q[k] * meta * float(np.linalg.norm(e_grad))
        rhs_inner_max = max(rhs_inner_max, inner)
    n = len(dataset)
    lhs = float(np.linalg.norm(lhs_vec / n))
    p_acc = p_acc_sum / n
    rhs = p_acc * rhs_inner_max
    return GatingBoundReport(bound_holds=bool(lhs <= rhs + slack), lhs_norm=lhs, p_acc=p_acc, rhs=rhs)


def finite_difference_check(policy: ToyPolicy, sample: LabeledSample, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference score gradients.

    Checks log p(judgment) for both verdicts and log q(box) for every
    candidate, over every parameter.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    features = features_for(sample.scene, sample.prompt)

    def log_probs(theta: np.ndarray) -> np.ndarray:
        probe = policy.clone()
        probe.set_params(theta)
        judgment = [
            probe.judgment_log_probability(features, Judgment.TRUE),
            probe.judgment_log_probability(features, Judgment.FALSE),
        ]
        return np.concatenate([judgment, probe.grounding_log_probabilities(features)])

    analytic = np.stack(
        [policy.judgment_log_gradient(features, Judgment.TRUE)]
        + [policy.judgment_log_gradient(features, Judgment.FALSE)]
        + [policy.grounding_log_gradient(features, k) for k in range(len(features.candidates))]
    )
    theta = policy.get_params()
    numeric = np.zeros_like(analytic)
    for i in range(policy.n_params):
        step = np.zeros_like(theta)
        step[i] = h
        numeric[:, i] = (log_probs(theta + step) - log_probs(theta - step)) / (2.0 * h)
    denom = np.maximum(np.abs(analytic), 1e-6)
    return float(np.max(np.abs(numeric - analytic) / denom))


# --- sweep driver ------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    p: float
    dim: int
    predicted_var: float
    empirical_var: float
    snr_lhs: float
    snr_rhs: float
    relative_error: float
    snr_population: float

    def csv_fields(self) -> list[str]:
        return [
            f"{self.p}",
            f"{self.predicted_var:.10g}",
            f"{self.empirical_var:.10g}",
            f"{self.snr_lhs:.10g}",
            f"{self.snr_rhs:.10g}",
            f"{self.relative_error:.10g}",
        ]


SWEEP_CSV_HEADER = ["p", "predicted_var", "empirical_var", "snr_lhs", "snr_rhs", "relative_error"]


def run_sweep(
    configs: Sequence[GatedEstimatorConfig],
    identity_tolerance: float = 0.02,
    snr_tolerance: float = 0.05,
    corrupt_gate: bool = False,
) -> tuple[list[SweepRow], list[str]]:
    """Run every config; returns CSV rows plus human-readable check failures."""
    rows: list[SweepRow] = []
    failures: list[str] = []
    for config in configs:
        report = simulate_gated(config, corrupt_gate=corrupt_gate)
        snr = check_snr(config, tolerance=snr_tolerance)
        pop = population_snr_joint(config.p_acc, config.dec_mean, config.dec_cov_diag)
        rows.append(
            SweepRow(
                p=config.p_acc,
                dim=config.dim,
                predicted_var=report.predicted_var_joint,
                empirical_var=report.empirical_var_joint,
                snr_lhs=snr.lhs,
                snr_rhs=snr.rhs,
                relative_error=report.relative_error,
                snr_population=pop,
            )
        )
        label = f"p={config.p_acc} dim={config.dim} seed={config.seed}"
        if report.relative_error > identity_tolerance:
            failures.append(
                f"variance identity violated at {label}: relative error {report.relative_error:.4f}"
            )
        if 0.0 < config.p_acc < 1.0 and not snr.holds:
            failures.append(f"SNR bound violated at {label}: lhs {snr.lhs:.4f} > rhs {snr.rhs:.4f}")
        if pop > 0 and abs(snr.lhs - pop) / pop > snr_tolerance:
            failures.append(
                f"SNR closed form mismatch at {label}: empirical {snr.lhs:.4f} vs population {pop:.4f}"
            )
        if not snr_monotone_in_p(config.dec_mean, config.dec_cov_diag):
            failures.append(f"SNR not monotone in p at {label}")
    return rows, failures


def verify_exact_gating(seed: int = 0, n_policies: int = 20, n_samples: int = 10) -> list[str]:
    """Exact-enumeration spot check: gated terms contribute zero grounding
    gradient and the per-sample norm bound holds; returns failure messages."""
    from .scenes import DatasetManifest, build_dataset

    samples = build_dataset(DatasetManifest(seed=seed, n_samples=n_samples))
    rng = np.random.default_rng(seed)
    failures: list[str] = []
    for policy_index in range(n_policies):
        policy = ToyPolicy.random(rng, scale=2.0)
        for sample_index, sample in enumerate(samples):
            label = f"policy {policy_index} sample {sample_index}"
            for term in enumerate_terms(policy, sample, Objective.JOINT):
                if term.accuracy == 0 and term.grounding_slice().any():
                    failures.append(f"gated term leaked a grounding gradient at {label}")
                    break
            report = check_gating_bound(policy, [sample])
            if not report.bound_holds:
                failures.append(
                    f"gradient norm bound violated at {label}: "
                    f"lhs {report.lhs_norm:.3e} > rhs {report.rhs:.3e}"
                )
    return failures
