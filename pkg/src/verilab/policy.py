"""Linear-softmax toy verifier policy with hand-crafted consistency features.

The policy factors as p(judgment | x) * p(region | x): a judgment head scoring
global consistency features into a 2-way softmax, and a grounding head scoring
per-candidate-region features into a K-way softmax. Both heads are linear, so
log-probability gradients are exact and cheap, which is what the gradient
theory checks rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .scenes import ViolationKind, candidate_grid_cells, check_consistency, parse_prompt, violation_regions
from .types import GRID_SIDE, BBox, Judgment, SceneGraph

JUDGMENT_DIM = 4
GROUNDING_DIM = 4
GRID_CELLS_PER_SIDE = 4


@dataclass(frozen=True)
class PolicyFeatures:
    """Cached per-(scene, prompt) feature bundle.

    judgment: [consistent flag, violated flag, object-level violation share,
    relation-level violation share]. Every judgment feature is one-sided
    (active on consistent XOR violated scenes): a component shared between
    the classes would let reward signal from one class drag the other class's
    logit along with it, which at a bad initialization locks the policy into
    a constant verdict. candidate_features rows: [violating region,
    scene-object region, prompt-clause region, grid cell].
    """

    judgment: np.ndarray
    candidates: tuple[BBox, ...]
    candidate_features: np.ndarray


@lru_cache(maxsize=65536)
def features_for(scene: SceneGraph, prompt: str) -> PolicyFeatures:
    clauses = parse_prompt(prompt)
    violations = check_consistency(scene, clauses)
    # Only object-level violation regions are actionable targets; a broken
    # relation's endpoints include correctly-placed bystanders.
    bad_regions = set(
        violation_regions([v for v in violations if v.kind is not ViolationKind.BROKEN_RELATION])
    )

    object_level = sum(1 for v in violations if v.kind is not ViolationKind.BROKEN_RELATION)
    relation_level = len(violations) - object_level
    judgment = np.array(
        [
            0.0 if violations else 1.0,
            1.0 if violations else 0.0,
            min(object_level, 4) / 4.0,
            min(relation_level, 4) / 4.0,
        ]
    )

    scene_regions = [obj.region for obj in scene.objects]
    clause_regions = [c.region for c in clauses.objects]
    cells = candidate_grid_cells(scene.canvas, GRID_CELLS_PER_SIDE)
    candidates: list[BBox] = []
    for region in scene_regions + clause_regions + cells:
        if region not in candidates:
            candidates.append(region)

    scene_set, clause_set = set(scene_regions), set(clause_regions)
    rows = np.array(
        [
            [
                1.0 if region in bad_regions else 0.0,
                1.0 if region in scene_set else 0.0,
                1.0 if region in clause_set else 0.0,
                1.0 if region not in scene_set and region not in clause_set else 0.0,
            ]
            for region in candidates
        ]
    )
    return PolicyFeatures(judgment=judgment, candidates=tuple(candidates), candidate_features=rows)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


@dataclass
class ToyPolicy:
    """Two linear heads over PolicyFeatures; parameters are plain arrays."""

    judgment_weights: np.ndarray
    grounding_weights: np.ndarray
    temperature: float = 1.0

    def __post_init__(self) -> None:
        self.judgment_weights = np.asarray(self.judgment_weights, dtype=float)
        self.grounding_weights = np.asarray(self.grounding_weights, dtype=float)
        if self.judgment_weights.shape != (JUDGMENT_DIM,):
            raise ValueError(f"judgment head needs {JUDGMENT_DIM} weights")
        if self.grounding_weights.shape != (GROUNDING_DIM,):
            raise ValueError(f"grounding head needs {GROUNDING_DIM} weights")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    # -- constructors --------------------------------------------------------

    @classmethod
    def zeros(cls, temperature: float = 1.0) -> "ToyPolicy":
        return cls(np.zeros(JUDGMENT_DIM), np.zeros(GROUNDING_DIM), temperature)

    @classmethod
    def oracle(cls, scale: float = 8.0, temperature: float = 1.0) -> "ToyPolicy":
        """Saturated weights that read the consistency features directly."""
        return cls(scale * np.array([-1.0, 1.0, 0.0, 0.0]), scale * np.array([1.0, 0.0, 0.0, 0.0]), temperature)

    @classmethod
    def inverted(cls, scale: float = 2.0, temperature: float = 1.0, grounding_bias: float = 0.2) -> "ToyPolicy":
        """Systematically wrong judgment head (low accuracy).

        The inversion lives in the same one-sided channels learning uses, so
        recovery is possible at training speed. The grounding head starts
        mildly repelled from violation regions rather than exactly uniform:
        at uniform weights the greedy decode sits on an argmax knife-edge
        where infinitesimal accumulated signal flips every evaluation at once.
        """
        return cls(
            scale * np.array([1.0, -1.0, 0.0, 0.0]),
            np.array([-grounding_bias, 0.0, 0.0, 0.0]),
            temperature,
        )

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 1.0, temperature: float = 1.0) -> "ToyPolicy":
        return cls(
            rng.normal(0.0, scale, JUDGMENT_DIM),
            rng.normal(0.0, scale, GROUNDING_DIM),
            temperature,
        )

    def clone(self) -> "ToyPolicy":
        return ToyPolicy(self.judgment_weights.copy(), self.grounding_weights.copy(), self.temperature)

    # -- flat parameter view (used by finite differences) ---------------------

    @property
    def n_params(self) -> int:
        return JUDGMENT_DIM + GROUNDING_DIM

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.judgment_weights, self.grounding_weights])

    def set_params(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        self.judgment_weights = theta[:JUDGMENT_DIM].copy()
        self.grounding_weights = theta[JUDGMENT_DIM:].copy()

    # -- probabilities ---------------------------------------------------------

    def false_probability(self, features: PolicyFeatures) -> float:
        logit = float(self.judgment_weights @ features.judgment) / self.temperature
        return float(_softmax(np.array([0.0, logit]))[1])

    def judgment_probability(self, features: PolicyFeatures, judgment: Judgment) -> float:
        p_false = self.false_probability(features)
        return p_false if judgment is Judgment.FALSE else 1.0 - p_false

    def grounding_probabilities(self, features: PolicyFeatures) -> np.ndarray:
        logits = features.candidate_features @ self.grounding_weights / self.temperature
        return _softmax(logits)

    def judgment_log_probability(self, features: PolicyFeatures, judgment: Judgment) -> float:
        logit = float(self.judgment_weights @ features.judgment) / self.temperature
        log_p_false = logit - np.logaddexp(0.0, logit)
        if judgment is Judgment.FALSE:
            return float(log_p_false)
        return float(-np.logaddexp(0.0, logit))

    def grounding_log_probabilities(self, features: PolicyFeatures) -> np.ndarray:
        logits = features.candidate_features @ self.grounding_weights / self.temperature
        shifted = logits - logits.max()
        return shifted - np.log(np.exp(shifted).sum())

    # -- exact log-probability gradients wrt the flat parameter vector --------

    def judgment_log_gradient(self, features: PolicyFeatures, judgment: Judgment) -> np.ndarray:
        p_false = self.false_probability(features)
        indicator = 1.0 if judgment is Judgment.FALSE else 0.0
        grad = np.zeros(self.n_params)
        grad[:JUDGMENT_DIM] = (indicator - p_false) * features.judgment / self.temperature
        return grad

    def grounding_log_gradient(self, features: PolicyFeatures, candidate: int) -> np.ndarray:
        probs = self.grounding_probabilities(features)
        rows = features.candidate_features
        grad = np.zeros(self.n_params)
        grad[JUDGMENT_DIM:] = (rows[candidate] - probs @ rows) / self.temperature
        return grad

    # -- decoding ----------------------------------------------------------------

    def greedy_judgment(self, features: PolicyFeatures) -> Judgment:
        return Judgment.FALSE if self.false_probability(features) > 0.5 else Judgment.TRUE

    def greedy_candidate(self, features: PolicyFeatures) -> int:
        logits = features.candidate_features @ self.grounding_weights
        return int(np.argmax(logits))

    def sample_judgment(self, features: PolicyFeatures, rng: np.random.Generator) -> Judgment:
        return Judgment.FALSE if rng.random() < self.false_probability(features) else Judgment.TRUE

    def sample_candidate(self, features: PolicyFeatures, rng: np.random.Generator) -> int:
        probs = self.grounding_probabilities(features)
        return int(rng.choice(len(probs), p=probs))

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path, seed: int = 0) -> None:
        """Checkpoint: header fields plus the flat parameter vector."""
        payload = {
            "dimension": self.n_params,
            "grid_cells": GRID_CELLS_PER_SIDE * GRID_CELLS_PER_SIDE,
            "grid_side": GRID_SIDE,
            "seed": seed,
            "temperature": self.temperature,
            "weights": self.get_params().tolist(),
        }
        Path(path).write_text(json.dumps(payload, separators=(",", ":")) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ToyPolicy":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        weights = np.array(payload["weights"], dtype=float)
        if weights.shape != (int(payload["dimension"]),):
            raise ValueError(f"checkpoint weight count does not match its header: {path}")
        return cls(
            weights[:JUDGMENT_DIM],
            weights[JUDGMENT_DIM:],
            float(payload["temperature"]),
        )
