"""Synthetic scene generation, canonical prompts, perturbations, and the
dataset-level decoupling transform.

The canonical prompt grammar doubles as the ground-truth oracle: a prompt
renders every object clause (color, category, exact region) plus one spatial
relation per adjacent pair, and ``check_consistency`` decides exactly which
clauses a scene violates. Every False sample produced here fails that check;
every True sample passes it.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .types import (
    GRID_SIDE,
    BBox,
    InvalidSample,
    Judgment,
    LabeledSample,
    SceneGraph,
    SceneObject,
    Stream,
    validate_sample,
)

DEFAULT_CATEGORIES = ("circle", "square", "triangle", "star", "hexagon", "diamond")
DEFAULT_COLORS = ("red", "blue", "green", "yellow", "purple", "orange")


class PerturbationKind(Enum):
    ADD_OBJECT = "AddObject"
    REMOVE_OBJECT = "RemoveObject"
    MODIFY_ATTRIBUTE = "ModifyAttribute"
    SWAP_SPATIAL_RELATION = "SwapSpatialRelation"


class NotPerturbable(ValueError):
    """The scene cannot support the requested perturbation kind."""


class DoubleDecouple(ValueError):
    """decouple() was handed a dataset that already carries Grounding copies."""


class UnparseablePrompt(ValueError):
    """The prompt does not follow the canonical grammar."""


class DatasetParseError(ValueError):
    """A JSONL dataset line failed to parse; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class DatasetManifest:
    """Declarative recipe for a reproducible dataset build."""

    seed: int
    n_samples: int
    true_false_ratio: Fraction = Fraction(1, 1)
    grid: int = GRID_SIDE
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    colors: tuple[str, ...] = DEFAULT_COLORS
    perturbation_mix: dict[PerturbationKind, float] = field(
        default_factory=lambda: {kind: 0.25 for kind in PerturbationKind}
    )

    def __post_init__(self) -> None:
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")
        if self.true_false_ratio <= 0:
            raise ValueError("true_false_ratio must be positive")
        if not 8 <= self.grid <= GRID_SIDE:
            raise ValueError(f"grid side must lie in [8, {GRID_SIDE}]")
        if not self.categories or not self.colors:
            raise ValueError("vocabulary must contain at least one category and color")
        weights = self.perturbation_mix
        if any(w < 0 for w in weights.values()):
            raise ValueError("perturbation weights must be non-negative")
        if abs(sum(weights.values()) - 1.0) > 1e-9:
            raise ValueError("perturbation weights must sum to 1")


# --- scene generation -------------------------------------------------------

MIN_OBJECTS = 2
MAX_OBJECTS = 8


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Independent, platform-stable generator for one (seed, index) slot."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _sample_region(rng: np.random.Generator, grid: int) -> BBox:
    min_side = max(2, grid // 12)
    max_side = max(min_side + 1, grid // 4)
    w = int(rng.integers(min_side, max_side + 1))
    h = int(rng.integers(min_side, max_side + 1))
    x1 = int(rng.integers(0, grid - w + 1))
    y1 = int(rng.integers(0, grid - h + 1))
    return BBox(x1, y1, x1 + w, y1 + h)


def _sample_distinct_region(
    rng: np.random.Generator, grid: int, taken_centers: set[tuple[int, int]], attempts: int = 200
) -> BBox:
    # Pairwise-distinct centers keep the spatial-relation choice well defined.
    for _ in range(attempts):
        region = _sample_region(rng, grid)
        if region.center2() not in taken_centers:
            return region
    raise NotPerturbable("could not place a region with a fresh center")


def generate_scene(rng: np.random.Generator, manifest: DatasetManifest) -> SceneGraph:
    """Scene with 2-8 objects, attributes from the manifest vocabulary."""
    n_objects = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    centers: set[tuple[int, int]] = set()
    objects = []
    for object_id in range(1, n_objects + 1):
        region = _sample_distinct_region(rng, manifest.grid, centers)
        centers.add(region.center2())
        objects.append(
            SceneObject(
                id=object_id,
                category=str(rng.choice(manifest.categories)),
                color=str(rng.choice(manifest.colors)),
                region=region,
            )
        )
    return SceneGraph(canvas=manifest.grid, objects=tuple(objects))


# --- canonical prompts ------------------------------------------------------

RELATIONS = ("left of", "right of", "above", "below")


@dataclass(frozen=True)
class ObjectClause:
    category: str
    color: str
    region: BBox


@dataclass(frozen=True)
class RelationClause:
    """1-based indices into the prompt's object clause list."""

    subject: int
    relation: str
    object: int


@dataclass(frozen=True)
class PromptClauses:
    objects: tuple[ObjectClause, ...]
    relations: tuple[RelationClause, ...]


def _canonical_order(objects: Iterable[SceneObject]) -> list[SceneObject]:
    return sorted(
        objects,
        key=lambda o: (o.region.x1, o.region.y1, o.region.x2, o.region.y2, o.category, o.color),
    )


def spatial_relation(a: BBox, b: BBox) -> str:
    """Canonical relation between two regions with distinct centers.

    The axis with the larger center offset wins; exact ties go horizontal.
    """
    ax, ay = a.center2()
    bx, by = b.center2()
    dx, dy = bx - ax, by - ay
    if dx == 0 and dy == 0:
        raise ValueError("regions share a center; no relation is defined")
    if abs(dx) >= abs(dy) and dx != 0:
        return "left of" if dx > 0 else "right of"
    return "above" if dy > 0 else "below"


def relation_holds(a: BBox, relation: str, b: BBox) -> bool:
    ax, ay = a.center2()
    bx, by = b.center2()
    if relation == "left of":
        return ax < bx
    if relation == "right of":
        return ax > bx
    if relation == "above":
        return ay < by
    if relation == "below":
        return ay > by
    raise ValueError(f"unknown relation {relation!r}")


def scene_clauses(scene: SceneGraph) -> PromptClauses:
    """Clauses the canonical prompt for this scene would state."""
    ordered = _canonical_order(scene.objects)
    objects = tuple(ObjectClause(o.category, o.color, o.region) for o in ordered)
    relations = tuple(
        RelationClause(i + 1, spatial_relation(ordered[i].region, ordered[i + 1].region), i + 2)
        for i in range(len(ordered) - 1)
    )
    return PromptClauses(objects=objects, relations=relations)


def render_prompt(clauses: PromptClauses) -> str:
    n = len(clauses.objects)
    noun = "object" if n == 1 else "objects"
    body = "; ".join(
        f"a {c.color} {c.category} at {json.dumps(c.region.to_payload(), separators=(',', ':'))}"
        for c in clauses.objects
    )
    text = f"scene with {n} {noun}: {body}."
    if clauses.relations:
        rels = "; ".join(f"object {r.subject} is {r.relation} object {r.object}" for r in clauses.relations)
        text += f" relations: {rels}."
    return text


def derive_prompt(scene: SceneGraph) -> str:
    """Canonical true prompt for a scene; (scene, derive_prompt(scene)) is a True pair."""
    return render_prompt(scene_clauses(scene))


_PROMPT_HEAD_RE = re.compile(r"^scene with (\d+) objects?: (.*?)\.(?: relations: (.*?)\.)?$", re.DOTALL)
_OBJECT_CLAUSE_RE = re.compile(r"^a (\w+) (\w+) at \[(\d+),(\d+),(\d+),(\d+)\]$")
_RELATION_CLAUSE_RE = re.compile(r"^object (\d+) is (left of|right of|above|below) object (\d+)$")


def parse_prompt(prompt: str) -> PromptClauses:
    """Invert render_prompt; raises UnparseablePrompt on any deviation."""
    head = _PROMPT_HEAD_RE.match(prompt)
    if head is None:
        raise UnparseablePrompt(f"prompt does not match the canonical grammar: {prompt!r}")
    count, body, rels = int(head.group(1)), head.group(2), head.group(3)
    objects = []
    for chunk in body.split("; "):
        m = _OBJECT_CLAUSE_RE.match(chunk)
        if m is None:
            raise UnparseablePrompt(f"bad object clause: {chunk!r}")
        color, category = m.group(1), m.group(2)
        try:
            region = BBox(int(m.group(3)), int(m.group(4)), int(m.group(5)), int(m.group(6)))
        except InvalidSample as exc:
            raise UnparseablePrompt(f"bad region in clause {chunk!r}: {exc}") from None
        objects.append(ObjectClause(category=category, color=color, region=region))
    if len(objects) != count:
        raise UnparseablePrompt(f"prompt declares {count} objects but lists {len(objects)}")
    relations = []
    if rels is not None:
        for chunk in rels.split("; "):
            m = _RELATION_CLAUSE_RE.match(chunk)
            if m is None:
                raise UnparseablePrompt(f"bad relation clause: {chunk!r}")
            subject, obj = int(m.group(1)), int(m.group(3))
            if not (1 <= subject <= count and 1 <= obj <= count and subject != obj):
                raise UnparseablePrompt(f"relation indices out of range: {chunk!r}")
            relations.append(RelationClause(subject, m.group(2), obj))
    return PromptClauses(objects=tuple(objects), relations=tuple(relations))


# --- consistency checking ---------------------------------------------------


class ViolationKind(Enum):
    MISSING_OBJECT = "missing_object"  # clause has no scene counterpart
    EXTRA_OBJECT = "extra_object"  # scene object not in the prompt
    WRONG_ATTRIBUTE = "wrong_attribute"  # right category+region, wrong color
    MOVED_OBJECT = "moved_object"  # right category+color, wrong region
    BROKEN_RELATION = "broken_relation"  # stated relation fails on the scene


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    regions: tuple[BBox, ...]
    clause: ObjectClause | None = None
    actual: SceneObject | None = None


def check_consistency(scene: SceneGraph, clauses: PromptClauses) -> list[Violation]:
    """Exact list of ways the scene fails the prompt; empty means consistent.

    Matching runs in tiers: exact (category, color, region) triples first,
    then same category+region (attribute error), then same category+color
    (moved object); leftovers become missing/extra objects. Relations are
    checked on the scene positions of matched endpoints.
    """
    clause_match: dict[int, SceneObject | None] = {i: None for i in range(len(clauses.objects))}
    free_objects = list(scene.objects)

    def claim(ci: int, predicate) -> None:
        if clause_match[ci] is not None:
            return
        for obj in free_objects:
            if predicate(clauses.objects[ci], obj):
                clause_match[ci] = obj
                free_objects.remove(obj)
                return

    for ci in range(len(clauses.objects)):
        claim(ci, lambda c, o: (c.category, c.color, c.region) == (o.category, o.color, o.region))
    exact = {ci for ci, obj in clause_match.items() if obj is not None}
    for ci in range(len(clauses.objects)):
        claim(ci, lambda c, o: c.category == o.category and c.region == o.region)
    for ci in range(len(clauses.objects)):
        claim(ci, lambda c, o: c.category == o.category and c.color == o.color)

    violations: list[Violation] = []
    for ci, clause in enumerate(clauses.objects):
        obj = clause_match[ci]
        if ci in exact:
            continue
        if obj is None:
            violations.append(Violation(ViolationKind.MISSING_OBJECT, (clause.region,), clause=clause))
        elif clause.region == obj.region:
            violations.append(Violation(ViolationKind.WRONG_ATTRIBUTE, (clause.region,), clause=clause, actual=obj))
        else:
            regions = tuple(sorted({clause.region, obj.region}, key=lambda b: b.to_payload()))
            violations.append(Violation(ViolationKind.MOVED_OBJECT, regions, clause=clause, actual=obj))
    for obj in free_objects:
        violations.append(Violation(ViolationKind.EXTRA_OBJECT, (obj.region,), actual=obj))

    for rel in clauses.relations:
        a = clause_match[rel.subject - 1]
        b = clause_match[rel.object - 1]
        if a is None or b is None:
            continue  # endpoint already reported as missing
        if not relation_holds(a.region, rel.relation, b.region):
            regions = tuple(sorted({a.region, b.region}, key=lambda b_: b_.to_payload()))
            violations.append(Violation(ViolationKind.BROKEN_RELATION, regions, actual=a))
    return violations


def is_consistent(scene: SceneGraph, prompt: str) -> bool:
    return not check_consistency(scene, parse_prompt(prompt))


def violation_regions(violations: Sequence[Violation]) -> tuple[BBox, ...]:
    """Deduplicated, canonically ordered union of all violating regions."""
    regions = {region for v in violations for region in v.regions}
    return tuple(sorted(regions, key=lambda b: b.to_payload()))


def candidate_grid_cells(canvas: int, per_side: int = 4) -> list[BBox]:
    """Partition of the canvas into per_side x per_side cells, row-major."""
    if canvas < per_side:
        raise ValueError("canvas too small to partition")
    bounds = [round(i * canvas / per_side) for i in range(per_side + 1)]
    return [
        BBox(bounds[i], bounds[j], bounds[i + 1], bounds[j + 1])
        for j in range(per_side)
        for i in range(per_side)
    ]


# --- perturbations ----------------------------------------------------------


def perturb(
    scene: SceneGraph,
    prompt: str,
    kind: PerturbationKind,
    rng: np.random.Generator,
    categories: Sequence[str] | None = None,
    colors: Sequence[str] | None = None,
) -> LabeledSample:
    """Turn a consistent (scene, prompt) pair into a label=False sample.

    AddObject and ModifyAttribute edit the prompt (scene fixed); RemoveObject
    and SwapSpatialRelation edit the scene (prompt fixed). The result always
    fails the consistency check, with gt_regions set to the affected regions.
    Vocabulary defaults to the scene's own tokens plus the module defaults.
    """
    if categories is None:
        categories = tuple(sorted({o.category for o in scene.objects} | set(DEFAULT_CATEGORIES)))
    if colors is None:
        colors = tuple(sorted({o.color for o in scene.objects} | set(DEFAULT_COLORS)))
    clauses = parse_prompt(prompt)
    if kind is PerturbationKind.ADD_OBJECT:
        sample = _perturb_add(scene, rng, tuple(categories), tuple(colors))
    elif kind is PerturbationKind.REMOVE_OBJECT:
        sample = _perturb_remove(scene, prompt, rng)
    elif kind is PerturbationKind.MODIFY_ATTRIBUTE:
        sample = _perturb_attribute(scene, clauses, rng, tuple(colors))
    else:
        sample = _perturb_swap(scene, prompt, clauses, rng)
    remaining = check_consistency(sample.scene, parse_prompt(sample.prompt))
    if not remaining:
        raise NotPerturbable(f"{kind.value} produced a still-consistent pair")
    return sample


def _perturb_add(
    scene: SceneGraph, rng: np.random.Generator, categories: tuple[str, ...], colors: tuple[str, ...]
) -> LabeledSample:
    centers = {o.region.center2() for o in scene.objects}
    region = _sample_distinct_region(rng, scene.canvas, centers)
    phantom = SceneObject(
        id=max((o.id for o in scene.objects), default=0) + 1,
        category=str(rng.choice(categories)),
        color=str(rng.choice(colors)),
        region=region,
    )
    augmented = SceneGraph(canvas=scene.canvas, objects=scene.objects + (phantom,))
    return LabeledSample(
        scene=scene,
        prompt=derive_prompt(augmented),
        label=Judgment.FALSE,
        gt_regions=(region,),
    )


def _perturb_remove(scene: SceneGraph, prompt: str, rng: np.random.Generator) -> LabeledSample:
    if len(scene.objects) < 2:
        raise NotPerturbable("removing from a scene with fewer than 2 objects")
    victim = scene.objects[int(rng.integers(0, len(scene.objects)))]
    remaining = tuple(o for o in scene.objects if o.id != victim.id)
    return LabeledSample(
        scene=SceneGraph(canvas=scene.canvas, objects=remaining),
        prompt=prompt,
        label=Judgment.FALSE,
        gt_regions=(victim.region,),
    )


def _perturb_attribute(
    scene: SceneGraph, clauses: PromptClauses, rng: np.random.Generator, colors: tuple[str, ...]
) -> LabeledSample:
    target = scene.objects[int(rng.integers(0, len(scene.objects)))]
    alternatives = [c for c in colors if c != target.color]
    if not alternatives:
        raise NotPerturbable("attribute change needs at least two colors in play")
    new_color = str(alternatives[int(rng.integers(0, len(alternatives)))])
    recolored = tuple(
        replace(o, color=new_color) if o.id == target.id else o for o in scene.objects
    )
    return LabeledSample(
        scene=scene,
        prompt=derive_prompt(SceneGraph(canvas=scene.canvas, objects=recolored)),
        label=Judgment.FALSE,
        gt_regions=(target.region,),
    )


def _perturb_swap(
    scene: SceneGraph, prompt: str, clauses: PromptClauses, rng: np.random.Generator
) -> LabeledSample:
    pairs = [
        (a, b)
        for i, a in enumerate(scene.objects)
        for b in scene.objects[i + 1 :]
        if (a.category, a.color) != (b.category, b.color)
    ]
    if not pairs:
        raise NotPerturbable("relation swap needs two objects with distinct attributes")
    a, b = pairs[int(rng.integers(0, len(pairs)))]
    swapped = SceneGraph(
        canvas=scene.canvas,
        objects=tuple(
            replace(o, region=b.region) if o.id == a.id else replace(o, region=a.region) if o.id == b.id else o
            for o in scene.objects
        ),
    )
    # Moving two objects can also break relation clauses against bystanders,
    # so ground truth is everything the checker attributes, not just the pair.
    regions = violation_regions(check_consistency(swapped, clauses))
    return LabeledSample(
        scene=swapped,
        prompt=prompt,
        label=Judgment.FALSE,
        gt_regions=regions,
    )


def make_unsatisfiable(scene: SceneGraph) -> tuple[SceneGraph, str]:
    """Pair a scene with a prompt no editor can ever satisfy.

    One relation clause is flipped against the exact regions the object
    clauses pin down, so every scene either breaks an object clause or the
    flipped relation.
    """
    clauses = scene_clauses(scene)
    if not clauses.relations:
        raise NotPerturbable("need at least one relation clause to contradict")
    flip = {"left of": "right of", "right of": "left of", "above": "below", "below": "above"}
    first = clauses.relations[0]
    flipped = RelationClause(first.subject, flip[first.relation], first.object)
    doctored = PromptClauses(objects=clauses.objects, relations=(flipped,) + clauses.relations[1:])
    return scene, render_prompt(doctored)


# --- dataset assembly -------------------------------------------------------


def _perturbation_order(manifest: DatasetManifest, rng: np.random.Generator) -> list[PerturbationKind]:
    kinds = list(PerturbationKind)
    weights = np.array([manifest.perturbation_mix.get(k, 0.0) for k in kinds])
    if weights.sum() <= 0:
        raise ValueError("perturbation mix has no positive weight")
    first = kinds[int(rng.choice(len(kinds), p=weights / weights.sum()))]
    rest = [k for k in kinds if k is not first]
    return [first] + rest


def true_sample_count(manifest: DatasetManifest) -> int:
    """Number of True samples: n * ratio/(1+ratio), rounded half away from zero."""
    ratio = manifest.true_false_ratio
    share = Fraction(manifest.n_samples) * ratio / (1 + ratio)
    return int(share + Fraction(1, 2))


def build_dataset(manifest: DatasetManifest) -> list[LabeledSample]:
    """Deterministic labeled dataset per the manifest; all Judgment-stream."""
    n_true = true_sample_count(manifest)
    labels = [Judgment.TRUE] * n_true + [Judgment.FALSE] * (manifest.n_samples - n_true)
    # Label order gets its own stream, outside the per-scene index range.
    mix_rng = scene_rng(manifest.seed, 2**31)
    mix_rng.shuffle(labels)

    samples: list[LabeledSample] = []
    for index, label in enumerate(labels):
        rng = scene_rng(manifest.seed, index)
        scene = generate_scene(rng, manifest)
        prompt = derive_prompt(scene)
        if label is Judgment.TRUE:
            samples.append(LabeledSample(scene=scene, prompt=prompt, label=Judgment.TRUE))
            continue
        sample = None
        for kind in _perturbation_order(manifest, rng):
            try:
                sample = perturb(scene, prompt, kind, rng, manifest.categories, manifest.colors)
                break
            except NotPerturbable:
                continue
        if sample is None:
            raise NotPerturbable(f"no perturbation kind applies to scene at index {index}")
        samples.append(sample)
    return samples


def decouple(dataset: Sequence[LabeledSample]) -> list[LabeledSample]:
    """Original samples followed by a Grounding-tagged copy of every False one."""
    if any(s.stream is Stream.GROUNDING for s in dataset):
        raise DoubleDecouple("dataset already contains Grounding-stream samples")
    copies = [replace(s, stream=Stream.GROUNDING) for s in dataset if s.label is Judgment.FALSE]
    return list(dataset) + copies


# --- JSONL persistence ------------------------------------------------------


def save_jsonl(samples: Iterable[LabeledSample], path: str | Path) -> None:
    path = Path(path)
    lines = [json.dumps(s.to_payload(), separators=(",", ":")) for s in samples]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    tmp.replace(path)


def load_jsonl(path: str | Path) -> list[LabeledSample]:
    samples = []
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
                sample = LabeledSample.from_payload(payload)
                validate_sample(sample)
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetParseError(line_number, str(exc)) from None
            samples.append(sample)
    return samples
