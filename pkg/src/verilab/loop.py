"""Verify-localize-edit loop over pluggable verifier and editor clients.

Each round the verifier judges the current scene against the prompt; a False
verdict comes with spatial boxes and aligned atomic edit actions (Add, Delete,
Modify), which the editor applies before the next verification. The loop runs
until the verifier answers True (Accepted) or the round cap is hit
(Exhausted). Clients are stateless between rounds; in-repo clients are
deterministic, remote ones speak the HTTP contract at the bottom.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np
import requests

from .policy import ToyPolicy, features_for
from .rewards import iou
from .scenes import Violation, ViolationKind, check_consistency, parse_prompt
from .types import BBox, InvalidSample, Judgment, SceneGraph, SceneObject


class ClientError(RuntimeError):
    """A verifier/editor client failed; carries the partial loop state."""

    def __init__(self, message: str, state: "LoopState | None" = None):
        super().__init__(message)
        self.state = state


class EditOp(Enum):
    ADD = "Add"
    DELETE = "Delete"
    MODIFY = "Modify"


_ADD_RE = re.compile(r"^add (\w+) (\w+) at \[(\d+),(\d+),(\d+),(\d+)\]$")
_DELETE_RE = re.compile(r"^delete (\w+) (\w+) at \[(\d+),(\d+),(\d+),(\d+)\]$")
_COLOR_RE = re.compile(r"^modify (\w+) at \[(\d+),(\d+),(\d+),(\d+)\] color to (\w+)$")
_MOVE_RE = re.compile(
    r"^modify (\w+) (\w+) at \[(\d+),(\d+),(\d+),(\d+)\] position to \[(\d+),(\d+),(\d+),(\d+)\]$"
)


def _render_region(region: BBox) -> str:
    return json.dumps(region.to_payload(), separators=(",", ":"))


@dataclass(frozen=True)
class SemanticAction:
    """One atomic edit instruction, canonically templated.

    The instruction string is the editor-facing form; it always re-renders
    from the structured fields, which the constructor verifies.
    """

    op: EditOp
    target_region: BBox
    instruction: str

    def __post_init__(self) -> None:
        parsed = parse_instruction(self.instruction)
        if parsed.op is not self.op:
            raise InvalidSample(f"instruction {self.instruction!r} does not perform a {self.op.value}")
        if parsed.target != self.target_region:
            raise InvalidSample(f"instruction {self.instruction!r} does not target {self.target_region}")

    def to_payload(self) -> dict[str, Any]:
        return {
            "op": self.op.value,
            "target_region": self.target_region.to_payload(),
            "instruction": self.instruction,
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "SemanticAction":
        return cls(
            op=EditOp(payload["op"]),
            target_region=BBox.from_payload(payload["target_region"]),
            instruction=str(payload["instruction"]),
        )


@dataclass(frozen=True)
class ParsedInstruction:
    op: EditOp
    target: BBox
    color: str | None
    category: str | None
    new_color: str | None = None
    new_region: BBox | None = None


def parse_instruction(instruction: str) -> ParsedInstruction:
    if m := _ADD_RE.match(instruction):
        return ParsedInstruction(EditOp.ADD, _box(m, 3), color=m.group(1), category=m.group(2))
    if m := _DELETE_RE.match(instruction):
        return ParsedInstruction(EditOp.DELETE, _box(m, 3), color=m.group(1), category=m.group(2))
    if m := _COLOR_RE.match(instruction):
        return ParsedInstruction(
            EditOp.MODIFY, _box(m, 2), color=None, category=m.group(1), new_color=m.group(6)
        )
    if m := _MOVE_RE.match(instruction):
        return ParsedInstruction(
            EditOp.MODIFY, _box(m, 3), color=m.group(1), category=m.group(2), new_region=_box(m, 7)
        )
    raise InvalidSample(f"unrecognized edit instruction: {instruction!r}")


def _box(match: re.Match, start: int) -> BBox:
    return BBox(*(int(match.group(start + i)) for i in range(4)))


def add_action(color: str, category: str, region: BBox) -> SemanticAction:
    return SemanticAction(EditOp.ADD, region, f"add {color} {category} at {_render_region(region)}")


def delete_action(color: str, category: str, region: BBox) -> SemanticAction:
    return SemanticAction(EditOp.DELETE, region, f"delete {color} {category} at {_render_region(region)}")


def recolor_action(category: str, region: BBox, new_color: str) -> SemanticAction:
    return SemanticAction(
        EditOp.MODIFY, region, f"modify {category} at {_render_region(region)} color to {new_color}"
    )


def move_action(color: str, category: str, region: BBox, new_region: BBox) -> SemanticAction:
    return SemanticAction(
        EditOp.MODIFY,
        region,
        f"modify {color} {category} at {_render_region(region)} position to {_render_region(new_region)}",
    )


@dataclass(frozen=True)
class VerifierAction:
    """Verifier verdict plus aligned spatial boxes and edit instructions."""

    judgment: Judgment
    spatial: tuple[BBox, ...] = ()
    semantic: tuple[SemanticAction, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "spatial", tuple(self.spatial))
        object.__setattr__(self, "semantic", tuple(self.semantic))
        if len(self.spatial) != len(self.semantic):
            raise InvalidSample("spatial boxes and semantic actions must align 1:1")
        if self.judgment is Judgment.TRUE and self.spatial:
            raise InvalidSample("a True verdict carries no actions")
        if self.judgment is Judgment.FALSE and not self.spatial:
            raise InvalidSample("a False verdict must localize at least one region")
        for box, action in zip(self.spatial, self.semantic):
            if action.target_region != box:
                raise InvalidSample("semantic action target must equal its spatial box")

    def to_payload(self) -> dict[str, Any]:
        return {
            "judgment": self.judgment.serialize(),
            "spatial": [b.to_payload() for b in self.spatial],
            "semantic": [a.to_payload() for a in self.semantic],
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "VerifierAction":
        return cls(
            judgment=Judgment.parse(payload["judgment"]),
            spatial=tuple(BBox.from_payload(b) for b in payload["spatial"]),
            semantic=tuple(SemanticAction.from_payload(a) for a in payload["semantic"]),
        )


class LoopStatus(Enum):
    RUNNING = "Running"
    ACCEPTED = "Accepted"
    EXHAUSTED = "Exhausted"


@dataclass(frozen=True)
class HistoryEntry:
    action: VerifierAction
    scene_after: SceneGraph | None  # None when the verdict was True (no edit)

    def to_payload(self) -> dict[str, Any]:
        return {
            "action": self.action.to_payload(),
            "scene_after": self.scene_after.to_payload() if self.scene_after else None,
        }


@dataclass(frozen=True)
class LoopState:
    scene: SceneGraph
    prompt: str
    step: int
    history: tuple[HistoryEntry, ...]
    status: LoopStatus

    def __post_init__(self) -> None:
        if self.status is LoopStatus.ACCEPTED:
            if not self.history or self.history[-1].action.judgment is not Judgment.TRUE:
                raise InvalidSample("Accepted states end on a True verdict")

    def to_payload(self) -> dict[str, Any]:
        return {
            "scene": self.scene.to_payload(),
            "prompt": self.prompt,
            "step": self.step,
            "status": self.status.value,
            "history": [entry.to_payload() for entry in self.history],
        }


class VerifierClient(Protocol):
    def act(self, scene: SceneGraph, prompt: str) -> VerifierAction: ...


class EditorClient(Protocol):
    def edit(self, scene: SceneGraph, actions: Sequence[SemanticAction]) -> SceneGraph: ...


def run_loop(
    initial: SceneGraph,
    prompt: str,
    verifier: VerifierClient,
    editor: EditorClient,
    max_steps: int = 10,
    observer: Callable[[LoopState], None] | None = None,
) -> LoopState:
    """Alternate verify and edit until Accepted, or Exhausted at max_steps rounds.

    ``step`` counts completed verify-edit rounds, so a scene accepted on the
    first verification finishes at step 0 and an exhausted run performed
    exactly max_steps verifications. Client failures raise ClientError with
    the partial history attached.
    """
    scene = initial
    history: list[HistoryEntry] = []

    def state(status: LoopStatus, step: int) -> LoopState:
        return LoopState(scene=scene, prompt=prompt, step=step, history=tuple(history), status=status)

    step = 0
    while True:
        if step >= max_steps:
            final = state(LoopStatus.EXHAUSTED, step)
            if observer:
                observer(final)
            return final
        try:
            action = verifier.act(scene, prompt)
        except Exception as exc:
            raise ClientError(f"verifier failed: {exc}", state(LoopStatus.RUNNING, step)) from exc
        if action.judgment is Judgment.TRUE:
            history.append(HistoryEntry(action=action, scene_after=None))
            final = state(LoopStatus.ACCEPTED, step)
            if observer:
                observer(final)
            return final
        try:
            edited = editor.edit(scene, action.semantic)
        except Exception as exc:
            raise ClientError(f"editor failed: {exc}", state(LoopStatus.RUNNING, step)) from exc
        if not isinstance(edited, SceneGraph):
            raise ClientError("editor returned a non-scene payload", state(LoopStatus.RUNNING, step))
        history.append(HistoryEntry(action=action, scene_after=edited))
        scene = edited
        step += 1
        if observer:
            observer(state(LoopStatus.RUNNING, step))


# --- oracle verifier ----------------------------------------------------------


def _fix_for_violation(violation: Violation) -> SemanticAction:
    clause, obj = violation.clause, violation.actual
    if violation.kind is ViolationKind.MISSING_OBJECT:
        assert clause is not None
        return add_action(clause.color, clause.category, clause.region)
    if violation.kind is ViolationKind.EXTRA_OBJECT:
        assert obj is not None
        return delete_action(obj.color, obj.category, obj.region)
    if violation.kind is ViolationKind.WRONG_ATTRIBUTE:
        assert clause is not None
        return recolor_action(clause.category, clause.region, clause.color)
    if violation.kind is ViolationKind.MOVED_OBJECT:
        assert clause is not None and obj is not None
        return move_action(obj.color, obj.category, obj.region, clause.region)
    raise ValueError(f"no single-object fix for {violation.kind}")


def oracle_verifier(scene: SceneGraph, prompt: str) -> VerifierAction:
    """Ground-truth verifier: consistency check decides the verdict, and each
    violation maps to its canonical fixing action.

    Relation violations are repaired by swapping the two endpoints, but only
    when no object-level action already targets those regions this round.
    """
    violations = check_consistency(scene, parse_prompt(prompt))
    if not violations:
        return VerifierAction(judgment=Judgment.TRUE)
    spatial: list[BBox] = []
    semantic: list[SemanticAction] = []

    def emit(action: SemanticAction) -> None:
        if action.target_region not in spatial:
            spatial.append(action.target_region)
            semantic.append(action)

    relation_fixes: list[Violation] = []
    for violation in violations:
        if violation.kind is ViolationKind.BROKEN_RELATION:
            relation_fixes.append(violation)
        else:
            emit(_fix_for_violation(violation))
    for violation in relation_fixes:
        if any(region in spatial for region in violation.regions):
            continue  # endpoint already being repositioned this round
        first, second = _relation_endpoints(scene, violation)
        emit(move_action(first.color, first.category, first.region, second.region))
        emit(move_action(second.color, second.category, second.region, first.region))
    return VerifierAction(judgment=Judgment.FALSE, spatial=tuple(spatial), semantic=tuple(semantic))


def _relation_endpoints(scene: SceneGraph, violation: Violation) -> tuple[SceneObject, SceneObject]:
    matches = [obj for obj in scene.objects if obj.region in violation.regions]
    if len(matches) >= 2:
        return matches[0], matches[1]
    raise ValueError("relation violation does not reference two scene objects")


class OracleVerifier:
    """VerifierClient wrapper over oracle_verifier."""

    def act(self, scene: SceneGraph, prompt: str) -> VerifierAction:
        return oracle_verifier(scene, prompt)


# --- mock editor ---------------------------------------------------------------


def _best_object(
    scene: SceneGraph, target: BBox, category: str | None, color: str | None = None
) -> SceneObject | None:
    """Exact region match first, then highest overlap; ties to lowest id."""

    def attrs_ok(o: SceneObject) -> bool:
        return (category is None or o.category == category) and (color is None or o.color == color)

    exact = [o for o in scene.objects if o.region == target and attrs_ok(o)]
    if exact:
        return min(exact, key=lambda o: o.id)
    scored = [(float(iou(o.region, target)), -o.id, o) for o in scene.objects]
    scored = [s for s in scored if s[0] > 0]
    if not scored:
        return None
    return max(scored, key=lambda s: (s[0], s[1]))[2]


def _apply_instruction(scene: SceneGraph, parsed: ParsedInstruction) -> SceneGraph:
    if parsed.op is EditOp.ADD:
        new_id = max((o.id for o in scene.objects), default=0) + 1
        addition = SceneObject(new_id, parsed.category or "object", parsed.color or "plain", parsed.target)
        return SceneGraph(canvas=scene.canvas, objects=scene.objects + (addition,))
    target = _best_object(scene, parsed.target, parsed.category, parsed.color)
    if target is None:
        return scene  # nothing at the region; the edit lands nowhere
    if parsed.op is EditOp.DELETE:
        return SceneGraph(canvas=scene.canvas, objects=tuple(o for o in scene.objects if o.id != target.id))
    if parsed.new_color is not None:
        objects = tuple(replace(o, color=parsed.new_color) if o.id == target.id else o for o in scene.objects)
        return SceneGraph(canvas=scene.canvas, objects=objects)
    assert parsed.new_region is not None
    objects = tuple(replace(o, region=parsed.new_region) if o.id == target.id else o for o in scene.objects)
    return SceneGraph(canvas=scene.canvas, objects=objects)


def _random_region(scene: SceneGraph, rng: np.random.Generator) -> BBox:
    side = max(2, scene.canvas // 8)
    x1 = int(rng.integers(0, scene.canvas - side + 1))
    y1 = int(rng.integers(0, scene.canvas - side + 1))
    return BBox(x1, y1, x1 + side, y1 + side)


def mock_editor(
    scene: SceneGraph,
    actions: Sequence[SemanticAction],
    fidelity: float = 1.0,
    rng: np.random.Generator | None = None,
) -> SceneGraph:
    """Apply each action inside its target region; with probability
    (1 - fidelity) per action the edit is skipped or lands on a random other
    region instead, mimicking editors that cannot stay inside the box."""
    if not 0.0 <= fidelity <= 1.0:
        raise ValueError("fidelity must lie in [0, 1]")
    if fidelity < 1.0 and rng is None:
        raise ValueError("an rng is required for fidelity < 1")
    for action in actions:
        parsed = parse_instruction(action.instruction)
        if fidelity < 1.0 and rng.random() >= fidelity:
            if rng.random() < 0.5:
                continue  # edit skipped outright
            parsed = replace(parsed, target=_random_region(scene, rng))
        scene = _apply_instruction(scene, parsed)
    return scene


class MockEditor:
    """EditorClient with a fidelity knob; deterministic under its seed."""

    def __init__(self, fidelity: float = 1.0, seed: int = 0):
        self.fidelity = fidelity
        self._rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))

    def edit(self, scene: SceneGraph, actions: Sequence[SemanticAction]) -> SceneGraph:
        return mock_editor(scene, actions, self.fidelity, self._rng)


def replay_history(initial: SceneGraph, history: Sequence[HistoryEntry]) -> SceneGraph:
    """Re-apply every recorded action with a perfect editor."""
    scene = initial
    for entry in history:
        if entry.scene_after is None:
            continue
        scene = mock_editor(scene, entry.action.semantic, fidelity=1.0)
    return scene


# --- trained-policy adapter ------------------------------------------------------


class PolicyVerifier:
    """VerifierClient over a trained toy policy's greedy decode.

    The policy supplies the verdict and the localized box; the semantic
    instruction is synthesized from the scene-prompt diff closest to that box
    (one action per round, unlike the all-at-once oracle).
    """

    def __init__(self, policy: ToyPolicy):
        self.policy = policy

    def act(self, scene: SceneGraph, prompt: str) -> VerifierAction:
        features = features_for(scene, prompt)
        if self.policy.greedy_judgment(features) is Judgment.TRUE:
            return VerifierAction(judgment=Judgment.TRUE)
        box = features.candidates[self.policy.greedy_candidate(features)]
        action = self._synthesize(scene, prompt, box)
        return VerifierAction(judgment=Judgment.FALSE, spatial=(box,), semantic=(action,))

    def _synthesize(self, scene: SceneGraph, prompt: str, box: BBox) -> SemanticAction:
        violations = [
            v
            for v in check_consistency(scene, parse_prompt(prompt))
            if v.kind is not ViolationKind.BROKEN_RELATION
        ]
        if violations:
            exact = [v for v in violations if box in v.regions]
            best = exact[0] if exact else max(
                violations,
                key=lambda v: max(float(iou(box, region)) for region in v.regions),
            )
            return self._fix_at_box(best, box)
        # The policy disagrees with the checker; treat the box as surplus.
        anchor = _best_object(scene, box, None) or scene.objects[0]
        return delete_action(anchor.color, anchor.category, box)

    def _fix_at_box(self, violation: Violation, box: BBox) -> SemanticAction:
        """Canonical fix anchored at the policy's box.

        A box off the violation's true regions produces an edit that lands
        where the policy pointed, so a badly localized box stays a bad edit.
        """
        clause, obj = violation.clause, violation.actual
        if violation.kind is ViolationKind.MISSING_OBJECT:
            assert clause is not None
            return add_action(clause.color, clause.category, box)
        if violation.kind is ViolationKind.EXTRA_OBJECT:
            assert obj is not None
            return delete_action(obj.color, obj.category, box)
        if violation.kind is ViolationKind.WRONG_ATTRIBUTE:
            assert clause is not None
            return recolor_action(clause.category, box, clause.color)
        assert clause is not None and obj is not None
        if box == clause.region:
            # The box marks where the object should be; materialize it there
            # and let the stray original surface as an extra-object next round.
            return add_action(clause.color, clause.category, box)
        return move_action(obj.color, obj.category, box, clause.region)


def trained_verifier_adapter(policy: ToyPolicy) -> PolicyVerifier:
    return PolicyVerifier(policy)


# --- remote clients ---------------------------------------------------------------
#
# Wire contract: HTTP POST with JSON bodies.
#   verifier request  {"scene": <SceneGraph>, "prompt": <str>}
#   verifier response <VerifierAction>
#   editor request    {"scene": <SceneGraph>, "prompt": <str>, "actions": [<SemanticAction>...]}
#   editor response   <SceneGraph>
# Any non-2xx status, transport failure (after the configured retries), or
# schema-violating payload raises ClientError.


class _RemoteClient:
    def __init__(self, url: str, timeout: float = 10.0, retries: int = 0, session=None):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.session = session or requests.Session()

    def _post(self, body: dict[str, Any]) -> Any:
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                response = self.session.post(self.url, json=body, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code // 100 != 2:
                raise ClientError(f"{self.url} answered HTTP {response.status_code}")
            try:
                return response.json()
            except ValueError as exc:
                raise ClientError(f"{self.url} returned non-JSON payload: {exc}") from exc
        raise ClientError(f"{self.url} unreachable after {self.retries + 1} attempts: {last_error}")


class RemoteVerifierClient(_RemoteClient):
    def act(self, scene: SceneGraph, prompt: str) -> VerifierAction:
        payload = self._post({"scene": scene.to_payload(), "prompt": prompt})
        try:
            return VerifierAction.from_payload(payload)
        except (InvalidSample, KeyError, TypeError, ValueError) as exc:
            raise ClientError(f"verifier response violates the schema: {exc}") from exc


class RemoteEditorClient(_RemoteClient):
    def __init__(self, url: str, prompt: str = "", timeout: float = 10.0, retries: int = 0, session=None):
        super().__init__(url, timeout=timeout, retries=retries, session=session)
        self.prompt = prompt

    def edit(self, scene: SceneGraph, actions: Sequence[SemanticAction]) -> SceneGraph:
        payload = self._post(
            {
                "scene": scene.to_payload(),
                "prompt": self.prompt,
                "actions": [a.to_payload() for a in actions],
            }
        )
        try:
            return SceneGraph.from_payload(payload)
        except (InvalidSample, KeyError, TypeError, ValueError) as exc:
            raise ClientError(f"editor response violates the schema: {exc}") from exc


# --- fixtures ------------------------------------------------------------------


def break_scene(
    scene: SceneGraph,
    rng: np.random.Generator,
    edits: int,
    colors: Sequence[str],
) -> SceneGraph:
    """Apply `edits` object-level corruptions (remove/recolor/move), each on a
    distinct object, leaving the original prompt as repair target."""
    objects = list(scene.objects)
    if edits >= len(objects):
        raise ValueError("need to keep at least one object intact")
    victims = rng.choice(len(objects), size=edits, replace=False)
    centers = {o.region.center2() for o in objects}
    for index in sorted((int(v) for v in victims), reverse=True):
        kind = int(rng.integers(0, 3))
        obj = objects[index]
        alternatives = [c for c in colors if c != obj.color]
        if kind == 1 and not alternatives:
            kind = 2
        if kind == 0:
            objects.pop(index)
        elif kind == 1:
            objects[index] = replace(obj, color=str(alternatives[int(rng.integers(0, len(alternatives)))]))
        else:
            centers.discard(obj.region.center2())
            region = _fresh_region(scene.canvas, centers, rng)
            centers.add(region.center2())
            objects[index] = replace(obj, region=region)
    return SceneGraph(canvas=scene.canvas, objects=tuple(objects))


def _fresh_region(canvas: int, taken: set[tuple[int, int]], rng: np.random.Generator) -> BBox:
    side = max(2, canvas // 10)
    while True:
        x1 = int(rng.integers(0, canvas - side + 1))
        y1 = int(rng.integers(0, canvas - side + 1))
        region = BBox(x1, y1, x1 + side, y1 + side)
        if region.center2() not in taken:
            return region
