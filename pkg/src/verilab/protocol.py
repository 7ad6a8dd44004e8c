"""Wire protocol for verifier emissions, and the format reward over it.

Grammar (whitespace between blocks tolerated, nothing else):

    <think>REASONING</think>
    <judgment>True|False</judgment>
    [<bbox>[[x1,y1,x2,y2],...]</bbox>  |  <point>[[x,y],...]</point>]

Exactly one think block first, then one judgment line, then at most one
rationale block whose tag must match the active protocol mode. Judgment
tokens are case-sensitive. Parsing is total: malformed input raises a typed
ProtocolError, never anything else.
"""

from __future__ import annotations

import json
import re
from enum import Enum

from .types import BBox, InvalidSample, Judgment, Point, Rationale, RationaleKind, VerifierOutput


class ProtocolMode(Enum):
    """Which symbolic rationale block the grammar accepts."""

    BBOX = "bbox"
    POINT = "point"


class ProtocolError(ValueError):
    """Base class for grammar violations; subclass names the broken rule."""


class MissingThinkBlock(ProtocolError):
    pass


class MissingJudgment(ProtocolError):
    pass


class MalformedRationale(ProtocolError):
    pass


class TrailingGarbage(ProtocolError):
    pass


class ModeMismatch(ProtocolError):
    """Serialization asked for a rationale the active mode cannot carry."""


_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)
_JUDGMENT_RE = re.compile(r"<judgment>(True|False)</judgment>")
_RATIONALE_RE = re.compile(r"<(bbox|point)>(.*?)</\1>", re.DOTALL)


def parse(raw: str, mode: ProtocolMode = ProtocolMode.BBOX) -> VerifierOutput:
    """Parse a wire string into a VerifierOutput, or raise a ProtocolError.

    The returned output keeps the original string in ``raw``.
    """
    think_match = _THINK_RE.match(raw, _skip_ws(raw, 0))
    if think_match is None:
        raise MissingThinkBlock("input must start with a <think>...</think> block")
    pos = _skip_ws(raw, think_match.end())

    judgment_match = _JUDGMENT_RE.match(raw, pos)
    if judgment_match is None:
        raise MissingJudgment("expected <judgment>True</judgment> or <judgment>False</judgment>")
    judgment = Judgment.parse(judgment_match.group(1))
    pos = _skip_ws(raw, judgment_match.end())

    rationale = Rationale.none()
    rationale_match = _RATIONALE_RE.match(raw, pos)
    if rationale_match is not None:
        rationale = _parse_rationale(rationale_match.group(1), rationale_match.group(2), mode)
        pos = _skip_ws(raw, rationale_match.end())

    if pos != len(raw):
        raise TrailingGarbage(f"unexpected content at offset {pos}")
    return VerifierOutput(think=think_match.group(1), judgment=judgment, rationale=rationale, raw=raw)


def _skip_ws(text: str, pos: int) -> int:
    while pos < len(text) and text[pos].isspace():
        pos += 1
    return pos


def _parse_rationale(tag: str, body: str, mode: ProtocolMode) -> Rationale:
    if tag != mode.value:
        raise MalformedRationale(f"<{tag}> block is not valid in {mode.value} mode")
    try:
        entries = json.loads(body)
    except json.JSONDecodeError as exc:
        raise MalformedRationale(f"rationale body is not valid JSON: {exc}") from None
    if not isinstance(entries, list) or not entries:
        raise MalformedRationale("rationale must be a non-empty JSON array")
    try:
        if mode is ProtocolMode.BBOX:
            return Rationale.of_boxes([BBox.from_payload(e) for e in entries])
        return Rationale.of_points([Point.from_payload(e) for e in entries])
    except (InvalidSample, TypeError) as exc:
        raise MalformedRationale(str(exc)) from None


def serialize(output: VerifierOutput, mode: ProtocolMode = ProtocolMode.BBOX) -> str:
    """Render an output to the exact wire string parse() inverts.

    Raises ModeMismatch when the rationale variant cannot appear under the
    given mode (Points under bbox mode, any Text, and vice versa).
    """
    if "</think>" in output.think:
        raise ValueError("think text must not contain the closing </think> tag")
    parts = [f"<think>{output.think}</think>", f"<judgment>{output.judgment.serialize()}</judgment>"]
    rationale = output.rationale
    if rationale.kind is RationaleKind.BOXES:
        if mode is not ProtocolMode.BBOX:
            raise ModeMismatch("box rationale cannot be serialized in point mode")
        body = json.dumps([b.to_payload() for b in rationale.boxes], separators=(",", ":"))
        parts.append(f"<bbox>{body}</bbox>")
    elif rationale.kind is RationaleKind.POINTS:
        if mode is not ProtocolMode.POINT:
            raise ModeMismatch("point rationale cannot be serialized in bbox mode")
        body = json.dumps([p.to_payload() for p in rationale.points], separators=(",", ":"))
        parts.append(f"<point>{body}</point>")
    elif rationale.kind is RationaleKind.TEXT:
        raise ModeMismatch("text rationales have no wire form; they are client-side only")
    return "\n".join(parts)


def format_reward(raw: str, mode: ProtocolMode = ProtocolMode.BBOX) -> int:
    """1 iff the string parses and a False judgment carries a symbolic rationale."""
    try:
        output = parse(raw, mode)
    except ProtocolError:
        return 0
    if output.judgment is Judgment.FALSE and output.rationale.kind is RationaleKind.NONE:
        return 0
    return 1
