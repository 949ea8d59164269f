"""Parsing and rendering of agent messages in the two wire formats.

The explicit format is a JSON object with an optional ``thought`` string and
an ``actions`` list; the implicit format uses ``<bbox>`` and ``<answer>``
tags with free text around them. The full grammar lives in docs/protocol.md.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Union

from .geometry import BoundingBox


class ActionFormat(Enum):
    EXPLICIT = "explicit"
    IMPLICIT = "implicit"


class ParseErrorKind(Enum):
    NO_JSON_FOUND = "no_json_found"
    NO_TAG_FOUND = "no_tag_found"
    SCHEMA_VIOLATION = "schema_violation"
    BAD_COORDINATES = "bad_coordinates"


class ParseError(ValueError):
    """Raised when agent text does not follow the expected action format."""

    def __init__(self, kind: ParseErrorKind, detail: str = ""):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)


@dataclass(frozen=True)
class Mark:
    """Region-marking action carrying one or more boxes."""

    boxes: tuple[BoundingBox, ...]

    def __post_init__(self) -> None:
        if not self.boxes:
            raise ValueError("Mark requires at least one box")


@dataclass(frozen=True)
class Terminate:
    """Episode-ending action carrying the final answer."""

    answer: str

    def __post_init__(self) -> None:
        if not self.answer:
            raise ValueError("Terminate requires a non-empty answer")


Action = Union[Mark, Terminate]


@dataclass(frozen=True)
class AgentMessage:
    """Parsed model output: optional thought plus one or more actions.

    ``raw`` preserves the exact text the message was parsed from (empty for
    synthesized messages).
    """

    thought: str | None
    actions: tuple[Action, ...]
    raw: str = ""

    def marks(self) -> list[Mark]:
        return [a for a in self.actions if isinstance(a, Mark)]

    def terminates(self) -> list[Terminate]:
        return [a for a in self.actions if isinstance(a, Terminate)]

    def final_answer(self) -> str | None:
        """Answer of the last Terminate action, if any (last one wins)."""
        terms = self.terminates()
        return terms[-1].answer if terms else None

    def all_boxes(self) -> list[BoundingBox]:
        return [b for m in self.marks() for b in m.boxes]


_ANSWER_TAG_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_IMPLICIT_TAG_RE = re.compile(r"<(bbox|answer)>(.*?)</\1>", re.DOTALL)
_JSON_DECODER = json.JSONDecoder()


def extract_first_json(text: str) -> dict[str, Any] | None:
    """Return the first balanced JSON object embedded in ``text``, or None.

    Tolerates surrounding prose and markdown code fences: scanning starts at
    each ``{`` until one decodes.
    """
    idx = text.find("{")
    while idx != -1:
        try:
            obj, _ = _JSON_DECODER.raw_decode(text, idx)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            return obj
        idx = text.find("{", idx + 1)
    return None


def _coerce_coordinate(value: Any) -> int:
    # bool is an int subclass; reject it explicitly
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(ParseErrorKind.BAD_COORDINATES, f"coordinate {value!r} is not a number")
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ParseError(ParseErrorKind.BAD_COORDINATES, f"non-finite coordinate {value!r}")
        return math.floor(value)
    return value


def _parse_quad(quad: Any) -> BoundingBox:
    if not isinstance(quad, (list, tuple)) or len(quad) != 4:
        raise ParseError(ParseErrorKind.BAD_COORDINATES, f"expected a 4-element box, got {quad!r}")
    return BoundingBox(*(_coerce_coordinate(v) for v in quad))


def _parse_box_payload(payload: Any) -> tuple[BoundingBox, ...]:
    """Accept a list of quadruples, or a single bare quadruple."""
    if isinstance(payload, (list, tuple)) and len(payload) == 4 and all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in payload
    ):
        return (_parse_quad(payload),)
    if isinstance(payload, (list, tuple)) and payload:
        return tuple(_parse_quad(q) for q in payload)
    raise ParseError(ParseErrorKind.BAD_COORDINATES, f"expected box coordinates, got {payload!r}")


def _parse_action_obj(obj: Any) -> Action:
    if not isinstance(obj, dict):
        raise ParseError(ParseErrorKind.SCHEMA_VIOLATION, f"action is not an object: {obj!r}")
    name = obj.get("name")
    args = obj.get("arguments")
    if name == "Mark":
        if isinstance(args, dict):
            if "box" not in args:
                raise ParseError(ParseErrorKind.SCHEMA_VIOLATION, "Mark arguments object lacks 'box'")
            payload = args["box"]
        else:
            payload = args
        return Mark(_parse_box_payload(payload))
    if name == "Terminate":
        if not isinstance(args, dict) or "answer" not in args:
            raise ParseError(ParseErrorKind.SCHEMA_VIOLATION, "Terminate arguments must be {'answer': ...}")
        answer = args["answer"]
        if not isinstance(answer, str) or not answer.strip():
            raise ParseError(ParseErrorKind.SCHEMA_VIOLATION, "Terminate answer must be a non-empty string")
        return Terminate(answer.strip())
    raise ParseError(ParseErrorKind.SCHEMA_VIOLATION, f"unknown action name {name!r}")


def parse_explicit(text: str) -> AgentMessage:
    """Parse the explicit JSON action format.

    The first balanced JSON object in ``text`` is taken; prose and code
    fences around it are ignored. Mark arguments may be a bare list of
    quadruples or ``{"box": [...]}``; coordinates are floored to integers.

    Raises:
        ParseError: NO_JSON_FOUND, SCHEMA_VIOLATION, or BAD_COORDINATES.
    """
    obj = extract_first_json(text)
    if obj is None:
        raise ParseError(ParseErrorKind.NO_JSON_FOUND, "no JSON object in text")
    thought = obj.get("thought")
    if thought is not None and not isinstance(thought, str):
        raise ParseError(ParseErrorKind.SCHEMA_VIOLATION, "'thought' must be a string")
    actions_raw = obj.get("actions")
    if not isinstance(actions_raw, list) or not actions_raw:
        raise ParseError(ParseErrorKind.SCHEMA_VIOLATION, "'actions' must be a non-empty list")
    actions = tuple(_parse_action_obj(a) for a in actions_raw)
    return AgentMessage(thought=thought, actions=actions, raw=text)


def parse_implicit(text: str) -> AgentMessage:
    """Parse the implicit tag format: ``<bbox>[[...]]</bbox>`` and ``<answer>..</answer>``.

    Tags are collected in textual order; text outside tags becomes the
    thought (None when blank).

    Raises:
        ParseError: NO_TAG_FOUND, BAD_COORDINATES, or SCHEMA_VIOLATION.
    """
    actions: list[Action] = []
    spans: list[tuple[int, int]] = []
    for m in _IMPLICIT_TAG_RE.finditer(text):
        tag, payload = m.group(1), m.group(2)
        spans.append(m.span())
        if tag == "bbox":
            try:
                decoded = json.loads(payload)
            except json.JSONDecodeError as exc:
                raise ParseError(ParseErrorKind.BAD_COORDINATES, f"bbox payload is not valid JSON: {exc}") from exc
            actions.append(Mark(_parse_box_payload(decoded)))
        else:
            answer = payload.strip()
            if not answer:
                raise ParseError(ParseErrorKind.SCHEMA_VIOLATION, "empty answer tag")
            actions.append(Terminate(answer))
    if not actions:
        raise ParseError(ParseErrorKind.NO_TAG_FOUND, "no <bbox> or <answer> tag in text")
    outside = []
    last = 0
    for start, end in spans:
        outside.append(text[last:start])
        last = end
    outside.append(text[last:])
    thought = "".join(outside).strip() or None
    return AgentMessage(thought=thought, actions=tuple(actions), raw=text)


def parse(text: str, fmt: ActionFormat) -> AgentMessage:
    """Parse ``text`` in the given wire format."""
    if fmt is ActionFormat.EXPLICIT:
        return parse_explicit(text)
    return parse_implicit(text)


def _action_to_obj(action: Action) -> dict[str, Any]:
    if isinstance(action, Mark):
        return {"name": "Mark", "arguments": [b.to_list() for b in action.boxes]}
    return {"name": "Terminate", "arguments": {"answer": action.answer}}


def render(message: AgentMessage, fmt: ActionFormat) -> str:
    """Canonical serialization; ``parse(render(m, f), f)`` reproduces the
    thought (up to surrounding whitespace) and the action sequence.

    Explicit output is compact JSON with Mark arguments in the bare-list
    form; implicit output joins the thought and one tag per action with
    single spaces.
    """
    if fmt is ActionFormat.EXPLICIT:
        obj: dict[str, Any] = {}
        if message.thought is not None:
            obj["thought"] = message.thought
        obj["actions"] = [_action_to_obj(a) for a in message.actions]
        return json.dumps(obj, separators=(",", ":"))
    parts: list[str] = []
    if message.thought:
        parts.append(message.thought)
    for action in message.actions:
        if isinstance(action, Mark):
            payload = json.dumps([b.to_list() for b in action.boxes], separators=(",", ":"))
            parts.append(f"<bbox>{payload}</bbox>")
        else:
            parts.append(f"<answer>{action.answer}</answer>")
    return " ".join(parts)


def extract_tag_answer(text: str) -> str:
    """Trimmed content of the last ``<answer>..</answer>`` pair.

    Raises:
        ParseError: NO_TAG_FOUND when no pair exists.
    """
    matches = _ANSWER_TAG_RE.findall(text)
    if not matches:
        raise ParseError(ParseErrorKind.NO_TAG_FOUND, "no <answer> tag in text")
    return matches[-1].strip()
