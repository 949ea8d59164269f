"""Answer validation for generated VQA samples.

Two independent checks: a geometric validator that re-derives the
expected answer from the detection record (sharing only the low-level
box arithmetic with the generator), and an LLM-backed validator that
asks an external model to confirm the answer and maps its constrained
reply onto a verdict.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum

from ..client import ModelBackend
from ..geometry import BoundingBox, DetectionRecord, GeometryError, Side, contains, side_of
from .promptgen import build_verification_prompt
from .templates import OTHER_OPTION, TemplateKind, VqaSample
from ..prompts import ChatMessage

_HALF_RE = re.compile(r"\bthe (left|right) half\b")
_POINT_RE = re.compile(r"\((-?\d+),\s*(-?\d+)\)")


class VerdictSource(Enum):
    GEOMETRIC = "geometric"
    EXTERNAL_LLM = "external_llm"


@dataclass(frozen=True)
class ValidationVerdict:
    valid: bool
    reason: str | None
    source: VerdictSource

    def __post_init__(self):
        if not self.valid and not self.reason:
            raise ValueError("invalid verdicts must carry a reason")


def _ok(source: VerdictSource) -> ValidationVerdict:
    return ValidationVerdict(valid=True, reason=None, source=source)


def _bad(reason: str, source: VerdictSource) -> ValidationVerdict:
    return ValidationVerdict(valid=False, reason=reason, source=source)


def _single_letter_for(sample: VqaSample, expected_text: str) -> str | None:
    letters = [letter for letter, text in sample.options if text == expected_text]
    return letters[0] if len(letters) == 1 else None


def _expected_presence(sample: VqaSample, record: DetectionRecord) -> str | ValidationVerdict:
    present = bool(record.boxes_of(sample.provenance.category))
    return "Yes" if present else "No"


def _expected_half(sample: VqaSample, record: DetectionRecord) -> str | ValidationVerdict:
    match = _HALF_RE.search(sample.question)
    if not match:
        return _bad("question does not name a half", VerdictSource.GEOMETRIC)
    asked = match.group(1)
    category = sample.provenance.category
    boxes = record.boxes_of(category)
    if not boxes:
        return f"No, the image does not show {category}"
    try:
        sides = {side_of(b, record.dims) for b in boxes}
    except GeometryError as exc:
        return _bad(f"cannot locate boxes: {exc}", VerdictSource.GEOMETRIC)
    if sides == {Side.LEFT}:
        actual = "left"
    elif sides == {Side.RIGHT}:
        actual = "right"
    else:
        return _bad("laterality is ambiguous: boxes touch or straddle the midline",
                    VerdictSource.GEOMETRIC)
    if actual == asked:
        return "Yes"
    return f"No, the {actual} half shows {category}"


def _expected_bbox(sample: VqaSample, record: DetectionRecord) -> str | ValidationVerdict:
    gt_boxes = set(record.boxes_of(sample.provenance.category))
    if not gt_boxes:
        return _bad("record has no box for the asked category", VerdictSource.GEOMETRIC)
    matches = []
    for letter, text in sample.options:
        try:
            quad = json.loads(text)
            box = BoundingBox.from_quad(quad)
        except (json.JSONDecodeError, TypeError, GeometryError):
            return _bad(f"option {letter} is not a coordinate quadruple: {text!r}",
                        VerdictSource.GEOMETRIC)
        if box in gt_boxes:
            matches.append(letter)
    if len(matches) != 1:
        return _bad(f"expected exactly one option matching a ground-truth box, found {matches}",
                    VerdictSource.GEOMETRIC)
    return dict(sample.options)[matches[0]]


def _expected_point(sample: VqaSample, record: DetectionRecord) -> str | ValidationVerdict:
    match = _POINT_RE.search(sample.question)
    if not match:
        return _bad("question does not name a coordinate", VerdictSource.GEOMETRIC)
    point = (int(match.group(1)), int(match.group(2)))
    covering = {a.category for a in record.annotations if contains(a.box, point)}
    if len(covering) > 1:
        return _bad(f"point {point} lies in boxes of multiple categories: {sorted(covering)}",
                    VerdictSource.GEOMETRIC)
    if not covering:
        return OTHER_OPTION
    expected = next(iter(covering))
    if expected not in dict(sample.options).values():
        # The true category is not offered; the honest choice is Other.
        return OTHER_OPTION
    return expected


def geometric_validate(sample: VqaSample, record: DetectionRecord) -> ValidationVerdict:
    """Re-derive the correct option from the record and compare letters."""
    if record.image_id != sample.id.split(":", 1)[0]:
        return _bad(f"sample {sample.id!r} does not belong to record {record.image_id!r}",
                    VerdictSource.GEOMETRIC)
    derivers = {
        TemplateKind.PRESENCE: _expected_presence,
        TemplateKind.HALF_LOCATION: _expected_half,
        TemplateKind.BBOX_CHOICE: _expected_bbox,
        TemplateKind.POINT_CATEGORY: _expected_point,
    }
    expected = derivers[sample.kind](sample, record)
    if isinstance(expected, ValidationVerdict):
        return expected
    letter = _single_letter_for(sample, expected)
    if letter is None:
        return _bad(f"no unique option carries the expected text {expected!r}",
                    VerdictSource.GEOMETRIC)
    if letter != sample.answer:
        return _bad(
            f"answer should be {letter} ({expected!r}), sample says {sample.answer}",
            VerdictSource.GEOMETRIC,
        )
    return _ok(VerdictSource.GEOMETRIC)


def llm_validate(sample: VqaSample, record: DetectionRecord,
                 backend: ModelBackend) -> ValidationVerdict:
    """Ask an external model to confirm the answer.

    The verification prompt constrains the reply to begin with one of
    three sentinel phrases; anything else is treated as an invalid
    verdict with the raw reply preserved in the reason.  Backend
    transport failures propagate to the caller.
    """
    prompt = build_verification_prompt(sample, record)
    completion = backend.complete([ChatMessage.of_text("user", prompt)])
    reply = completion.text.strip()
    if reply.startswith("Correct."):
        return _ok(VerdictSource.EXTERNAL_LLM)
    if reply.startswith("Incorrect") or reply.startswith("Format error"):
        return _bad(reply, VerdictSource.EXTERNAL_LLM)
    return _bad(f"unrecognized verdict: {reply!r}", VerdictSource.EXTERNAL_LLM)
