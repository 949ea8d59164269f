"""Rule-based trajectory scoring: two format components plus exact-match accuracy.

Scoring is decided entirely by :mod:`tarenv.protocol` parsing; this module
contains no second parser. All scorers are pure functions, safe for
concurrent use.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Sequence

from .protocol import ActionFormat, ParseError, parse

FORMAT_POINTS = 0.2
ACCURACY_POINTS = 1.0

_VALID_LETTERS = frozenset("ABCDE")


class TrajectoryError(ValueError):
    """Raised for trajectories outside the one-or-two turn protocol."""


@dataclass(frozen=True)
class RewardBreakdown:
    """Per-component reward for one trajectory."""

    format_round1: float
    format_final: float
    accuracy: float

    @property
    def total(self) -> float:
        return self.format_round1 + self.format_final + self.accuracy

    def to_dict(self) -> dict[str, float]:
        return {
            "format_round1": self.format_round1,
            "format_final": self.format_final,
            "accuracy": self.accuracy,
            "total": self.total,
        }


def normalize_letter(text: str) -> str | None:
    """Strict single-letter normalization: trim, strip trailing punctuation,
    uppercase; None unless the result is one of A-E."""
    candidate = text.strip().rstrip(string.punctuation).strip().upper()
    if len(candidate) == 1 and candidate in _VALID_LETTERS:
        return candidate
    return None


def score_round1_format(text: str, fmt: ActionFormat) -> float:
    """0.2 when the round-1 message parses with at least one action; the
    explicit format additionally requires a non-empty thought field."""
    try:
        message = parse(text, fmt)
    except ParseError:
        return 0.0
    if fmt is ActionFormat.EXPLICIT and not (message.thought or "").strip():
        return 0.0
    return FORMAT_POINTS


def score_final_format(text: str, fmt: ActionFormat) -> float:
    """0.2 when the message parses and carries a Terminate action (explicit)
    or an answer tag (implicit) with a non-empty answer."""
    try:
        message = parse(text, fmt)
    except ParseError:
        return 0.0
    return FORMAT_POINTS if message.final_answer() else 0.0


def score_accuracy(predicted: str | None, ground_truth: str) -> float:
    """1.0 iff both sides normalize to the same single letter A-E."""
    truth = normalize_letter(ground_truth)
    if truth is None:
        raise ValueError(f"ground truth {ground_truth!r} is not a single letter A-E")
    if predicted is None:
        return 0.0
    return ACCURACY_POINTS if normalize_letter(predicted) == truth else 0.0


def extract_answer(text: str, fmt: ActionFormat) -> str | None:
    """Answer of the last Terminate action in a parsed turn, else None."""
    try:
        message = parse(text, fmt)
    except ParseError:
        return None
    return message.final_answer()


def score_trajectory(
    turns: Sequence[str],
    ground_truth: str,
    fmt: ActionFormat,
) -> RewardBreakdown:
    """Score a full trajectory of 1 or 2 assistant turns.

    Two-turn trajectories score the first turn with the round-1 rule and the
    second with the final rule; a Mark action in the final turn voids the
    final format component, but an accompanying Terminate still feeds
    accuracy. Single-turn trajectories (Terminate in round 1) earn no
    round-1 format points and are scored by the final rule only.
    """
    if not turns:
        raise TrajectoryError("trajectory holds no assistant turns")
    if len(turns) > 2:
        raise TrajectoryError(f"trajectory holds {len(turns)} assistant turns, at most 2 allowed")

    if len(turns) == 1:
        format_round1 = 0.0
        final_text = turns[0]
        format_final = score_final_format(final_text, fmt)
    else:
        format_round1 = score_round1_format(turns[0], fmt)
        final_text = turns[1]
        format_final = score_final_format(final_text, fmt)
        try:
            final_message = parse(final_text, fmt)
        except ParseError:
            final_message = None
        if final_message is not None and final_message.marks():
            format_final = 0.0

    accuracy = score_accuracy(extract_answer(final_text, fmt), ground_truth)
    return RewardBreakdown(format_round1=format_round1, format_final=format_final, accuracy=accuracy)
