"""Prompt builders for inference: system prompt and round-1 user messages.

All builders are pure and byte-stable for fixed inputs. Texts can be
overridden wholesale through :class:`tarenv.config.AppConfig`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Union

DEFAULT_SYSTEM_PROMPT = (
    "You are a medical image analysis assistant capable of analyzing medical images "
    "and answering questions about them. Your goal is to answer questions about "
    "medical images including modality, body part, and other medical details. You "
    "can rely on your own capabilities or use marking tools to assist in solving. "
    "Your output should be in a strict JSON format as follows:\n"
    '{"thought":"the reasoning process","actions":[{"name":"action","arguments":{"argument1":"value1"}}]}'
)

THINK_TAG_INSTRUCTION = (
    "Output the thinking process in <think></think> and final answer in <answer> "
    "</answer> tags. The output answer format should be as follows:\n"
    "<think> reasoning process here </think> <answer> answer here (just the letter "
    "corresponding to the option, do not provide any explanation) </answer>.\n"
    "Please strictly follow the format."
)

DIRECT_INSTRUCTION = (
    "Output the final answer in <answer> </answer> tags. The output answer format "
    "should be as follows:\n"
    "<answer> answer here (just the letter corresponding to the option, do not "
    "provide any explanation) </answer>.\n"
    "Please strictly follow the format."
)


class InferenceProtocol(Enum):
    """How the model is asked to answer: the two-round acting protocol, a
    single-pass think-tag baseline, or a direct-answer baseline."""

    TAR = "tar"
    THINK_TAG = "think_tag"
    DIRECT = "direct"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    """Image attachment: a decoded raster, a filesystem path, raw bytes, or a
    registry key string resolved by the caller before hitting a backend."""

    image: object


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class ChatMessage:
    role: str  # "system" | "user" | "assistant"
    parts: tuple[Part, ...] = field(default_factory=tuple)

    @property
    def text(self) -> str:
        return "".join(p.text for p in self.parts if isinstance(p, TextPart))

    @classmethod
    def of_text(cls, role: str, text: str) -> "ChatMessage":
        return cls(role=role, parts=(TextPart(text),))


def system_prompt(override: str | None = None) -> str:
    """The acting-protocol system prompt (byte-stable constant unless overridden)."""
    return override if override is not None else DEFAULT_SYSTEM_PROMPT


def format_options(options: Sequence[tuple[str, str]]) -> str:
    return " ".join(f"{letter}) {text}" for letter, text in options)


def user_round1_text(
    question: str,
    options: Sequence[tuple[str, str]],
    protocol: InferenceProtocol,
) -> str:
    """Text part of the round-1 user message: question, lettered options, and
    the protocol's instruction block (none for the acting protocol, whose
    format is governed by the system prompt)."""
    if not options:
        raise ValueError("options must be non-empty")
    lines = [f"Question: {question}", f"Options: {format_options(options)}"]
    if protocol is InferenceProtocol.THINK_TAG:
        lines.append(THINK_TAG_INSTRUCTION)
    elif protocol is InferenceProtocol.DIRECT:
        lines.append(DIRECT_INSTRUCTION)
    return "\n".join(lines)


def user_round1(
    question: str,
    options: Sequence[tuple[str, str]],
    protocol: InferenceProtocol,
    image: object = "input",
) -> ChatMessage:
    """Round-1 user message: image part first, then the composed text.

    ``image`` may be a raster/path/bytes, or a registry key (default
    ``"input"``) that the episode resolves when messages are assembled.
    """
    return ChatMessage(
        role="user",
        parts=(ImagePart(image), TextPart(user_round1_text(question, options, protocol))),
    )
