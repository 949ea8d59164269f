"""The two-round episode state machine.

An episode starts from an image and a multiple-choice question, takes at most
two agent turns, executes Mark actions by drawing rectangle outlines on a
copy of the image (or substituting a pre-annotated override), and ends with a
Terminate answer or a failure. Episodes are single-owner mutable state;
independent episodes can run in parallel.
"""

from __future__ import annotations

import io
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

from PIL import Image, UnidentifiedImageError

from .config import DEFAULT_FEEDBACK_TEMPLATE, MarkStyle
from .geometry import BoundingBox, ImageDims, clamp
from .prompts import ChatMessage, ImagePart, InferenceProtocol, TextPart, system_prompt, user_round1_text
from .protocol import ActionFormat, AgentMessage, ParseError, parse, render

ROLE_SYSTEM = "system"
ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"
ROLE_ENVIRONMENT = "environment"

INPUT_IMAGE_KEY = "input"
MARKED_IMAGE_KEY = "marked_r1"


class EpisodeStateError(RuntimeError):
    """Raised when an episode is driven outside its state machine."""


class EpisodeState(Enum):
    ROUND1_PENDING = "round1_pending"
    AWAITING_FINAL = "awaiting_final"
    TERMINATED = "terminated"
    FAILED = "failed"


@dataclass(frozen=True)
class TurnRecord:
    role: str
    text: str
    image_ref: str | None = None

    def to_dict(self) -> dict:
        return {"role": self.role, "text": self.text, "image_ref": self.image_ref}


@dataclass
class Transcript:
    """Append-only ordered record of one episode's turns."""

    records: list[TurnRecord] = field(default_factory=list)

    def append(self, role: str, text: str, image_ref: str | None = None) -> None:
        self.records.append(TurnRecord(role=role, text=text, image_ref=image_ref))

    def assistant_texts(self) -> list[str]:
        return [r.text for r in self.records if r.role == ROLE_ASSISTANT]

    def to_dicts(self) -> list[dict]:
        return [r.to_dict() for r in self.records]


@dataclass
class EnvResponse:
    """What the environment hands back after one agent turn."""

    updated_image: Image.Image | None
    feedback: str
    done: bool
    final_answer: str | None
    parse_ok: bool


@dataclass(frozen=True)
class EpisodeConfig:
    format: ActionFormat = ActionFormat.EXPLICIT
    feedback_template: str = DEFAULT_FEEDBACK_TEMPLATE
    mark_style: MarkStyle = field(default_factory=MarkStyle)
    system_prompt_override: str | None = None


@dataclass
class Episode:
    id: str
    image: Image.Image
    dims: ImageDims
    question: str
    options: list[tuple[str, str]]
    format: ActionFormat
    config: EpisodeConfig
    ground_truth: str | None = None
    state: EpisodeState = EpisodeState.ROUND1_PENDING
    transcript: Transcript = field(default_factory=Transcript)
    annotation_override: Image.Image | None = None
    images: dict[str, Image.Image] = field(default_factory=dict)
    final_answer: str | None = None

    @property
    def done(self) -> bool:
        return self.state in (EpisodeState.TERMINATED, EpisodeState.FAILED)

    def assistant_turns(self) -> int:
        return len(self.transcript.assistant_texts())

    def chat_messages(self) -> list[ChatMessage]:
        """Transcript as backend-ready chat messages.

        Environment records map to the user role (image part first, then the
        feedback text); image refs resolve to the episode's rasters.
        """
        messages: list[ChatMessage] = []
        for record in self.transcript.records:
            if record.role == ROLE_SYSTEM:
                messages.append(ChatMessage.of_text(ROLE_SYSTEM, record.text))
                continue
            role = ROLE_ASSISTANT if record.role == ROLE_ASSISTANT else ROLE_USER
            parts: list = []
            if record.image_ref is not None:
                parts.append(ImagePart(self.images[record.image_ref]))
            parts.append(TextPart(record.text))
            messages.append(ChatMessage(role=role, parts=tuple(parts)))
        return messages

    def to_sft_record(self, original_path: str, annotated_path: str | None) -> dict:
        """Export a finished two-round transcript in the SFT record schema."""
        users = [r.text for r in self.transcript.records if r.role in (ROLE_USER, ROLE_ENVIRONMENT)]
        assistants = self.transcript.assistant_texts()
        if len(assistants) < 2 or len(users) < 2:
            raise EpisodeStateError("SFT export requires a completed two-round episode")
        images = [original_path] + ([annotated_path] if annotated_path else [])
        return {
            "images": images,
            "round1": {"user": users[0], "assistant": assistants[0]},
            "round2": {"user": users[1], "assistant": assistants[1]},
        }


def decode_image(source: Image.Image | str | Path | bytes) -> Image.Image:
    """Decode a path, raw bytes, or pass through an already-decoded raster;
    always returns RGB."""
    if isinstance(source, Image.Image):
        img = source
    elif isinstance(source, (str, Path)):
        try:
            with Image.open(source) as f:
                img = f.copy()
        except (OSError, UnidentifiedImageError) as exc:
            raise ValueError(f"cannot decode image at {source}: {exc}") from exc
    elif isinstance(source, bytes):
        try:
            img = Image.open(io.BytesIO(source)).copy()
        except (OSError, UnidentifiedImageError) as exc:
            raise ValueError(f"cannot decode image bytes: {exc}") from exc
    else:
        raise TypeError(f"unsupported image source {type(source)!r}")
    return img.convert("RGB") if img.mode != "RGB" else img


def create(
    image: Image.Image | str | Path | bytes,
    question: str,
    options: Sequence[tuple[str, str]],
    config: EpisodeConfig | None = None,
    *,
    ground_truth: str | None = None,
    episode_id: str | None = None,
) -> Episode:
    """Open an episode: decode the image, validate options, and seed the
    transcript with the system prompt and the round-1 user message."""
    config = config or EpisodeConfig()
    raster = decode_image(image)
    options = [(letter, text) for letter, text in options]
    letters = [letter for letter, _ in options]
    if not options:
        raise ValueError("options must be non-empty")
    if len(set(letters)) != len(letters):
        raise ValueError(f"duplicate option letters: {letters}")
    bad = [l for l in letters if l not in ("A", "B", "C", "D", "E")]
    if bad:
        raise ValueError(f"option letters must be drawn from A-E, got {bad}")
    episode = Episode(
        id=episode_id or uuid.uuid4().hex,
        image=raster,
        dims=ImageDims(raster.width, raster.height),
        question=question,
        options=options,
        format=config.format,
        config=config,
        ground_truth=ground_truth,
    )
    episode.images[INPUT_IMAGE_KEY] = raster
    episode.transcript.append(ROLE_SYSTEM, system_prompt(config.system_prompt_override))
    episode.transcript.append(
        ROLE_USER,
        user_round1_text(question, options, InferenceProtocol.TAR),
        image_ref=INPUT_IMAGE_KEY,
    )
    return episode


def apply_mark(image: Image.Image, boxes: Sequence[BoundingBox], style: MarkStyle | None = None) -> Image.Image:
    """Draw rectangle outlines on a fresh copy; the input raster is untouched.

    Pixels change only within the border bands of the given boxes (outlines
    are stroked inward). Non-RGB inputs are converted before drawing.
    """
    from PIL import ImageDraw

    if not boxes:
        raise ValueError("Mark requires at least one box")
    style = style or MarkStyle()
    out = image.convert("RGB") if image.mode != "RGB" else image.copy()
    draw = ImageDraw.Draw(out)
    width = style.stroke_width(image.width, image.height)
    for box in boxes:
        draw.rectangle([box.x1, box.y1, box.x2, box.y2], outline=style.color, width=width)
    return out


def override_annotation(episode: Episode, image: Image.Image | str | Path | bytes) -> None:
    """Substitute a pre-annotated image for the drawn one in later Mark steps."""
    if episode.done:
        raise EpisodeStateError("cannot set annotation override after episode is done")
    episode.annotation_override = decode_image(image)


def _format_boxes(boxes: Sequence[BoundingBox]) -> str:
    import json

    return json.dumps([b.to_list() for b in boxes], separators=(",", ":"))


def format_feedback(boxes: Sequence[BoundingBox], template: str = DEFAULT_FEEDBACK_TEMPLATE) -> str:
    """Environment feedback line for a successful mark; shared with SFT assembly."""
    return template.format(n=len(boxes), boxes=_format_boxes(boxes))


def step(episode: Episode, agent_text: str) -> EnvResponse:
    """Advance the episode by one agent turn.

    Round 1: a Mark draws the boxes (or substitutes the configured override)
    and the episode continues; a Terminate ends it immediately; a parse
    failure reports the error and the episode continues on the original
    image. Round 2: only a Terminate yields an answer; anything else fails
    the episode (turn budget exhausted). Raises EpisodeStateError when
    called after the episode is done.
    """
    if episode.done:
        raise EpisodeStateError(f"episode {episode.id} is already done ({episode.state.value})")
    round1 = episode.state is EpisodeState.ROUND1_PENDING
    episode.transcript.append(ROLE_ASSISTANT, agent_text)

    message: AgentMessage | None
    try:
        message = parse(agent_text, episode.format)
        parse_error: ParseError | None = None
    except ParseError as exc:
        message = None
        parse_error = exc

    if message is None:
        if round1:
            feedback = (
                f"Could not parse your response ({parse_error}). The image is unchanged. "
                "Answer the question, or mark regions first."
            )
            episode.state = EpisodeState.AWAITING_FINAL
            episode.transcript.append(ROLE_ENVIRONMENT, feedback)
            return EnvResponse(None, feedback, done=False, final_answer=None, parse_ok=False)
        feedback = f"Could not parse your response ({parse_error}). No final answer was given; episode failed."
        episode.state = EpisodeState.FAILED
        episode.transcript.append(ROLE_ENVIRONMENT, feedback)
        return EnvResponse(None, feedback, done=True, final_answer=None, parse_ok=False)

    answer = message.final_answer()
    if answer is not None:
        # Terminate wins over any Mark in the same message, in either round.
        episode.state = EpisodeState.TERMINATED
        episode.final_answer = answer
        feedback = f"Episode terminated with final answer {answer!r}."
        episode.transcript.append(ROLE_ENVIRONMENT, feedback)
        return EnvResponse(None, feedback, done=True, final_answer=answer, parse_ok=True)

    boxes = [clamp(b, episode.dims) for b in message.all_boxes()]
    if round1:
        if episode.annotation_override is not None:
            updated = episode.annotation_override
        else:
            updated = apply_mark(episode.image, boxes, episode.config.mark_style)
        episode.images[MARKED_IMAGE_KEY] = updated
        feedback = format_feedback(boxes, episode.config.feedback_template)
        episode.state = EpisodeState.AWAITING_FINAL
        episode.transcript.append(ROLE_ENVIRONMENT, feedback, image_ref=MARKED_IMAGE_KEY)
        return EnvResponse(updated, feedback, done=False, final_answer=None, parse_ok=True)

    feedback = "No final answer was given in the last turn; episode failed."
    episode.state = EpisodeState.FAILED
    episode.transcript.append(ROLE_ENVIRONMENT, feedback)
    return EnvResponse(None, feedback, done=True, final_answer=None, parse_ok=True)


def render_turn(thought: str | None, actions, fmt: ActionFormat) -> str:
    """Convenience for scripted agents: render a synthesized message."""
    return render(AgentMessage(thought=thought, actions=tuple(actions)), fmt)


def image_to_png_bytes(image: Image.Image) -> bytes:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()
