"""Supervised fine-tuning record assembly.

Each validated VQA sample becomes a short conversation: the assistant
first reasons and marks the ground-truth region, receives the annotated
image back as environment feedback, then reasons again and terminates
with the answer.  Samples without a markable box collapse to one turn.
The annotated raster is written next to the original image so the
record stays self-contained on disk.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable

from ..client import ModelBackend
from ..config import MarkStyle
from ..episode import apply_mark, decode_image, format_feedback
from ..geometry import DetectionRecord
from ..prompts import ChatMessage, InferenceProtocol, system_prompt, user_round1_text
from ..protocol import ActionFormat, AgentMessage, Mark, Terminate, extract_first_json, render
from .promptgen import build_thought_prompt
from .templates import TemplateKind, VqaSample

IMAGE_PLACEHOLDER = "<image>"


@dataclass(frozen=True)
class SftRecord:
    """One training conversation plus the image files it references.

    ``messages`` follow the common role/content JSONL shape; user turns
    that carry an image start with the ``<image>`` placeholder and
    consume image paths from ``images`` in order.
    """

    id: str
    images: tuple[str, ...]
    messages: tuple[tuple[str, str], ...]
    format: ActionFormat

    def assistant_texts(self) -> list[str]:
        return [content for role, content in self.messages if role == "assistant"]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "images": list(self.images),
            "messages": [{"role": role, "content": content} for role, content in self.messages],
            "format": self.format.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SftRecord":
        return cls(
            id=data["id"],
            images=tuple(data["images"]),
            messages=tuple((m["role"], m["content"]) for m in data["messages"]),
            format=ActionFormat(data["format"]),
        )


def placeholder_thoughts(sample: VqaSample) -> tuple[str, str]:
    """Deterministic template-stub thoughts for fully offline assembly."""
    category = sample.provenance.category
    if sample.provenance.gt_boxes:
        regions = ", ".join(str(b.to_list()) for b in sample.provenance.gt_boxes)
        thought1 = (
            f"The image appears to show {category}. I will mark the region at {regions} "
            "to examine it more closely before answering."
        )
        thought2 = (
            f"The marked region is consistent with {category}. "
            f"Based on the annotated image, the correct choice is {sample.answer}."
        )
    else:
        thought1 = (
            f"I examined the image for {category} and found no corresponding region, "
            "so no marking is needed."
        )
        thought2 = f"No {category} is visible; the correct choice is {sample.answer}."
    return thought1, thought2


def llm_thoughts(sample: VqaSample, record: DetectionRecord,
                 backend: ModelBackend) -> tuple[str, str]:
    """Generate the two thought fields with an external model.

    The reply must be a JSON object with "thought 1" and "thought 2"
    keys; anything else raises ValueError so the caller can fall back to
    placeholders.
    """
    prompt = build_thought_prompt(sample, record)
    completion = backend.complete([ChatMessage.of_text("user", prompt)])
    obj = extract_first_json(completion.text)
    if obj is None or not isinstance(obj, dict):
        raise ValueError(f"thought reply is not a JSON object: {completion.text[:120]!r}")
    try:
        thought1 = str(obj["thought 1"]).strip()
        thought2 = str(obj["thought 2"]).strip()
    except KeyError as exc:
        raise ValueError(f"thought reply missing key {exc}") from exc
    if not thought1 or not thought2:
        raise ValueError("thought fields must be non-empty")
    return thought1, thought2


def _annotated_path(image_path: str, output_dir: str | None) -> str:
    stem, _ = os.path.splitext(os.path.basename(image_path))
    directory = output_dir if output_dir is not None else os.path.dirname(image_path)
    return os.path.join(directory, f"{stem}_marked.png")


def assemble_sft_record(
    sample: VqaSample,
    record: DetectionRecord,
    thought1: str,
    thought2: str,
    fmt: ActionFormat = ActionFormat.EXPLICIT,
    *,
    mark_style: MarkStyle | None = None,
    output_dir: str | None = None,
    write_images: bool = True,
    feedback_template: str | None = None,
) -> SftRecord:
    """Build the conversation for one sample.

    With ground-truth boxes the record has two assistant turns
    (Mark, then Terminate); the annotated image is rendered with
    apply_mark and saved beside the original (or under ``output_dir``).
    Without boxes a presence-style sample terminates directly in round 1;
    any other kind without a box is a caller error.
    """
    if not thought1.strip() or not thought2.strip():
        raise ValueError("thoughts must be non-empty")
    boxes = sample.provenance.gt_boxes
    if not boxes and sample.kind is not TemplateKind.PRESENCE:
        raise ValueError(f"sample {sample.id} of kind {sample.kind.value} has no ground-truth box")

    question_text = user_round1_text(sample.question, sample.options, InferenceProtocol.TAR)
    messages: list[tuple[str, str]] = [
        ("system", system_prompt()),
        ("user", f"{IMAGE_PLACEHOLDER}\n{question_text}"),
    ]
    if not boxes:
        final = render(AgentMessage(thought=thought1, actions=(Terminate(sample.answer),)), fmt)
        messages.append(("assistant", final))
        return SftRecord(id=sample.id, images=(sample.image_path,),
                         messages=tuple(messages), format=fmt)

    round1 = render(AgentMessage(thought=thought1, actions=(Mark(tuple(boxes)),)), fmt)
    messages.append(("assistant", round1))

    marked_path = _annotated_path(sample.image_path, output_dir)
    if write_images:
        original = decode_image(record.image_path)
        annotated = apply_mark(original, boxes, mark_style)
        os.makedirs(os.path.dirname(marked_path) or ".", exist_ok=True)
        annotated.save(marked_path, format="PNG")

    feedback = (
        format_feedback(boxes, feedback_template)
        if feedback_template is not None
        else format_feedback(boxes)
    )
    messages.append(("user", f"{IMAGE_PLACEHOLDER}\n{feedback}"))

    round2 = render(AgentMessage(thought=thought2, actions=(Terminate(sample.answer),)), fmt)
    messages.append(("assistant", round2))
    return SftRecord(id=sample.id, images=(sample.image_path, marked_path),
                     messages=tuple(messages), format=fmt)


def write_sft_jsonl(records: Iterable[SftRecord], path: str) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_sft_jsonl(path: str) -> list[SftRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(SftRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad SFT record: {exc}") from exc
    return records
