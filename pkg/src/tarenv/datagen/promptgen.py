"""Prompt builders for LLM-assisted dataset work.

Three builders: a VQA generation prompt (seven worked question
templates, slot-filled with the record's categories and resolution), a
verification prompt whose reply contract is "Correct." / "Incorrect" /
"Format error", and a thought-generation prompt that requests a JSON
object with "thought 1" and "thought 2" fields.  All builders are pure
string functions.
"""

from __future__ import annotations

from ..geometry import DetectionRecord
from ..prompts import format_options
from .templates import VqaSample

_GENERATION_TEMPLATE = """\
I am constructing a visual multiple-choice question-and-answer set related to medical images. I will provide medical images with a resolution of {resolution}, along with the coordinates and categories of {categories}.

The question templates are as follows:

Question 1: Does the image show {c1}?
Options: A) Yes B) No

Question 2: Does the image show {c2}?
Options: A) Yes B) No

Question 3: Does the right half of the image show {c3}?
Options: A) Yes B) No, the left half shows {c3} C) No, the image does not show {c3}
(Note: The answer is determined based on the bounding box and image resolution. If it is in the middle, discard this question.)

Question 4: Does the left half of the image show {c4}?
Options: A) Yes B) No, the right half shows {c4} C) No, the image does not show {c4}
(Note: The answer is determined based on the bounding box and image resolution. If it is in the middle, discard this question.)

Question 5: The image shows {c5}. What are its bounding box coordinates?
Options: A) [213, 175, 239, 211] B) [21, 22, 46, 56] C) [126, 159, 252, 223]
(Note: If there is no {c5}, discard this question. Modify the bounding box coordinates based on the provided information.)

Question 6: The image shows {c6}. What are its bounding box coordinates?
Options: A) [213, 175, 239, 211] B) [21, 22, 46, 56] C) [126, 159, 252, 223]
(Note: If there is no {c6}, discard this question. Modify the bounding box coordinates based on the provided information.)

Question 7: What does the coordinate (X, Y) in the image show?
Options: {point_options}
(Note: (X, Y) should be filled with the correct coordinates based on the provided bounding box information.)

Note: The templates should be modified according to the specific image content. You need to provide the question, options, and answer, and return them in JSON format:
[{{"Question": "xxx", "Options": "xxx", "Answer": "A/B/C/D/E"}}]

Detections for this image:
{detections}"""

_VERIFICATION_TEMPLATE = """\
You are a medical imaging question-answer (QA) pair validation expert. Your task is to verify whether the given answer is correct based on the provided image information, question, options, and the specified answer. This is a single-choice question, and the answer must be a single option (A/B/C/D/E).

Please strictly evaluate based on the following information:
1. Image Information: {image_information}
2. Image Resolution: {resolution}
3. Question: {question}
4. Options: {options}
5. Answer to Verify: {answer}

Carefully analyze the question and options, and use the image information and resolution for reasoning.

Your output must be in one of the following formats:

If the answer format is incorrect (not a single A/B/C/D/E), respond with:
"Format error: The answer must be a single option A/B/C/D/E."

If the answer format is correct and the answer is correct, respond only with:
"Correct."

If the answer format is correct but the answer is wrong, respond with:
"Incorrect", followed by a brief explanation."""

_THOUGHT_TEMPLATE = """\
You are a medical AI assistant with visual understanding capabilities. When you receive a medical image and a related question, you will first analyze the image content, detecting key anatomical structures or abnormalities (such as fractures, masses, cells, etc.). If abnormalities relevant to the question are detected, describe what you observe and use the mark tool to annotate them; if no targets are found, explain why.
Please generate a structured training sample based on the following input, in JSON format as shown below:

{{
    "thought 1": "List initially identified abnormal features, specify the regions to be annotated with mark bbox and the reasons, and propose preliminary diagnostic hypotheses that require verification.",
    "thought 2": "Re-examine the annotated regions in the image based on the marked areas, provide a detailed diagnostic analysis, and make a final decision."
}}

Requirements:
1. The thought 1 field should describe what you observe in the image (e.g., fractures, masses, soft tissue swelling, etc. No need for overly detailed descriptions at this stage, as certainty is still low). Explain the next action to be taken, such as marking these areas in the image for further confirmation.
2. The thought 2 field should reconfirm the annotated regions, provide a diagnostic analysis, and finally state the definitive decision.

Input:
Category: {category}
Bounding boxes: {boxes}
Question: {question}
Options: {options}
Answer: {answer}"""


def _resolution(record: DetectionRecord) -> str:
    return f"{record.dims.width}*{record.dims.height}"


def _image_information(record: DetectionRecord) -> str:
    if not record.annotations:
        return "no annotated findings"
    return "; ".join(
        f"{a.category}: [{', '.join(str(v) for v in a.box.to_list())}]" for a in record.annotations
    )


def _cycle_categories(record: DetectionRecord, count: int) -> list[str]:
    cats = record.categories() or ["finding"]
    return [cats[i % len(cats)] for i in range(count)]


def build_generation_prompt(record: DetectionRecord) -> str:
    """Seven worked question templates, filled with this record's content."""
    cats = record.categories()
    c1, c2, c3, c4, c5, c6 = _cycle_categories(record, 6)
    point_cats = (cats or ["finding"])[:4]
    letters = "ABCDE"
    point_entries = [f"{letters[i]}) {c}" for i, c in enumerate(point_cats)]
    point_entries.append(f"{letters[len(point_entries)]}) Other")
    return _GENERATION_TEMPLATE.format(
        resolution=_resolution(record),
        categories=", ".join(cats) if cats else "any visible findings",
        c1=c1, c2=c2, c3=c3, c4=c4, c5=c5, c6=c6,
        point_options=" ".join(point_entries),
        detections=_image_information(record),
    )


def build_verification_prompt(sample: VqaSample, record: DetectionRecord) -> str:
    return _VERIFICATION_TEMPLATE.format(
        image_information=_image_information(record),
        resolution=_resolution(record),
        question=sample.question,
        options=format_options(sample.options),
        answer=sample.answer,
    )


def build_thought_prompt(sample: VqaSample, record: DetectionRecord) -> str:
    boxes = [b.to_list() for b in sample.provenance.gt_boxes]
    return _THOUGHT_TEMPLATE.format(
        category=sample.provenance.category,
        boxes=boxes if boxes else "none",
        question=sample.question,
        options=format_options(sample.options),
        answer=sample.answer,
    )
