"""Template-driven VQA sample generation from detection records.

Four question archetypes are generated from box-level annotations:
presence (yes/no), half-location (left/right laterality), bounding-box
choice (pick the true box among same-sized distractors), and point
category (what lies at a given pixel).  Every sample carries provenance
(source category, ground-truth boxes, run seed) so that answers can be
re-derived independently later.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from ..geometry import (
    BoundingBox,
    DetectionRecord,
    ImageDims,
    Side,
    center_point,
    contains,
    iou,
    side_of,
)

OPTION_LETTERS = "ABCDE"

#: Option text used for the "none of the listed categories" choice in
#: point-category questions.
OTHER_OPTION = "Other"


class TemplateKind(Enum):
    PRESENCE = "presence"
    HALF_LOCATION = "half_location"
    BBOX_CHOICE = "bbox_choice"
    POINT_CATEGORY = "point_category"


class DistractorPlacementError(Exception):
    """No admissible distractor placement exists for a ground-truth box."""


@dataclass(frozen=True)
class TemplateConfig:
    """Knobs for the generator.

    ``category_pool`` widens the set of categories used for negative
    presence questions and point-category distractors beyond what the
    ingested records mention; ``None`` means "use the categories seen
    across the input records".
    """

    kinds: tuple[TemplateKind, ...] = (
        TemplateKind.PRESENCE,
        TemplateKind.HALF_LOCATION,
        TemplateKind.BBOX_CHOICE,
        TemplateKind.POINT_CATEGORY,
    )
    category_pool: tuple[str, ...] | None = None
    negative_presence_cap: int = 2
    point_distractor_count: int = 3

    def __post_init__(self):
        if not self.kinds:
            raise ValueError("at least one template kind must be enabled")
        if len(set(self.kinds)) != len(self.kinds):
            raise ValueError("duplicate template kinds")
        if self.negative_presence_cap < 0:
            raise ValueError("negative_presence_cap must be >= 0")
        if not 0 <= self.point_distractor_count <= 3:
            # letters are capped at A..E: truth + 3 distractors + Other
            raise ValueError("point_distractor_count must be in [0, 3]")

    def to_dict(self) -> dict:
        return {
            "kinds": [k.value for k in self.kinds],
            "category_pool": list(self.category_pool) if self.category_pool is not None else None,
            "negative_presence_cap": self.negative_presence_cap,
            "point_distractor_count": self.point_distractor_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TemplateConfig":
        kwargs = {}
        if "kinds" in data:
            kwargs["kinds"] = tuple(TemplateKind(k) for k in data["kinds"])
        if data.get("category_pool") is not None:
            kwargs["category_pool"] = tuple(data["category_pool"])
        for key in ("negative_presence_cap", "point_distractor_count"):
            if key in data:
                kwargs[key] = int(data[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class Provenance:
    """How a sample was derived: enough to re-derive its answer."""

    category: str
    gt_boxes: tuple[BoundingBox, ...]
    seed: int

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "gt_boxes": [b.to_list() for b in self.gt_boxes],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Provenance":
        return cls(
            category=data["category"],
            gt_boxes=tuple(BoundingBox.from_quad(q) for q in data["gt_boxes"]),
            seed=int(data["seed"]),
        )


@dataclass(frozen=True)
class VqaSample:
    """A single multiple-choice question grounded in one detection record."""

    id: str
    image_path: str
    dims: ImageDims
    question: str
    options: tuple[tuple[str, str], ...]
    answer: str
    kind: TemplateKind
    provenance: Provenance

    def __post_init__(self):
        letters = [letter for letter, _ in self.options]
        if letters != list(OPTION_LETTERS[: len(letters)]):
            raise ValueError(f"option letters must be consecutive from A, got {letters}")
        if not 2 <= len(letters) <= 5:
            raise ValueError("between 2 and 5 options required")
        if self.answer not in letters:
            raise ValueError(f"answer {self.answer!r} not among option letters {letters}")
        texts = [text for _, text in self.options]
        if len(set(texts)) != len(texts):
            raise ValueError("option texts must be distinct")

    @property
    def answer_text(self) -> str:
        return dict(self.options)[self.answer]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "width": self.dims.width,
            "height": self.dims.height,
            "question": self.question,
            "options": [[letter, text] for letter, text in self.options],
            "answer": self.answer,
            "kind": self.kind.value,
            "provenance": self.provenance.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VqaSample":
        return cls(
            id=data["id"],
            image_path=data["image_path"],
            dims=ImageDims(int(data["width"]), int(data["height"])),
            question=data["question"],
            options=tuple((letter, text) for letter, text in data["options"]),
            answer=data["answer"],
            kind=TemplateKind(data["kind"]),
            provenance=Provenance.from_dict(data["provenance"]),
        )


@dataclass
class GenerationReport:
    """What the generator produced and what it dropped, and why."""

    emitted: dict[str, int] = field(default_factory=dict)
    discards: list[tuple[str, str, str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def note_emit(self, kind: TemplateKind) -> None:
        self.emitted[kind.value] = self.emitted.get(kind.value, 0) + 1

    def note_discard(self, record_id: str, kind: TemplateKind, category: str, reason: str) -> None:
        self.discards.append((record_id, kind.value, category, reason))

    @property
    def total_emitted(self) -> int:
        return sum(self.emitted.values())


def format_box_text(box: BoundingBox) -> str:
    """Render a box the way options show it: ``[x1, y1, x2, y2]``."""
    return "[" + ", ".join(str(v) for v in box.to_list()) + "]"


def _shuffle_options(
    texts: Sequence[str], answer_text: str, rng: random.Random
) -> tuple[tuple[tuple[str, str], ...], str]:
    """Shuffle option texts and return lettered options plus the answer letter."""
    if list(texts).count(answer_text) != 1:
        raise ValueError("answer text must occur exactly once among options")
    order = list(texts)
    rng.shuffle(order)
    options = tuple((OPTION_LETTERS[i], text) for i, text in enumerate(order))
    answer = next(letter for letter, text in options if text == answer_text)
    return options, answer


def _record_rng(seed: int, image_id: str, kind: TemplateKind, category: str) -> random.Random:
    # String seeds hash deterministically across processes and platforms.
    return random.Random(f"{seed}:{image_id}:{kind.value}:{category}")


def make_distractor_boxes(
    gt: BoundingBox,
    dims: ImageDims,
    all_gt_boxes: Sequence[BoundingBox],
    seed: int | random.Random,
) -> list[BoundingBox]:
    """Place two distractor boxes with the same width and height as ``gt``.

    Each distractor must lie within the image and overlap every ground-truth
    box with IoU below 0.1.  Rejection sampling runs for up to 100 draws;
    if that fails, the four image corners are tried in a fixed order.

    Raises DistractorPlacementError when no two admissible placements exist.
    """
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    w, h = gt.width, gt.height
    max_x, max_y = dims.width - w, dims.height - h
    if max_x < 0 or max_y < 0:
        raise DistractorPlacementError("ground-truth box exceeds image dimensions")

    def admissible(cand: BoundingBox, chosen: list[BoundingBox]) -> bool:
        if cand == gt or cand in chosen:
            return False
        return all(iou(cand, g) < 0.1 for g in all_gt_boxes)

    chosen: list[BoundingBox] = []
    for _ in range(100):
        if len(chosen) == 2:
            break
        x = rng.randint(0, max_x)
        y = rng.randint(0, max_y)
        cand = BoundingBox(x, y, x + w, y + h)
        if admissible(cand, chosen):
            chosen.append(cand)
    if len(chosen) < 2:
        for x, y in ((0, 0), (max_x, 0), (0, max_y), (max_x, max_y)):
            cand = BoundingBox(x, y, x + w, y + h)
            if admissible(cand, chosen):
                chosen.append(cand)
            if len(chosen) == 2:
                break
    if len(chosen) < 2:
        raise DistractorPlacementError("could not place two low-overlap distractors")
    return chosen


def _category_pool(records: Sequence[DetectionRecord], config: TemplateConfig,
                   report: GenerationReport) -> list[str]:
    seen: list[str] = []
    seen_set: set[str] = set()
    for rec in records:
        for cat in rec.categories():
            if cat not in seen_set:
                seen.append(cat)
                seen_set.add(cat)
    if config.category_pool is None:
        return sorted(seen)
    unmatched = [c for c in config.category_pool if c not in seen_set]
    if unmatched:
        report.warnings.append(
            "configured categories never appear in the records: " + ", ".join(sorted(unmatched))
        )
    # Config order wins; categories only seen in records are appended so
    # negative presence questions can still use them.
    pool = list(dict.fromkeys(config.category_pool))
    pool.extend(c for c in sorted(seen) if c not in pool)
    return pool


def _gen_presence(rec: DetectionRecord, pool: Sequence[str], config: TemplateConfig,
                  seed: int, report: GenerationReport) -> Iterable[VqaSample]:
    present = rec.categories()
    for cat in present:
        rng = _record_rng(seed, rec.image_id, TemplateKind.PRESENCE, cat)
        options, answer = _shuffle_options(["Yes", "No"], "Yes", rng)
        yield _sample(rec, TemplateKind.PRESENCE, cat,
                      f"Does the image show {cat}?", options, answer,
                      rec.boxes_of(cat), seed)
        report.note_emit(TemplateKind.PRESENCE)
    absent = [c for c in pool if c not in set(present)]
    if not absent or config.negative_presence_cap == 0:
        return
    rng = _record_rng(seed, rec.image_id, TemplateKind.PRESENCE, "<absent>")
    count = min(config.negative_presence_cap, len(absent))
    for cat in sorted(rng.sample(absent, count)):
        sub = _record_rng(seed, rec.image_id, TemplateKind.PRESENCE, cat)
        options, answer = _shuffle_options(["Yes", "No"], "No", sub)
        yield _sample(rec, TemplateKind.PRESENCE, cat,
                      f"Does the image show {cat}?", options, answer, (), seed)
        report.note_emit(TemplateKind.PRESENCE)


def _gen_half_location(rec: DetectionRecord, seed: int,
                       report: GenerationReport) -> Iterable[VqaSample]:
    for cat in rec.categories():
        boxes = rec.boxes_of(cat)
        sides = {side_of(b, rec.dims) for b in boxes}
        if sides == {Side.LEFT}:
            actual = "left"
        elif sides == {Side.RIGHT}:
            actual = "right"
        else:
            report.note_discard(rec.image_id, TemplateKind.HALF_LOCATION, cat,
                                "box touches or straddles the vertical midline")
            continue
        rng = _record_rng(seed, rec.image_id, TemplateKind.HALF_LOCATION, cat)
        asked = rng.choice(["left", "right"])
        other = "right" if asked == "left" else "left"
        texts = [
            "Yes",
            f"No, the {other} half shows {cat}",
            f"No, the image does not show {cat}",
        ]
        answer_text = "Yes" if actual == asked else texts[1]
        options, answer = _shuffle_options(texts, answer_text, rng)
        yield _sample(rec, TemplateKind.HALF_LOCATION, cat,
                      f"Does the {asked} half of the image show {cat}?",
                      options, answer, boxes, seed)
        report.note_emit(TemplateKind.HALF_LOCATION)


def _gen_bbox_choice(rec: DetectionRecord, seed: int,
                     report: GenerationReport) -> Iterable[VqaSample]:
    all_boxes = tuple(a.box for a in rec.annotations)
    for cat in rec.categories():
        gt = rec.boxes_of(cat)[0]
        rng = _record_rng(seed, rec.image_id, TemplateKind.BBOX_CHOICE, cat)
        try:
            distractors = make_distractor_boxes(gt, rec.dims, all_boxes, rng)
        except DistractorPlacementError as exc:
            report.note_discard(rec.image_id, TemplateKind.BBOX_CHOICE, cat, str(exc))
            continue
        texts = [format_box_text(b) for b in (gt, *distractors)]
        options, answer = _shuffle_options(texts, texts[0], rng)
        yield _sample(rec, TemplateKind.BBOX_CHOICE, cat,
                      f"The image shows {cat}. What are its bounding box coordinates?",
                      options, answer, (gt,), seed)
        report.note_emit(TemplateKind.BBOX_CHOICE)


def _gen_point_category(rec: DetectionRecord, pool: Sequence[str], config: TemplateConfig,
                        seed: int, report: GenerationReport) -> Iterable[VqaSample]:
    for cat in rec.categories():
        if cat == OTHER_OPTION:
            report.note_discard(rec.image_id, TemplateKind.POINT_CATEGORY, cat,
                                "category name collides with the Other option")
            continue
        box = rec.boxes_of(cat)[0]
        point = center_point(box)
        covering = {a.category for a in rec.annotations if contains(a.box, point)}
        if covering != {cat}:
            report.note_discard(rec.image_id, TemplateKind.POINT_CATEGORY, cat,
                                f"point {point} covered by multiple categories: {sorted(covering)}")
            continue
        rng = _record_rng(seed, rec.image_id, TemplateKind.POINT_CATEGORY, cat)
        candidates = [c for c in pool if c != cat and c != OTHER_OPTION]
        count = min(config.point_distractor_count, len(candidates))
        distractors = sorted(rng.sample(candidates, count)) if count else []
        texts = [cat, *distractors, OTHER_OPTION]
        options, answer = _shuffle_options(texts, cat, rng)
        x, y = point
        yield _sample(rec, TemplateKind.POINT_CATEGORY, cat,
                      f"What does the coordinate ({x}, {y}) in the image show?",
                      options, answer, (box,), seed)
        report.note_emit(TemplateKind.POINT_CATEGORY)


def _sample(rec: DetectionRecord, kind: TemplateKind, category: str, question: str,
            options: tuple[tuple[str, str], ...], answer: str,
            gt_boxes: Sequence[BoundingBox], seed: int) -> VqaSample:
    return VqaSample(
        id=f"{rec.image_id}:{kind.value}:{category}",
        image_path=rec.image_path,
        dims=rec.dims,
        question=question,
        options=options,
        answer=answer,
        kind=kind,
        provenance=Provenance(category=category, gt_boxes=tuple(gt_boxes), seed=seed),
    )


def generate(
    records: Sequence[DetectionRecord],
    config: TemplateConfig = TemplateConfig(),
    seed: int = 0,
) -> tuple[list[VqaSample], GenerationReport]:
    """Expand detection records into VQA samples.

    Output order is deterministic for a fixed (records, config, seed)
    triple: records in input order, kinds in config order, categories in
    first-appearance order within each record.
    """
    report = GenerationReport()
    pool = _category_pool(records, config, report)
    generators = {
        TemplateKind.PRESENCE: lambda rec: _gen_presence(rec, pool, config, seed, report),
        TemplateKind.HALF_LOCATION: lambda rec: _gen_half_location(rec, seed, report),
        TemplateKind.BBOX_CHOICE: lambda rec: _gen_bbox_choice(rec, seed, report),
        TemplateKind.POINT_CATEGORY: lambda rec: _gen_point_category(rec, pool, config, seed, report),
    }
    samples: list[VqaSample] = []
    for rec in records:
        for kind in config.kinds:
            samples.extend(generators[kind](rec))
    return samples, report
