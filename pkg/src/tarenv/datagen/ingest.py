"""Detection record ingestion and JSONL serialization.

Two input layouts are supported: a canonical JSONL file with one record
per line, and COCO-style JSON (``images`` / ``categories`` /
``annotations`` arrays with ``[x, y, w, h]`` boxes).  Both funnel into
the same ``DetectionRecord`` type; boxes are clamped to the image and
problems are reported rather than silently dropped.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from ..geometry import Annotation, BoundingBox, DetectionRecord, ImageDims, clamp
from .templates import VqaSample


class IngestFormat(Enum):
    CANONICAL_JSONL = "jsonl"
    COCO_JSON = "coco"


@dataclass
class IngestResult:
    """Parsed records plus everything that went wrong along the way."""

    records: list[DetectionRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def raise_if_empty(self) -> None:
        if not self.records:
            detail = "; ".join(self.errors[:5]) or "no usable records"
            raise ValueError(f"ingestion produced no records: {detail}")


def _coerce_record(data: dict, source: str, result: IngestResult) -> DetectionRecord | None:
    try:
        image_id = str(data["image_id"])
        image_path = str(data["image_path"])
        dims = ImageDims(int(data["width"]), int(data["height"]))
        raw_annotations = data.get("annotations", [])
        if not isinstance(raw_annotations, list):
            raise TypeError("annotations must be a list")
        annotations = []
        for entry in raw_annotations:
            category = str(entry["category"]).strip()
            if not category:
                raise ValueError("empty category")
            box = BoundingBox.from_quad(entry["bbox"])
            if not box.within(dims):
                clamped = clamp(box, dims)
                result.warnings.append(
                    f"{source}: box {box.to_list()} for {image_id!r}/{category!r} "
                    f"clamped to {clamped.to_list()}"
                )
                box = clamped
            annotations.append(Annotation(category=category, box=box))
        return DetectionRecord(image_id=image_id, image_path=image_path,
                               dims=dims, annotations=annotations)
    except (KeyError, TypeError, ValueError) as exc:
        result.errors.append(f"{source}: malformed record: {exc}")
        return None


def _read_canonical_jsonl(path: str, result: IngestResult) -> Iterable[DetectionRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            source = f"{os.path.basename(path)}:{lineno}"
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                result.errors.append(f"{source}: invalid JSON: {exc.msg}")
                continue
            if not isinstance(data, dict):
                result.errors.append(f"{source}: expected a JSON object")
                continue
            rec = _coerce_record(data, source, result)
            if rec is not None:
                yield rec


def _read_coco(path: str, result: IngestResult, images_root: str | None) -> Iterable[DetectionRecord]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    root = images_root if images_root is not None else os.path.dirname(os.path.abspath(path))
    categories = {c["id"]: str(c["name"]) for c in data.get("categories", [])}
    by_image: dict = {}
    for ann in data.get("annotations", []):
        by_image.setdefault(ann.get("image_id"), []).append(ann)
    for img in data.get("images", []):
        source = f"{os.path.basename(path)}#image {img.get('id')!r}"
        try:
            x_anns = []
            for ann in by_image.get(img["id"], []):
                cat = categories.get(ann["category_id"])
                if cat is None:
                    raise ValueError(f"unknown category_id {ann['category_id']!r}")
                x, y, w, h = ann["bbox"]
                x_anns.append({"category": cat, "bbox": [x, y, x + w, y + h]})
            canonical = {
                "image_id": str(img["id"]),
                "image_path": os.path.join(root, img["file_name"]),
                "width": img["width"],
                "height": img["height"],
                "annotations": x_anns,
            }
        except (KeyError, TypeError, ValueError) as exc:
            result.errors.append(f"{source}: malformed record: {exc}")
            continue
        rec = _coerce_record(canonical, source, result)
        if rec is not None:
            yield rec


def ingest_detections(
    path: str,
    fmt: IngestFormat = IngestFormat.CANONICAL_JSONL,
    *,
    require_images: bool = True,
    images_root: str | None = None,
) -> IngestResult:
    """Load detection records from ``path``.

    Records whose image file is missing are skipped with a warning unless
    ``require_images`` is False (useful for synthetic corpora where only
    the geometry matters).  Malformed entries land in ``errors`` and never
    abort the whole load.
    """
    result = IngestResult()
    if fmt is IngestFormat.CANONICAL_JSONL:
        records = _read_canonical_jsonl(path, result)
    elif fmt is IngestFormat.COCO_JSON:
        records = _read_coco(path, result, images_root)
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unsupported format: {fmt}")
    for rec in records:
        if require_images and not os.path.isfile(rec.image_path):
            result.warnings.append(
                f"skipping {rec.image_id!r}: image file not found: {rec.image_path}"
            )
            continue
        result.records.append(rec)
    return result


def write_vqa_jsonl(samples: Iterable[VqaSample], path: str) -> int:
    """Write samples one JSON object per line; returns the count written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_dict(), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_vqa_jsonl(path: str) -> list[VqaSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                samples.append(VqaSample.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad VQA sample: {exc}") from exc
    return samples
