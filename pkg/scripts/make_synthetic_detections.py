#!/usr/bin/env python3
"""Synthesize a detection corpus for offline experiments.

Emits canonical detection JSONL (and, optionally, matching PNG rasters)
with a controlled mix of situations: empty images, single boxes pinned
strictly to one image half, deliberate midline straddlers, and
multi-box/multi-category images.  Deterministic for a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys

CATEGORIES = [
    "mass", "nodule", "effusion", "fracture",
    "opacity", "calcification", "consolidation", "lesion",
]


def _place_box(rng: random.Random, width: int, height: int) -> list[int]:
    """One box, biased toward strict left/right halves so laterality
    questions survive; roughly a fifth may straddle the midline."""
    bw = rng.randint(8, max(9, width // 3))
    bh = rng.randint(8, max(9, height // 3))
    roll = rng.random()
    if roll < 0.4:
        x1 = rng.randint(0, width // 2 - bw - 1)
    elif roll < 0.8:
        x1 = rng.randint(width // 2 + 1, width - bw)
    else:
        x1 = rng.randint(0, width - bw)
    y1 = rng.randint(0, height - bh)
    return [x1, y1, x1 + bw, y1 + bh]


def synthesize_records(
    count: int = 400,
    seed: int = 0,
    image_dir: str = ".",
) -> list[dict]:
    """Build ``count`` detection records (as plain dicts, one per image)."""
    rng = random.Random(seed)
    records = []
    for i in range(count):
        width = rng.randrange(96, 320, 8)
        height = rng.randrange(96, 320, 8)
        image_id = f"syn{i:05d}"
        n_boxes = rng.choice([0, 1, 1, 1, 2, 2, 3])
        # Occasionally reuse a category across boxes to exercise the
        # multi-box-per-category rules.
        distinct = max(1, n_boxes - (1 if n_boxes > 1 and rng.random() < 0.3 else 0))
        cats = rng.sample(CATEGORIES, k=min(distinct, len(CATEGORIES))) if n_boxes else []
        annotations = [
            {"category": cats[j % len(cats)], "bbox": _place_box(rng, width, height)}
            for j in range(n_boxes)
        ]
        records.append({
            "image_id": image_id,
            "image_path": os.path.join(image_dir, f"{image_id}.png"),
            "width": width,
            "height": height,
            "annotations": annotations,
        })
    return records


def write_images(records: list[dict], seed: int = 0) -> int:
    """Render a small PNG per record (flat background, faint box shading)."""
    from PIL import Image, ImageDraw

    rng = random.Random(f"raster:{seed}")
    written = 0
    for rec in records:
        base = tuple(rng.randint(20, 80) for _ in range(3))
        img = Image.new("RGB", (rec["width"], rec["height"]), base)
        draw = ImageDraw.Draw(img)
        for ann in rec["annotations"]:
            shade = tuple(min(255, c + 60) for c in base)
            draw.rectangle(ann["bbox"], fill=shade)
        os.makedirs(os.path.dirname(rec["image_path"]) or ".", exist_ok=True)
        img.save(rec["image_path"], format="PNG")
        written += 1
    return written


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--count", type=int, default=400)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="detections.jsonl")
    parser.add_argument("--image-dir", default=None,
                        help="also render PNG rasters into this directory")
    args = parser.parse_args(argv)

    image_dir = args.image_dir if args.image_dir else os.path.dirname(args.out) or "."
    records = synthesize_records(args.count, args.seed, image_dir=image_dir)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    rendered = write_images(records, args.seed) if args.image_dir else 0
    total_boxes = sum(len(r["annotations"]) for r in records)
    print(f"wrote {len(records)} records ({total_boxes} boxes) to {args.out}; "
          f"{rendered} rasters rendered")
    return 0


if __name__ == "__main__":
    sys.exit(main())
