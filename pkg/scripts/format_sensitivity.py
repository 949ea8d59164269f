#!/usr/bin/env python3
"""Check that the action wire format never changes scoring.

The same logical trajectory (think, mark a region, think again,
terminate with a letter) is rendered in both the JSON and the tag
notation, pushed through a live episode each way, and scored.  Both
paths must produce identical reward breakdowns and final answers.
"""

from __future__ import annotations

import argparse
import sys

from PIL import Image

from tarenv import EpisodeConfig, create, step
from tarenv.geometry import BoundingBox
from tarenv.protocol import ActionFormat, AgentMessage, Mark, Terminate, render
from tarenv.rewards import score_trajectory


def run_one(fmt: ActionFormat, answer: str, ground_truth: str) -> tuple:
    image = Image.new("RGB", (224, 224), (32, 32, 32))
    episode = create(
        image,
        "Does the image show a lesion?",
        [("A", "Yes"), ("B", "No")],
        EpisodeConfig(format=fmt),
        ground_truth=ground_truth,
        episode_id=f"fmt-{fmt.value}",
    )
    turn1 = render(AgentMessage(
        thought="A suspicious region needs a closer look.",
        actions=(Mark((BoundingBox(40, 52, 120, 130),)),),
    ), fmt)
    turn2 = render(AgentMessage(
        thought="The marked region confirms the finding.",
        actions=(Terminate(answer),),
    ), fmt)
    step(episode, turn1)
    response = step(episode, turn2)
    breakdown = score_trajectory(episode.transcript.assistant_texts(), ground_truth, fmt)
    return response.final_answer, breakdown


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--answer", default="A")
    parser.add_argument("--ground-truth", default="A")
    args = parser.parse_args(argv)

    results = {}
    for fmt in ActionFormat:
        final, breakdown = run_one(fmt, args.answer, args.ground_truth)
        results[fmt.value] = (final, breakdown)
        print(f"{fmt.value:>9}: final={final!r} {breakdown.to_dict()}")

    (final_a, bd_a), (final_b, bd_b) = results.values()
    if final_a == final_b and bd_a == bd_b:
        print("formats agree")
        return 0
    print("FORMAT DIVERGENCE DETECTED", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
