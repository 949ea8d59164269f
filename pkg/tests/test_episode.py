"""Episode state machine: round transitions, mark rendering, overrides,
and transcript/chat-message assembly."""

import numpy as np
import pytest
from PIL import Image

from tarenv.config import MarkStyle
from tarenv.episode import (
    INPUT_IMAGE_KEY,
    MARKED_IMAGE_KEY,
    Episode,
    EpisodeConfig,
    EpisodeState,
    EpisodeStateError,
    apply_mark,
    create,
    decode_image,
    format_feedback,
    image_to_png_bytes,
    override_annotation,
    render_turn,
    step,
)
from tarenv.geometry import BoundingBox, clamp
from tarenv.protocol import ActionFormat, Mark, Terminate

OPTIONS = [("A", "Yes"), ("B", "No")]
QUESTION = "Does the image show a mass?"


def gradient_image(w=160, h=120):
    """Raster where every pixel differs from its neighbors, so any drawing
    is visible in a diff."""
    arr = np.zeros((h, w, 3), dtype=np.uint8)
    arr[..., 0] = (np.arange(w)[None, :] * 255 // max(w - 1, 1)).astype(np.uint8)
    arr[..., 1] = (np.arange(h)[:, None] * 255 // max(h - 1, 1)).astype(np.uint8)
    arr[..., 2] = 37
    return Image.fromarray(arr, "RGB")


def make_episode(fmt=ActionFormat.EXPLICIT, image=None, **kwargs):
    return create(image or gradient_image(), QUESTION, OPTIONS,
                  EpisodeConfig(format=fmt), **kwargs)


def turn(fmt, *actions, thought="inspecting the region"):
    return render_turn(thought, actions, fmt)


def border_band_mask(shape, boxes, width):
    """Inclusive border band for inward-stroked rectangle outlines."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    ys, xs = np.mgrid[0:h, 0:w]
    for b in boxes:
        inside = (xs >= b.x1) & (xs <= b.x2) & (ys >= b.y1) & (ys <= b.y2)
        interior = (
            (xs >= b.x1 + width) & (xs <= b.x2 - width)
            & (ys >= b.y1 + width) & (ys <= b.y2 - width)
        )
        mask |= inside & ~interior
    return mask


class TestCreate:
    def test_seeds_transcript(self):
        ep = make_episode()
        roles = [r.role for r in ep.transcript.records]
        assert roles == ["system", "user"]
        assert ep.transcript.records[1].image_ref == INPUT_IMAGE_KEY
        assert QUESTION in ep.transcript.records[1].text
        assert "A) Yes" in ep.transcript.records[1].text
        assert ep.state is EpisodeState.ROUND1_PENDING
        assert not ep.done

    def test_rejects_bad_options(self):
        img = gradient_image()
        with pytest.raises(ValueError):
            create(img, QUESTION, [])
        with pytest.raises(ValueError):
            create(img, QUESTION, [("A", "Yes"), ("A", "No")])
        with pytest.raises(ValueError):
            create(img, QUESTION, [("A", "Yes"), ("F", "No")])

    def test_explicit_episode_id(self):
        ep = make_episode(episode_id="ep-1")
        assert ep.id == "ep-1"

    def test_decodes_from_path(self, tmp_path):
        p = tmp_path / "img.png"
        gradient_image().save(p)
        ep = create(p, QUESTION, OPTIONS)
        assert ep.dims.width == 160 and ep.dims.height == 120


class TestDecodeImage:
    def test_bytes_round_trip(self):
        data = image_to_png_bytes(gradient_image())
        img = decode_image(data)
        assert img.size == (160, 120) and img.mode == "RGB"

    def test_converts_to_rgb(self):
        gray = Image.new("L", (8, 8), 40)
        assert decode_image(gray).mode == "RGB"

    def test_bad_path(self, tmp_path):
        with pytest.raises(ValueError):
            decode_image(tmp_path / "missing.png")

    def test_bad_bytes(self):
        with pytest.raises(ValueError):
            decode_image(b"not a png")

    def test_bad_type(self):
        with pytest.raises(TypeError):
            decode_image(12345)


class TestMarkStep:
    @pytest.mark.parametrize("fmt", list(ActionFormat))
    def test_round1_mark_continues(self, fmt):
        ep = make_episode(fmt)
        box = BoundingBox(20, 30, 90, 80)
        resp = step(ep, turn(fmt, Mark((box,))))
        assert not resp.done and resp.parse_ok
        assert resp.updated_image is not None
        assert ep.state is EpisodeState.AWAITING_FINAL
        assert resp.feedback == format_feedback([box])
        assert MARKED_IMAGE_KEY in ep.images

    def test_diff_confined_to_border_band(self):
        ep = make_episode()
        base = np.asarray(ep.image).copy()
        boxes = [BoundingBox(20, 30, 90, 80), BoundingBox(100, 10, 140, 50)]
        resp = step(ep, turn(ActionFormat.EXPLICIT, Mark(tuple(boxes))))
        marked = np.asarray(resp.updated_image)
        changed = (marked != base).any(axis=2)
        width = MarkStyle().stroke_width(ep.dims.width, ep.dims.height)
        band = border_band_mask(changed.shape, boxes, width)
        assert changed.any(), "mark must visibly change pixels"
        assert not (changed & ~band).any(), "pixels changed outside the border band"

    def test_base_raster_untouched(self):
        ep = make_episode()
        before = image_to_png_bytes(ep.image)
        step(ep, turn(ActionFormat.EXPLICIT, Mark((BoundingBox(10, 10, 50, 50),))))
        assert image_to_png_bytes(ep.image) == before
        assert image_to_png_bytes(ep.images[INPUT_IMAGE_KEY]) == before

    def test_out_of_bounds_boxes_clamped(self):
        ep = make_episode()
        wild = BoundingBox(-50, -50, 500, 400)
        resp = step(ep, turn(ActionFormat.EXPLICIT, Mark((wild,))))
        assert resp.parse_ok and not resp.done
        clamped = clamp(wild, ep.dims)
        assert resp.feedback == format_feedback([clamped])

    def test_deterministic_rendering(self):
        a, b = make_episode(), make_episode()
        t = turn(ActionFormat.EXPLICIT, Mark((BoundingBox(5, 5, 70, 60),)))
        ra, rb = step(a, t), step(b, t)
        assert image_to_png_bytes(ra.updated_image) == image_to_png_bytes(rb.updated_image)


class TestTerminateStep:
    @pytest.mark.parametrize("fmt", list(ActionFormat))
    def test_round1_terminate_ends(self, fmt):
        ep = make_episode(fmt)
        resp = step(ep, turn(fmt, Terminate("A")))
        assert resp.done and resp.final_answer == "A" and resp.parse_ok
        assert ep.state is EpisodeState.TERMINATED
        assert ep.final_answer == "A"

    def test_two_round_happy_path(self):
        fmt = ActionFormat.EXPLICIT
        ep = make_episode(fmt)
        step(ep, turn(fmt, Mark((BoundingBox(20, 30, 90, 80),))))
        resp = step(ep, turn(fmt, Terminate("B")))
        assert resp.done and resp.final_answer == "B"
        assert ep.state is EpisodeState.TERMINATED
        assert ep.assistant_turns() == 2

    def test_round2_terminate_beats_same_turn_mark(self):
        fmt = ActionFormat.EXPLICIT
        ep = make_episode(fmt)
        step(ep, turn(fmt, Mark((BoundingBox(20, 30, 90, 80),))))
        resp = step(ep, turn(fmt, Mark((BoundingBox(1, 2, 3, 4),)), Terminate("A")))
        assert resp.done and resp.final_answer == "A"
        assert ep.state is EpisodeState.TERMINATED


class TestFailurePaths:
    def test_round1_parse_failure_continues(self):
        ep = make_episode()
        resp = step(ep, "mumbling without structure")
        assert not resp.done and not resp.parse_ok
        assert "Could not parse" in resp.feedback
        assert ep.state is EpisodeState.AWAITING_FINAL
        # The episode can still be salvaged with a final answer.
        resp2 = step(ep, turn(ActionFormat.EXPLICIT, Terminate("B")))
        assert resp2.done and resp2.final_answer == "B"

    def test_round2_parse_failure_fails(self):
        ep = make_episode()
        step(ep, "garbage one")
        resp = step(ep, "garbage two")
        assert resp.done and not resp.parse_ok and resp.final_answer is None
        assert ep.state is EpisodeState.FAILED

    def test_round2_mark_only_fails(self):
        fmt = ActionFormat.EXPLICIT
        ep = make_episode(fmt)
        step(ep, turn(fmt, Mark((BoundingBox(20, 30, 90, 80),))))
        resp = step(ep, turn(fmt, Mark((BoundingBox(30, 30, 50, 50),))))
        assert resp.done and resp.parse_ok and resp.final_answer is None
        assert ep.state is EpisodeState.FAILED

    def test_step_after_done_raises(self):
        ep = make_episode()
        step(ep, turn(ActionFormat.EXPLICIT, Terminate("A")))
        with pytest.raises(EpisodeStateError):
            step(ep, turn(ActionFormat.EXPLICIT, Terminate("B")))


class TestAnnotationOverride:
    def test_override_returned_byte_identical(self):
        ep = make_episode()
        override = Image.new("RGB", (160, 120), (0, 128, 255))
        override_bytes = image_to_png_bytes(override)
        override_annotation(ep, override)
        resp = step(ep, turn(ActionFormat.EXPLICIT, Mark((BoundingBox(10, 10, 60, 60),))))
        assert image_to_png_bytes(resp.updated_image) == override_bytes

    def test_override_after_done_raises(self):
        ep = make_episode()
        step(ep, turn(ActionFormat.EXPLICIT, Terminate("A")))
        with pytest.raises(EpisodeStateError):
            override_annotation(ep, Image.new("RGB", (160, 120)))

    def test_override_does_not_change_scoring_inputs(self):
        plain, overridden = make_episode(), make_episode()
        override_annotation(overridden, Image.new("RGB", (160, 120), (9, 9, 9)))
        mark = turn(ActionFormat.EXPLICIT, Mark((BoundingBox(10, 10, 60, 60),)))
        final = turn(ActionFormat.EXPLICIT, Terminate("A"))
        for ep in (plain, overridden):
            step(ep, mark)
            step(ep, final)
        assert plain.transcript.assistant_texts() == overridden.transcript.assistant_texts()
        assert plain.final_answer == overridden.final_answer == "A"


class TestApplyMark:
    def test_input_untouched(self):
        img = gradient_image()
        before = image_to_png_bytes(img)
        apply_mark(img, [BoundingBox(10, 10, 60, 60)])
        assert image_to_png_bytes(img) == before

    def test_requires_boxes(self):
        with pytest.raises(ValueError):
            apply_mark(gradient_image(), [])

    def test_stroke_width_scales_with_size(self):
        style = MarkStyle()
        assert style.stroke_width(160, 120) == 2
        assert style.stroke_width(2000, 1500) == max(2, round(0.004 * 1500))


class TestChatMessages:
    def test_roles_and_image_placement(self):
        ep = make_episode()
        step(ep, turn(ActionFormat.EXPLICIT, Mark((BoundingBox(10, 10, 60, 60),))))
        msgs = ep.chat_messages()
        assert [m.role for m in msgs] == ["system", "user", "assistant", "user"]
        env_msg = msgs[3]
        assert type(env_msg.parts[0]).__name__ == "ImagePart"
        assert type(env_msg.parts[1]).__name__ == "TextPart"

    def test_assistant_turn_has_no_image(self):
        ep = make_episode()
        step(ep, turn(ActionFormat.EXPLICIT, Mark((BoundingBox(10, 10, 60, 60),))))
        assistant = ep.chat_messages()[2]
        assert len(assistant.parts) == 1


class TestSftExport:
    def test_complete_two_round_export(self):
        fmt = ActionFormat.EXPLICIT
        ep = make_episode(fmt)
        step(ep, turn(fmt, Mark((BoundingBox(10, 10, 60, 60),))))
        step(ep, turn(fmt, Terminate("A")))
        rec = ep.to_sft_record("orig.png", "marked.png")
        assert rec["images"] == ["orig.png", "marked.png"]
        assert QUESTION in rec["round1"]["user"]
        assert "Marked 1 region(s)" in rec["round2"]["user"]

    def test_incomplete_rejected(self):
        ep = make_episode()
        step(ep, turn(ActionFormat.EXPLICIT, Terminate("A")))
        with pytest.raises(EpisodeStateError):
            ep.to_sft_record("orig.png", None)


def test_format_feedback_template():
    text = format_feedback([BoundingBox(1, 2, 3, 4), BoundingBox(5, 6, 7, 8)])
    assert text.startswith("Marked 2 region(s) at [[1,2,3,4],[5,6,7,8]]")


def test_custom_feedback_template():
    ep = create(
        gradient_image(), QUESTION, OPTIONS,
        EpisodeConfig(feedback_template="drew {n}: {boxes}"),
    )
    resp = step(ep, turn(ActionFormat.EXPLICIT, Mark((BoundingBox(1, 2, 3, 4),))))
    assert resp.feedback == "drew 1: [[1,2,3,4]]"
