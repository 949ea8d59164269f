"""Detection ingestion, template-driven question generation, distractor
placement, and both validators."""

import json
import random

import pytest

from tarenv.client import ScriptedBackend, TransportFailure
from tarenv.datagen import (
    DistractorPlacementError,
    IngestFormat,
    Provenance,
    TemplateConfig,
    TemplateKind,
    ValidationVerdict,
    VerdictSource,
    VqaSample,
    build_generation_prompt,
    build_thought_prompt,
    build_verification_prompt,
    generate,
    geometric_validate,
    ingest_detections,
    llm_validate,
    make_distractor_boxes,
    read_vqa_jsonl,
    write_vqa_jsonl,
)
from tarenv.geometry import Annotation, BoundingBox, DetectionRecord, ImageDims, iou


def record(image_id="img0", boxes=((("mass"), BoundingBox(10, 20, 60, 80)),),
           dims=(200, 160), image_path="img0.png"):
    return DetectionRecord(
        image_id=image_id,
        image_path=image_path,
        dims=ImageDims(*dims),
        annotations=[Annotation(category=c, box=b) for c, b in boxes],
    )


def left_box_record(**kwargs):
    # One box entirely inside the left half of a 200px-wide image.
    return record(boxes=[("mass", BoundingBox(10, 20, 60, 80))], **kwargs)


class TestIngestCanonical:
    def write(self, tmp_path, lines):
        p = tmp_path / "det.jsonl"
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return str(p)

    def good_line(self, **over):
        data = {
            "image_id": "a", "image_path": "a.png", "width": 100, "height": 80,
            "annotations": [{"category": "mass", "bbox": [5, 5, 40, 40]}],
        }
        data.update(over)
        return json.dumps(data)

    def test_round_trip(self, tmp_path):
        result = ingest_detections(self.write(tmp_path, [self.good_line()]),
                                   require_images=False)
        assert not result.errors and not result.warnings
        [rec] = result.records
        assert rec.image_id == "a"
        assert rec.annotations[0].box == BoundingBox(5, 5, 40, 40)

    def test_malformed_line_isolated(self, tmp_path):
        path = self.write(tmp_path, ["{broken", self.good_line(), '["not an object"]'])
        result = ingest_detections(path, require_images=False)
        assert len(result.records) == 1
        assert len(result.errors) == 2
        assert "invalid JSON" in result.errors[0]

    def test_out_of_bounds_box_clamped_with_warning(self, tmp_path):
        line = self.good_line(annotations=[{"category": "mass", "bbox": [5, 5, 400, 40]}])
        result = ingest_detections(self.write(tmp_path, [line]), require_images=False)
        assert result.warnings and "clamped" in result.warnings[0]
        assert result.records[0].annotations[0].box == BoundingBox(5, 5, 100, 40)

    def test_empty_category_rejected(self, tmp_path):
        line = self.good_line(annotations=[{"category": "  ", "bbox": [5, 5, 40, 40]}])
        result = ingest_detections(self.write(tmp_path, [line]), require_images=False)
        assert not result.records and result.errors

    def test_missing_image_skipped_with_warning(self, tmp_path):
        path = self.write(tmp_path, [self.good_line(image_path=str(tmp_path / "nope.png"))])
        result = ingest_detections(path)
        assert not result.records
        assert any("image file not found" in w for w in result.warnings)
        with pytest.raises(ValueError):
            result.raise_if_empty()

    def test_require_images_false_keeps_record(self, tmp_path):
        path = self.write(tmp_path, [self.good_line(image_path="missing.png")])
        assert len(ingest_detections(path, require_images=False).records) == 1


class TestIngestCoco:
    def test_xywh_conversion_and_path_resolution(self, tmp_path):
        doc = {
            "images": [{"id": 7, "file_name": "seven.png", "width": 120, "height": 90}],
            "categories": [{"id": 1, "name": "nodule"}],
            "annotations": [{"image_id": 7, "category_id": 1, "bbox": [10, 20, 30, 40]}],
        }
        p = tmp_path / "coco.json"
        p.write_text(json.dumps(doc), encoding="utf-8")
        result = ingest_detections(str(p), IngestFormat.COCO_JSON, require_images=False)
        [rec] = result.records
        assert rec.image_id == "7"
        assert rec.image_path == str(tmp_path / "seven.png")
        assert rec.annotations[0].box == BoundingBox(10, 20, 40, 60)
        assert rec.annotations[0].category == "nodule"

    def test_unknown_category_id(self, tmp_path):
        doc = {
            "images": [{"id": 1, "file_name": "x.png", "width": 10, "height": 10}],
            "categories": [],
            "annotations": [{"image_id": 1, "category_id": 99, "bbox": [0, 0, 5, 5]}],
        }
        p = tmp_path / "coco.json"
        p.write_text(json.dumps(doc), encoding="utf-8")
        result = ingest_detections(str(p), IngestFormat.COCO_JSON, require_images=False)
        assert not result.records
        assert any("unknown category_id" in e for e in result.errors)


class TestEnumeration:
    def test_single_left_box_yields_one_sample_per_kind(self):
        samples, report = generate([left_box_record()], seed=3)
        kinds = [s.kind for s in samples]
        assert kinds == [
            TemplateKind.PRESENCE,
            TemplateKind.HALF_LOCATION,
            TemplateKind.BBOX_CHOICE,
            TemplateKind.POINT_CATEGORY,
        ]
        assert report.total_emitted == 4
        assert not report.discards
        for s in samples:
            assert geometric_validate(s, left_box_record()).valid, s

    def test_presence_negative_capped(self):
        rec = record(boxes=[])
        config = TemplateConfig(
            kinds=(TemplateKind.PRESENCE,),
            category_pool=("mass", "nodule", "effusion", "opacity"),
            negative_presence_cap=2,
        )
        samples, _ = generate([rec], config, seed=0)
        assert len(samples) == 2
        for s in samples:
            assert s.answer_text == "No"
            assert not s.provenance.gt_boxes

    def test_straddling_box_discards_half_location_only(self):
        # Box spans the vertical midline of a 200px-wide image.
        rec = record(boxes=[("mass", BoundingBox(80, 20, 130, 80))])
        samples, report = generate([rec], seed=0)
        kinds = {s.kind for s in samples}
        assert TemplateKind.HALF_LOCATION not in kinds
        assert {TemplateKind.PRESENCE, TemplateKind.BBOX_CHOICE, TemplateKind.POINT_CATEGORY} <= kinds
        assert any(d[1] == "half_location" for d in report.discards)

    def test_mixed_side_boxes_discarded(self):
        rec = record(boxes=[
            ("mass", BoundingBox(10, 20, 60, 80)),     # left
            ("mass", BoundingBox(120, 20, 180, 80)),   # right
        ])
        samples, report = generate([rec], TemplateConfig(kinds=(TemplateKind.HALF_LOCATION,)))
        assert not samples
        assert report.discards

    def test_half_location_never_straddles(self, corpus_records):
        samples, _ = generate(corpus_records, seed=5)
        from tarenv.geometry import Side, side_of
        for s in samples:
            if s.kind is not TemplateKind.HALF_LOCATION:
                continue
            rec = next(r for r in corpus_records if r.image_id == s.id.split(":")[0])
            sides = {side_of(b, rec.dims) for b in s.provenance.gt_boxes}
            assert sides in ({Side.LEFT}, {Side.RIGHT})

    def test_point_category_offers_other(self):
        samples, _ = generate([left_box_record()],
                              TemplateConfig(kinds=(TemplateKind.POINT_CATEGORY,)))
        [s] = samples
        assert "Other" in dict(s.options).values()
        assert s.answer_text == "mass"

    def test_ambiguous_point_skipped(self):
        # Two categories whose boxes share the same center point.
        rec = record(boxes=[
            ("mass", BoundingBox(10, 20, 60, 80)),
            ("nodule", BoundingBox(12, 22, 58, 78)),
        ])
        samples, report = generate([rec], TemplateConfig(kinds=(TemplateKind.POINT_CATEGORY,)))
        assert not samples
        assert len(report.discards) == 2

    def test_bbox_choice_has_three_distinct_box_options(self):
        samples, _ = generate([left_box_record()],
                              TemplateConfig(kinds=(TemplateKind.BBOX_CHOICE,)), seed=1)
        [s] = samples
        assert len(s.options) == 3
        quads = [BoundingBox.from_quad(json.loads(t)) for _, t in s.options]
        gt = s.provenance.gt_boxes[0]
        assert s.answer_text == f"[{gt.x1}, {gt.y1}, {gt.x2}, {gt.y2}]"
        for q in quads:
            assert q.width == gt.width and q.height == gt.height

    def test_category_pool_warning_for_unseen(self):
        _, report = generate([left_box_record()],
                             TemplateConfig(category_pool=("ghost",)))
        assert any("never appear" in w for w in report.warnings)

    def test_deterministic_output(self, corpus_records):
        def dump(seed):
            samples, _ = generate(corpus_records, seed=seed)
            return json.dumps([s.to_dict() for s in samples])

        assert dump(7) == dump(7)
        assert dump(7) != dump(8)


class TestDistractors:
    GT = BoundingBox(80, 60, 120, 100)
    DIMS = ImageDims(200, 160)

    def test_same_size_low_overlap(self):
        out = make_distractor_boxes(self.GT, self.DIMS, [self.GT], seed=0)
        assert len(out) == 2 and out[0] != out[1]
        for d in out:
            assert (d.width, d.height) == (self.GT.width, self.GT.height)
            assert d.within(self.DIMS)
            assert iou(d, self.GT) < 0.1

    def test_respects_all_gt_boxes(self):
        others = [BoundingBox(0, 0, 200, 80)]  # entire top half occupied
        out = make_distractor_boxes(self.GT, self.DIMS, [self.GT] + others, seed=1)
        for d in out:
            for g in [self.GT] + others:
                assert iou(d, g) < 0.1

    def test_deterministic(self):
        a = make_distractor_boxes(self.GT, self.DIMS, [self.GT], seed=5)
        b = make_distractor_boxes(self.GT, self.DIMS, [self.GT], seed=5)
        assert a == b

    def test_whole_image_box_fails(self):
        gt = BoundingBox(0, 0, 200, 160)
        with pytest.raises(DistractorPlacementError):
            make_distractor_boxes(gt, self.DIMS, [gt], seed=0)

    def test_corner_fallback_when_sampling_is_rigged(self):
        class StuckRandom(random.Random):
            """randint always lands on the ground-truth corner."""

            def randint(self, a, b):
                return TestDistractors.GT.x1 if b >= TestDistractors.GT.x1 else a

        out = make_distractor_boxes(self.GT, self.DIMS, [self.GT], StuckRandom())
        corners = {(0, 0), (160, 0), (0, 120), (160, 120)}
        assert {(d.x1, d.y1) for d in out} <= corners


class TestGeometricValidate:
    def test_all_generated_samples_pass(self, corpus_records):
        samples, _ = generate(corpus_records, seed=2)
        by_id = {r.image_id: r for r in corpus_records}
        assert samples
        for s in samples:
            verdict = geometric_validate(s, by_id[s.id.split(":")[0]])
            assert verdict.valid, (s.id, verdict.reason)

    def test_flipped_answer_caught(self):
        rec = left_box_record()
        samples, _ = generate([rec], TemplateConfig(kinds=(TemplateKind.PRESENCE,)))
        s = samples[0]
        wrong_letter = next(l for l, _ in s.options if l != s.answer)
        tampered = VqaSample(
            id=s.id, image_path=s.image_path, dims=s.dims, question=s.question,
            options=s.options, answer=wrong_letter, kind=s.kind, provenance=s.provenance,
        )
        verdict = geometric_validate(tampered, rec)
        assert not verdict.valid
        assert "answer should be" in verdict.reason

    def test_record_mismatch_caught(self):
        samples, _ = generate([left_box_record()], TemplateConfig(kinds=(TemplateKind.PRESENCE,)))
        other = record(image_id="somewhere_else")
        verdict = geometric_validate(samples[0], other)
        assert not verdict.valid

    def test_ambiguous_point_invalid(self):
        rec = record(boxes=[
            ("mass", BoundingBox(10, 20, 60, 80)),
            ("nodule", BoundingBox(12, 22, 58, 78)),
        ])
        s = VqaSample(
            id="img0:point_category:mass", image_path="img0.png", dims=rec.dims,
            question="What does the coordinate (35, 50) in the image show?",
            options=(("A", "mass"), ("B", "Other")), answer="A",
            kind=TemplateKind.POINT_CATEGORY,
            provenance=Provenance("mass", (BoundingBox(10, 20, 60, 80),), 0),
        )
        verdict = geometric_validate(s, rec)
        assert not verdict.valid
        assert "multiple categories" in verdict.reason

    def test_uncovered_point_expects_other(self):
        rec = left_box_record()
        s = VqaSample(
            id="img0:point_category:mass", image_path="img0.png", dims=rec.dims,
            question="What does the coordinate (190, 150) in the image show?",
            options=(("A", "mass"), ("B", "Other")), answer="B",
            kind=TemplateKind.POINT_CATEGORY,
            provenance=Provenance("mass", (BoundingBox(10, 20, 60, 80),), 0),
        )
        assert geometric_validate(s, rec).valid


class TestLlmValidate:
    def _sample_and_record(self):
        rec = left_box_record()
        samples, _ = generate([rec], TemplateConfig(kinds=(TemplateKind.PRESENCE,)))
        return samples[0], rec

    @pytest.mark.parametrize("reply,valid,fragment", [
        ("Correct.", True, None),
        ("Correct. The mass is plainly visible.", True, None),
        ("Incorrect, the stated half is wrong.", False, "Incorrect"),
        ("Format error: The answer must be a single option A/B/C/D/E.", False, "Format error"),
        ("maybe?", False, "unrecognized verdict"),
    ])
    def test_reply_mapping(self, reply, valid, fragment):
        sample, rec = self._sample_and_record()
        verdict = llm_validate(sample, rec, ScriptedBackend([reply]))
        assert verdict.valid is valid
        assert verdict.source is VerdictSource.EXTERNAL_LLM
        if fragment:
            assert fragment in verdict.reason

    def test_transport_errors_propagate(self):
        sample, rec = self._sample_and_record()

        class FailingBackend:
            deterministic = True

            def complete(self, messages, params=None):
                raise TransportFailure("network down")

        with pytest.raises(TransportFailure):
            llm_validate(sample, rec, FailingBackend())


class TestPromptgen:
    def test_generation_prompt_mentions_image_facts(self):
        rec = left_box_record()
        prompt = build_generation_prompt(rec)
        assert "200*160" in prompt
        assert "mass: [10, 20, 60, 80]" in prompt
        assert '"Question"' in prompt and '"Answer"' in prompt

    def test_verification_prompt_carries_sample(self):
        rec = left_box_record()
        samples, _ = generate([rec], TemplateConfig(kinds=(TemplateKind.PRESENCE,)))
        prompt = build_verification_prompt(samples[0], rec)
        assert samples[0].question in prompt
        assert '"Correct."' in prompt
        assert "Format error" in prompt

    def test_thought_prompt_structure(self):
        rec = left_box_record()
        samples, _ = generate([rec], TemplateConfig(kinds=(TemplateKind.PRESENCE,)))
        prompt = build_thought_prompt(samples[0], rec)
        assert "thought 1" in prompt and "thought 2" in prompt
        assert "mass" in prompt


class TestSerialization:
    def test_vqa_jsonl_round_trip(self, tmp_path, corpus_records):
        samples, _ = generate(corpus_records[:10], seed=4)
        path = str(tmp_path / "vqa.jsonl")
        assert write_vqa_jsonl(samples, path) == len(samples)
        assert read_vqa_jsonl(path) == samples

    def test_bad_line_raises_with_location(self, tmp_path):
        p = tmp_path / "vqa.jsonl"
        p.write_text('{"id": "x"}\n', encoding="utf-8")
        with pytest.raises(ValueError, match="vqa.jsonl:1"):
            read_vqa_jsonl(str(p))


class TestSampleValidation:
    KW = dict(
        id="a:presence:mass", image_path="a.png", dims=ImageDims(10, 10),
        question="?", kind=TemplateKind.PRESENCE,
        provenance=Provenance("mass", (), 0),
    )

    def test_non_consecutive_letters(self):
        with pytest.raises(ValueError):
            VqaSample(options=(("A", "x"), ("C", "y")), answer="A", **self.KW)

    def test_answer_outside_options(self):
        with pytest.raises(ValueError):
            VqaSample(options=(("A", "x"), ("B", "y")), answer="C", **self.KW)

    def test_duplicate_texts(self):
        with pytest.raises(ValueError):
            VqaSample(options=(("A", "x"), ("B", "x")), answer="A", **self.KW)


class TestTemplateConfig:
    def test_round_trip(self):
        config = TemplateConfig(kinds=(TemplateKind.PRESENCE,), category_pool=("a", "b"),
                                negative_presence_cap=1, point_distractor_count=2)
        assert TemplateConfig.from_dict(config.to_dict()) == config

    def test_validation(self):
        with pytest.raises(ValueError):
            TemplateConfig(kinds=())
        with pytest.raises(ValueError):
            TemplateConfig(negative_presence_cap=-1)
        with pytest.raises(ValueError):
            TemplateConfig(point_distractor_count=4)
