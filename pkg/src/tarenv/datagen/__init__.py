"""Detection-to-VQA dataset construction, validation, and SFT assembly."""

from .ingest import IngestFormat, IngestResult, ingest_detections, read_vqa_jsonl, write_vqa_jsonl
from .templates import (
    DistractorPlacementError,
    GenerationReport,
    Provenance,
    TemplateConfig,
    TemplateKind,
    VqaSample,
    generate,
    make_distractor_boxes,
)
from .validate import ValidationVerdict, VerdictSource, geometric_validate, llm_validate
from .promptgen import build_generation_prompt, build_thought_prompt, build_verification_prompt
from .sft import (
    IMAGE_PLACEHOLDER,
    SftRecord,
    assemble_sft_record,
    llm_thoughts,
    placeholder_thoughts,
    read_sft_jsonl,
    write_sft_jsonl,
)

__all__ = [
    "IngestFormat",
    "IngestResult",
    "ingest_detections",
    "read_vqa_jsonl",
    "write_vqa_jsonl",
    "DistractorPlacementError",
    "GenerationReport",
    "Provenance",
    "TemplateConfig",
    "TemplateKind",
    "VqaSample",
    "generate",
    "make_distractor_boxes",
    "ValidationVerdict",
    "VerdictSource",
    "geometric_validate",
    "llm_validate",
    "build_generation_prompt",
    "build_thought_prompt",
    "build_verification_prompt",
    "IMAGE_PLACEHOLDER",
    "SftRecord",
    "assemble_sft_record",
    "llm_thoughts",
    "placeholder_thoughts",
    "read_sft_jsonl",
    "write_sft_jsonl",
]
