"""Command-line interface.

Subcommands: datagen, validate, sft-gen, rollout, eval, reward, serve.
All commands exit 0 on success and 1 on failure; with --json, failures
additionally emit one machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import __version__
from .client import OracleBackend, RemoteChatBackend, ScriptedBackend
from .config import AppConfig, ConfigError, load_config
from .datagen.ingest import IngestFormat, ingest_detections, read_vqa_jsonl, write_vqa_jsonl
from .datagen.sft import assemble_sft_record, llm_thoughts, placeholder_thoughts, write_sft_jsonl
from .datagen.templates import TemplateConfig, generate
from .datagen.validate import geometric_validate, llm_validate
from .episode import EpisodeConfig, create, step
from .evalharness import (
    RunConfig,
    RunReport,
    compare_reports,
    read_benchmark_jsonl,
    run_benchmark,
)
from .prompts import InferenceProtocol
from .protocol import ActionFormat
from .rewards import score_trajectory


def _load_app_config(args) -> AppConfig:
    return load_config(path=getattr(args, "config", None))


def _build_backend(args, config: AppConfig, fmt: ActionFormat):
    """Select a backend: remote (default), scripted replay, or ground-truth oracle."""
    kind = getattr(args, "backend", "remote")
    if kind == "script":
        if not getattr(args, "script", None):
            raise ConfigError("--script FILE is required with --backend script")
        with open(args.script, encoding="utf-8") as fh:
            replies = json.load(fh)
        if not isinstance(replies, list) or not all(isinstance(r, str) for r in replies):
            raise ConfigError("script file must hold a JSON list of strings")
        return ScriptedBackend(replies)
    if kind == "oracle":
        if not getattr(args, "oracle_from", None):
            raise ConfigError("--oracle-from SAMPLES.jsonl is required with --backend oracle")
        samples = read_vqa_jsonl(args.oracle_from)
        return OracleBackend.from_samples(samples, fmt)
    backend_cfg = config.backend
    if not backend_cfg.endpoint:
        raise ConfigError(
            "no backend endpoint configured (set TARENV_ENDPOINT, a config file, or --backend script/oracle)"
        )
    if not backend_cfg.model:
        raise ConfigError("no model configured (set TARENV_MODEL or the config file)")
    return RemoteChatBackend(
        endpoint_url=backend_cfg.endpoint,
        api_key=backend_cfg.api_key,
        model_name=backend_cfg.model,
        max_in_flight=backend_cfg.max_in_flight,
        timeout_s=backend_cfg.timeout_s,
    )


def _parse_fmt(value: str) -> ActionFormat:
    return ActionFormat(value)


def cmd_datagen(args) -> int:
    config = _load_app_config(args)
    seed = args.seed if args.seed is not None else config.seed
    template_config = TemplateConfig()
    if args.template_config:
        with open(args.template_config, encoding="utf-8") as fh:
            template_config = TemplateConfig.from_dict(json.load(fh))
    result = ingest_detections(
        args.in_path,
        IngestFormat(args.input_format),
        require_images=not args.no_require_images,
    )
    for message in result.warnings:
        print(f"warning: {message}", file=sys.stderr)
    for message in result.errors:
        print(f"error: {message}", file=sys.stderr)
    result.raise_if_empty()
    samples, report = generate(result.records, template_config, seed)
    count = write_vqa_jsonl(samples, args.out_path)
    summary = {
        "records": len(result.records),
        "samples": count,
        "per_kind": report.emitted,
        "discards": len(report.discards),
        "ingest_warnings": len(result.warnings),
        "ingest_errors": len(result.errors),
        "seed": seed,
    }
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(
                {**summary, "discard_detail": [list(d) for d in report.discards],
                 "warnings": report.warnings},
                fh, indent=2, sort_keys=True,
            )
            fh.write("\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_validate(args) -> int:
    config = _load_app_config(args)
    samples = read_vqa_jsonl(args.samples_path)
    result = ingest_detections(args.detections_path, IngestFormat(args.input_format),
                               require_images=False)
    result.raise_if_empty()
    records = {rec.image_id: rec for rec in result.records}
    backend = None
    if args.mode in ("llm", "both"):
        backend = _build_backend(args, config, config.format)
    verdicts = []
    invalid = 0
    for sample in samples:
        record = records.get(sample.id.split(":", 1)[0])
        if record is None:
            verdicts.append({"id": sample.id, "valid": False,
                             "reason": "no detection record for sample", "source": "geometric"})
            invalid += 1
            continue
        entry = {"id": sample.id, "valid": True, "reason": None, "source": None}
        if args.mode in ("geometric", "both"):
            verdict = geometric_validate(sample, record)
            entry = {"id": sample.id, "valid": verdict.valid, "reason": verdict.reason,
                     "source": verdict.source.value}
        if args.mode in ("llm", "both") and entry["valid"]:
            verdict = llm_validate(sample, record, backend)
            entry = {"id": sample.id, "valid": verdict.valid, "reason": verdict.reason,
                     "source": verdict.source.value}
        if not entry["valid"]:
            invalid += 1
        verdicts.append(entry)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for entry in verdicts:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
    print(json.dumps({"samples": len(samples), "valid": len(samples) - invalid,
                      "invalid": invalid}, sort_keys=True))
    if args.strict and invalid:
        return 1
    return 0


def cmd_sft_gen(args) -> int:
    config = _load_app_config(args)
    fmt = _parse_fmt(args.format) if args.format else config.format
    samples = read_vqa_jsonl(args.samples_path)
    result = ingest_detections(args.detections_path, IngestFormat(args.input_format),
                               require_images=not args.no_write_images)
    result.raise_if_empty()
    records = {rec.image_id: rec for rec in result.records}
    backend = None
    if args.thoughts == "llm":
        backend = _build_backend(args, config, fmt)
    out_records = []
    skipped = 0
    for sample in samples:
        record = records.get(sample.id.split(":", 1)[0])
        if record is None:
            print(f"warning: no record for sample {sample.id}; skipped", file=sys.stderr)
            skipped += 1
            continue
        verdict = geometric_validate(sample, record)
        if not verdict.valid:
            print(f"warning: sample {sample.id} failed validation ({verdict.reason}); skipped",
                  file=sys.stderr)
            skipped += 1
            continue
        if backend is not None:
            try:
                thought1, thought2 = llm_thoughts(sample, record, backend)
            except ValueError as exc:
                print(f"warning: thought generation failed for {sample.id} ({exc}); "
                      "using placeholders", file=sys.stderr)
                thought1, thought2 = placeholder_thoughts(sample)
        else:
            thought1, thought2 = placeholder_thoughts(sample)
        out_records.append(
            assemble_sft_record(
                sample, record, thought1, thought2, fmt,
                mark_style=config.mark_style,
                output_dir=args.image_dir,
                write_images=not args.no_write_images,
                feedback_template=config.feedback_template,
            )
        )
    count = write_sft_jsonl(out_records, args.out_path)
    print(json.dumps({"samples": len(samples), "records": count, "skipped": skipped},
                     sort_keys=True))
    return 0


def cmd_rollout(args) -> int:
    config = _load_app_config(args)
    fmt = _parse_fmt(args.format) if args.format else config.format
    options = [(letter, text) for letter, text in args.option]
    backend = _build_backend(args, config, fmt)
    episode_config = EpisodeConfig(
        format=fmt,
        feedback_template=config.feedback_template,
        mark_style=config.mark_style,
        system_prompt_override=config.system_prompt,
    )
    episode = create(args.image, args.question, options, episode_config,
                     ground_truth=args.ground_truth)
    while not episode.done:
        completion = backend.complete(episode.chat_messages())
        response = step(episode, completion.text)
        print(f"assistant> {completion.text}")
        print(f"environment> {response.feedback}")
    if args.ground_truth:
        breakdown = score_trajectory(episode.transcript.assistant_texts(),
                                     args.ground_truth, fmt)
        print(json.dumps(breakdown.to_dict(), sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    if args.compare:
        a = RunReport.load(args.compare[0])
        b = RunReport.load(args.compare[1])
        comparison = compare_reports(a, b)
        print(comparison.render())
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                json.dump(comparison.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        return 0
    if not args.benchmark:
        raise ConfigError("a benchmark JSONL path is required (or use --compare A B)")
    config = _load_app_config(args)
    fmt = _parse_fmt(args.format) if args.format else config.format
    protocol = InferenceProtocol(args.protocol)
    backend = _build_backend(args, config, fmt)
    items = read_benchmark_jsonl(args.benchmark)
    run_config = RunConfig(format=fmt, parallelism=args.parallelism or config.parallelism)
    report = run_benchmark(items, backend, protocol, run_config)
    if args.out:
        report.save(args.out)
    print(json.dumps(
        {"n": report.n, "accuracy": report.accuracy,
         "action_success_rate": report.action_success_rate,
         "mean_latency_s": report.mean_latency_s,
         "mean_output_chars": report.mean_output_chars},
        sort_keys=True,
    ))
    return 0


def cmd_reward(args) -> int:
    config = _load_app_config(args)
    if args.trajectory_file:
        with open(args.trajectory_file, encoding="utf-8") as fh:
            data = json.load(fh)
        turns = data["trajectory"]
        ground_truth = data["ground_truth"]
        fmt = ActionFormat(data.get("format", config.format.value))
    else:
        if not args.turn or not args.ground_truth:
            raise ConfigError("provide a trajectory file, or --turn ... --ground-truth ...")
        turns = args.turn
        ground_truth = args.ground_truth
        fmt = _parse_fmt(args.format) if args.format else config.format
    breakdown = score_trajectory(turns, ground_truth, fmt)
    print(json.dumps(breakdown.to_dict(), sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    config = _load_app_config(args)
    if args.ttl is not None:
        config = replace(config, ttl_s=args.ttl)
    app = create_app(config)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tarenv",
                                     description="two-round visual reasoning environment tools")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file (overrides defaults; env vars win)")
        p.add_argument("--json", action="store_true",
                       help="emit machine-readable error JSON on stderr on failure")

    def add_backend_flags(p):
        p.add_argument("--backend", choices=("remote", "script", "oracle"), default="remote")
        p.add_argument("--script", metavar="FILE",
                       help="file holding a JSON list of scripted replies (with --backend script)")
        p.add_argument("--oracle-from", dest="oracle_from",
                       help="VQA samples JSONL for the oracle backend (with --backend oracle)")

    p = sub.add_parser("datagen", help="expand detection records into VQA samples")
    add_common(p)
    p.add_argument("in_path", help="detections file (canonical JSONL or COCO JSON)")
    p.add_argument("out_path", help="output VQA JSONL")
    p.add_argument("--input-format", choices=[f.value for f in IngestFormat], default="jsonl")
    p.add_argument("--template-config", help="template config JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--report", help="write a full generation report JSON here")
    p.add_argument("--no-require-images", action="store_true",
                   help="keep records whose image file is missing")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("validate", help="check generated samples against detection geometry")
    add_common(p)
    add_backend_flags(p)
    p.add_argument("samples_path", help="VQA samples JSONL")
    p.add_argument("detections_path", help="detections file the samples came from")
    p.add_argument("--input-format", choices=[f.value for f in IngestFormat], default="jsonl")
    p.add_argument("--mode", choices=("geometric", "llm", "both"), default="geometric")
    p.add_argument("--out", help="write per-sample verdicts JSONL here")
    p.add_argument("--strict", action="store_true", help="exit 1 if any sample is invalid")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("sft-gen", help="assemble SFT conversations from validated samples")
    add_common(p)
    add_backend_flags(p)
    p.add_argument("samples_path")
    p.add_argument("detections_path")
    p.add_argument("out_path", help="output SFT JSONL")
    p.add_argument("--input-format", choices=[f.value for f in IngestFormat], default="jsonl")
    p.add_argument("--format", choices=[f.value for f in ActionFormat], default=None)
    p.add_argument("--thoughts", choices=("placeholder", "llm"), default="placeholder")
    p.add_argument("--image-dir", help="directory for annotated images (default: beside originals)")
    p.add_argument("--no-write-images", action="store_true",
                   help="skip writing annotated rasters (paths still recorded)")
    p.set_defaults(func=cmd_sft_gen)

    p = sub.add_parser("rollout", help="run one episode against a backend and print the transcript")
    add_common(p)
    add_backend_flags(p)
    p.add_argument("image", help="image file for the episode")
    p.add_argument("--question", required=True)
    p.add_argument("--option", nargs=2, action="append", metavar=("LETTER", "TEXT"),
                   required=True, help="may be given several times")
    p.add_argument("--format", choices=[f.value for f in ActionFormat], default=None)
    p.add_argument("--ground-truth", help="score the finished episode against this letter")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="run a benchmark and write a report")
    add_common(p)
    add_backend_flags(p)
    p.add_argument("benchmark", nargs="?", help="benchmark items JSONL")
    p.add_argument("--protocol", choices=[p.value for p in InferenceProtocol], default="tar")
    p.add_argument("--format", choices=[f.value for f in ActionFormat], default=None)
    p.add_argument("--parallelism", type=int, default=None)
    p.add_argument("--out", help="write the full report JSON here")
    p.add_argument("--compare", nargs=2, metavar=("REPORT_A", "REPORT_B"),
                   help="compare two saved reports instead of running")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reward", help="score a trajectory")
    add_common(p)
    p.add_argument("trajectory_file", nargs="?",
                   help='JSON file: {"trajectory": [...], "ground_truth": "A", "format": "explicit"}')
    p.add_argument("--turn", action="append", help="assistant turn text (repeat for round 2)")
    p.add_argument("--ground-truth")
    p.add_argument("--format", choices=[f.value for f in ActionFormat], default=None)
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("serve", help="start the HTTP environment service")
    add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--ttl", type=float, default=None, help="session TTL seconds")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001 - uniform CLI error contract
        if getattr(args, "json", False):
            print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
                  file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
