"""Benchmark runner: drives episodes (or single-shot tag protocols)
against a backend and aggregates accuracy, action-execution success,
latency, and output-length statistics into reproducible reports.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .client import BackendError, Completion, GenerationParams, ModelBackend
from .episode import EpisodeConfig, create, decode_image, override_annotation, step
from .prompts import ChatMessage, InferenceProtocol, user_round1
from .protocol import ActionFormat, ParseError, extract_tag_answer
from .rewards import RewardBreakdown, score_accuracy, score_trajectory

LATENCY_NOTE = "latency is wall-clock around backend calls only; image decode/encode excluded"


class RunAbortedError(RuntimeError):
    """More than the tolerated fraction of items failed at the backend."""


@dataclass(frozen=True)
class BenchmarkItem:
    id: str
    image_path: str
    question: str
    options: tuple[tuple[str, str], ...]
    ground_truth: str
    source: str = ""

    def __post_init__(self):
        letters = [letter for letter, _ in self.options]
        if self.ground_truth not in letters:
            raise ValueError(
                f"item {self.id!r}: ground truth {self.ground_truth!r} not among {letters}"
            )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "question": self.question,
            "options": [[letter, text] for letter, text in self.options],
            "ground_truth": self.ground_truth,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BenchmarkItem":
        return cls(
            id=data["id"],
            image_path=data["image_path"],
            question=data["question"],
            options=tuple((letter, text) for letter, text in data["options"]),
            ground_truth=data["ground_truth"],
            source=data.get("source", ""),
        )


@dataclass(frozen=True)
class ItemResult:
    id: str
    predicted: str | None
    correct: bool
    reward: RewardBreakdown
    turns: int
    latency_s: float
    output_chars: int
    completion_tokens: int | None
    actions_ok: bool
    source: str = ""
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "predicted": self.predicted,
            "correct": self.correct,
            "reward": self.reward.to_dict(),
            "turns": self.turns,
            "latency_s": self.latency_s,
            "output_chars": self.output_chars,
            "completion_tokens": self.completion_tokens,
            "actions_ok": self.actions_ok,
            "source": self.source,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ItemResult":
        reward = data["reward"]
        return cls(
            id=data["id"],
            predicted=data["predicted"],
            correct=data["correct"],
            reward=RewardBreakdown(
                format_round1=reward["format_round1"],
                format_final=reward["format_final"],
                accuracy=reward["accuracy"],
            ),
            turns=data["turns"],
            latency_s=data["latency_s"],
            output_chars=data["output_chars"],
            completion_tokens=data["completion_tokens"],
            actions_ok=data["actions_ok"],
            source=data.get("source", ""),
            error=data.get("error"),
        )


@dataclass
class RunReport:
    n: int
    accuracy: float
    action_success_rate: float
    mean_latency_s: float
    mean_output_chars: float
    mean_completion_tokens: float | None
    per_item: list[ItemResult]
    protocol: str
    format: str
    notes: str = LATENCY_NOTE

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "action_success_rate": self.action_success_rate,
            "mean_latency_s": self.mean_latency_s,
            "mean_output_chars": self.mean_output_chars,
            "mean_completion_tokens": self.mean_completion_tokens,
            "per_item": [r.to_dict() for r in self.per_item],
            "protocol": self.protocol,
            "format": self.format,
            "notes": self.notes,
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(
            n=data["n"],
            accuracy=data["accuracy"],
            action_success_rate=data["action_success_rate"],
            mean_latency_s=data["mean_latency_s"],
            mean_output_chars=data["mean_output_chars"],
            mean_completion_tokens=data["mean_completion_tokens"],
            per_item=[ItemResult.from_dict(r) for r in data["per_item"]],
            protocol=data["protocol"],
            format=data["format"],
            notes=data.get("notes", LATENCY_NOTE),
        )

    @classmethod
    def load(cls, path: str) -> "RunReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class RunConfig:
    """Execution knobs for a benchmark run.

    ``clock`` exists so tests can inject a deterministic counter and get
    bit-identical reports from deterministic backends.
    ``annotation_overrides`` maps item ids to pre-annotated image paths
    substituted for the drawn round-2 image (scoring is unaffected).
    """

    format: ActionFormat = ActionFormat.EXPLICIT
    params: GenerationParams = field(default_factory=GenerationParams)
    parallelism: int = 1
    episode_config: EpisodeConfig | None = None
    annotation_overrides: dict[str, str] = field(default_factory=dict)
    clock: Callable[[], float] = time.perf_counter
    abort_failure_fraction: float = 0.5

    def __post_init__(self):
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if not 0 < self.abort_failure_fraction <= 1:
            raise ValueError("abort_failure_fraction must be in (0, 1]")


def _zero_reward() -> RewardBreakdown:
    return RewardBreakdown(format_round1=0.0, format_final=0.0, accuracy=0.0)


def _failed(item: BenchmarkItem, latency: float, exc: Exception) -> ItemResult:
    return ItemResult(
        id=item.id, predicted=None, correct=False, reward=_zero_reward(),
        turns=0, latency_s=latency, output_chars=0, completion_tokens=None,
        actions_ok=False, source=item.source, error=f"{type(exc).__name__}: {exc}",
    )


def _run_tar_item(item: BenchmarkItem, backend: ModelBackend, config: RunConfig) -> ItemResult:
    ep_config = config.episode_config or EpisodeConfig(format=config.format)
    episode = create(
        decode_image(item.image_path), item.question, item.options,
        ep_config, ground_truth=item.ground_truth, episode_id=item.id,
    )
    if item.id in config.annotation_overrides:
        override_annotation(episode, config.annotation_overrides[item.id])
    latency = 0.0
    chars = 0
    token_counts: list[int | None] = []
    parse_flags: list[bool] = []
    try:
        while not episode.done:
            start = config.clock()
            completion = backend.complete(episode.chat_messages(), config.params)
            latency += config.clock() - start
            chars += len(completion.text)
            token_counts.append(completion.completion_tokens)
            response = step(episode, completion.text)
            parse_flags.append(response.parse_ok)
    except (BackendError, LookupError, OSError) as exc:
        return _failed(item, latency, exc)
    reward = score_trajectory(episode.transcript.assistant_texts(), item.ground_truth, config.format)
    tokens = sum(t for t in token_counts if t is not None) if all(
        t is not None for t in token_counts) and token_counts else None
    return ItemResult(
        id=item.id,
        predicted=episode.final_answer,
        correct=reward.accuracy == 1.0,
        reward=reward,
        turns=episode.assistant_turns(),
        latency_s=latency,
        output_chars=chars,
        completion_tokens=tokens,
        actions_ok=bool(parse_flags) and all(parse_flags),
        source=item.source,
    )


def _run_single_shot_item(item: BenchmarkItem, backend: ModelBackend,
                          protocol: InferenceProtocol, config: RunConfig) -> ItemResult:
    try:
        message = user_round1(item.question, item.options, protocol,
                              image=decode_image(item.image_path))
        start = config.clock()
        completion: Completion = backend.complete([message], config.params)
        latency = config.clock() - start
    except (BackendError, LookupError, OSError) as exc:
        return _failed(item, 0.0, exc)
    try:
        predicted = extract_tag_answer(completion.text)
        parsed = True
    except ParseError:
        predicted = None
        parsed = False
    accuracy = score_accuracy(predicted, item.ground_truth)
    # Single-shot protocols have no round-1 action; the final-format
    # component reflects whether the answer tag parsed.
    reward = RewardBreakdown(
        format_round1=0.0,
        format_final=0.2 if parsed else 0.0,
        accuracy=accuracy,
    )
    return ItemResult(
        id=item.id,
        predicted=predicted,
        correct=accuracy == 1.0,
        reward=reward,
        turns=1,
        latency_s=latency,
        output_chars=len(completion.text),
        completion_tokens=completion.completion_tokens,
        actions_ok=parsed,
        source=item.source,
    )


def run_benchmark(
    items: Sequence[BenchmarkItem],
    backend: ModelBackend,
    protocol: InferenceProtocol = InferenceProtocol.TAR,
    config: RunConfig | None = None,
) -> RunReport:
    """Evaluate every item and aggregate.

    Backend failures are recorded per item (counted incorrect) and the
    run continues; if more than ``abort_failure_fraction`` of items fail,
    the whole run raises RunAbortedError.  Items are processed and
    reported in id order so deterministic backends yield bit-identical
    reports.
    """
    if not items:
        raise ValueError("items must be non-empty")
    config = config or RunConfig()
    ordered = sorted(items, key=lambda item: item.id)
    ids = [item.id for item in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate item ids")

    def evaluate(item: BenchmarkItem) -> ItemResult:
        if protocol is InferenceProtocol.TAR:
            return _run_tar_item(item, backend, config)
        return _run_single_shot_item(item, backend, protocol, config)

    if config.parallelism == 1:
        results = [evaluate(item) for item in ordered]
    else:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            results = list(pool.map(evaluate, ordered))

    failures = sum(1 for r in results if r.error is not None)
    if failures > config.abort_failure_fraction * len(results):
        raise RunAbortedError(
            f"{failures}/{len(results)} items failed at the backend; aborting"
        )

    results.sort(key=lambda r: r.id)
    n = len(results)
    token_values = [r.completion_tokens for r in results]
    mean_tokens = (
        sum(token_values) / n if all(t is not None for t in token_values) else None  # type: ignore[arg-type]
    )
    return RunReport(
        n=n,
        accuracy=sum(r.correct for r in results) / n,
        action_success_rate=sum(r.actions_ok for r in results) / n,
        mean_latency_s=sum(r.latency_s for r in results) / n,
        mean_output_chars=sum(r.output_chars for r in results) / n,
        mean_completion_tokens=mean_tokens,
        per_item=results,
        protocol=protocol.value,
        format=config.format.value,
    )


@dataclass
class ReportComparison:
    overall_delta: float
    per_source: list[tuple[str, float, float, float]]
    speedup: float
    both_right: int
    both_wrong: int
    a_only_right: int
    b_only_right: int

    def to_dict(self) -> dict:
        return {
            "overall_delta": self.overall_delta,
            "per_source": [
                {"source": s, "accuracy_a": a, "accuracy_b": b, "delta": d}
                for s, a, b, d in self.per_source
            ],
            "speedup": self.speedup,
            "mcnemar": {
                "both_right": self.both_right,
                "both_wrong": self.both_wrong,
                "a_only_right": self.a_only_right,
                "b_only_right": self.b_only_right,
            },
        }

    def render(self) -> str:
        lines = [f"{'source':<20} {'acc(a)':>8} {'acc(b)':>8} {'delta':>8}"]
        for source, a, b, d in self.per_source:
            lines.append(f"{source or '(all)':<20} {a:>8.4f} {b:>8.4f} {d:>+8.4f}")
        lines.append(f"speedup (latency a/b): {self.speedup:.3f}")
        lines.append(
            "mcnemar: both_right=%d both_wrong=%d a_only=%d b_only=%d"
            % (self.both_right, self.both_wrong, self.a_only_right, self.b_only_right)
        )
        return "\n".join(lines)


def compare_reports(a: RunReport, b: RunReport) -> ReportComparison:
    """Pairwise comparison over a shared item set.

    An overall row (source "") always comes first, followed by one row
    per distinct benchmark source label.
    """
    a_items = {r.id: r for r in a.per_item}
    b_items = {r.id: r for r in b.per_item}
    if set(a_items) != set(b_items):
        only_a = sorted(set(a_items) - set(b_items))[:3]
        only_b = sorted(set(b_items) - set(a_items))[:3]
        raise ValueError(f"item id sets differ (a-only {only_a}, b-only {only_b})")

    def accuracy_over(ids: list[str], items: dict[str, ItemResult]) -> float:
        return sum(items[i].correct for i in ids) / len(ids)

    all_ids = sorted(a_items)
    per_source: list[tuple[str, float, float, float]] = [
        ("", a.accuracy, b.accuracy, a.accuracy - b.accuracy)
    ]
    sources = sorted({r.source for r in a.per_item if r.source})
    for source in sources:
        ids = [i for i in all_ids if a_items[i].source == source]
        acc_a = accuracy_over(ids, a_items)
        acc_b = accuracy_over(ids, b_items)
        per_source.append((source, acc_a, acc_b, acc_a - acc_b))

    both_right = both_wrong = a_only = b_only = 0
    for item_id in all_ids:
        ra, rb = a_items[item_id].correct, b_items[item_id].correct
        if ra and rb:
            both_right += 1
        elif not ra and not rb:
            both_wrong += 1
        elif ra:
            a_only += 1
        else:
            b_only += 1

    if b.mean_latency_s == 0:
        speedup = 1.0 if a.mean_latency_s == 0 else float("inf")
    else:
        speedup = a.mean_latency_s / b.mean_latency_s
    return ReportComparison(
        overall_delta=a.accuracy - b.accuracy,
        per_source=per_source,
        speedup=speedup,
        both_right=both_right,
        both_wrong=both_wrong,
        a_only_right=a_only,
        b_only_right=b_only,
    )


def read_benchmark_jsonl(path: str) -> list[BenchmarkItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                items.append(BenchmarkItem.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad benchmark item: {exc}") from exc
    return items


def write_benchmark_jsonl(items: Iterable[BenchmarkItem], path: str) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_dict(), ensure_ascii=False) + "\n")
            count += 1
    return count


def items_from_vqa_samples(samples, source: str = "vqa") -> list[BenchmarkItem]:
    """Adapter: generated VQA samples as benchmark items."""
    return [
        BenchmarkItem(
            id=s.id,
            image_path=s.image_path,
            question=s.question,
            options=tuple(s.options),
            ground_truth=s.answer,
            source=source,
        )
        for s in samples
    ]
