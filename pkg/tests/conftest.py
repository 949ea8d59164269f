"""Shared fixtures: synthetic corpora, script loading, and the
acceptance-criteria summary printed at the end of a run."""

from __future__ import annotations

import importlib.util
import sys
from pathlib import Path

import pytest

from tarenv.geometry import Annotation, BoundingBox, DetectionRecord, ImageDims

SCRIPTS_DIR = Path(__file__).resolve().parent.parent / "scripts"

_ACCEPTANCE_RESULTS: dict[str, str] = {}


def load_script(name: str):
    """Import a module from scripts/ by file path."""
    if name in sys.modules:
        return sys.modules[name]
    spec = importlib.util.spec_from_file_location(name, SCRIPTS_DIR / f"{name}.py")
    module = importlib.util.module_from_spec(spec)
    sys.modules[name] = module
    spec.loader.exec_module(module)
    return module


def records_from_dicts(dicts) -> list[DetectionRecord]:
    return [
        DetectionRecord(
            image_id=d["image_id"],
            image_path=d["image_path"],
            dims=ImageDims(d["width"], d["height"]),
            annotations=[
                Annotation(a["category"], BoundingBox.from_quad(a["bbox"]))
                for a in d["annotations"]
            ],
        )
        for d in dicts
    ]


@pytest.fixture(scope="session")
def synth():
    return load_script("make_synthetic_detections")


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory, synth):
    """A rendered 60-record corpus shared across tests (read-only)."""
    directory = tmp_path_factory.mktemp("corpus")
    records = synth.synthesize_records(count=60, seed=11, image_dir=str(directory))
    synth.write_images(records, seed=11)
    import json

    path = directory / "detections.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return directory


@pytest.fixture(scope="session")
def corpus_records(corpus_dir, synth):
    records = synth.synthesize_records(count=60, seed=11, image_dir=str(corpus_dir))
    return records_from_dicts(records)


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _ACCEPTANCE_RESULTS[report.nodeid.split("::")[-1]] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in sorted(_ACCEPTANCE_RESULTS.items()):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}")
