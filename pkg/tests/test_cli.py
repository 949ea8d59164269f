"""Command-line interface: each subcommand end to end, plus the uniform
error contract (exit 1, optional machine-readable stderr JSON)."""

import json

import pytest
from PIL import Image

from tarenv.cli import main
from tarenv.datagen import read_sft_jsonl, read_vqa_jsonl
from tarenv.evalharness import RunReport
from tarenv.geometry import BoundingBox
from tarenv.protocol import ActionFormat, AgentMessage, Mark, Terminate, render

pytestmark = pytest.mark.usefixtures("clean_env")


@pytest.fixture
def clean_env(monkeypatch):
    for name in ("TARENV_ENDPOINT", "TARENV_API_KEY", "TARENV_MODEL", "TARENV_CONFIG"):
        monkeypatch.delenv(name, raising=False)


def run_cli(*argv):
    return main([str(a) for a in argv])


def stdout_json(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


@pytest.fixture
def vqa_path(corpus_dir, tmp_path):
    out = tmp_path / "vqa.jsonl"
    code = run_cli("datagen", corpus_dir / "detections.jsonl", out, "--seed", 5)
    assert code == 0
    return out


class TestDatagen:
    def test_summary_and_output(self, corpus_dir, tmp_path, capsys):
        out = tmp_path / "vqa.jsonl"
        report = tmp_path / "report.json"
        code = run_cli("datagen", corpus_dir / "detections.jsonl", out,
                       "--seed", 5, "--report", report)
        assert code == 0
        summary = stdout_json(capsys)
        assert summary["records"] == 60
        assert summary["samples"] == len(read_vqa_jsonl(str(out)))
        assert summary["samples"] > 60
        detail = json.loads(report.read_text())
        assert "discard_detail" in detail and detail["seed"] == 5

    def test_deterministic_across_runs(self, corpus_dir, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert run_cli("datagen", corpus_dir / "detections.jsonl", a, "--seed", 9) == 0
        assert run_cli("datagen", corpus_dir / "detections.jsonl", b, "--seed", 9) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_missing_input_fails(self, tmp_path, capsys):
        code = run_cli("datagen", tmp_path / "absent.jsonl", tmp_path / "out.jsonl")
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_json_error_contract(self, tmp_path, capsys):
        code = run_cli("datagen", "--json", tmp_path / "absent.jsonl", tmp_path / "out.jsonl")
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert set(err) == {"error", "message"}
        assert err["error"] == "FileNotFoundError"


class TestValidate:
    def test_geometric_all_valid(self, corpus_dir, vqa_path, tmp_path, capsys):
        verdicts = tmp_path / "verdicts.jsonl"
        code = run_cli("validate", vqa_path, corpus_dir / "detections.jsonl",
                       "--strict", "--out", verdicts)
        assert code == 0
        summary = stdout_json(capsys)
        assert summary["invalid"] == 0 and summary["valid"] == summary["samples"]
        lines = verdicts.read_text().strip().splitlines()
        assert len(lines) == summary["samples"]

    def test_tampered_sample_fails_strict(self, corpus_dir, vqa_path, tmp_path, capsys):
        samples = read_vqa_jsonl(str(vqa_path))
        bad = samples[0].to_dict()
        letters = [letter for letter, _ in samples[0].options]
        bad["answer"] = next(l for l in letters if l != samples[0].answer)
        tampered = tmp_path / "tampered.jsonl"
        with open(tampered, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(bad) + "\n")
        code = run_cli("validate", tampered, corpus_dir / "detections.jsonl", "--strict")
        assert code == 1
        assert stdout_json(capsys)["invalid"] == 1

    def test_llm_mode_without_endpoint_fails(self, corpus_dir, vqa_path, capsys):
        code = run_cli("validate", "--json", vqa_path, corpus_dir / "detections.jsonl",
                       "--mode", "llm")
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "ConfigError"
        assert "endpoint" in err["message"]


class TestReward:
    def _turns(self, fmt):
        mark = render(AgentMessage(thought="t1", actions=(Mark((BoundingBox(4, 4, 60, 60),)),)), fmt)
        final = render(AgentMessage(thought="t2", actions=(Terminate("B"),)), fmt)
        return [mark, final]

    def test_perfect_trajectory_file(self, tmp_path, capsys):
        payload = {"trajectory": self._turns(ActionFormat.EXPLICIT),
                   "ground_truth": "B", "format": "explicit"}
        path = tmp_path / "traj.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        assert run_cli("reward", path) == 0
        out = stdout_json(capsys)
        assert round(out["total"], 10) == 1.4
        assert out["accuracy"] == 1.0

    def test_turn_flags(self, capsys):
        turns = self._turns(ActionFormat.IMPLICIT)
        code = run_cli("reward", "--turn", turns[0], "--turn", turns[1],
                       "--ground-truth", "B", "--format", "implicit")
        assert code == 0
        assert round(stdout_json(capsys)["total"], 10) == 1.4

    def test_no_input_fails(self, capsys):
        assert run_cli("reward") == 1
        assert "trajectory" in capsys.readouterr().err


class TestEval:
    @pytest.fixture
    def bench_path(self, vqa_path, tmp_path):
        samples = read_vqa_jsonl(str(vqa_path))[:8]
        subset = tmp_path / "subset.jsonl"
        with open(subset, "w", encoding="utf-8") as fh:
            for s in samples:
                fh.write(json.dumps(s.to_dict()) + "\n")
        bench = tmp_path / "bench.jsonl"
        with open(bench, "w", encoding="utf-8") as fh:
            for s in samples:
                fh.write(json.dumps({
                    "id": s.id, "image_path": s.image_path, "question": s.question,
                    "options": [list(o) for o in s.options], "ground_truth": s.answer,
                    "source": "synthetic",
                }) + "\n")
        return bench, subset

    def test_oracle_eval_perfect(self, bench_path, tmp_path, capsys):
        bench, subset = bench_path
        report_path = tmp_path / "report.json"
        code = run_cli("eval", bench, "--backend", "oracle", "--oracle-from", subset,
                       "--out", report_path)
        assert code == 0
        summary = stdout_json(capsys)
        assert summary["accuracy"] == 1.0
        assert summary["action_success_rate"] == 1.0
        loaded = RunReport.load(str(report_path))
        assert loaded.n == summary["n"]

    def test_compare_saved_reports(self, bench_path, tmp_path, capsys):
        bench, subset = bench_path
        for name in ("ra.json", "rb.json"):
            assert run_cli("eval", bench, "--backend", "oracle", "--oracle-from", subset,
                           "--out", tmp_path / name) == 0
        capsys.readouterr()
        code = run_cli("eval", "--compare", tmp_path / "ra.json", tmp_path / "rb.json",
                       "--out", tmp_path / "cmp.json")
        assert code == 0
        text = capsys.readouterr().out
        assert "(all)" in text and "speedup" in text
        cmp_data = json.loads((tmp_path / "cmp.json").read_text())
        assert cmp_data["overall_delta"] == 0.0
        assert cmp_data["mcnemar"]["both_right"] == 8

    def test_no_benchmark_and_no_compare_fails(self, capsys):
        assert run_cli("eval", "--backend", "oracle") == 1


class TestSftGen:
    def test_generates_conversations(self, corpus_dir, vqa_path, tmp_path, capsys):
        out = tmp_path / "sft.jsonl"
        image_dir = tmp_path / "marked"
        image_dir.mkdir()
        code = run_cli("sft-gen", vqa_path, corpus_dir / "detections.jsonl", out,
                       "--image-dir", image_dir)
        assert code == 0
        summary = stdout_json(capsys)
        records = read_sft_jsonl(str(out))
        assert summary["records"] == len(records) > 0
        two_round = [r for r in records if len(r.images) == 2]
        assert two_round, "expected marked-image conversations"
        written = list(image_dir.glob("*_marked.png"))
        assert written


class TestRollout:
    def test_scripted_episode(self, tmp_path, capsys):
        img = tmp_path / "img.png"
        Image.new("RGB", (100, 80), (60, 60, 60)).save(img)
        fmt = ActionFormat.EXPLICIT
        script = [
            render(AgentMessage(thought="t1", actions=(Mark((BoundingBox(5, 5, 40, 40),)),)), fmt),
            render(AgentMessage(thought="t2", actions=(Terminate("A"),)), fmt),
        ]
        script_path = tmp_path / "script.json"
        script_path.write_text(json.dumps(script), encoding="utf-8")
        code = run_cli("rollout", img, "--question", "Is there a mass?",
                       "--option", "A", "Yes", "--option", "B", "No",
                       "--backend", "script", "--script", script_path,
                       "--ground-truth", "A")
        assert code == 0
        out = capsys.readouterr().out
        assert out.count("assistant>") == 2
        assert out.count("environment>") == 2
        assert round(json.loads(out.strip().splitlines()[-1])["total"], 10) == 1.4

    def test_script_backend_requires_file(self, tmp_path, capsys):
        img = tmp_path / "img.png"
        Image.new("RGB", (50, 50)).save(img)
        code = run_cli("rollout", img, "--question", "q",
                       "--option", "A", "Yes", "--option", "B", "No",
                       "--backend", "script")
        assert code == 1


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0
    assert "tarenv" in capsys.readouterr().out


def test_serve_flags_parse():
    from tarenv.cli import build_parser
    args = build_parser().parse_args(["serve", "--port", "9001", "--ttl", "30"])
    assert args.port == 9001 and args.ttl == 30.0
