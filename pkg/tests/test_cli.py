#!/usr/bin/env python3
"""End-to-end tests for the vtts command line."""

import json
import shutil
from pathlib import Path

import pytest

import sys
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "scripts"))

from mock_model import MockModel, MockScript, MockServer
from vtts import EXIT_FAILURE, EXIT_INFRA, EXIT_OK, compute_reward_rows, main
from dataset import JoinFailure, load_records
from rewards import RewardWeights
from schema import normalize_record

FIXTURES = Path(__file__).resolve().parent / "fixtures"
SCRIPT = FIXTURES / "mock_script.yaml"


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(row) + "\n" for row in rows))
    return path


def door_record(i):
    return {
        "id": f"door_{i:02d}",
        "source": "synthetic",
        "media": {"kind": "video", "path": f"door_{i}.mp4", "duration": 60.0, "width": 640, "height": 360},
        "task": "video_qa",
        "question": "What happens to the door?",
        "options": ["A. nothing", "B. it opens"],
        "think": "Watch the door.",
        "clue": [20.0, 26.0],
        "answer": "B",
    }


@pytest.fixture
def door_dataset(tmp_path):
    return write_jsonl(tmp_path / "doors.jsonl", [door_record(i) for i in range(4)])


@pytest.fixture
def no_config(tmp_path):
    return ["--config", str(tmp_path / "no-config.yaml")]


def run_eval(dataset, out, no_config, *extra):
    return main(["run-eval", str(dataset), "--out", str(out), "--mock-script", str(SCRIPT),
                 "--placeholder-media", "--quiet", *no_config, *extra])


class TestValidate:
    def test_fixture_violations(self, capsys, no_config):
        code = main(["validate", str(FIXTURES / "dataset_10.jsonl"), *no_config])
        lines = capsys.readouterr().out.splitlines()
        assert code == EXIT_FAILURE
        assert len(lines) == 3
        assert lines[0].startswith("charades_0007: ClueOutOfBounds:")

    def test_single_bad_record(self, tmp_path, capsys, no_config):
        rows = [door_record(0), {**door_record(1), "think": ""}]
        code = main(["validate", str(write_jsonl(tmp_path / "d.jsonl", rows)), *no_config])
        assert code == EXIT_FAILURE
        assert capsys.readouterr().out.splitlines() == ["door_01: MissingThink: think is required"]

    def test_clean(self, door_dataset, capsys, no_config):
        assert main(["validate", str(door_dataset), *no_config]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "OK: 4 records"

    def test_json_format(self, door_dataset, capsys, no_config):
        assert main(["validate", str(door_dataset), "--format", "json", *no_config]) == EXIT_OK
        assert json.loads(capsys.readouterr().out) == []

    def test_missing_file(self, tmp_path, no_config):
        assert main(["validate", str(tmp_path / "nope.jsonl"), *no_config]) == EXIT_INFRA

    def test_unreadable_line(self, tmp_path, no_config):
        path = tmp_path / "d.jsonl"
        path.write_text("{broken\n")
        assert main(["validate", str(path), *no_config]) == EXIT_FAILURE

    def test_malformed_clue_line(self, tmp_path, capsys, no_config):
        rows = [door_record(0), {**door_record(1), "clue": {"start": 20, "end": 26}}]
        code = main(["validate", str(write_jsonl(tmp_path / "d.jsonl", rows)), *no_config])
        assert code == EXIT_FAILURE
        assert "Line 2: Bad clue for door_01" in capsys.readouterr().err


class TestStatsAndPresets:
    def test_stats_json(self, capsys, no_config):
        assert main(["stats", str(FIXTURES / "dataset_10.jsonl"), "--format", "json", *no_config]) == EXIT_OK
        data = json.loads(capsys.readouterr().out)
        assert data["total"] == 10
        assert data["tracking_clues"] == 1
        assert data["by_task"]["temporal_clue"] == 2

    def test_stats_brief(self, capsys, no_config):
        main(["stats", str(FIXTURES / "dataset_10.jsonl"), *no_config])
        assert capsys.readouterr().out.startswith("Records: 10\n")

    def test_presets(self, capsys, no_config):
        assert main(["presets", *no_config]) == EXIT_OK
        out = capsys.readouterr().out
        assert "main-text: frames 64-2048" in out
        assert "appendix-eval (alias: eval): frames 4-2048" in out


class TestRunEval:
    """Full runs against the scripted mock."""

    def test_report_written(self, door_dataset, tmp_path, capsys, no_config):
        out = tmp_path / "run"
        assert run_eval(door_dataset, out, no_config) == EXIT_OK
        assert (out / "traces.jsonl").exists()
        report = json.loads((out / "report.json").read_text())
        assert report["K"] == 3
        assert report["model"] == "mock"
        assert report["metrics"]["video_qa/Acc"] == {"count": 4, "value": 1.0}
        assert "video_qa/Acc" in capsys.readouterr().out

    def test_more_iterations_help(self, door_dataset, tmp_path, no_config):
        run_eval(door_dataset, tmp_path / "k1", no_config, "--iterations", "1")
        run_eval(door_dataset, tmp_path / "k3", no_config, "--iterations", "3")
        k1 = json.loads((tmp_path / "k1" / "report.json").read_text())
        k3 = json.loads((tmp_path / "k3" / "report.json").read_text())
        assert k1["metrics"]["video_qa/Acc"]["value"] == 0.0
        assert k3["metrics"]["video_qa/Acc"]["value"] == 1.0

    def test_report_bytes_deterministic(self, door_dataset, tmp_path, no_config):
        run_eval(door_dataset, tmp_path / "a", no_config, "--concurrency", "1")
        run_eval(door_dataset, tmp_path / "b", no_config, "--concurrency", "4")
        for name in ("report.json", "report.csv", "report.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_dataset(self, tmp_path, capsys, no_config):
        out = tmp_path / "run"
        assert run_eval(tmp_path / "nope.jsonl", out, no_config) == EXIT_INFRA
        assert not out.exists()
        assert "Dataset not found" in capsys.readouterr().err

    def test_invalid_dataset_needs_force(self, tmp_path, no_config):
        dataset = tmp_path / "d.jsonl"
        shutil.copy(FIXTURES / "dataset_10.jsonl", dataset)
        assert run_eval(dataset, tmp_path / "run", no_config) == EXIT_FAILURE
        assert not (tmp_path / "run").exists()

    def test_duplicate_ids_need_force(self, tmp_path, no_config):
        dataset = write_jsonl(tmp_path / "d.jsonl", [door_record(0), door_record(0)])
        assert run_eval(dataset, tmp_path / "run", no_config) == EXIT_FAILURE
        assert run_eval(dataset, tmp_path / "run", no_config, "--force") == EXIT_OK

    def test_resume_skips_traced(self, door_dataset, tmp_path, no_config):
        out = tmp_path / "run"
        assert run_eval(door_dataset, out, no_config) == EXIT_OK
        before = (out / "traces.jsonl").read_text()
        assert run_eval(door_dataset, out, no_config, "--resume") == EXIT_OK
        assert (out / "traces.jsonl").read_text() == before

    def test_json_output(self, door_dataset, tmp_path, capsys, no_config):
        assert run_eval(door_dataset, tmp_path / "run", no_config, "--format", "json") == EXIT_OK
        assert json.loads(capsys.readouterr().out)["metrics"]["video_qa/Aborted"]["value"] == 0.0

    def test_no_endpoint(self, door_dataset, tmp_path, no_config):
        code = main(["run-eval", str(door_dataset), "--out", str(tmp_path / "run"),
                     "--placeholder-media", "--quiet", *no_config])
        assert code == EXIT_INFRA

    def test_against_http_mock(self, door_dataset, tmp_path, no_config):
        """The real client talking to the in-process mock server."""
        with MockServer(MockModel(MockScript.from_file(SCRIPT))) as server:
            code = main(["run-eval", str(door_dataset), "--out", str(tmp_path / "run"),
                         "--endpoint", server.base_url, "--model", "mock-http",
                         "--placeholder-media", "--quiet", *no_config])
        assert code == EXIT_OK
        report = json.loads((tmp_path / "run" / "report.json").read_text())
        assert report["model"] == "mock-http"
        assert report["metrics"]["video_qa/Acc"]["value"] == 1.0

    def test_aborted_episode_exit_code(self, tmp_path, no_config):
        rows = [door_record(0), {**door_record(1), "media": {"kind": "video", "path": "x.mp4"}}]
        dataset = write_jsonl(tmp_path / "d.jsonl", rows)
        assert run_eval(dataset, tmp_path / "run", no_config) == EXIT_INFRA
        report = json.loads((tmp_path / "run" / "report.json").read_text())
        assert report["metrics"]["video_qa/Aborted"] == {"count": 2, "value": 0.5}

    def test_force_runs_records_without_usable_clue(self, tmp_path, no_config):
        rows = [
            door_record(0),
            {**door_record(1), "task": "temporal_clue", "options": None, "answer": None, "clue": None},
            {**door_record(2), "task": "tracking", "options": None, "answer": None},
        ]
        dataset = write_jsonl(tmp_path / "d.jsonl", rows)
        assert run_eval(dataset, tmp_path / "run", no_config) == EXIT_FAILURE
        assert run_eval(dataset, tmp_path / "run", no_config, "--force") == EXIT_OK
        metrics = json.loads((tmp_path / "run" / "report.json").read_text())["metrics"]
        assert metrics["temporal_clue/Unscorable"] == {"count": 1, "value": 1.0}
        assert metrics["tracking/Unscorable"] == {"count": 1, "value": 1.0}
        assert metrics["tracking/Aborted"] == {"count": 1, "value": 0.0}
        assert "temporal_clue/mIoU" not in metrics
        assert metrics["video_qa/Acc"] == {"count": 1, "value": 1.0}


class TestRunEpisode:
    def test_brief_trace(self, door_dataset, capsys, no_config):
        code = main(["run-episode", str(door_dataset), "--id", "door_00", "--mock-script", str(SCRIPT),
                     "--placeholder-media", "--quiet", *no_config])
        lines = capsys.readouterr().out.splitlines()
        assert code == EXIT_OK
        assert lines[0] == "k=1: clue=[20.0, 26.0] answer='A'"
        assert lines[-1] == "final: answer='B' clue=[20.0, 26.0]"

    def test_unknown_id(self, door_dataset, no_config):
        code = main(["run-episode", str(door_dataset), "--id", "nope", "--mock-script", str(SCRIPT),
                     "--placeholder-media", *no_config])
        assert code == EXIT_FAILURE


class TestComputeRewards:
    """Reward rows and group advantages from a completions file."""

    GOOD = "<think>door</think><clue>[20.0, 26.0]</clue><answer>B</answer>"

    def test_alternating_group(self, door_dataset, tmp_path, no_config):
        completions = write_jsonl(tmp_path / "c.jsonl", [
            {"id": "door_00", "group": "g1", "completion": text}
            for text in (self.GOOD, "no idea", self.GOOD, "no idea")
        ])
        out = tmp_path / "rewards.jsonl"
        code = main(["compute-rewards", str(completions), "--dataset", str(door_dataset),
                     "--out", str(out), *no_config])
        assert code == EXIT_OK
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert [r["total"] for r in rows] == [3.0, 0.0, 3.0, 0.0]
        assert [r["advantage"] for r in rows] == pytest.approx([1, -1, 1, -1], abs=1e-5)
        assert list(rows[0])[:2] == ["id", "group"]

    def test_weight_override(self, door_dataset, tmp_path, no_config):
        completions = write_jsonl(tmp_path / "c.jsonl", [{"id": "door_00", "completion": self.GOOD}])
        out = tmp_path / "rewards.jsonl"
        main(["compute-rewards", str(completions), "--dataset", str(door_dataset), "--out", str(out),
              "--lambda-fmt", "0", *no_config])
        row = json.loads(out.read_text())
        assert row["total"] == 2.0
        assert "advantage" not in row

    def test_empty_completions(self, door_dataset, tmp_path, no_config):
        completions = tmp_path / "c.jsonl"
        completions.write_text("")
        out = tmp_path / "rewards.jsonl"
        code = main(["compute-rewards", str(completions), "--dataset", str(door_dataset),
                     "--out", str(out), *no_config])
        assert code == EXIT_OK
        assert out.read_text() == ""

    def test_orphan_id(self, door_dataset, tmp_path, capsys, no_config):
        completions = write_jsonl(tmp_path / "c.jsonl", [{"id": "ghost", "completion": self.GOOD}])
        out = tmp_path / "rewards.jsonl"
        code = main(["compute-rewards", str(completions), "--dataset", str(door_dataset),
                     "--out", str(out), *no_config])
        assert code == EXIT_FAILURE
        assert "ghost" in capsys.readouterr().err
        assert not out.exists()

    def test_rows_function(self, door_dataset):
        records = {r.id: r for r in load_records(door_dataset)}
        with pytest.raises(JoinFailure) as exc:
            compute_reward_rows([{"id": "a"}, {"id": "door_00"}, {"id": "b"}], records, RewardWeights())
        assert exc.value.orphan_ids == ["a", "b"]

    def test_rows_without_usable_clue(self):
        base = {**door_record(0), "task": "tracking", "options": None, "answer": None}
        records = {
            "missing": normalize_record({**base, "id": "missing", "clue": None}),
            "interval": normalize_record({**base, "id": "interval"}),
        }
        text = "<think>t</think><clue>[0, 0, 1, 1]</clue>"
        rows = compute_reward_rows([{"id": "missing", "completion": text}, {"id": "interval", "completion": text}],
                                   records, RewardWeights())
        assert [r["r_clue"] for r in rows] == [0.0, 0.0]
        assert [r["weights"]["lambda_clue"] for r in rows] == [0.0, 0.0]


class TestReport:
    def test_rescore_traces(self, door_dataset, tmp_path, capsys, no_config):
        run_eval(door_dataset, tmp_path / "run", no_config)
        capsys.readouterr()
        out = tmp_path / "rescored.json"
        code = main(["report", "--dataset", str(door_dataset), "--traces", str(tmp_path / "run" / "traces.jsonl"),
                     "--out", str(out), "--model", "mock", *no_config])
        assert code == EXIT_OK
        assert out.read_text() == (tmp_path / "run" / "report.json").read_text()

    def test_missing_traces(self, door_dataset, tmp_path, no_config):
        code = main(["report", "--dataset", str(door_dataset), "--traces", str(tmp_path / "none.jsonl"),
                     "--out", str(tmp_path / "r.json"), *no_config])
        assert code == EXIT_INFRA


class TestCurate:
    def test_buckets_written(self, tmp_path, capsys, no_config):
        script = tmp_path / "judge.yaml"
        script.write_text(
            "default: 'hmm'\n"
            "entries:\n"
            "  - contains: 'Question: What happens to the door?'\n"
            "    response: 'KEEP'\n"
            "  - contains: 'Question: Where is the cat?'\n"
            "    response: 'DROP: answer not supported'\n"
        )
        rows = [door_record(0), {**door_record(1), "question": "Where is the cat?"},
                {**door_record(2), "question": "Anything?"}]
        dataset = write_jsonl(tmp_path / "d.jsonl", rows)
        out = tmp_path / "curated"
        code = main(["curate", str(dataset), "--out", str(out), "--mock-script", str(script), *no_config])
        assert code == EXIT_OK
        assert capsys.readouterr().out.strip() == "keep 1  drop 1  quarantine 1"
        kept = [json.loads(line) for line in (out / "kept.jsonl").read_text().splitlines()]
        assert kept[0]["judge"] == {"verdict": "keep", "reason": ""}
        assert len((out / "quarantined.jsonl").read_text().splitlines()) == 1
