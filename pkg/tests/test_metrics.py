#!/usr/bin/env python3
"""Tests for grounding metrics and report files."""

import random
from pathlib import Path

import pytest

import sys
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "scripts"))

from metrics import (
    EmptyInput,
    GroundedRecord,
    MeanAccumulator,
    Metric,
    MetricReport,
    ReportError,
    grounded_qa_metrics,
    load_report,
    mcq_accuracy,
    score_traces,
    spatial_grounding_metrics,
    temporal_grounding_metrics,
    tracking_metrics,
    write_report,
)
from schema import normalize_record
from spacetime import BoundingBox, LengthMismatch, TemporalInterval

FIXTURES = Path(__file__).resolve().parent / "fixtures"


def values(summary):
    return {name: round(m.value, 4) for name, m in summary.items()}


class TestTemporalGrounding:
    def test_hand_computed(self):
        gt = TemporalInterval(0, 10)
        pairs = [(TemporalInterval(0, 10), gt), (TemporalInterval(0, 4), gt), (TemporalInterval(20, 30), gt)]
        summary = values(temporal_grounding_metrics(pairs))
        assert summary == {"mIoU": 0.4667, "R@0.3": 0.6667, "R@0.5": 0.3333, "R@0.7": 0.3333}

    def test_missing_prediction_scores_zero(self):
        summary = temporal_grounding_metrics([(None, TemporalInterval(0, 1))])
        assert summary["mIoU"] == Metric(0.0, 1)

    def test_strict_threshold(self):
        pairs = [(TemporalInterval(0, 5), TemporalInterval(0, 10))]
        assert temporal_grounding_metrics(pairs)["R@0.5"].value == 1.0
        assert temporal_grounding_metrics(pairs, strict=True)["R@0.5"].value == 0.0

    def test_empty(self):
        with pytest.raises(EmptyInput):
            temporal_grounding_metrics([])


class TestSpatialGrounding:
    def test_box_accuracy(self):
        gt = BoundingBox(0, 0, 10, 10)
        summary = spatial_grounding_metrics([(gt, gt), (BoundingBox(20, 20, 30, 30), gt)])
        assert values(summary) == {"mIoU": 0.5, "Acc@0.5": 0.5}


class TestGroundedQA:
    """Grounded question answering."""

    def test_hand_computed(self):
        records = [GroundedRecord(True, 0.6), GroundedRecord(False, 0.6),
                   GroundedRecord(True, 0.3), GroundedRecord(False, 0.0)]
        summary = values(grounded_qa_metrics(records))
        assert summary["mIoP"] == 0.375
        assert summary["IoP@0.5"] == 0.5
        assert summary["IoP@0.3"] == 0.75
        assert summary["Acc@IoP@0.5"] == 0.25
        assert summary["Acc@GQA"] == 0.25
        assert summary["Acc@QA"] == 0.5

    def test_custom_gqa_rule(self):
        records = [GroundedRecord(True, 0.4), GroundedRecord(False, 0.9)]
        summary = grounded_qa_metrics(records, gqa_rule=lambda r: r.qa_correct and r.iop >= 0.3)
        assert summary["Acc@GQA"].value == 0.5
        assert summary["Acc@IoP@0.5"].value == 0.0

    def test_iop_range_checked(self):
        with pytest.raises(ValueError):
            GroundedRecord(True, 1.5)

    def test_random_bounds(self):
        """Thresholds are monotone and Acc@GQA never beats its parts."""
        rng = random.Random(21)
        for _ in range(1000):
            records = [GroundedRecord(rng.random() < 0.6, rng.choice([0.0, 0.3, 0.5, rng.random(), 1.0]))
                       for _ in range(rng.randint(1, 20))]
            s = grounded_qa_metrics(records)
            assert s["IoP@0.3"].value >= s["IoP@0.5"].value
            assert s["Acc@GQA"].value <= min(s["IoP@0.5"].value, s["Acc@QA"].value)

    def test_shuffle_invariant(self):
        rng = random.Random(5)
        records = [GroundedRecord(rng.random() < 0.5, rng.random(), rng.random()) for _ in range(200)]
        baseline = grounded_qa_metrics(records)
        for _ in range(20):
            rng.shuffle(records)
            assert grounded_qa_metrics(records) == baseline


class TestTracking:
    def test_hand_computed(self):
        assert values(tracking_metrics([[1.0, 0.0]])) == {"AO": 0.5, "SR@0.5": 0.5, "SR@0.75": 0.5}

    def test_perfect(self):
        assert values(tracking_metrics([[1.0] * 8, [1.0] * 8])) == {"AO": 1.0, "SR@0.5": 1.0, "SR@0.75": 1.0}

    def test_frames_pooled_across_episodes(self):
        # 1 frame at 1.0 and 3 frames at 0.0: pooled mean 0.25, not mean of means 0.5
        assert tracking_metrics([[1.0], [0.0, 0.0, 0.0]])["AO"].value == 0.25

    def test_empty(self):
        with pytest.raises(EmptyInput):
            tracking_metrics([])
        with pytest.raises(EmptyInput):
            tracking_metrics([[]])


class TestMcqAccuracy:
    def test_three_of_four(self):
        assert mcq_accuracy(["A", "B. cup", None, "D"], ["A", "B", "C", "D"]) == Metric(0.75, 4)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            mcq_accuracy(["A"], ["A", "B"])

    def test_empty(self):
        with pytest.raises(EmptyInput):
            mcq_accuracy([], [])


class TestAccumulators:
    def test_streaming_matches_batch(self):
        rng = random.Random(3)
        xs = [rng.random() for _ in range(500)]
        left, right = MeanAccumulator(), MeanAccumulator()
        for x in xs[:200]:
            left.add(x)
        for x in xs[200:]:
            right.add(x)
        whole = MeanAccumulator()
        for x in reversed(xs):
            whole.add(x)
        assert left.merge(right).metric() == whole.metric()


class TestScoreTraces:
    """Scoring finished traces per task."""

    def records(self):
        raws = [
            {"id": "v1", "task": "video_qa", "answer": "B", "options": ["A. x", "B. y"]},
            {"id": "v2", "task": "video_qa", "answer": "A", "options": ["A. x", "B. y"]},
            {"id": "t1", "task": "temporal_clue", "clue": [0, 10]},
        ]
        out = {}
        for raw in raws:
            raw.update({"source": "s", "question": "q", "think": "t",
                        "media": {"kind": "video", "path": "a.mp4", "duration": 30.0}})
            rec = normalize_record(raw)
            out[rec.id] = rec
        return out

    def test_per_task_metrics(self):
        traces = {
            "v1": {"id": "v1", "final_answer": "B"},
            "v2": {"id": "v2", "final_answer": "B", "aborted_at": None},
            "t1": {"id": "t1", "final_clue": [0.0, 5.0]},
        }
        report = score_traces(self.records(), traces, "main-text", "mock", 3)
        assert report.metrics["video_qa/Acc"] == Metric(0.5, 2)
        assert report.metrics["temporal_clue/mIoU"] == Metric(0.5, 1)
        assert report.metrics["video_qa/Aborted"] == Metric(0.0, 2)

    def test_aborted_stays_in_denominator(self):
        traces = {
            "v1": {"id": "v1", "final_answer": None, "aborted_at": 1},
            "v2": {"id": "v2", "final_answer": "A"},
            "t1": {"id": "t1", "final_clue": None, "aborted_at": 2},
        }
        report = score_traces(self.records(), traces, "main-text", "mock", 3)
        assert report.metrics["video_qa/Acc"] == Metric(0.5, 2)
        assert report.metrics["video_qa/Aborted"] == Metric(0.5, 2)
        assert report.metrics["temporal_clue/mIoU"] == Metric(0.0, 1)

    def test_missing_trace_skipped(self):
        report = score_traces(self.records(), {"v1": {"id": "v1", "final_answer": "B"}}, "p", "m", 1)
        assert report.metrics["video_qa/Acc"] == Metric(1.0, 1)
        assert "temporal_clue/mIoU" not in report.metrics

    def test_unusable_ground_truth_clue(self):
        records = self.records()
        extra = [
            {"id": "t2", "task": "temporal_clue"},
            {"id": "k1", "task": "tracking"},
            {"id": "k2", "task": "tracking", "clue": [0, 10]},
        ]
        for raw in extra:
            raw.update({"source": "s", "question": "q", "think": "t",
                        "media": {"kind": "video", "path": "a.mp4", "duration": 30.0}})
            records[raw["id"]] = normalize_record(raw)
        traces = {i: {"id": i, "final_clue": [0.0, 5.0]} for i in ("t1", "t2", "k1", "k2")}
        report = score_traces(records, traces, "p", "m", 1)
        assert report.metrics["temporal_clue/mIoU"] == Metric(0.5, 1)
        assert report.metrics["temporal_clue/Unscorable"] == Metric(0.5, 2)
        assert report.metrics["temporal_clue/Aborted"] == Metric(0.0, 2)
        assert report.metrics["tracking/Unscorable"] == Metric(1.0, 2)
        assert "tracking/AO" not in report.metrics
        assert "video_qa/Unscorable" not in report.metrics


class TestWriteReport:
    def report(self):
        return MetricReport(preset="main-text", model="mock", iterations=3, metrics={
            "video_qa/Acc": Metric(0.75, 4),
            "temporal_clue/R@0.5": Metric(0.5, 4),
        })

    def test_golden_files(self, tmp_path):
        paths = write_report(self.report(), tmp_path / "report.json")
        assert [p.name for p in paths] == ["report.json", "report.csv", "report.txt"]
        assert paths[0].read_text() == (FIXTURES / "report_golden.json").read_text()
        assert paths[1].read_text() == (FIXTURES / "report_golden.csv").read_text()

    def test_deterministic(self, tmp_path):
        a = write_report(self.report(), tmp_path / "a" / "report.json")
        b = write_report(self.report(), tmp_path / "b" / "report.json")
        assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]

    def test_round_trip(self, tmp_path):
        write_report(self.report(), tmp_path / "report.json")
        assert load_report(tmp_path / "report.json") == self.report()

    def test_zero_count_rejected(self, tmp_path):
        report = MetricReport("p", "m", 1, {"video_qa/Acc": Metric(0.0, 0)})
        with pytest.raises(ReportError):
            write_report(report, tmp_path / "report.json")
        assert not (tmp_path / "report.json").exists()

    def test_table(self):
        table = self.report().to_table()
        assert table.splitlines()[0] == "preset: main-text  model: mock  K: 3"
        assert "video_qa/Acc" in table
