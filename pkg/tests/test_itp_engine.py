#!/usr/bin/env python3
"""Tests for the iterative perception loop."""

import re
from pathlib import Path

import pytest

import sys
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "scripts"))

from itp_engine import (
    FALLBACK_UNIFORM,
    ItpConfig,
    advance_state,
    build_iteration_input,
    initial_state,
    run_batch,
    run_episode,
)
from media import PlaceholderMedia
from metrics import score_traces
from mock_model import MockModel, MockScript, caption_timestamps
from model_gateway import InFlightLimiter, ModelUnavailable
from protocol import parse_response, schema_for_task
from sampling import FramePlan, SamplingConfig
from schema import TaskKind, normalize_record

SMALL = SamplingConfig(fps=0.5, min_frames=4, max_frames=64)
BACKEND = PlaceholderMedia()


def video_record(i, clue=(20.0, 26.0), duration=60.0):
    return normalize_record({
        "id": f"ep{i:04d}",
        "source": "synthetic",
        "media": {"kind": "video", "path": f"ep{i}.mp4", "duration": duration, "width": 640, "height": 360},
        "task": "video_qa",
        "question": f"Q-{i}: what happens between {clue[0]} and {clue[1]}?",
        "options": ["A. nothing", "B. the door opens"],
        "think": "t",
        "clue": list(clue),
        "answer": "B",
    })


_CLUE_IN_QUESTION = re.compile(r"between ([0-9.]+) and ([0-9.]+)")


def planted_responder(request):
    """Always names the true clue; answers correctly only if half the frames are inside it."""
    start, end = (float(v) for v in _CLUE_IN_QUESTION.search(request.prompt).groups())
    times = caption_timestamps(request)
    inside = sum(1 for t in times if start <= t <= end)
    answer = "B" if times and inside >= 0.5 * len(times) else "A"
    return f"<think>look closer</think><clue>[{start}, {end}]</clue><answer>{answer}</answer>"


class TestInitialState:
    def test_video_uses_uniform_frames(self):
        media = BACKEND.probe(video_record(0).media)
        state = initial_state(media, TaskKind.VIDEO_QA, ItpConfig(sampling=SMALL))
        assert isinstance(state.current_plan, FramePlan)
        assert len(state.current_plan.timestamps) == 30
        assert state.current_plan.inside_count == 0

    def test_tracking_uses_fixed_frames(self):
        rec = normalize_record({
            "id": "t1", "source": "got", "task": "tracking", "question": "track it", "think": "t",
            "media": {"kind": "video", "path": "t.mp4", "duration": 10.0, "width": 640, "height": 360},
            "clue": [[0, 0, 10, 10]] * 8,
        })
        state = initial_state(BACKEND.probe(rec.media), TaskKind.TRACKING, ItpConfig(sampling=SMALL))
        assert len(state.current_plan.timestamps) == 8


class TestIterationInput:
    def test_first_request_has_captioned_frames(self):
        rec = video_record(1)
        media = BACKEND.probe(rec.media)
        cfg = ItpConfig(sampling=SMALL)
        request = build_iteration_input(initial_state(media, rec.task, cfg), rec, media, cfg, BACKEND)
        assert "Iteration 1." in request.prompt
        assert len(request.images) == 30
        assert request.image_captions[0] == "Frame at 1.000s"

    def test_clue_refocuses_next_plan(self):
        rec = video_record(2)
        media = BACKEND.probe(rec.media)
        cfg = ItpConfig(sampling=SMALL)
        state = initial_state(media, rec.task, cfg)
        parsed = parse_response("<think>x</think><clue>[20, 26]</clue><answer>A</answer>",
                                schema_for_task(rec.task))
        nxt = advance_state(state, parsed, cfg, media, rec.task)
        assert nxt.k == 2
        assert nxt.current_plan.inside_count == 15
        assert len(nxt.current_plan.timestamps) == 30
        assert nxt.events == ()


class TestPlantedClueScaling:
    """More perception rounds recover the answer hidden in a short span."""

    def run_accuracy(self, iterations):
        records = {r.id: r for r in (video_record(i, clue=(10.0 + i % 30, 16.0 + i % 30)) for i in range(50))}
        model = MockModel(MockScript(default=planted_responder))
        cfg = ItpConfig(iterations=iterations, sampling=SMALL)
        traces = run_batch(records.values(), BACKEND, cfg, model)
        report = score_traces(records, {k: t.to_dict() for k, t in traces.items()}, "test", "mock", iterations)
        return report.metrics["video_qa/Acc"].value

    def test_single_round_mostly_wrong(self):
        assert self.run_accuracy(1) <= 0.10

    def test_three_rounds_all_right(self):
        assert self.run_accuracy(3) == 1.0


class TestFallbacks:
    """Unusable clues keep the loop going."""

    def script(self, second):
        return MockScript(entries=[("Iteration 2.", second)],
                          default="<think>x</think><clue>[20, 26]</clue><answer>B</answer>")

    def test_malformed_clue_reuses_previous_plan(self):
        model = MockModel(self.script("<think>x</think><clue>soon</clue><answer>B</answer>"))
        trace = run_episode(video_record(3), BACKEND, ItpConfig(sampling=SMALL), model)
        assert len(trace.iterations) == 3
        assert trace.fallback_events == [{"k": 2, "reason": "MalformedClue", "action": "reuse_previous_plan"}]
        assert trace.iterations[2].plan == trace.iterations[1].plan
        assert trace.final_answer == "B"

    def test_malformed_clue_fallback_uniform(self):
        model = MockModel(self.script("<think>x</think><clue>soon</clue><answer>B</answer>"))
        cfg = ItpConfig(sampling=SMALL, on_malformed=FALLBACK_UNIFORM)
        trace = run_episode(video_record(4), BACKEND, cfg, model)
        assert trace.iterations[2].plan == trace.iterations[0].plan
        assert trace.fallback_events[0]["action"] == FALLBACK_UNIFORM

    def test_clue_outside_media(self):
        model = MockModel(self.script("<think>x</think><clue>[90, 95]</clue><answer>B</answer>"))
        trace = run_episode(video_record(5), BACKEND, ItpConfig(sampling=SMALL), model)
        assert trace.fallback_events[0]["reason"] == "EmptyAfterClip"
        assert len(trace.iterations) == 3

    def test_missing_last_answer_is_final(self):
        model = MockModel(MockScript(
            entries=[("Iteration 3.", "<think>x</think><clue>[20, 26]</clue>")],
            default="<think>x</think><clue>[20, 26]</clue><answer>B</answer>"))
        trace = run_episode(video_record(6), BACKEND, ItpConfig(sampling=SMALL), model)
        assert trace.final_answer is None
        assert all(e["reason"] != "AnswerCarriedForward" for e in trace.fallback_events)

    def test_answer_carried_forward(self):
        model = MockModel(MockScript(
            entries=[("Iteration 3.", "<think>x</think><clue>[20, 26]</clue>")],
            default="<think>x</think><clue>[20, 26]</clue><answer>B</answer>"))
        cfg = ItpConfig(sampling=SMALL, carry_answer_forward=True)
        trace = run_episode(video_record(6), BACKEND, cfg, model)
        assert trace.final_answer == "B"
        assert trace.fallback_events[-1] == {"k": 2, "reason": "AnswerCarriedForward", "action": "carry_forward"}

    def test_stop_on_repeat(self):
        model = MockModel(MockScript(default="<think>x</think><clue>[20, 26]</clue><answer>B</answer>"))
        cfg = ItpConfig(sampling=SMALL, stop_on_repeat=True)
        trace = run_episode(video_record(7), BACKEND, cfg, model)
        assert len(trace.iterations) == 2
        assert trace.fallback_events[-1]["reason"] == "ClueRepeated"

    def test_model_unavailable_aborts(self):
        class FlakyModel:
            calls = 0

            def complete(self, request):
                self.calls += 1
                if self.calls == 2:
                    raise ModelUnavailable("down")
                return "<think>x</think><clue>[20, 26]</clue><answer>B</answer>"

        trace = run_episode(video_record(8), BACKEND, ItpConfig(sampling=SMALL), FlakyModel())
        assert trace.aborted_at == 2
        assert len(trace.iterations) == 1
        assert trace.error.startswith("ModelUnavailable")
        assert trace.final_answer == "B"


class TestImageEpisodes:
    def test_crop_sent_after_box_clue(self):
        rec = normalize_record({
            "id": "img1", "source": "vstar", "task": "image_reasoning", "question": "What colour is the cup?",
            "think": "t", "answer": "A", "options": ["A. red", "B. blue"],
            "media": {"kind": "image", "path": "cup.jpg", "width": 640, "height": 480},
            "clue": [107, 54, 159, 82],
        })
        model = MockModel(MockScript(default="<think>x</think><clue>[107, 54, 159, 82]</clue><answer>A</answer>"))
        trace = run_episode(rec, BACKEND, ItpConfig(sampling=SMALL), model)
        assert len(model.calls[0].images) == 1
        assert len(model.calls[1].images) == 2
        assert model.calls[1].image_captions[1] == "Crop of region [101.0, 51.0, 165.0, 85.0]"
        assert trace.iterations[1].plan["kind"] == "crop"
        assert trace.final_clue == [107.0, 54.0, 159.0, 82.0]


class TestTracking:
    def test_box_sequence_kept_every_round(self):
        rec = normalize_record({
            "id": "trk", "source": "got", "task": "tracking", "question": "track the car", "think": "t",
            "media": {"kind": "video", "path": "t.mp4", "duration": 10.0, "width": 640, "height": 360},
            "clue": [[0, 0, 10, 10]] * 8,
        })
        boxes = ", ".join(["[0, 0, 10, 10]"] * 8)
        model = MockModel(MockScript(default=f"<think>x</think><clue>{boxes}</clue>"))
        trace = run_episode(rec, BACKEND, ItpConfig(sampling=SMALL), model)
        assert all(len(call.images) == 8 for call in model.calls)
        assert trace.fallback_events == []
        assert len(trace.final_clue) == 8


class TestBatch:
    """Concurrency does not change results."""

    def test_concurrency_is_deterministic(self):
        tiny = SamplingConfig(fps=0.1, min_frames=4, max_frames=8)
        records = {r.id: r for r in (video_record(i, clue=(10.0 + i % 30, 16.0 + i % 30)) for i in range(1000))}
        cfg = ItpConfig(sampling=tiny)

        reports = []
        limiters = []
        for concurrency in (1, 8):
            model = MockModel(MockScript(default=planted_responder))
            limiter = InFlightLimiter(model, max_in_flight=8)
            traces = run_batch(records.values(), BACKEND, cfg, limiter, concurrency=concurrency)
            assert set(traces) == set(records)
            reports.append(score_traces(records, {k: t.to_dict() for k, t in traces.items()}, "t", "mock", 3))
            limiters.append(limiter)

        assert reports[0].to_dict() == reports[1].to_dict()
        assert limiters[0].high_water == 1
        assert limiters[1].high_water <= 8

    def test_on_trace_called_per_episode(self):
        seen = []
        model = MockModel(MockScript(default=planted_responder))
        run_batch([video_record(i) for i in range(5)], BACKEND, ItpConfig(iterations=1, sampling=SMALL),
                  model, concurrency=2, on_trace=lambda t: seen.append(t.sample_id))
        assert sorted(seen) == [f"ep{i:04d}" for i in range(5)]

    def test_probe_failure_becomes_aborted_trace(self):
        rec = normalize_record({
            "id": "noext", "source": "x", "task": "video_qa", "question": "q", "think": "t", "answer": "A",
            "media": {"kind": "video", "path": "x.mp4"},
        })
        traces = run_batch([rec], BACKEND, ItpConfig(sampling=SMALL), MockModel())
        assert traces["noext"].aborted_at == 1

    def test_invalid_concurrency(self):
        with pytest.raises(ValueError):
            run_batch([], BACKEND, ItpConfig(), MockModel(), concurrency=0)
