#!/usr/bin/env python3
"""
Iterative Perception Engine

Runs the K-round perception loop for one sample:

    k = 1   uniform frames (video) or the full image
    k > 1   visual input re-planned from the clue parsed at k-1:
            dense frames inside a temporal clue, or full image + crop
            around a spatial clue
    final   the last round's answer and the last valid clue

Tracking samples keep their fixed uniform frames every round; their clue is
the per-frame box sequence itself.

Episodes are independent, so a batch runs them on a thread pool while each
episode stays sequential.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Callable, Dict, Iterable, List, Optional, Tuple, Union

import pytz
from tqdm import tqdm

from model_gateway import BadRequest, ChatModel, ChatRequest, DecodeFailed, GatewayError, ModelUnavailable
from media import MediaRef
from protocol import (
    MALFORMED_CLUE,
    ParsedResponse,
    ResponseSchema,
    parse_response,
    render_iteration_prompt,
    schema_for_task,
)
from sampling import (
    AspectRatioExceeded,
    CropPlan,
    DegenerateClue,
    FramePlan,
    FullImagePlan,
    SamplingConfig,
    crop_region,
    differential_timestamps,
    plan_image_input,
    plan_video_input,
    smart_resize,
    uniform_plan,
)
from schema import MediaKind, TaskKind, VttsRecord
from spacetime import BoundingBox, EmptyAfterClip, TemporalInterval, clip_interval, format_box

logger = logging.getLogger("vtts.itp")

Plan = Union[FramePlan, FullImagePlan, CropPlan]

REUSE_PREVIOUS_PLAN = "reuse_previous_plan"
FALLBACK_UNIFORM = "fallback_uniform"


@dataclass(frozen=True)
class ItpConfig:
    """Loop settings for one run."""
    iterations: int = 3
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    schema: Optional[ResponseSchema] = None  # None: derived from the sample's task
    on_malformed: str = REUSE_PREVIOUS_PLAN
    record_raw: bool = True
    stop_on_repeat: bool = False
    crop_margin: float = 0.10
    caption_frames: bool = True
    carry_answer_forward: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.on_malformed not in (REUSE_PREVIOUS_PLAN, FALLBACK_UNIFORM):
            raise ValueError(f"Unknown on_malformed policy: {self.on_malformed}")

    def schema_for(self, task: TaskKind) -> ResponseSchema:
        return self.schema or schema_for_task(task, sequence_length=self.sampling.tracking_frames)


@dataclass(frozen=True)
class EpisodeState:
    k: int
    history: Tuple[ParsedResponse, ...]
    current_plan: Plan
    initial_plan: Plan
    events: Tuple[dict, ...] = ()


@dataclass
class IterationRecord:
    k: int
    plan: dict
    parsed: ParsedResponse
    raw: Optional[str] = None
    elapsed_ms: float = 0.0

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "plan": self.plan,
            "raw": self.raw,
            "parsed": self.parsed.to_dict(),
            "elapsed_ms": round(self.elapsed_ms, 3),
        }


@dataclass
class EpisodeTrace:
    """Everything one episode did, for scoring and for diagnosing bad clues."""
    sample_id: str
    task: TaskKind
    iterations: List[IterationRecord] = field(default_factory=list)
    final_answer: Optional[str] = None
    final_clue: Optional[list] = None
    fallback_events: List[dict] = field(default_factory=list)
    aborted_at: Optional[int] = None
    error: Optional[str] = None
    started_at: str = ""

    @property
    def aborted(self) -> bool:
        return self.aborted_at is not None

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "task": self.task.value,
            "started_at": self.started_at,
            "iterations": [it.to_dict() for it in self.iterations],
            "final_answer": self.final_answer,
            "final_clue": self.final_clue,
            "fallback_events": list(self.fallback_events),
            "aborted_at": self.aborted_at,
            "error": self.error,
        }


def _now_utc() -> str:
    return datetime.now(pytz.utc).isoformat()


def initial_state(media: MediaRef, task: TaskKind, cfg: ItpConfig) -> EpisodeState:
    """First-pass plan: uniform frames for video, the full image for images."""
    sampling = cfg.sampling
    if media.kind == MediaKind.IMAGE:
        plan: Plan = plan_image_input(media.width, media.height, sampling)
    elif task == TaskKind.TRACKING:
        dims = smart_resize(media.width, media.height, sampling)
        plan = uniform_plan(media.duration, sampling.tracking_frames, dims)
    else:
        n, dims = plan_video_input(media.duration, media.width, media.height, sampling)
        plan = uniform_plan(media.duration, n, dims)
    return EpisodeState(k=1, history=(), current_plan=plan, initial_plan=plan)


def build_iteration_input(
    state: EpisodeState,
    sample: VttsRecord,
    media: MediaRef,
    cfg: ItpConfig,
    backend,
) -> ChatRequest:
    """
    Realize the state's plan into a model request: prompt for iteration k
    plus frames in temporal order, or full image (+ crop).
    """
    schema = cfg.schema_for(sample.task)
    prompt = render_iteration_prompt(sample.question or "", schema, state.history, state.k, sample.options)
    plan = state.current_plan

    if isinstance(plan, FramePlan):
        images = backend.extract_frames(media, plan.timestamps, plan.per_frame_dims)
        captions = [f"Frame at {t:.3f}s" for t in plan.timestamps]
    elif isinstance(plan, CropPlan):
        images = [
            backend.render_image(media, plan.full_image_dims),
            backend.render_image(media, plan.crop_dims, plan.crop_region),
        ]
        captions = ["Full image", f"Crop of region {format_box(plan.crop_region)}"]
    else:
        images = [backend.render_image(media, plan.full_image_dims)]
        captions = ["Full image"]

    return ChatRequest(
        prompt=prompt,
        images=tuple(images),
        image_captions=tuple(captions) if cfg.caption_frames else (),
    )


class _NoRefocus(Exception):
    """The parsed clue cannot drive a new plan."""


def _plan_from_clue(parsed: ParsedResponse, state: EpisodeState, media: MediaRef, cfg: ItpConfig) -> Plan:
    clue = parsed.clue
    if clue is None:
        raise _NoRefocus(MALFORMED_CLUE if MALFORMED_CLUE in parsed.repairs else "MissingClue")

    if media.kind == MediaKind.VIDEO and isinstance(clue, TemporalInterval):
        try:
            clip_interval(clue, media.duration)
        except EmptyAfterClip:
            raise _NoRefocus(EmptyAfterClip.__name__)
        initial = state.initial_plan
        n = len(initial.timestamps)
        if n < 2:
            raise _NoRefocus("TooFewFrames")
        plan = differential_timestamps(media.duration, n, [clue], cfg.sampling, initial.per_frame_dims)
        if plan.fallback:
            raise _NoRefocus(plan.fallback)
        return plan

    if media.kind == MediaKind.IMAGE and isinstance(clue, BoundingBox):
        try:
            return crop_region(media.dims, clue, cfg.crop_margin, cfg.sampling)
        except (EmptyAfterClip, DegenerateClue, AspectRatioExceeded) as e:
            raise _NoRefocus(type(e).__name__)

    raise _NoRefocus("KindMismatch")


def advance_state(
    state: EpisodeState,
    parsed: ParsedResponse,
    cfg: ItpConfig,
    media: MediaRef,
    task: TaskKind,
) -> EpisodeState:
    """
    Move to iteration k+1: append the response and re-plan from its clue.

    A clue that cannot be used (absent, malformed, outside the media, no
    measure, wrong kind) keeps the loop going under cfg.on_malformed and
    is recorded as an event.
    """
    history = state.history + (parsed,)
    if task == TaskKind.TRACKING:
        return replace(state, k=state.k + 1, history=history)

    events = state.events
    try:
        plan = _plan_from_clue(parsed, state, media, cfg)
    except _NoRefocus as e:
        reason = str(e)
        plan = state.current_plan if cfg.on_malformed == REUSE_PREVIOUS_PLAN else state.initial_plan
        logger.info("Iteration %d clue unusable (%s); %s", state.k, reason, cfg.on_malformed)
        events = events + ({"k": state.k, "reason": reason, "action": cfg.on_malformed},)
    return replace(state, k=state.k + 1, history=history, current_plan=plan, events=events)


def _finalize(trace: EpisodeTrace, history: List[ParsedResponse], carry_answer: bool = False) -> None:
    if not history:
        return
    trace.final_answer = history[-1].answer
    if trace.final_answer is None and carry_answer:
        for k in range(len(history) - 1, -1, -1):
            if history[k].answer is not None:
                trace.final_answer = history[k].answer
                trace.fallback_events.append({"k": k + 1, "reason": "AnswerCarriedForward", "action": "carry_forward"})
                break
    for parsed in reversed(history):
        if parsed.clue is not None:
            trace.final_clue = parsed.clue.to_list()
            break


def run_episode(sample: VttsRecord, backend, cfg: ItpConfig, model: ChatModel) -> EpisodeTrace:
    """
    Run up to cfg.iterations perception rounds for one sample.

    Model and decode failures end the episode early with aborted_at set;
    media probe failures propagate.
    """
    trace = EpisodeTrace(sample_id=sample.id, task=sample.task, started_at=_now_utc())
    media = backend.probe(sample.media)
    schema = cfg.schema_for(sample.task)
    state = initial_state(media, sample.task, cfg)
    history: List[ParsedResponse] = []

    for _ in range(cfg.iterations):
        started = time.perf_counter()
        plan_summary = state.current_plan.summary()
        try:
            request = build_iteration_input(state, sample, media, cfg, backend)
            raw = model.complete(request)
        except (ModelUnavailable, BadRequest, DecodeFailed) as e:
            logger.warning("Episode %s aborted at iteration %d: %s", sample.id, state.k, e)
            trace.aborted_at = state.k
            trace.error = f"{type(e).__name__}: {e}"
            break

        parsed = parse_response(raw, schema, strict=False)
        trace.iterations.append(IterationRecord(
            k=state.k,
            plan=plan_summary,
            parsed=parsed,
            raw=raw if cfg.record_raw else None,
            elapsed_ms=(time.perf_counter() - started) * 1000.0,
        ))
        repeated = bool(history) and parsed.clue is not None and parsed.clue == history[-1].clue
        history.append(parsed)
        if cfg.stop_on_repeat and repeated:
            trace.fallback_events.append({"k": state.k, "reason": "ClueRepeated", "action": "stop"})
            break
        if state.k < cfg.iterations:
            state = advance_state(state, parsed, cfg, media, sample.task)

    trace.fallback_events = list(state.events) + trace.fallback_events
    _finalize(trace, history, cfg.carry_answer_forward)
    return trace


def run_batch(
    samples: Iterable[VttsRecord],
    backend,
    cfg: ItpConfig,
    model: ChatModel,
    concurrency: int = 1,
    on_trace: Optional[Callable[[EpisodeTrace], None]] = None,
    progress: bool = False,
) -> Dict[str, EpisodeTrace]:
    """
    Run episodes on a thread pool of `concurrency` workers.

    on_trace is called (from the calling thread) as each episode finishes.
    Samples whose media cannot be probed come back as aborted traces.
    """
    if concurrency < 1:
        raise ValueError(f"concurrency must be >= 1, got {concurrency}")
    samples = list(samples)
    results: Dict[str, EpisodeTrace] = {}

    def _run(sample: VttsRecord) -> EpisodeTrace:
        try:
            return run_episode(sample, backend, cfg, model)
        except GatewayError as e:
            logger.error("Episode %s failed: %s", sample.id, e)
            return EpisodeTrace(
                sample_id=sample.id, task=sample.task, aborted_at=1,
                error=f"{type(e).__name__}: {e}", started_at=_now_utc(),
            )

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = [pool.submit(_run, s) for s in samples]
        for future in tqdm(as_completed(futures), total=len(futures), desc="episodes",
                           disable=not progress, leave=False):
            trace = future.result()
            results[trace.sample_id] = trace
            if on_trace:
                on_trace(trace)
    return results
