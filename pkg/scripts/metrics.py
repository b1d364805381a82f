#!/usr/bin/env python3
"""
Evaluation Metrics and Reports

Grounding, grounded-QA, tracking and multiple-choice statistics, aggregated
with exact rational sums so the order episodes finish in never changes a
single bit of a report.

Thresholds are inclusive (IoU >= t) unless strict=True.

Report names are "<task>/<metric>", e.g. "temporal_clue/R@0.5".
"""

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from rewards import answer_reward
from schema import CLUE_TYPE, TaskKind, VttsRecord
from spacetime import (
    BoundingBox,
    BoxSequence,
    InvalidGeometry,
    LengthMismatch,
    TemporalInterval,
    box_iou,
    clue_from_list,
    interval_iop,
    interval_iou,
    per_frame_ious,
)

logger = logging.getLogger("vtts.metrics")


class MetricError(Exception):
    """Base class for metric errors."""


class EmptyInput(MetricError):
    """A metric was asked for over no samples."""


class ReportError(MetricError):
    """A report violates its own invariants and cannot be written."""


class ReportIoError(MetricError):
    """A report could not be written to disk."""


@dataclass(frozen=True)
class Metric:
    value: float
    count: int


@dataclass
class MeanAccumulator:
    """Exact running mean; add/merge in any order give identical results."""
    total: Fraction = field(default_factory=Fraction)
    count: int = 0

    def add(self, x: float) -> None:
        self.total += Fraction(x)
        self.count += 1

    def merge(self, other: "MeanAccumulator") -> "MeanAccumulator":
        return MeanAccumulator(self.total + other.total, self.count + other.count)

    def metric(self) -> Metric:
        if self.count == 0:
            raise EmptyInput("No samples")
        return Metric(float(self.total / self.count), self.count)


@dataclass
class RateAccumulator:
    hits: int = 0
    count: int = 0

    def add(self, hit: bool) -> None:
        self.hits += int(bool(hit))
        self.count += 1

    def merge(self, other: "RateAccumulator") -> "RateAccumulator":
        return RateAccumulator(self.hits + other.hits, self.count + other.count)

    def metric(self) -> Metric:
        if self.count == 0:
            raise EmptyInput("No samples")
        return Metric(float(Fraction(self.hits, self.count)), self.count)


def _passes(value: float, threshold: float, strict: bool) -> bool:
    return value > threshold if strict else value >= threshold


def _label(prefix: str, threshold: float) -> str:
    return f"{prefix}@{threshold:g}"


def overlap_summary(
    values: Iterable[float],
    mean_name: str,
    prefix: str,
    thresholds: Sequence[float],
    strict: bool = False,
) -> Dict[str, Metric]:
    """Mean overlap plus the share of samples at or above each threshold."""
    mean = MeanAccumulator()
    rates = {t: RateAccumulator() for t in thresholds}
    for v in values:
        mean.add(v)
        for t, acc in rates.items():
            acc.add(_passes(v, t, strict))
    if mean.count == 0:
        raise EmptyInput(f"No samples for {mean_name}")
    summary = {mean_name: mean.metric()}
    for t, acc in rates.items():
        summary[_label(prefix, t)] = acc.metric()
    return summary


def temporal_grounding_metrics(
    pairs: Sequence[Tuple[Optional[TemporalInterval], TemporalInterval]],
    thresholds: Sequence[float] = (0.3, 0.5, 0.7),
    strict: bool = False,
) -> Dict[str, Metric]:
    """mIoU and R@t over (pred, gt) intervals; a missing prediction scores IoU 0."""
    if not pairs:
        raise EmptyInput("No temporal grounding pairs")
    ious = [interval_iou(p, g) if p is not None else 0.0 for p, g in pairs]
    return overlap_summary(ious, "mIoU", "R", thresholds, strict)


def spatial_grounding_metrics(
    pairs: Sequence[Tuple[Optional[BoundingBox], BoundingBox]],
    thresholds: Sequence[float] = (0.5,),
    strict: bool = False,
) -> Dict[str, Metric]:
    if not pairs:
        raise EmptyInput("No spatial grounding pairs")
    ious = [box_iou(p, g) if p is not None else 0.0 for p, g in pairs]
    return overlap_summary(ious, "mIoU", "Acc", thresholds, strict)


@dataclass(frozen=True)
class GroundedRecord:
    qa_correct: bool
    iop: float
    iou: float = 0.0

    def __post_init__(self):
        for name in ("iop", "iou"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


def grounded_qa_metrics(
    records: Sequence[GroundedRecord],
    thresholds: Sequence[float] = (0.3, 0.5),
    strict: bool = False,
    gqa_rule: Optional[Callable[[GroundedRecord], bool]] = None,
) -> Dict[str, Metric]:
    """
    mIoP, IoP@t, Acc@IoP@0.5 (grounded at 0.5 AND answered correctly),
    Acc@GQA, plus plain QA accuracy and mIoU.

    Acc@GQA uses the same rule as Acc@IoP@0.5 unless gqa_rule is given.
    """
    if not records:
        raise EmptyInput("No grounded QA records")

    def grounded_and_correct(r: GroundedRecord) -> bool:
        return r.qa_correct and _passes(r.iop, 0.5, strict)

    rule = gqa_rule or grounded_and_correct
    acc_iop, acc_gqa, acc_qa, miou = RateAccumulator(), RateAccumulator(), RateAccumulator(), MeanAccumulator()
    for r in records:
        acc_iop.add(grounded_and_correct(r))
        acc_gqa.add(rule(r))
        acc_qa.add(r.qa_correct)
        miou.add(r.iou)

    summary = overlap_summary([r.iop for r in records], "mIoP", "IoP", thresholds, strict)
    summary["Acc@IoP@0.5"] = acc_iop.metric()
    summary["Acc@GQA"] = acc_gqa.metric()
    summary["Acc@QA"] = acc_qa.metric()
    summary["mIoU"] = miou.metric()
    return summary


def tracking_metrics(
    episodes: Sequence[Sequence[float]],
    thresholds: Sequence[float] = (0.5, 0.75),
    strict: bool = False,
) -> Dict[str, Metric]:
    """AO and SR@t over per-frame IoUs pooled across all episodes."""
    if not episodes:
        raise EmptyInput("No tracking episodes")
    if any(len(ep) == 0 for ep in episodes):
        raise EmptyInput("Tracking episode without frames")
    frames = [iou for ep in episodes for iou in ep]
    return overlap_summary(frames, "AO", "SR", thresholds, strict)


def mcq_accuracy(preds: Sequence[Optional[str]], gts: Sequence[str]) -> Metric:
    if len(preds) != len(gts):
        raise LengthMismatch(f"preds={len(preds)} gts={len(gts)}")
    if not gts:
        raise EmptyInput("No answers")
    acc = RateAccumulator()
    for p, g in zip(preds, gts):
        acc.add(answer_reward(p, g, "mcq") == 1.0)
    return acc.metric()


@dataclass
class MetricReport:
    """Named metrics with their sample counts, plus run provenance."""
    preset: str
    model: str
    iterations: int
    metrics: Dict[str, Metric] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "model": self.model,
            "K": self.iterations,
            "metrics": {name: {"value": m.value, "count": m.count} for name, m in self.metrics.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(
            preset=data["preset"],
            model=data["model"],
            iterations=int(data["K"]),
            metrics={k: Metric(float(v["value"]), int(v["count"])) for k, v in data["metrics"].items()},
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value", "count"])
        for name in sorted(self.metrics):
            m = self.metrics[name]
            writer.writerow([name, repr(m.value), m.count])
        return buf.getvalue()

    def to_table(self) -> str:
        names = sorted(self.metrics)
        width = max([len("metric")] + [len(n) for n in names])
        lines = [
            f"preset: {self.preset}  model: {self.model}  K: {self.iterations}",
            "",
            f"{'metric':<{width}}  {'value':>8}  {'count':>7}",
            f"{'-' * width}  {'-' * 8}  {'-' * 7}",
        ]
        for name in names:
            m = self.metrics[name]
            lines.append(f"{name:<{width}}  {m.value:>8.4f}  {m.count:>7d}")
        return "\n".join(lines) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def write_report(report: MetricReport, path: Path) -> List[Path]:
    """
    Write the JSON report plus .csv and .txt companions next to it.

    Returns:
        Paths written, JSON first

    Raises:
        ReportError: a metric has no samples behind it
        ReportIoError: the files could not be written
    """
    path = Path(path)
    for name, m in report.metrics.items():
        if m.count <= 0:
            raise ReportError(f"Metric {name} has no samples")
    document = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    outputs = [
        (path, document),
        (path.with_suffix(".csv"), report.to_csv()),
        (path.with_suffix(".txt"), report.to_table()),
    ]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        for target, text in outputs:
            _atomic_write(target, text)
    except OSError as e:
        raise ReportIoError(f"Failed to write report {path}: {e}")
    return [target for target, _ in outputs]


def load_report(path: Path) -> MetricReport:
    with open(path) as f:
        return MetricReport.from_dict(json.load(f))


# Tasks whose metrics compare against the ground-truth clue
CLUE_SCORED = (TaskKind.TEMPORAL_CLUE, TaskKind.SPATIAL_CLUE, TaskKind.TRACKING, TaskKind.GROUNDED_QA)


def has_scorable_clue(record: VttsRecord) -> bool:
    """True when the record's clue is present and of its task's geometry."""
    return isinstance(record.clue, CLUE_TYPE[record.task])


def _trace_clue(trace: dict, expected: type):
    value = trace.get("final_clue")
    if value is None:
        return None
    try:
        clue = clue_from_list(value)
    except (InvalidGeometry, TypeError):
        return None
    if expected is BoxSequence and isinstance(clue, BoundingBox):
        clue = BoxSequence((clue,))
    return clue if isinstance(clue, expected) else None


def answer_kind_for(record: VttsRecord) -> str:
    """MCQ scoring when the record lists options, exact match otherwise."""
    return "mcq" if record.options else "exact"


def _answer_correct(record: VttsRecord, trace: dict) -> bool:
    if not record.answer:
        return False
    try:
        return answer_reward(trace.get("final_answer"), record.answer, answer_kind_for(record)) == 1.0
    except ValueError:
        # Options listed but the ground truth carries no letter
        return answer_reward(trace.get("final_answer"), record.answer, "exact") == 1.0


def _task_summary(task: TaskKind, pairs: List[Tuple[VttsRecord, dict]], strict: bool) -> Dict[str, Metric]:
    if task in (TaskKind.VIDEO_QA, TaskKind.IMAGE_REASONING):
        acc = RateAccumulator()
        for record, trace in pairs:
            acc.add(_answer_correct(record, trace))
        return {"Acc": acc.metric()}
    if task == TaskKind.TEMPORAL_CLUE:
        return temporal_grounding_metrics(
            [(_trace_clue(t, TemporalInterval), r.clue) for r, t in pairs], strict=strict)
    if task == TaskKind.SPATIAL_CLUE:
        return spatial_grounding_metrics(
            [(_trace_clue(t, BoundingBox), r.clue) for r, t in pairs], strict=strict)
    if task == TaskKind.TRACKING:
        episodes = []
        for record, trace in pairs:
            pred = _trace_clue(trace, BoxSequence)
            episodes.append(per_frame_ious(pred, record.clue) if pred else [0.0] * len(record.clue))
        return tracking_metrics(episodes, strict=strict)
    grounded = []
    for record, trace in pairs:
        pred = _trace_clue(trace, TemporalInterval)
        grounded.append(GroundedRecord(
            qa_correct=_answer_correct(record, trace),
            iop=interval_iop(pred, record.clue) if pred else 0.0,
            iou=interval_iou(pred, record.clue) if pred else 0.0,
        ))
    return grounded_qa_metrics(grounded, strict=strict)


def score_traces(
    records: Dict[str, VttsRecord],
    traces: Dict[str, dict],
    preset: str,
    model: str,
    iterations: int,
    strict: bool = False,
) -> MetricReport:
    """
    Score finished traces against their records, grouped by task kind.

    Aborted episodes stay in the denominators: no answer is wrong, no clue
    overlaps nothing. Records of a grounding task whose ground-truth clue is
    missing or of the wrong geometry are left out of that task's metrics and
    reported as an Unscorable rate.
    """
    by_task: Dict[TaskKind, List[Tuple[VttsRecord, dict]]] = {}
    for record_id in sorted(records):
        trace = traces.get(record_id)
        if trace is None:
            logger.warning("No trace for record %s; skipped in report", record_id)
            continue
        record = records[record_id]
        by_task.setdefault(record.task, []).append((record, trace))

    report = MetricReport(preset=preset, model=model, iterations=iterations)
    for task in sorted(by_task, key=lambda t: t.value):
        everything = by_task[task]
        pairs = everything
        summary: Dict[str, Metric] = {}

        if task in CLUE_SCORED:
            pairs = [(r, t) for r, t in everything if has_scorable_clue(r)]
            skipped = len(everything) - len(pairs)
            if skipped:
                logger.warning("%d %s record(s) lack a usable ground-truth clue; left out of grounding metrics",
                               skipped, task.value)

        if pairs:
            summary = _task_summary(task, pairs, strict)

        aborted = RateAccumulator()
        for _, trace in everything:
            aborted.add(trace.get("aborted_at") is not None)
        summary["Aborted"] = aborted.metric()
        if len(pairs) < len(everything):
            summary["Unscorable"] = Metric(
                float(Fraction(len(everything) - len(pairs), len(everything))), len(everything))

        for name, metric in summary.items():
            report.metrics[f"{task.value}/{name}"] = metric
    return report
