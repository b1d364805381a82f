#!/usr/bin/env python3
"""
Dataset Tooling

Loading, validation and corpus statistics for VTTS JSONL records, plus the
curation steps that lean on external models:

    judge (KEEP / DROP: reason)  ->  CoT generation  ->  CoT ranking

Violations and verdicts are returned as data. A judge reply without a
verdict quarantines the record instead of dropping it.
"""

import dataclasses
import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from model_gateway import ChatModel, ChatRequest
from schema import (
    ANSWER_REQUIRED,
    CLUE_REQUIRED,
    CLUE_TYPE,
    MEDIA_KIND,
    DatasetError,
    RecordError,
    VttsRecord,
    normalize_record,
)
from spacetime import BoundingBox, BoxSequence, TemporalInterval, format_clue

logger = logging.getLogger("vtts.dataset")


class UnparseableVerdict(DatasetError):
    """The judge reply carries neither KEEP nor DROP."""


class JoinFailure(DatasetError):
    """Ids in one file have no counterpart in the other."""

    def __init__(self, orphan_ids: Sequence[str]):
        super().__init__(f"Orphan ids: {', '.join(orphan_ids)}")
        self.orphan_ids = list(orphan_ids)


# Violation codes
MISSING_QUESTION = "MissingQuestion"
MISSING_THINK = "MissingThink"
MISSING_CLUE = "MissingClue"
MISSING_ANSWER = "MissingAnswer"
MEDIA_KIND_MISMATCH = "MediaKindMismatch"
KIND_MISMATCH = "KindMismatch"
CLUE_OUT_OF_BOUNDS = "ClueOutOfBounds"


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    record_id: Optional[str] = None

    def to_dict(self) -> dict:
        return {"id": self.record_id, "code": self.code, "message": self.message}


def load_records(path: Path) -> List[VttsRecord]:
    """
    Read a JSONL dataset.

    Raises:
        RecordError: with the 1-based line number of the first bad line
    """
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(normalize_record(json.loads(line)))
            except json.JSONDecodeError as e:
                raise RecordError(f"Line {i} is not valid JSON: {e}")
            except RecordError as e:
                raise RecordError(f"Line {i}: {e}")
    return records


def _extent(rec: VttsRecord, probe) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    source = probe if probe is not None else rec.media
    return (
        getattr(source, "duration", None),
        getattr(source, "width", None) or None,
        getattr(source, "height", None) or None,
    )


def _box_inside(box: BoundingBox, width: float, height: float) -> bool:
    return box.x1 >= 0 and box.y1 >= 0 and box.x2 <= width and box.y2 <= height


def _clue_out_of_bounds(clue, duration, width, height) -> Optional[str]:
    if isinstance(clue, TemporalInterval):
        if clue.start < 0 or (duration is not None and clue.end > duration):
            return f"clue {format_clue(clue)} outside [0, {duration}] s"
        return None
    boxes = list(clue) if isinstance(clue, BoxSequence) else [clue]
    if any(b.x1 < 0 or b.y1 < 0 for b in boxes):
        return f"clue {format_clue(clue)} has negative coordinates"
    if width is not None and height is not None:
        if not all(_box_inside(b, width, height) for b in boxes):
            return f"clue {format_clue(clue)} outside {width}x{height}"
    return None


def validate_record(rec: VttsRecord, probe=None) -> List[Violation]:
    """
    Check one record against the annotation rules.

    Args:
        rec: Record to check
        probe: Probed media extent (anything with duration/width/height);
            defaults to the extent stored on the record

    Returns:
        Violations in a fixed order; empty when the record is valid
    """
    found: List[Violation] = []

    def add(code: str, message: str) -> None:
        found.append(Violation(code, message, rec.id))

    if not rec.question:
        add(MISSING_QUESTION, "question is required")
    if not rec.think:
        add(MISSING_THINK, "think is required")
    if rec.task in CLUE_REQUIRED and rec.clue is None:
        add(MISSING_CLUE, f"{rec.task.value} records need a clue")
    if rec.task in ANSWER_REQUIRED and not rec.answer:
        add(MISSING_ANSWER, f"{rec.task.value} records need an answer")
    if rec.media.kind != MEDIA_KIND[rec.task]:
        add(MEDIA_KIND_MISMATCH, f"{rec.task.value} expects {MEDIA_KIND[rec.task].value} media")

    if rec.clue is not None:
        expected = CLUE_TYPE[rec.task]
        if not isinstance(rec.clue, expected):
            add(KIND_MISMATCH, f"{rec.task.value} expects a {expected.__name__} clue, "
                               f"got {type(rec.clue).__name__}")
        else:
            problem = _clue_out_of_bounds(rec.clue, *_extent(rec, probe))
            if problem:
                add(CLUE_OUT_OF_BOUNDS, problem)
    return found


@dataclass
class CorpusStats:
    total: int = 0
    by_task: Counter = field(default_factory=Counter)
    by_source: Counter = field(default_factory=Counter)
    per_source: Dict[str, Counter] = field(default_factory=dict)
    duplicate_ids: List[str] = field(default_factory=list)

    def _totals(self, key: str) -> int:
        return sum(c[key] for c in self.per_source.values())

    @property
    def temporal_clues(self) -> int:
        return self._totals("temporal_clues")

    @property
    def spatial_clues(self) -> int:
        return self._totals("spatial_clues")

    @property
    def tracking_clues(self) -> int:
        return self._totals("tracking_clues")

    @property
    def thinks(self) -> int:
        return self._totals("thinks")

    @property
    def qa_pairs(self) -> int:
        return self._totals("qa_pairs")

    def merge(self, other: "CorpusStats") -> "CorpusStats":
        per_source = {k: Counter(v) for k, v in self.per_source.items()}
        for source, counts in other.per_source.items():
            per_source.setdefault(source, Counter()).update(counts)
        return CorpusStats(
            total=self.total + other.total,
            by_task=self.by_task + other.by_task,
            by_source=self.by_source + other.by_source,
            per_source=per_source,
            duplicate_ids=sorted(set(self.duplicate_ids) | set(other.duplicate_ids)),
        )

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "temporal_clues": self.temporal_clues,
            "spatial_clues": self.spatial_clues,
            "tracking_clues": self.tracking_clues,
            "thinks": self.thinks,
            "qa_pairs": self.qa_pairs,
            "by_task": dict(sorted(self.by_task.items())),
            "by_source": {s: dict(sorted(self.per_source[s].items())) for s in sorted(self.per_source)},
            "duplicate_ids": list(self.duplicate_ids),
        }


_COUNTED = ("records", "temporal_clues", "spatial_clues", "tracking_clues", "thinks", "qa_pairs")


def corpus_stats(records: Iterable[VttsRecord]) -> CorpusStats:
    """Single pass over records. Duplicate ids are listed, never dropped."""
    stats = CorpusStats()
    seen: Counter = Counter()
    for rec in records:
        stats.total += 1
        stats.by_task[rec.task.value] += 1
        stats.by_source[rec.source] += 1
        counts = stats.per_source.setdefault(rec.source, Counter({k: 0 for k in _COUNTED}))
        counts["records"] += 1
        if isinstance(rec.clue, TemporalInterval):
            counts["temporal_clues"] += 1
        elif isinstance(rec.clue, BoundingBox):
            counts["spatial_clues"] += 1
        elif isinstance(rec.clue, BoxSequence):
            counts["tracking_clues"] += 1
        if rec.think:
            counts["thinks"] += 1
        if rec.question and rec.answer:
            counts["qa_pairs"] += 1
        seen[rec.id] += 1
    stats.duplicate_ids = sorted(i for i, n in seen.items() if n > 1)
    return stats


JUDGE_PROMPT = """You are checking one annotated sample for consistency.

Context (captions of the media):
{context}

Question: {question}
Options: {options}
Answer: {answer}
Clue: {clue}

If the question, answer and clue agree with the context, reply with the single word KEEP.
Otherwise reply DROP: followed by a short reason."""

COT_PROMPT = """Write the step-by-step reasoning that leads from the media to the answer.

Context (captions of the media):
{context}

Question: {question}
Options: {options}
Answer: {answer}
Clue: {clue}

Reason about where in the media the evidence is. Reply with the reasoning only, inside <think></think>."""

RANK_PROMPT = """Rank the candidate reasoning chains for the question below from best to worst.

Question: {question}

{candidates}

Reply with the candidate numbers, best first, separated by commas (e.g. 2,1,3)."""

_VERDICT = re.compile(r"\b(KEEP|DROP)\b\s*[:\-]?\s*(.*)", re.DOTALL)
_PERMUTATION = re.compile(r"\s*\d+(?:\s*,\s*\d+)*\s*")
_THINK = re.compile(r"<think>(.*?)</think>", re.DOTALL | re.IGNORECASE)


def _fields(rec: VttsRecord, context: str) -> dict:
    return {
        "context": context or "(none)",
        "question": rec.question or "",
        "options": " ".join(rec.options) if rec.options else "(none)",
        "answer": rec.answer or "(none)",
        "clue": format_clue(rec.clue) if rec.clue is not None else "(none)",
    }


@dataclass(frozen=True)
class JudgeVerdict:
    keep: bool
    reason: str = ""

    def to_dict(self) -> dict:
        return {"verdict": "keep" if self.keep else "drop", "reason": self.reason}


def parse_verdict(text: str) -> JudgeVerdict:
    match = _VERDICT.search(text)
    if not match:
        raise UnparseableVerdict(f"No KEEP/DROP token in judge reply: {text[:120]!r}")
    if match.group(1) == "KEEP":
        return JudgeVerdict(keep=True)
    return JudgeVerdict(keep=False, reason=match.group(2).strip())


def judge_consistency(rec: VttsRecord, context: str, judge: ChatModel) -> JudgeVerdict:
    """Ask the judge whether the record's QA and clue agree with the context."""
    reply = judge.complete(ChatRequest(prompt=JUDGE_PROMPT.format(**_fields(rec, context))))
    return parse_verdict(reply)


def request_cot(rec: VttsRecord, reasoner: ChatModel, context: str = "") -> str:
    reply = reasoner.complete(ChatRequest(prompt=COT_PROMPT.format(**_fields(rec, context))))
    match = _THINK.search(reply)
    return (match.group(1) if match else reply).strip()


INVALID_PERMUTATION = "InvalidPermutation"


@dataclass(frozen=True)
class RankResult:
    ordered: List[Tuple[VttsRecord, str]]
    flags: Tuple[str, ...] = ()


def parse_permutation(text: str, n: int) -> Optional[List[int]]:
    """0-based order from a "2,1,3" reply, or None unless it is a permutation of 1..n."""
    if not _PERMUTATION.fullmatch(text):
        return None
    order = [int(tok) for tok in text.split(",")]
    if sorted(order) != list(range(1, n + 1)):
        return None
    return [i - 1 for i in order]


def rank_candidates(candidates: Sequence[Tuple[VttsRecord, str]], ranker: ChatModel) -> RankResult:
    """
    Order (record, CoT) candidates best first using the ranker's permutation.

    A single candidate is returned as-is without a call; a reply that is not
    a permutation keeps the input order and is flagged.
    """
    if not candidates:
        raise ValueError("Need at least one candidate")
    if len(candidates) == 1:
        return RankResult(ordered=list(candidates))

    listing = "\n\n".join(
        f"Candidate {i}:\nAnswer: {rec.answer or '(none)'}\nReasoning: {cot}"
        for i, (rec, cot) in enumerate(candidates, start=1)
    )
    reply = ranker.complete(ChatRequest(prompt=RANK_PROMPT.format(
        question=candidates[0][0].question or "", candidates=listing)))
    order = parse_permutation(reply, len(candidates))
    if order is None:
        logger.warning("Ranker reply is not a permutation of 1..%d: %r", len(candidates), reply[:80])
        return RankResult(ordered=list(candidates), flags=(INVALID_PERMUTATION,))
    return RankResult(ordered=[candidates[i] for i in order])


@dataclass
class CurationResult:
    kept: List[VttsRecord] = field(default_factory=list)
    dropped: List[VttsRecord] = field(default_factory=list)
    quarantined: List[VttsRecord] = field(default_factory=list)

    def counts(self) -> dict:
        return {"keep": len(self.kept), "drop": len(self.dropped), "quarantine": len(self.quarantined)}


def default_context(rec: VttsRecord) -> str:
    return str(rec.extra.get("caption", ""))


def _curate_one(
    rec: VttsRecord,
    judge: ChatModel,
    reasoner: Optional[ChatModel],
    ranker: Optional[ChatModel],
    context_for: Callable[[VttsRecord], str],
    cot_candidates: int,
) -> Tuple[str, VttsRecord]:
    context = context_for(rec)
    try:
        verdict = judge_consistency(rec, context, judge)
    except UnparseableVerdict as e:
        logger.warning("Quarantining %s: %s", rec.id, e)
        extra = {**rec.extra, "judge": {"verdict": "unparseable", "reason": str(e)}}
        return "quarantine", dataclasses.replace(rec, extra=extra)

    extra = {**rec.extra, "judge": verdict.to_dict()}
    if not verdict.keep:
        return "drop", dataclasses.replace(rec, extra=extra)

    think = rec.think
    if reasoner is not None:
        cots = [request_cot(rec, reasoner, context) for _ in range(cot_candidates)]
        candidates = [(rec, cot) for cot in cots]
        ranked = rank_candidates(candidates, ranker) if ranker is not None else RankResult(candidates)
        think = ranked.ordered[0][1]
        if ranked.flags:
            extra["rank_flags"] = list(ranked.flags)
    return "keep", dataclasses.replace(rec, think=think, extra=extra)


def curate_records(
    records: Sequence[VttsRecord],
    judge: ChatModel,
    reasoner: Optional[ChatModel] = None,
    ranker: Optional[ChatModel] = None,
    context_for: Callable[[VttsRecord], str] = default_context,
    cot_candidates: int = 1,
    concurrency: int = 1,
) -> CurationResult:
    """
    Judge every record, then (for kept ones) generate and rank CoTs.

    Every input record ends up in exactly one of kept / dropped / quarantined,
    with the judge verdict stored under extra["judge"].
    """
    if cot_candidates < 1:
        raise ValueError(f"cot_candidates must be >= 1, got {cot_candidates}")
    result = CurationResult()
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        outcomes = pool.map(
            lambda r: _curate_one(r, judge, reasoner, ranker, context_for, cot_candidates), records)
        for outcome, rec in outcomes:
            getattr(result, {"keep": "kept", "drop": "dropped", "quarantine": "quarantined"}[outcome]).append(rec)
    return result
