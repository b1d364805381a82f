#!/usr/bin/env python3
"""
Canonical Record Schema for VTTS Datasets

One record per line (JSONL) with the five annotation types: question,
options, think, clue and answer, plus identity and media fields.

Field order on disk:
    id, source, media {kind, path, duration, width, height}, task,
    question, options, think, clue, answer

Units:
- Temporal clues: seconds, [start, end]
- Spatial clues: pixels, [x1, y1, x2, y2], origin top-left
- Tracking clues: one pixel box per sampled frame
- Media duration: seconds; width/height: pixels
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional
import json

from spacetime import (
    BoundingBox,
    BoxSequence,
    Clue,
    InvalidGeometry,
    TemporalInterval,
    clue_from_list,
)


class DatasetError(Exception):
    """Base class for dataset errors."""


class RecordError(DatasetError):
    """A JSONL line cannot be turned into a record at all."""


class TaskKind(str, Enum):
    VIDEO_QA = "video_qa"
    TEMPORAL_CLUE = "temporal_clue"
    IMAGE_REASONING = "image_reasoning"
    SPATIAL_CLUE = "spatial_clue"
    TRACKING = "tracking"
    GROUNDED_QA = "grounded_qa"


class MediaKind(str, Enum):
    VIDEO = "video"
    IMAGE = "image"


# Clue geometry each task carries
CLUE_TYPE = {
    TaskKind.VIDEO_QA: TemporalInterval,
    TaskKind.TEMPORAL_CLUE: TemporalInterval,
    TaskKind.GROUNDED_QA: TemporalInterval,
    TaskKind.IMAGE_REASONING: BoundingBox,
    TaskKind.SPATIAL_CLUE: BoundingBox,
    TaskKind.TRACKING: BoxSequence,
}

MEDIA_KIND = {
    TaskKind.VIDEO_QA: MediaKind.VIDEO,
    TaskKind.TEMPORAL_CLUE: MediaKind.VIDEO,
    TaskKind.GROUNDED_QA: MediaKind.VIDEO,
    TaskKind.TRACKING: MediaKind.VIDEO,
    TaskKind.IMAGE_REASONING: MediaKind.IMAGE,
    TaskKind.SPATIAL_CLUE: MediaKind.IMAGE,
}

CLUE_REQUIRED = {TaskKind.TEMPORAL_CLUE, TaskKind.SPATIAL_CLUE, TaskKind.TRACKING, TaskKind.GROUNDED_QA}
ANSWER_REQUIRED = {TaskKind.VIDEO_QA, TaskKind.IMAGE_REASONING, TaskKind.GROUNDED_QA}


@dataclass
class MediaInfo:
    """Where the media lives and, once known, its probed extent."""
    kind: MediaKind
    path: str
    duration: Optional[float] = None  # seconds, video only
    width: Optional[int] = None
    height: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary, excluding None values"""
        data = {
            "kind": self.kind.value,
            "path": self.path,
            "duration": self.duration,
            "width": self.width,
            "height": self.height,
        }
        return {k: v for k, v in data.items() if v is not None}


@dataclass
class VttsRecord:
    """
    A single annotated sample.

    Question and think are expected on every record; validation reports
    their absence instead of this type refusing to hold it, so a broken
    line can still be listed with all of its problems.
    """
    id: str
    source: str
    media: MediaInfo
    task: TaskKind
    question: Optional[str] = None
    options: Optional[List[str]] = None
    think: Optional[str] = None
    clue: Optional[Clue] = None
    answer: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)  # e.g. persisted judge verdicts

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary in canonical key order, excluding None values"""
        data = {
            "id": self.id,
            "source": self.source,
            "media": self.media.to_dict(),
            "task": self.task.value,
            "question": self.question,
            "options": list(self.options) if self.options is not None else None,
            "think": self.think,
            "clue": self.clue.to_list() if self.clue is not None else None,
            "answer": self.answer,
        }
        data = {k: v for k, v in data.items() if v is not None}
        for key in sorted(self.extra):
            data[key] = self.extra[key]
        return data

    def to_json(self) -> str:
        """Convert to a single JSONL line"""
        return json.dumps(self.to_dict(), ensure_ascii=False)


_KNOWN_FIELDS = {"id", "source", "media", "task", "question", "options", "think", "clue", "answer"}


def _optional_number(value: Any, name: str) -> Optional[float]:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise RecordError(f"media.{name} must be a number, got {value!r}")
    return value


def normalize_media(raw: Any) -> MediaInfo:
    """Convert a raw media mapping into MediaInfo."""
    if not isinstance(raw, dict):
        raise RecordError("media must be an object")
    try:
        kind = MediaKind(raw.get("kind"))
    except ValueError:
        raise RecordError(f"Unknown media kind: {raw.get('kind')!r}")
    path = raw.get("path")
    if not isinstance(path, str) or not path:
        raise RecordError("media.path must be a non-empty string")
    duration = _optional_number(raw.get("duration"), "duration")
    width = _optional_number(raw.get("width"), "width")
    height = _optional_number(raw.get("height"), "height")
    return MediaInfo(
        kind=kind,
        path=path,
        duration=float(duration) if duration is not None else None,
        width=int(width) if width is not None else None,
        height=int(height) if height is not None else None,
    )


def normalize_record(raw: Dict[str, Any]) -> VttsRecord:
    """
    Convert one decoded JSONL object to a VttsRecord.

    Args:
        raw: Decoded JSON object

    Returns:
        VttsRecord with typed media, task and clue

    Raises:
        RecordError: when identity, task, media or clue geometry are unusable
    """
    if not isinstance(raw, dict):
        raise RecordError("Record must be a JSON object")
    record_id = raw.get("id")
    if record_id is None or record_id == "":
        raise RecordError("Record has no id")
    try:
        task = TaskKind(raw.get("task"))
    except ValueError:
        raise RecordError(f"Unknown task kind: {raw.get('task')!r}")

    clue = None
    if raw.get("clue") is not None:
        try:
            clue = clue_from_list(raw["clue"])
        except (InvalidGeometry, TypeError) as e:
            raise RecordError(f"Bad clue for {record_id}: {e}")

    options = raw.get("options")
    if options is not None and not isinstance(options, list):
        raise RecordError(f"options must be a list for {record_id}")

    return VttsRecord(
        id=str(record_id),
        source=str(raw.get("source", "unknown")),
        media=normalize_media(raw.get("media")),
        task=task,
        question=raw.get("question") or None,
        options=[str(o) for o in options] if options is not None else None,
        think=raw.get("think") or None,
        clue=clue,
        answer=str(raw["answer"]) if raw.get("answer") not in (None, "") else None,
        extra={k: v for k, v in raw.items() if k not in _KNOWN_FIELDS},
    )
