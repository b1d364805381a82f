#!/usr/bin/env python3
"""
Clue Geometry

Temporal intervals (seconds), pixel boxes and per-frame box sequences, plus
every overlap measure used by rewards and metrics.

Units:
- Time: seconds, continuous reals
- Space: pixels, continuous reals, origin top-left
- Ratios: dimensionless, 0-1

Zero-measure inputs never produce NaN: a degenerate prediction is scored by
membership (a point inside the ground truth counts as fully overlapping).
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union


class GeometryError(Exception):
    """Base class for geometry errors."""


class InvalidGeometry(GeometryError, ValueError):
    """Raised when a value violates its construction invariants."""


class LengthMismatch(GeometryError):
    """Raised when paired box sequences differ in length."""


class EmptyAfterClip(GeometryError):
    """Raised when a clue lies entirely outside the media bounds."""


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class TemporalInterval:
    """
    A time span in seconds.

    Ordering and finiteness are enforced here. Negative times are
    representable so model output can be clipped; ground-truth annotations
    are checked for non-negativity by dataset validation.
    """
    start: float
    end: float

    def __post_init__(self):
        object.__setattr__(self, "start", float(self.start))
        object.__setattr__(self, "end", float(self.end))
        if not _finite(self.start, self.end):
            raise InvalidGeometry(f"Non-finite interval bounds: [{self.start}, {self.end}]")
        if self.start > self.end:
            raise InvalidGeometry(f"Reversed interval: [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start

    def contains(self, t: float) -> bool:
        return self.start <= t <= self.end

    def to_list(self) -> list:
        return [self.start, self.end]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box [x1, y1, x2, y2]."""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not _finite(self.x1, self.y1, self.x2, self.y2):
            raise InvalidGeometry(f"Non-finite box: {self.to_list()}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise InvalidGeometry(f"Reversed box: {self.to_list()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class BoxSequence:
    """One box per sampled frame, in frame order."""
    boxes: Tuple[BoundingBox, ...]

    def __post_init__(self):
        boxes = tuple(self.boxes)
        if not boxes:
            raise InvalidGeometry("Box sequence must not be empty")
        if not all(isinstance(b, BoundingBox) for b in boxes):
            raise InvalidGeometry("Box sequence elements must be BoundingBox values")
        object.__setattr__(self, "boxes", boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def to_list(self) -> list:
        return [b.to_list() for b in self.boxes]


Clue = Union[TemporalInterval, BoundingBox, BoxSequence]


def interval_iou(a: TemporalInterval, b: TemporalInterval) -> float:
    """Temporal intersection over union."""
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    if union <= 0.0:
        # Both are points
        return 1.0 if a.start == b.start else 0.0
    return inter / union


def interval_iop(pred: TemporalInterval, gt: TemporalInterval) -> float:
    """Intersection over prediction: share of the prediction covered by gt."""
    if pred.length == 0.0:
        return 1.0 if gt.contains(pred.start) else 0.0
    inter = max(0.0, min(pred.end, gt.end) - max(pred.start, gt.start))
    return inter / pred.length


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Pixel-area intersection over union."""
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 1.0 if a == b else 0.0
    return inter / union


def track_mean_iou(pred: BoxSequence, gt: BoxSequence) -> float:
    """Mean per-frame box IoU over two equal-length sequences."""
    if len(pred) != len(gt):
        raise LengthMismatch(f"Sequence lengths differ: pred={len(pred)} gt={len(gt)}")
    return math.fsum(box_iou(p, g) for p, g in zip(pred, gt)) / len(gt)


def per_frame_ious(pred: BoxSequence, gt: BoxSequence) -> list:
    """Per-frame IoUs; frames the prediction does not cover score 0."""
    ious = [box_iou(p, g) for p, g in zip(pred, gt)]
    ious.extend([0.0] * (len(gt) - len(ious)))
    return ious


def _clamp(value: float, low: float, high: float) -> float:
    return min(max(value, low), high)


def clip_interval(i: TemporalInterval, duration: float) -> TemporalInterval:
    """Clamp both endpoints into [0, duration]."""
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if i.end < 0.0 or i.start > duration:
        raise EmptyAfterClip(f"Interval [{i.start}, {i.end}] lies outside [0, {duration}]")
    return TemporalInterval(_clamp(i.start, 0.0, duration), _clamp(i.end, 0.0, duration))


def clamp_box(b: BoundingBox, width: float, height: float) -> BoundingBox:
    """Clamp a box into the [0, width] x [0, height] image plane."""
    if not (width > 0 and height > 0):
        raise ValueError(f"image dims must be positive, got {width}x{height}")
    if b.x2 < 0.0 or b.y2 < 0.0 or b.x1 > width or b.y1 > height:
        raise EmptyAfterClip(f"Box {b.to_list()} lies outside {width}x{height}")
    return BoundingBox(
        _clamp(b.x1, 0.0, width),
        _clamp(b.y1, 0.0, height),
        _clamp(b.x2, 0.0, width),
        _clamp(b.y2, 0.0, height),
    )


def interval_l1(pred: TemporalInterval, gt: TemporalInterval) -> float:
    """Endpoint L1 distance normalised by twice the ground-truth length."""
    dist = abs(pred.start - gt.start) + abs(pred.end - gt.end)
    scale = 2.0 * gt.length
    if scale == 0.0:
        return 0.0 if dist == 0.0 else 1.0
    return dist / scale


def box_l1(pred: BoundingBox, gt: BoundingBox) -> float:
    """Corner L1 distance normalised by the ground-truth perimeter."""
    dist = (abs(pred.x1 - gt.x1) + abs(pred.y1 - gt.y1)
            + abs(pred.x2 - gt.x2) + abs(pred.y2 - gt.y2))
    scale = 2.0 * (gt.width + gt.height)
    if scale == 0.0:
        return 0.0 if dist == 0.0 else 1.0
    return dist / scale


def _fmt(value: float) -> str:
    return repr(float(value))


def format_interval(i: TemporalInterval) -> str:
    """Canonical literal, e.g. "[6.0, 11.9]"."""
    return f"[{_fmt(i.start)}, {_fmt(i.end)}]"


def format_box(b: BoundingBox) -> str:
    return "[" + ", ".join(_fmt(v) for v in b.to_list()) + "]"


def format_clue(clue: Clue) -> str:
    if isinstance(clue, TemporalInterval):
        return format_interval(clue)
    if isinstance(clue, BoundingBox):
        return format_box(clue)
    return ", ".join(format_box(b) for b in clue)


def clue_from_list(value: Sequence, sequence: bool = False) -> Clue:
    """Build a clue from its JSON list form ([a, b], [x1, y1, x2, y2] or a list of boxes)."""
    if not isinstance(value, (list, tuple)):
        raise InvalidGeometry(f"Clue must be a list, got {type(value).__name__}")
    if sequence or (value and isinstance(value[0], (list, tuple))):
        if any(not isinstance(box, (list, tuple)) or len(box) != 4 for box in value):
            raise InvalidGeometry("Every box in a sequence needs 4 values")
        return BoxSequence(tuple(BoundingBox(*_numbers(box)) for box in value))
    if len(value) == 2:
        return TemporalInterval(*_numbers(value))
    if len(value) == 4:
        return BoundingBox(*_numbers(value))
    raise InvalidGeometry(f"Cannot interpret clue literal of arity {len(value)}")


def _numbers(values: Sequence) -> list:
    # bool is an int subclass; true/false in JSON are not coordinates
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        raise InvalidGeometry(f"Clue values must be numbers: {list(values)!r}")
    return [float(v) for v in values]
