#!/usr/bin/env python3
"""
Visual Input Planning

Turns media extent plus the latest clue into the visual input for the next
perception iteration:

- Video: a frame count and per-frame size within the pixel budget, then a
  uniform timestamp plan (first pass) or a differential plan that puts
  key_ratio of the frames inside the clue and spreads the rest elsewhere.
- Image: the full image resized to patch multiples, plus a padded crop of
  the clue box on later passes.

Everything here is deterministic planning; decoding happens in media.py.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from spacetime import (
    BoundingBox,
    EmptyAfterClip,
    TemporalInterval,
    clamp_box,
    clip_interval,
)

logger = logging.getLogger("vtts.sampling")

PATCH = 28
PATCH_AREA = PATCH * PATCH

# Distinct timestamps are kept at millisecond resolution
DEDUP_SCALE = 1000


class SamplingError(Exception):
    """Base class for sampling errors."""


class DegenerateClue(SamplingError):
    """The clue has no usable measure (zero length or zero area)."""


class AspectRatioExceeded(SamplingError):
    """Width/height ratio is beyond what the vision encoder accepts."""


@dataclass(frozen=True)
class SamplingConfig:
    """Frame budget and resize bounds for one configuration preset."""
    fps: float = 2.0
    min_frames: int = 64
    max_frames: int = 2048
    key_ratio: float = 0.5
    per_frame_min_pixels: int = 128 * PATCH_AREA
    per_frame_max_pixels: int = 768 * PATCH_AREA
    total_pixel_budget: int = 16384 * PATCH_AREA
    image_min_pixels: int = 4 * PATCH_AREA
    image_max_pixels: int = 768 * PATCH_AREA
    patch_factor: int = PATCH
    max_aspect_ratio: float = 200.0
    tracking_frames: int = 8

    def __post_init__(self):
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if not 0 < self.min_frames <= self.max_frames:
            raise ValueError(f"Need 0 < min_frames <= max_frames, got {self.min_frames}..{self.max_frames}")
        if not 0.0 <= self.key_ratio <= 1.0:
            raise ValueError(f"key_ratio must be in [0, 1], got {self.key_ratio}")
        if self.per_frame_min_pixels > self.per_frame_max_pixels:
            raise ValueError("per_frame_min_pixels exceeds per_frame_max_pixels")
        if self.image_min_pixels > self.image_max_pixels:
            raise ValueError("image_min_pixels exceeds image_max_pixels")
        if self.patch_factor < 1:
            raise ValueError(f"patch_factor must be >= 1, got {self.patch_factor}")
        if self.tracking_frames < 1:
            raise ValueError(f"tracking_frames must be >= 1, got {self.tracking_frames}")


@dataclass(frozen=True)
class FramePlan:
    """Timestamps (seconds, strictly increasing) to decode for one request."""
    timestamps: Tuple[float, ...]
    per_frame_dims: Optional[Tuple[int, int]] = None
    inside_clue_mask: Tuple[bool, ...] = ()
    clue_segments: Tuple[TemporalInterval, ...] = ()
    fallback: Optional[str] = None

    def __post_init__(self):
        if not self.inside_clue_mask:
            object.__setattr__(self, "inside_clue_mask", (False,) * len(self.timestamps))
        if len(self.inside_clue_mask) != len(self.timestamps):
            raise ValueError("inside_clue_mask must match timestamps")

    @property
    def inside_count(self) -> int:
        return sum(self.inside_clue_mask)

    def summary(self) -> dict:
        return {
            "kind": "frames",
            "frames": len(self.timestamps),
            "inside_clue": self.inside_count,
            "dims": list(self.per_frame_dims) if self.per_frame_dims else None,
            "clue_segments": [s.to_list() for s in self.clue_segments],
            "fallback": self.fallback,
        }


@dataclass(frozen=True)
class FullImagePlan:
    """First-pass image input: the whole image, resized."""
    full_image_dims: Tuple[int, int]

    def summary(self) -> dict:
        return {"kind": "full_image", "dims": list(self.full_image_dims)}


@dataclass(frozen=True)
class CropPlan:
    """Full image plus a crop around the clue box (dual input)."""
    full_image_dims: Tuple[int, int]
    crop_region: BoundingBox  # original pixels, integer-snapped
    crop_dims: Tuple[int, int]

    def summary(self) -> dict:
        return {
            "kind": "crop",
            "dims": list(self.full_image_dims),
            "crop_region": self.crop_region.to_list(),
            "crop_dims": list(self.crop_dims),
        }


def frame_budget(duration: float, cfg: SamplingConfig) -> int:
    """Frames for a video: duration x fps, clamped to [min_frames, max_frames]."""
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    count = int(math.floor(duration * cfg.fps + 0.5))
    return min(max(count, cfg.min_frames), cfg.max_frames)


def smart_resize(
    width: int,
    height: int,
    cfg: SamplingConfig,
    *,
    min_pixels: Optional[int] = None,
    max_pixels: Optional[int] = None,
) -> Tuple[int, int]:
    """
    Snap (width, height) to multiples of the patch factor within pixel bounds.

    Nearest-multiple rounding when already in range, floor rounding when
    shrinking to max_pixels, ceiling rounding when growing to min_pixels.
    Defaults to the per-frame video bounds.

    Returns:
        (width, height) in pixels
    """
    if width < 1 or height < 1:
        raise ValueError(f"dims must be >= 1, got {width}x{height}")
    if max(width, height) / min(width, height) > cfg.max_aspect_ratio:
        raise AspectRatioExceeded(
            f"Aspect ratio {max(width, height) / min(width, height):.1f} exceeds {cfg.max_aspect_ratio}"
        )
    factor = cfg.patch_factor
    min_pixels = cfg.per_frame_min_pixels if min_pixels is None else min_pixels
    max_pixels = cfg.per_frame_max_pixels if max_pixels is None else max_pixels

    h_bar = max(factor, round(height / factor) * factor)
    w_bar = max(factor, round(width / factor) * factor)
    if h_bar * w_bar > max_pixels:
        beta = math.sqrt(height * width / max_pixels)
        h_bar = max(factor, math.floor(height / beta / factor) * factor)
        w_bar = max(factor, math.floor(width / beta / factor) * factor)
    elif h_bar * w_bar < min_pixels:
        beta = math.sqrt(min_pixels / (height * width))
        h_bar = math.ceil(height * beta / factor) * factor
        w_bar = math.ceil(width * beta / factor) * factor
    return w_bar, h_bar


def smart_resize_image(width: int, height: int, cfg: SamplingConfig) -> Tuple[int, int]:
    """smart_resize with the still-image pixel bounds."""
    return smart_resize(width, height, cfg, min_pixels=cfg.image_min_pixels, max_pixels=cfg.image_max_pixels)


def plan_video_input(duration: float, width: int, height: int, cfg: SamplingConfig) -> Tuple[int, Tuple[int, int]]:
    """
    Resolve frame count and per-frame dims together under the total budget.

    Frame count gives way first (down to min_frames), then per-frame
    resolution shrinks until count x pixels fits.
    """
    n = frame_budget(duration, cfg)
    # A frame per millisecond at most
    n = max(1, min(n, int(duration * DEDUP_SCALE)))
    dims = smart_resize(width, height, cfg)
    budget = cfg.total_pixel_budget

    if n * dims[0] * dims[1] > budget:
        n = max(min(cfg.min_frames, n), budget // (dims[0] * dims[1]))
    if n * dims[0] * dims[1] > budget:
        dims = smart_resize(
            width, height, cfg,
            min_pixels=cfg.patch_factor ** 2,
            max_pixels=max(cfg.patch_factor ** 2, budget // n),
        )
    if n * dims[0] * dims[1] > budget:
        n = max(1, budget // (dims[0] * dims[1]))
    return n, dims


def _midpoints(start: float, length: float, k: int) -> np.ndarray:
    return start + (np.arange(k) + 0.5) * (length / k)


def uniform_timestamps(duration: float, n: int) -> List[float]:
    """Midpoints of n equal-width bins over [0, duration]."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    return _midpoints(0.0, duration, n).tolist()


def uniform_plan(
    duration: float,
    n: int,
    dims: Optional[Tuple[int, int]] = None,
    fallback: Optional[str] = None,
) -> FramePlan:
    return FramePlan(
        timestamps=tuple(uniform_timestamps(duration, n)),
        per_frame_dims=dims,
        fallback=fallback,
    )


def merge_intervals(intervals: Sequence[TemporalInterval]) -> List[TemporalInterval]:
    """Union of intervals as sorted, disjoint, positive-length pieces."""
    merged: List[List[float]] = []
    for iv in sorted(intervals, key=lambda i: (i.start, i.end)):
        if iv.length == 0.0:
            continue
        if merged and iv.start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], iv.end)
        else:
            merged.append([iv.start, iv.end])
    return [TemporalInterval(s, e) for s, e in merged]


def complement_intervals(segments: Sequence[TemporalInterval], duration: float) -> List[TemporalInterval]:
    gaps = []
    cursor = 0.0
    for seg in segments:
        if seg.start > cursor:
            gaps.append(TemporalInterval(cursor, seg.start))
        cursor = max(cursor, seg.end)
    if cursor < duration:
        gaps.append(TemporalInterval(cursor, duration))
    return gaps


def _capacity(seg: TemporalInterval) -> int:
    # 2 ms spacing keeps rounded millisecond keys distinct
    return max(1, int(seg.length * DEDUP_SCALE) // 2)


def apportion(total: int, segments: Sequence[TemporalInterval]) -> List[int]:
    """
    Split `total` frames across segments proportionally to length.

    Largest-remainder rounding, ties to the earlier segment; no segment gets
    more frames than it can hold at 2 ms spacing.
    """
    if total <= 0 or not segments:
        return [0] * len(segments)
    lengths = [s.length for s in segments]
    caps = [_capacity(s) for s in segments]
    measure = math.fsum(lengths)
    quotas = [total * length / measure for length in lengths]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(segments)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1

    # Push overflow into segments with room, longest first
    overflow = 0
    for i, cap in enumerate(caps):
        if counts[i] > cap:
            overflow += counts[i] - cap
            counts[i] = cap
    for i in sorted(range(len(segments)), key=lambda j: (-lengths[j], j)):
        if overflow == 0:
            break
        room = caps[i] - counts[i]
        take = min(room, overflow)
        counts[i] += take
        overflow -= take
    return counts


def _spread(segments: Sequence[TemporalInterval], counts: Sequence[int]) -> List[float]:
    out: List[float] = []
    for seg, k in zip(segments, counts):
        if k > 0:
            out.extend(_midpoints(seg.start, seg.length, k).tolist())
    return out


def _spread_joined(segments: Sequence[TemporalInterval], k: int) -> List[float]:
    """k midpoints over the segments laid end to end: one spacing across their total measure."""
    if k <= 0:
        return []
    lengths = np.array([s.length for s in segments])
    ends = np.cumsum(lengths)
    positions = _midpoints(0.0, float(ends[-1]), k)
    idx = np.minimum(np.searchsorted(ends, positions, side="right"), len(segments) - 1)
    offsets = np.clip(positions - (ends[idx] - lengths[idx]), 0.0, lengths[idx])
    starts = np.array([s.start for s in segments])
    return (starts[idx] + offsets).tolist()


def differential_timestamps(
    duration: float,
    n: int,
    clues: Sequence[TemporalInterval],
    cfg: SamplingConfig,
    frame_dims: Optional[Tuple[int, int]] = None,
) -> FramePlan:
    """
    Dense frames inside the clue intervals, sparse frames elsewhere.

    ceil(key_ratio * n) frames are spread by length over the merged clue
    segments and the rest evenly over the gaps taken end to end, so each gap
    gets frames in proportion to its length. Colliding timestamps
    (same millisecond) are kept once, preferring the in-clue copy.

    Args:
        duration: Media length in seconds
        n: Frame count for the request (>= 2)
        clues: Clue intervals; clipped to [0, duration] here
        cfg: Sampling configuration (key_ratio)
        frame_dims: Per-frame dims to carry on the plan

    Returns:
        FramePlan; a clue without measure yields a uniform plan flagged
        with fallback="DegenerateClue"
    """
    if n < 2:
        raise ValueError(f"differential sampling needs n >= 2, got {n}")
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")

    clipped = []
    for clue in clues:
        try:
            clipped.append(clip_interval(clue, duration))
        except EmptyAfterClip:
            logger.debug("Dropping clue outside media: %s", clue.to_list())
    segments = merge_intervals(clipped)
    if not segments:
        logger.debug("Clue has no measure; sampling uniformly")
        return uniform_plan(duration, n, frame_dims, fallback=DegenerateClue.__name__)

    gaps = complement_intervals(segments, duration)
    n_key = n if not gaps else int(math.ceil(cfg.key_ratio * n))
    n_key = min(n_key, sum(_capacity(s) for s in segments))
    n_rest = 0
    if gaps:
        n_rest = min(n - n_key, _capacity(TemporalInterval(0.0, math.fsum(g.length for g in gaps))))

    inside = _spread(segments, apportion(n_key, segments))
    outside = _spread_joined(gaps, n_rest)

    kept = {}
    for t, flag in [(t, True) for t in inside] + [(t, False) for t in outside]:
        kept.setdefault(round(t * DEDUP_SCALE), (t, flag))
    ordered = sorted(kept.values())

    return FramePlan(
        timestamps=tuple(t for t, _ in ordered),
        per_frame_dims=frame_dims,
        inside_clue_mask=tuple(flag for _, flag in ordered),
        clue_segments=tuple(segments),
    )


def plan_image_input(width: int, height: int, cfg: SamplingConfig) -> FullImagePlan:
    return FullImagePlan(full_image_dims=smart_resize_image(width, height, cfg))


def crop_region(
    image_dims: Tuple[int, int],
    box: BoundingBox,
    margin: float = 0.10,
    cfg: Optional[SamplingConfig] = None,
) -> CropPlan:
    """
    Crop plan for a clue box: pad by `margin` of the box size on each side,
    clamp to the image and snap outward to whole pixels.

    Raises:
        EmptyAfterClip: box entirely outside the image
        DegenerateClue: box has no area once clamped
    """
    cfg = cfg or SamplingConfig()
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    width, height = image_dims
    clamped = clamp_box(box, width, height)
    if clamped.area <= 0.0:
        raise DegenerateClue(f"Box {box.to_list()} has no area inside {width}x{height}")

    pad_x = margin * clamped.width
    pad_y = margin * clamped.height
    region = BoundingBox(
        math.floor(max(0.0, clamped.x1 - pad_x)),
        math.floor(max(0.0, clamped.y1 - pad_y)),
        math.ceil(min(float(width), clamped.x2 + pad_x)),
        math.ceil(min(float(height), clamped.y2 + pad_y)),
    )
    return CropPlan(
        full_image_dims=smart_resize_image(width, height, cfg),
        crop_region=region,
        crop_dims=smart_resize_image(int(region.width), int(region.height), cfg),
    )
