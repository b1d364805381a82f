#!/usr/bin/env python3
"""
Verifiable Rewards

Scores one completion as

    total = lambda_clue * r_clue + lambda_ans * r_ans + lambda_fmt * r_fmt

and standardizes rewards within a group of completions sampled for the same
prompt (group-relative advantages). Diagnostics travel as flags; nothing in
here raises on bad model output.
"""

import math
import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from protocol import ResponseSchema, parse_response, validate_format
from spacetime import (
    BoundingBox,
    BoxSequence,
    LengthMismatch,
    TemporalInterval,
    box_iou,
    box_l1,
    interval_iou,
    interval_l1,
    track_mean_iou,
)

# Reward flags
UNPARSEABLE_ANSWER = "UnparseableAnswer"
KIND_MISMATCH = "KindMismatch"
LENGTH_MISMATCH = "LengthMismatch"

_OPTION_LETTER = re.compile(r"\b([A-E])\b")


@dataclass(frozen=True)
class RewardWeights:
    lambda_clue: float = 1.0
    lambda_ans: float = 1.0
    lambda_fmt: float = 1.0

    def __post_init__(self):
        for name in ("lambda_clue", "lambda_ans", "lambda_fmt"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
            object.__setattr__(self, name, value)

    @property
    def max_total(self) -> float:
        return self.lambda_clue + self.lambda_ans + self.lambda_fmt


@dataclass(frozen=True)
class RewardBreakdown:
    r_clue: float
    r_ans: float
    r_fmt: float
    total: float
    weights_effective: RewardWeights = field(default_factory=RewardWeights)
    flags: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "r_clue": self.r_clue,
            "r_ans": self.r_ans,
            "r_fmt": self.r_fmt,
            "total": self.total,
            "weights": {
                "lambda_clue": self.weights_effective.lambda_clue,
                "lambda_ans": self.weights_effective.lambda_ans,
                "lambda_fmt": self.weights_effective.lambda_fmt,
            },
            "flags": list(self.flags),
        }


def format_reward(raw: str, schema: ResponseSchema) -> float:
    return 1.0 if validate_format(raw, schema) else 0.0


def extract_option_letter(text: str) -> Optional[str]:
    """First standalone option letter A-E, e.g. "B. wipe tears" -> "B"."""
    match = _OPTION_LETTER.search(text.strip())
    return match.group(1) if match else None


def _normalize_text(text: str) -> str:
    return " ".join(text.split()).casefold()


def answer_reward(pred: Optional[str], gt: str, kind: str = "mcq", flags: Optional[list] = None) -> float:
    """
    1.0 when the predicted answer matches the ground truth, else 0.0.

    Args:
        pred: Parsed answer text (None scores 0)
        gt: Ground-truth answer
        kind: "mcq" compares option letters, "exact" compares normalized text
        flags: Optional list receiving UnparseableAnswer
    """
    if not gt or not gt.strip():
        raise ValueError("Ground-truth answer must be non-empty")
    if kind == "mcq":
        gt_letter = extract_option_letter(gt)
        if gt_letter is None:
            raise ValueError(f"Ground-truth answer has no option letter: {gt!r}")
        pred_letter = extract_option_letter(pred) if pred else None
        if pred_letter is None:
            if flags is not None:
                flags.append(UNPARSEABLE_ANSWER)
            return 0.0
        return 1.0 if pred_letter == gt_letter else 0.0
    if kind == "exact":
        if pred is None:
            return 0.0
        return 1.0 if _normalize_text(pred) == _normalize_text(gt) else 0.0
    raise ValueError(f"Unknown answer kind: {kind}")


def clue_reward(pred, gt, flags: Optional[list] = None, metric: str = "iou") -> float:
    """
    Overlap between predicted and ground-truth clue in [0, 1].

    metric="iou" uses interval IoU, box IoU or mean per-frame IoU by clue
    kind; metric="l1" scores max(0, 1 - normalized L1 distance) instead.
    """
    if metric not in ("iou", "l1"):
        raise ValueError(f"Unknown clue metric: {metric}")
    notes = flags if flags is not None else []
    if pred is None or type(pred) is not type(gt):
        notes.append(KIND_MISMATCH)
        return 0.0

    if isinstance(gt, TemporalInterval):
        if metric == "l1":
            return max(0.0, 1.0 - interval_l1(pred, gt))
        return interval_iou(pred, gt)
    if isinstance(gt, BoundingBox):
        if metric == "l1":
            return max(0.0, 1.0 - box_l1(pred, gt))
        return box_iou(pred, gt)
    if isinstance(gt, BoxSequence):
        try:
            if metric == "l1":
                if len(pred) != len(gt):
                    raise LengthMismatch(f"pred={len(pred)} gt={len(gt)}")
                return math.fsum(max(0.0, 1.0 - box_l1(p, g)) for p, g in zip(pred, gt)) / len(gt)
            return track_mean_iou(pred, gt)
        except LengthMismatch:
            notes.append(LENGTH_MISMATCH)
            return 0.0
    raise ValueError(f"Unsupported clue type: {type(gt).__name__}")


def total_reward(parts: Tuple[float, float, float], w: RewardWeights) -> float:
    r_clue, r_ans, r_fmt = parts
    return w.lambda_clue * r_clue + w.lambda_ans * r_ans + w.lambda_fmt * r_fmt


def score_completion(
    raw: str,
    schema: ResponseSchema,
    gt_clue=None,
    gt_answer: Optional[str] = None,
    answer_kind: str = "mcq",
    weights: Optional[RewardWeights] = None,
    clue_metric: str = "iou",
) -> RewardBreakdown:
    """
    Full reward for one completion against one annotated record.

    Reward terms follow the available annotations: a record without a clue
    annotation contributes no clue term (its weight is zeroed), likewise
    for the answer.
    """
    weights = weights or RewardWeights()
    parsed = parse_response(raw, schema, strict=False)
    flags: list = []

    effective = RewardWeights(
        lambda_clue=weights.lambda_clue if gt_clue is not None else 0.0,
        lambda_ans=weights.lambda_ans if gt_answer else 0.0,
        lambda_fmt=weights.lambda_fmt,
    )
    r_clue = clue_reward(parsed.clue, gt_clue, flags, clue_metric) if gt_clue is not None else 0.0
    r_ans = answer_reward(parsed.answer, gt_answer, answer_kind, flags) if gt_answer else 0.0
    r_fmt = 1.0 if parsed.format_ok else 0.0

    return RewardBreakdown(
        r_clue=r_clue,
        r_ans=r_ans,
        r_fmt=r_fmt,
        total=total_reward((r_clue, r_ans, r_fmt), effective),
        weights_effective=effective,
        flags=tuple(flags),
    )


def group_advantages(rewards: Sequence[float], epsilon: float = 1e-6) -> List[float]:
    """
    Group-relative advantages: (r - mean) / (std + epsilon).

    Population std. A group with no spread gets all-zero advantages.
    """
    if len(rewards) == 0:
        raise ValueError("Reward group must not be empty")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    values = np.asarray(rewards, dtype=np.float64)
    if np.ptp(values) == 0.0:
        return [0.0] * len(values)
    return ((values - values.mean()) / (values.std() + epsilon)).tolist()


@dataclass(frozen=True)
class AdvantageGroup:
    rewards: Tuple[float, ...]
    advantages: Tuple[float, ...]
    epsilon: float = 1e-6

    @classmethod
    def from_rewards(cls, rewards: Sequence[float], epsilon: float = 1e-6) -> "AdvantageGroup":
        return cls(
            rewards=tuple(float(r) for r in rewards),
            advantages=tuple(group_advantages(rewards, epsilon)),
            epsilon=epsilon,
        )
