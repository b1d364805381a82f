#!/usr/bin/env python3
"""
Response Protocol

Fixes the think / clue / answer response grammar, validates and parses model
output against it, and renders the prompt for each perception iteration.

Canonical grammar (tags lowercase, blocks in this order, nothing outside):

    <think>...</think><clue>[start_seconds, end_seconds]</clue><answer>...</answer>

validate_format() is strict and backs the format reward. parse_response() is
lenient: it finds blocks anywhere, case-insensitively, and records every
deviation it had to tolerate as a repair note.
"""

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

from spacetime import (
    BoundingBox,
    BoxSequence,
    Clue,
    TemporalInterval,
    format_clue,
)
from schema import TaskKind


class ProtocolError(Exception):
    """Base class for response protocol errors."""


class MissingField(ProtocolError):
    """A schema-required block could not be located at all."""

    def __init__(self, field_name: str):
        super().__init__(f"Missing required field: {field_name}")
        self.field = field_name


class MalformedClue(ProtocolError):
    """A clue block exists but its numeric literal cannot be parsed."""


class ClueKind(str, Enum):
    NONE = "none"
    TEMPORAL = "temporal"
    SPATIAL = "spatial"
    BOX_SEQUENCE = "box_sequence"


# Repair notes
SWAPPED_BOUNDS = "SwappedBounds"
EXTRA_WHITESPACE = "ExtraWhitespace"
TAG_CASE = "TagCase"
LEADING_PROSE = "LeadingProse"
TRAILING_PROSE = "TrailingProse"
INTERSTITIAL_PROSE = "InterstitialProse"
BLOCK_ORDER = "BlockOrder"
DUPLICATE_BLOCK = "DuplicateBlock"
UNCLOSED_TAG = "UnclosedTag"
UNEXPECTED_BLOCK = "UnexpectedBlock"
EMPTY_ANSWER = "EmptyAnswer"
SEQUENCE_LENGTH = "SequenceLength"
MALFORMED_CLUE = "MalformedClue"


def missing_note(field_name: str) -> str:
    return f"MissingField:{field_name}"


@dataclass(frozen=True)
class ResponseSchema:
    """Which blocks a response must contain, and what the clue looks like."""
    requires_think: bool = True
    clue_kind: ClueKind = ClueKind.TEMPORAL
    requires_answer: bool = True
    sequence_length: Optional[int] = None  # expected boxes for BOX_SEQUENCE

    def __post_init__(self):
        object.__setattr__(self, "clue_kind", ClueKind(self.clue_kind))
        if self.clue_kind == ClueKind.NONE and not self.requires_answer:
            raise ValueError("Schema must require a clue or an answer")
        if self.clue_kind == ClueKind.BOX_SEQUENCE and (self.sequence_length or 0) < 1:
            raise ValueError("Box sequence schema needs sequence_length >= 1")

    @property
    def requires_clue(self) -> bool:
        return self.clue_kind != ClueKind.NONE


@dataclass(frozen=True)
class ParsedResponse:
    """One model turn split into its think / clue / answer channels."""
    think: str
    clue: Optional[Clue]
    answer: Optional[str]
    format_ok: bool
    repairs: Tuple[str, ...] = ()
    clue_text: Optional[str] = None  # literal as emitted, whitespace-trimmed

    def to_dict(self) -> dict:
        return {
            "think": self.think,
            "clue": self.clue.to_list() if self.clue is not None else None,
            "clue_text": self.clue_text,
            "answer": self.answer,
            "format_ok": self.format_ok,
            "repairs": list(self.repairs),
        }


_NUMBER = re.compile(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?")
_SINGLE_GROUP = re.compile(r"\s*\[([^\[\]]*)\]\s*")
_GROUP_RUN = re.compile(r"\s*\[[^\[\]]*\](?:\s*,\s*\[[^\[\]]*\])*\s*")
_GROUP = re.compile(r"\[([^\[\]]*)\]")
_ANY_TAG = re.compile(r"<\s*/?\s*(?:think|clue|answer)\s*>", re.IGNORECASE)

_BLOCKS = ("think", "clue", "answer")


def _parse_numbers(group: str) -> List[float]:
    values = []
    for token in group.split(","):
        token = token.strip()
        if not _NUMBER.fullmatch(token):
            raise MalformedClue(f"Non-numeric clue token: {token!r}")
        value = float(token)
        if not math.isfinite(value):
            raise MalformedClue(f"Non-finite clue token: {token!r}")
        values.append(value)
    return values


def parse_interval_literal(text: str, repairs: Optional[list] = None) -> TemporalInterval:
    """
    Parse "[a, b]" (integer or decimal seconds) into a TemporalInterval.

    Reversed bounds are swapped and noted in `repairs` when given.
    """
    match = _SINGLE_GROUP.fullmatch(text)
    if not match:
        raise MalformedClue(f"Not an interval literal: {text!r}")
    values = _parse_numbers(match.group(1))
    if len(values) != 2:
        raise MalformedClue(f"Interval literal needs 2 values, got {len(values)}")
    start, end = values
    if start > end:
        start, end = end, start
        if repairs is not None:
            repairs.append(SWAPPED_BOUNDS)
    return TemporalInterval(start, end)


def parse_box_literal(text: str, repairs: Optional[list] = None):
    """
    Parse "[x1, y1, x2, y2]" into a BoundingBox, or a comma-separated run of
    such groups into a BoxSequence (order preserved).
    """
    if not _GROUP_RUN.fullmatch(text):
        raise MalformedClue(f"Not a box literal: {text!r}")
    boxes = []
    swapped = False
    for group in _GROUP.findall(text):
        values = _parse_numbers(group)
        if len(values) != 4:
            raise MalformedClue(f"Box literal needs 4 values, got {len(values)}")
        x1, y1, x2, y2 = values
        if x1 > x2:
            x1, x2 = x2, x1
            swapped = True
        if y1 > y2:
            y1, y2 = y2, y1
            swapped = True
        boxes.append(BoundingBox(x1, y1, x2, y2))
    if swapped and repairs is not None:
        repairs.append(SWAPPED_BOUNDS)
    if len(boxes) == 1:
        return boxes[0]
    return BoxSequence(tuple(boxes))


def parse_clue_literal(text: str, schema: ResponseSchema, repairs: Optional[list] = None) -> Clue:
    """Parse a clue literal according to the schema's clue kind."""
    notes = repairs if repairs is not None else []
    if schema.clue_kind == ClueKind.TEMPORAL:
        return parse_interval_literal(text, notes)
    if schema.clue_kind == ClueKind.SPATIAL:
        value = parse_box_literal(text, notes)
        if not isinstance(value, BoundingBox):
            raise MalformedClue(f"Expected one box, got {len(value)}")
        return value
    if schema.clue_kind == ClueKind.BOX_SEQUENCE:
        value = parse_box_literal(text, notes)
        if isinstance(value, BoundingBox):
            value = BoxSequence((value,))
        if schema.sequence_length is not None and len(value) != schema.sequence_length:
            notes.append(SEQUENCE_LENGTH)
        return value
    raise MalformedClue("Schema does not expect a clue")


def _strict_pattern(schema: ResponseSchema) -> re.Pattern:
    parts = []
    if schema.requires_think:
        parts.append(r"<think>(?P<think>.*?)</think>")
    else:
        parts.append(r"(?:<think>(?P<think>.*?)</think>)?")
    if schema.requires_clue:
        parts.append(r"<clue>(?P<clue>.*?)</clue>")
    if schema.requires_answer:
        parts.append(r"<answer>(?P<answer>.*?)</answer>")
    return re.compile(r"\A" + r"\s*".join(parts) + r"\Z", re.DOTALL)


def validate_format(raw: str, schema: ResponseSchema) -> bool:
    """True iff raw is exactly the schema's tag blocks, in canonical order."""
    match = _strict_pattern(schema).fullmatch(raw.strip())
    if not match:
        return False
    for name in _BLOCKS:
        content = match.groupdict().get(name)
        if content is not None and _ANY_TAG.search(content):
            return False
    if schema.requires_answer and not match.group("answer").strip():
        return False
    if schema.requires_clue:
        notes: list = []
        try:
            parse_clue_literal(match.group("clue").strip(), schema, notes)
        except (MalformedClue, ValueError):
            return False
        if notes:
            return False
    return True


@dataclass
class _Block:
    name: str
    start: int
    end: int
    content: str
    open_tag: str
    close_tag: Optional[str]


def _locate(raw: str, name: str, notes: list) -> Optional[_Block]:
    opener = re.compile(rf"<\s*{name}\s*>", re.IGNORECASE)
    closer = re.compile(rf"<\s*/\s*{name}\s*>", re.IGNORECASE)
    openings = list(opener.finditer(raw))
    if not openings:
        return None
    if len(openings) > 1:
        notes.append(DUPLICATE_BLOCK)
    first = openings[0]
    close = closer.search(raw, first.end())
    if close:
        return _Block(name, first.start(), close.end(), raw[first.end():close.start()],
                      first.group(0), close.group(0))
    notes.append(UNCLOSED_TAG)
    following = _ANY_TAG.search(raw, first.end())
    end = following.start() if following else len(raw)
    return _Block(name, first.start(), end, raw[first.end():end], first.group(0), None)


def _tag_notes(block: _Block, notes: list) -> None:
    for tag, canonical in ((block.open_tag, f"<{block.name}>"), (block.close_tag, f"</{block.name}>")):
        if tag is None or tag == canonical:
            continue
        if re.sub(r"\s+", "", tag) != tag:
            notes.append(EXTRA_WHITESPACE)
        if tag.lower() != tag:
            notes.append(TAG_CASE)


def parse_response(raw: str, schema: ResponseSchema, strict: bool = True) -> ParsedResponse:
    """
    Best-effort extraction of think / clue / answer from a model response.

    Args:
        raw: Raw assistant text
        schema: Expected blocks and clue kind
        strict: Raise MissingField / MalformedClue (default). When False those
            channels come back as None with a repair note instead.

    Returns:
        ParsedResponse whose format_ok mirrors validate_format()
    """
    notes: list = []
    blocks = {}
    for name in _BLOCKS:
        block = _locate(raw, name, notes)
        if block is not None:
            blocks[name] = block
            _tag_notes(block, notes)

    required = {
        "think": schema.requires_think,
        "clue": schema.requires_clue,
        "answer": schema.requires_answer,
    }
    for name, needed in required.items():
        if needed and name not in blocks:
            if strict:
                raise MissingField(name)
            notes.append(missing_note(name))
    for name in ("clue", "answer"):
        if name in blocks and not required[name]:
            notes.append(UNEXPECTED_BLOCK)

    ordered = sorted(blocks.values(), key=lambda b: b.start)
    if [b.name for b in ordered] != [n for n in _BLOCKS if n in blocks]:
        notes.append(BLOCK_ORDER)
    if ordered:
        if raw[:ordered[0].start].strip():
            notes.append(LEADING_PROSE)
        if raw[ordered[-1].end:].strip():
            notes.append(TRAILING_PROSE)
        for left, right in zip(ordered, ordered[1:]):
            if raw[left.end:right.start].strip():
                notes.append(INTERSTITIAL_PROSE)
                break

    think = blocks["think"].content.strip() if "think" in blocks else ""

    clue = None
    clue_text = None
    if "clue" in blocks and schema.requires_clue:
        clue_text = blocks["clue"].content.strip()
        try:
            clue = parse_clue_literal(clue_text, schema, notes)
        except (MalformedClue, ValueError) as e:
            if strict:
                raise MalformedClue(str(e)) from e
            notes.append(MALFORMED_CLUE)

    answer = None
    if "answer" in blocks:
        answer = blocks["answer"].content.strip() or None
        if answer is None:
            notes.append(EMPTY_ANSWER)

    # Keep first occurrence of each note, in discovery order
    repairs = tuple(dict.fromkeys(notes))
    return ParsedResponse(
        think=think,
        clue=clue,
        answer=answer,
        format_ok=validate_format(raw, schema),
        repairs=repairs,
        clue_text=clue_text,
    )


def render_response(parsed: ParsedResponse, schema: ResponseSchema) -> str:
    """Serialize a parsed response back into the canonical grammar."""
    parts = []
    if schema.requires_think or parsed.think:
        parts.append(f"<think>{parsed.think}</think>")
    if schema.requires_clue and parsed.clue is not None:
        parts.append(f"<clue>{parsed.clue_text or format_clue(parsed.clue)}</clue>")
    if schema.requires_answer and parsed.answer is not None:
        parts.append(f"<answer>{parsed.answer}</answer>")
    return "".join(parts)


_CLUE_GRAMMAR = {
    ClueKind.TEMPORAL: "[start_seconds, end_seconds]",
    ClueKind.SPATIAL: "[x1, y1, x2, y2]",
    ClueKind.BOX_SEQUENCE: "[x1, y1, x2, y2], [x1, y1, x2, y2], ...",
}


def grammar_for(schema: ResponseSchema) -> str:
    """The exact output grammar for a schema, as embedded in prompts."""
    parts = ["<think>...</think>"]
    if schema.requires_clue:
        parts.append(f"<clue>{_CLUE_GRAMMAR[schema.clue_kind]}</clue>")
    if schema.requires_answer:
        parts.append("<answer>...</answer>")
    return "".join(parts)


CANONICAL_GRAMMAR = grammar_for(ResponseSchema())

SYSTEM_TEXT = (
    "You are a careful visual reasoner. Think step by step, locate the visual "
    "evidence that supports your answer, then answer."
)


def _clue_instruction(schema: ResponseSchema) -> str:
    if schema.clue_kind == ClueKind.TEMPORAL:
        return "In <clue>, give the time span in seconds that holds the key evidence, as [start, end]."
    if schema.clue_kind == ClueKind.SPATIAL:
        return ("In <clue>, give the pixel box of the key region as [x1, y1, x2, y2], "
                "in the coordinates of the full image.")
    if schema.clue_kind == ClueKind.BOX_SEQUENCE:
        return (f"In <clue>, give one pixel box [x1, y1, x2, y2] for each of the "
                f"{schema.sequence_length} frames, in frame order, separated by commas.")
    return ""


@dataclass
class PromptTemplate:
    """The pieces of one iteration prompt."""
    system_text: str
    question_text: str
    clue_instruction: str
    grammar: str
    iteration_context: List[str] = field(default_factory=list)

    def render(self) -> str:
        lines = [self.system_text, "", self.question_text]
        if self.clue_instruction:
            lines.append(self.clue_instruction)
        lines.append("Respond in exactly this format, with no text outside the tags:")
        lines.append(self.grammar)
        if self.iteration_context:
            lines.append("")
            lines.extend(self.iteration_context)
        return "\n".join(lines)


def render_iteration_prompt(
    question: str,
    schema: ResponseSchema,
    history: Sequence[ParsedResponse],
    k: int,
    options: Optional[Sequence[str]] = None,
) -> str:
    """
    Render the prompt for perception iteration k (1-based).

    Iteration 1 carries the question and the grammar. Later iterations also
    carry every earlier think and clue verbatim and say the visual input has
    been refocused on the last clue.
    """
    if k < 1:
        raise ValueError(f"Iteration index must be >= 1, got {k}")
    if len(history) != k - 1:
        raise ValueError(f"Iteration {k} needs {k - 1} prior responses, got {len(history)}")

    question_lines = [f"Iteration {k}.", f"Question: {question}"]
    if options:
        question_lines.append("Options: " + " ".join(options))

    context = []
    if history:
        context.append("Previous iterations:")
        for i, prior in enumerate(history, start=1):
            context.append(f"Iteration {i} think: {prior.think}")
            context.append(f"Iteration {i} clue: {_clue_text(prior) or 'none'}")
        last = _clue_text(history[-1])
        if last:
            context.append(f"The visual input below has been re-sampled to focus on your last clue {last}. "
                           "Refine your reasoning, clue and answer.")
        else:
            context.append("Your last response gave no usable clue, so the visual input is not refocused. "
                           "Refine your reasoning, clue and answer.")

    return PromptTemplate(
        system_text=SYSTEM_TEXT,
        question_text="\n".join(question_lines),
        clue_instruction=_clue_instruction(schema),
        grammar=grammar_for(schema),
        iteration_context=context,
    ).render()


def _clue_text(parsed: ParsedResponse) -> Optional[str]:
    if parsed.clue is None:
        return None
    return parsed.clue_text or format_clue(parsed.clue)


def schema_for_task(task: TaskKind, sequence_length: int = 8) -> ResponseSchema:
    """Response schema matching a dataset task kind."""
    task = TaskKind(task)
    if task in (TaskKind.VIDEO_QA, TaskKind.GROUNDED_QA):
        return ResponseSchema(clue_kind=ClueKind.TEMPORAL, requires_answer=True)
    if task == TaskKind.TEMPORAL_CLUE:
        return ResponseSchema(clue_kind=ClueKind.TEMPORAL, requires_answer=False)
    if task == TaskKind.IMAGE_REASONING:
        return ResponseSchema(clue_kind=ClueKind.SPATIAL, requires_answer=True)
    if task == TaskKind.SPATIAL_CLUE:
        return ResponseSchema(clue_kind=ClueKind.SPATIAL, requires_answer=False)
    return ResponseSchema(clue_kind=ClueKind.BOX_SEQUENCE, requires_answer=False,
                          sequence_length=sequence_length)
