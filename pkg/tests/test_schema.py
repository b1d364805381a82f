#!/usr/bin/env python3
"""Tests for dataset record normalization."""

import json
from pathlib import Path

import pytest

import sys
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "scripts"))

from schema import MediaKind, RecordError, TaskKind, normalize_record
from spacetime import BoundingBox, BoxSequence, TemporalInterval

BASE = {
    "id": "charades_0001",
    "source": "charades-sta",
    "media": {"kind": "video", "path": "a.mp4", "duration": 30.0},
    "task": "temporal_clue",
    "question": "When?",
    "think": "Early.",
    "clue": [6.0, 11.9],
}


class TestNormalizeRecord:
    def test_typed_fields(self):
        rec = normalize_record(BASE)
        assert rec.task == TaskKind.TEMPORAL_CLUE
        assert rec.media.kind == MediaKind.VIDEO
        assert rec.clue == TemporalInterval(6.0, 11.9)
        assert rec.answer is None

    def test_clue_geometry_from_shape(self):
        assert isinstance(normalize_record({**BASE, "clue": [1, 2, 3, 4]}).clue, BoundingBox)
        assert isinstance(normalize_record({**BASE, "clue": [[1, 2, 3, 4], [2, 3, 4, 5]]}).clue, BoxSequence)

    def test_unknown_keys_kept_in_order(self):
        rec = normalize_record({**BASE, "caption": "a door", "answer": "B"})
        assert rec.extra == {"caption": "a door"}
        assert list(rec.to_dict()) == ["id", "source", "media", "task", "question", "think", "clue", "answer", "caption"]

    def test_json_line(self):
        assert json.loads(normalize_record(BASE).to_json())["clue"] == [6.0, 11.9]

    @pytest.mark.parametrize("raw, message", [
        ({**BASE, "id": ""}, "no id"),
        ({**BASE, "task": "cooking"}, "Unknown task kind"),
        ({**BASE, "media": {"kind": "audio", "path": "a.wav"}}, "Unknown media kind"),
        ({**BASE, "media": {"kind": "video", "path": ""}}, "media.path"),
        ({**BASE, "media": {"kind": "video", "path": "a.mp4", "duration": "long"}}, "media.duration"),
        ({**BASE, "clue": [1, 2, 3]}, "Bad clue"),
        ({**BASE, "clue": {"a": 1, "b": 2}}, "Bad clue"),
        ({**BASE, "clue": ["x", "y"]}, "Bad clue"),
        ({**BASE, "clue": [["a", "b", "c", "d"]]}, "Bad clue"),
        ({**BASE, "clue": [True, False]}, "Bad clue"),
        ({**BASE, "clue": "6.0-11.9"}, "Bad clue"),
        ({**BASE, "options": "A. yes"}, "options must be a list"),
    ])
    def test_rejected(self, raw, message):
        with pytest.raises(RecordError, match=message):
            normalize_record(raw)
