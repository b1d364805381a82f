#!/usr/bin/env python3
"""
Episode Trace Store

Append-only JSONL of finished episodes, one line per episode.

While a run is in progress lines go to traces.jsonl.part; finalize() sorts
them by id and atomically renames to traces.jsonl. A resumed run reuses the
.part file, skips ids already present and drops a half-written last line.
"""

import json
import logging
import os
import threading
from pathlib import Path
from typing import Dict, List, Set

from itp_engine import EpisodeTrace

logger = logging.getLogger("vtts.traces")

TRACE_FILE = "traces.jsonl"


class TraceStore:
    """Manage the trace file for one output directory."""

    def __init__(self, out_dir: Path, resume: bool = False):
        """
        Args:
            out_dir: Run output directory (created if needed)
            resume: Keep traces from an earlier, interrupted run
        """
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.final_path = self.out_dir / TRACE_FILE
        self.part_path = self.out_dir / (TRACE_FILE + ".part")
        self._lock = threading.Lock()

        if resume:
            if not self.part_path.exists() and self.final_path.exists():
                os.replace(self.final_path, self.part_path)
            self._repair_tail()
        else:
            self.part_path.write_text("")
        self._done = {rec["id"] for rec in self._read(self.part_path)}
        if self._done:
            logger.info("Resuming: %d episodes already traced", len(self._done))

    def _repair_tail(self) -> None:
        if not self.part_path.exists():
            self.part_path.write_text("")
            return
        data = self.part_path.read_bytes()
        keep = len(data)
        if data and not data.endswith(b"\n"):
            keep = data.rfind(b"\n") + 1
        elif data:
            last_start = data.rfind(b"\n", 0, len(data) - 1) + 1
            try:
                json.loads(data[last_start:].decode("utf-8"))
            except (ValueError, UnicodeDecodeError):
                keep = last_start
        if keep != len(data):
            logger.warning("Dropping incomplete trailing trace line in %s", self.part_path)
            with open(self.part_path, "r+b") as f:
                f.truncate(keep)

    @staticmethod
    def _read(path: Path) -> List[dict]:
        records = []
        if not path.exists():
            return records
        with open(path, "r") as f:
            for line in f:
                line = line.strip()
                if line:
                    try:
                        records.append(json.loads(line))
                    except json.JSONDecodeError:
                        continue
        return records

    def completed_ids(self) -> Set[str]:
        with self._lock:
            return set(self._done)

    def append(self, trace: EpisodeTrace) -> None:
        line = json.dumps(trace.to_dict(), ensure_ascii=False)
        with self._lock:
            with open(self.part_path, "a") as f:
                f.write(line + "\n")
                f.flush()
            self._done.add(trace.sample_id)

    def finalize(self) -> Path:
        """Sort by id and move the finished file into place."""
        with self._lock:
            records = self._read(self.part_path)
            records.sort(key=lambda r: str(r["id"]))
            tmp = self.out_dir / (TRACE_FILE + ".tmp")
            with open(tmp, "w") as f:
                for rec in records:
                    f.write(json.dumps(rec, ensure_ascii=False) + "\n")
            os.replace(tmp, self.final_path)
            self.part_path.unlink(missing_ok=True)
        return self.final_path


def load_traces(path: Path) -> Dict[str, dict]:
    """Trace records keyed by sample id."""
    return {str(rec["id"]): rec for rec in TraceStore._read(Path(path))}
