#!/usr/bin/env python3
"""Simple file-based cache for media probe results."""

import hashlib
import json
import os
from pathlib import Path
from typing import Optional


class ProbeCache:
    """File-based cache of probed media extent (duration, width, height)."""

    def __init__(self, cache_dir: Optional[Path] = None):
        """Initialize cache with optional custom directory."""
        if cache_dir is None:
            env_cache_dir = os.environ.get("VTTS_CACHE_DIR")
            if env_cache_dir:
                cache_dir = Path(env_cache_dir)
            else:
                # XDG-compliant default: ~/.cache/vtts/
                xdg_cache = os.environ.get("XDG_CACHE_HOME", str(Path.home() / ".cache"))
                cache_dir = Path(xdg_cache) / "vtts"
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def key_for(self, path: str) -> str:
        """
        Cache key for a media path.

        Local files include size and mtime so an edited file is re-probed.
        """
        stamp = ""
        try:
            st = os.stat(path)
            stamp = f":{st.st_size}:{st.st_mtime_ns}"
        except OSError:
            pass
        return hashlib.sha256(f"{path}{stamp}".encode("utf-8")).hexdigest()

    def get(self, path: str) -> Optional[dict]:
        """
        Get cached probe result for a media path.

        Returns:
            Dict with duration/width/height, or None if not cached
        """
        cache_file = self._get_cache_path(path)
        if not cache_file.exists():
            return None
        try:
            with open(cache_file, "r") as f:
                return json.load(f)
        except (json.JSONDecodeError, IOError):
            return None

    def set(self, path: str, probe: dict) -> None:
        cache_file = self._get_cache_path(path)
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache_file.with_suffix(".tmp")
        with open(tmp, "w") as f:
            json.dump(probe, f, indent=2, sort_keys=True)
        os.replace(tmp, cache_file)

    def _get_cache_path(self, path: str) -> Path:
        return self.cache_dir / "probe" / f"{self.key_for(path)}.json"
