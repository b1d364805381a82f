#!/usr/bin/env python3
"""
Media Access

Probing (duration, width, height) and frame/image extraction by shelling out
to configurable command templates. The default templates use ffprobe and
ffmpeg; any tool honouring the same placeholders works.

Decoder placeholders: {input} {timestamp} {width} {height} {output}
Image placeholders:   {input} {width} {height} {output}
                      {crop_x} {crop_y} {crop_w} {crop_h}
Probe placeholders:   {input}; must print JSON with format.duration and
                      streams[].width/height
"""

import base64
import json
import logging
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from cache import ProbeCache
from model_gateway import DecodeFailed, EncodedImage, MediaProbeFailed
from schema import MediaInfo, MediaKind
from spacetime import BoundingBox

logger = logging.getLogger("vtts.media")

DEFAULT_DECODER = (
    "ffmpeg -v error -y -ss {timestamp} -i {input} -frames:v 1 "
    "-vf scale={width}:{height} {output}"
)
DEFAULT_PROBE = "ffprobe -v error -show_entries format=duration:stream=width,height -of json {input}"
DEFAULT_IMAGE = (
    "ffmpeg -v error -y -i {input} "
    "-vf crop={crop_w}:{crop_h}:{crop_x}:{crop_y},scale={width}:{height} {output}"
)

# 1x1 grey PNG
PLACEHOLDER_PNG = base64.b64decode(
    "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAAAAAA6fptVAAAACklEQVR4nGNoAAAAggCB3Qmo7wAAAABJRU5ErkJggg=="
)


@dataclass(frozen=True)
class MediaRef:
    """A probed media file."""
    kind: MediaKind
    path: str
    duration: Optional[float] = None  # seconds, video only
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if self.kind == MediaKind.VIDEO and not (self.duration or 0) > 0:
            raise ValueError(f"Video duration must be > 0 for {self.path}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Media dims must be >= 1 for {self.path}")

    @property
    def dims(self) -> Tuple[int, int]:
        return self.width, self.height


@dataclass(frozen=True)
class MediaCommands:
    decoder: str = DEFAULT_DECODER
    probe: str = DEFAULT_PROBE
    image: str = DEFAULT_IMAGE
    timeout_s: float = 120.0


def render_command(template: str, **values) -> List[str]:
    """Split the template first, then fill placeholders per token (paths with spaces stay whole)."""
    return [token.format(**values) for token in shlex.split(template)]


def parse_probe_output(text: str) -> dict:
    """Extract duration/width/height from ffprobe-style JSON."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise MediaProbeFailed(f"Probe output is not JSON: {e}")
    result: Dict[str, float] = {}
    duration = (data.get("format") or {}).get("duration")
    if duration not in (None, "N/A"):
        result["duration"] = float(duration)
    for stream in data.get("streams") or []:
        if stream.get("width") and stream.get("height"):
            result["width"] = int(stream["width"])
            result["height"] = int(stream["height"])
            break
    return result


def _check_timestamps(media: MediaRef, timestamps: Sequence[float]) -> None:
    if media.kind != MediaKind.VIDEO:
        raise ValueError(f"Frames can only be extracted from video, got {media.kind.value}")
    for prev, cur in zip(timestamps, timestamps[1:]):
        if cur < prev:
            raise ValueError(f"Timestamps must be sorted: {prev} > {cur}")
    for t in timestamps:
        if not 0.0 <= t <= media.duration:
            raise ValueError(f"Timestamp {t} outside [0, {media.duration}]")


class CommandMedia:
    """Media backend that runs external probe/decoder commands."""

    def __init__(self, commands: Optional[MediaCommands] = None, cache: Optional[ProbeCache] = None):
        self.commands = commands or MediaCommands()
        self.cache = cache
        self._memo: Dict[str, dict] = {}
        self._lock = threading.Lock()

    def _run(self, argv: List[str]) -> subprocess.CompletedProcess:
        logger.debug("Running %s", " ".join(shlex.quote(a) for a in argv))
        return subprocess.run(argv, capture_output=True, text=True, timeout=self.commands.timeout_s)

    def _probe_raw(self, path: str) -> dict:
        with self._lock:
            if path in self._memo:
                return self._memo[path]
        cached = self.cache.get(path) if self.cache else None
        if cached is None:
            try:
                proc = self._run(render_command(self.commands.probe, input=path))
            except (OSError, subprocess.TimeoutExpired) as e:
                raise MediaProbeFailed(f"Probe failed for {path}: {e}")
            if proc.returncode != 0:
                raise MediaProbeFailed(f"Probe failed for {path}: {proc.stderr.strip()[-500:]}")
            cached = parse_probe_output(proc.stdout)
            if self.cache:
                self.cache.set(path, cached)
        with self._lock:
            self._memo[path] = cached
        return cached

    def probe(self, info: MediaInfo) -> MediaRef:
        """Resolve a record's media to a MediaRef, filling missing extent by probing."""
        values = {"duration": info.duration, "width": info.width, "height": info.height}
        needs_duration = info.kind == MediaKind.VIDEO and info.duration is None
        if needs_duration or info.width is None or info.height is None:
            probed = self._probe_raw(info.path)
            for key, value in probed.items():
                if values.get(key) is None:
                    values[key] = value
        try:
            return MediaRef(
                kind=info.kind,
                path=info.path,
                duration=values["duration"] if info.kind == MediaKind.VIDEO else None,
                width=int(values["width"] or 0),
                height=int(values["height"] or 0),
            )
        except (ValueError, TypeError) as e:
            raise MediaProbeFailed(str(e))

    def extract_frames(self, media: MediaRef, timestamps: Sequence[float],
                       dims: Tuple[int, int]) -> List[EncodedImage]:
        """
        Decode one PNG per timestamp at `dims`, in timestamp order.

        Raises:
            ValueError: timestamps unsorted or outside the media (before any decode)
            DecodeFailed: decoder exited nonzero or wrote nothing
        """
        _check_timestamps(media, timestamps)
        width, height = dims
        frames = []
        with tempfile.TemporaryDirectory(prefix="vtts-frames-") as tmp:
            for i, t in enumerate(timestamps):
                out = Path(tmp) / f"frame_{i:05d}.png"
                argv = render_command(
                    self.commands.decoder,
                    input=media.path, timestamp=f"{t:.3f}",
                    width=width, height=height, output=str(out),
                )
                frames.append(EncodedImage("image/png", self._produce(argv, out, t)))
        return frames

    def render_image(self, media: MediaRef, dims: Tuple[int, int],
                     region: Optional[BoundingBox] = None) -> EncodedImage:
        """The whole image, or `region` of it, resized to `dims`."""
        region = region or BoundingBox(0, 0, media.width, media.height)
        with tempfile.TemporaryDirectory(prefix="vtts-image-") as tmp:
            out = Path(tmp) / "image.png"
            argv = render_command(
                self.commands.image,
                input=media.path, width=dims[0], height=dims[1], output=str(out),
                crop_x=int(region.x1), crop_y=int(region.y1),
                crop_w=int(region.width), crop_h=int(region.height),
            )
            return EncodedImage("image/png", self._produce(argv, out, None))

    def _produce(self, argv: List[str], out: Path, timestamp: Optional[float]) -> bytes:
        try:
            proc = self._run(argv)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise DecodeFailed(timestamp, str(e))
        if proc.returncode != 0:
            raise DecodeFailed(timestamp, f"exit {proc.returncode}: {proc.stderr.strip()[-500:]}")
        if not out.exists():
            raise DecodeFailed(timestamp, "decoder wrote no output")
        return out.read_bytes()


class PlaceholderMedia:
    """
    Offline backend: extent comes from the record itself and every frame is
    a tiny constant PNG. Used with scripted mock models.
    """

    def probe(self, info: MediaInfo) -> MediaRef:
        try:
            return MediaRef(
                kind=info.kind,
                path=info.path,
                duration=info.duration if info.kind == MediaKind.VIDEO else None,
                width=int(info.width or 0),
                height=int(info.height or 0),
            )
        except ValueError as e:
            raise MediaProbeFailed(f"Record media lacks extent needed for placeholder frames: {e}")

    def extract_frames(self, media: MediaRef, timestamps: Sequence[float],
                       dims: Tuple[int, int]) -> List[EncodedImage]:
        _check_timestamps(media, timestamps)
        return [EncodedImage("image/png", PLACEHOLDER_PNG) for _ in timestamps]

    def render_image(self, media: MediaRef, dims: Tuple[int, int],
                     region: Optional[BoundingBox] = None) -> EncodedImage:
        return EncodedImage("image/png", PLACEHOLDER_PNG)
