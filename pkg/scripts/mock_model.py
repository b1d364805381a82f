#!/usr/bin/env python3
"""
Scripted Mock Model

Deterministic stand-in for a served model. A script is an ordered list of
(matcher, response) entries; the first entry whose matcher accepts the
request wins, otherwise the default response is returned.

Matchers:
- str: case-insensitive substring of the request text (prompt + captions)
- compiled regex: searched in the request text
- callable: called with the ChatRequest

Script file (YAML or JSON):

    default: "<think>...</think><clue>[0.0, 1.0]</clue><answer>A</answer>"
    entries:
      - contains: "iteration 1"
        response: "..."
      - regex: "Iteration [23]\\."
        response: "..."
      - contains: "Question: what happens at the door"
        frames_inside: [12.0, 18.0]   # >= min_fraction (0.5) of frames in range
        response: "..."

All conditions of an entry must hold.

Usage:
    python mock_model.py --script script.yaml --port 8765
"""

import argparse
import base64
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Pattern, Union

import yaml

from model_gateway import ChatRequest, EncodedImage

logger = logging.getLogger("vtts.mock")

Matcher = Union[str, Pattern, Callable[[ChatRequest], bool]]
Response = Union[str, Callable[[ChatRequest], str]]

_CAPTION_TIME = re.compile(r"Frame at ([0-9]+(?:\.[0-9]+)?)s")


def request_text(request: ChatRequest) -> str:
    return "\n".join([request.prompt, *request.image_captions])


def caption_timestamps(request: ChatRequest) -> List[float]:
    """Frame timestamps announced in the captions of a request."""
    times = []
    for caption in request.image_captions:
        match = _CAPTION_TIME.search(caption)
        if match:
            times.append(float(match.group(1)))
    return times


@dataclass
class MockScript:
    entries: List[tuple] = field(default_factory=list)
    default: Response = "<think>no script entry matched</think><answer>A</answer>"

    def respond(self, request: ChatRequest) -> str:
        text = request_text(request)
        for matcher, response in self.entries:
            if _matches(matcher, request, text):
                return response(request) if callable(response) else response
        return self.default(request) if callable(self.default) else self.default

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MockScript":
        entries = []
        for i, entry in enumerate(data.get("entries") or []):
            conditions: List[Matcher] = []
            if "contains" in entry:
                conditions.append(str(entry["contains"]))
            if "regex" in entry:
                conditions.append(re.compile(entry["regex"]))
            if "frames_inside" in entry:
                start, end = (float(v) for v in entry["frames_inside"])
                conditions.append(frames_inside(start, end, float(entry.get("min_fraction", 0.5))))
            if not conditions:
                raise ValueError(f"Script entry {i} needs 'contains', 'regex' or 'frames_inside'")
            if "response" not in entry:
                raise ValueError(f"Script entry {i} has no response")
            matcher: Matcher = conditions[0] if len(conditions) == 1 else _all_of(conditions)
            entries.append((matcher, str(entry["response"])))
        default = data.get("default", cls.default)
        return cls(entries=entries, default=str(default))

    @classmethod
    def from_file(cls, path: Path) -> "MockScript":
        path = Path(path)
        with open(path) as f:
            if path.suffix == ".json":
                data = json.load(f)
            else:
                data = yaml.safe_load(f) or {}
        return cls.from_dict(data)


def _matches(matcher: Matcher, request: ChatRequest, text: str) -> bool:
    if isinstance(matcher, str):
        return matcher.lower() in text.lower()
    if isinstance(matcher, re.Pattern):
        return matcher.search(text) is not None
    return bool(matcher(request))


def _all_of(conditions: List[Matcher]) -> Callable[[ChatRequest], bool]:
    def matcher(request: ChatRequest) -> bool:
        text = request_text(request)
        return all(_matches(c, request, text) for c in conditions)
    return matcher


def frames_inside(start: float, end: float, min_fraction: float = 0.5) -> Callable[[ChatRequest], bool]:
    """Matcher: at least min_fraction of the captioned frames fall in [start, end]."""
    def matcher(request: ChatRequest) -> bool:
        times = caption_timestamps(request)
        if not times:
            return False
        inside = sum(1 for t in times if start <= t <= end)
        return inside >= min_fraction * len(times)
    return matcher


class MockModel:
    """In-process scripted model with call history and concurrency counters."""

    def __init__(self, script: Optional[MockScript] = None, delay: float = 0.0):
        self.script = script or MockScript()
        self.delay = delay
        self.calls: List[ChatRequest] = []
        self.in_flight = 0
        self.high_water = 0
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls.append(request)
            self.in_flight += 1
            self.high_water = max(self.high_water, self.in_flight)
        try:
            if self.delay:
                time.sleep(self.delay)
            return self.script.respond(request)
        finally:
            with self._lock:
                self.in_flight -= 1

    def reset(self) -> None:
        with self._lock:
            self.calls = []
            self.high_water = self.in_flight


def mock_responder(script: MockScript, delay: float = 0.0) -> MockModel:
    """An in-process endpoint answering from `script`."""
    return MockModel(script, delay=delay)


def request_from_messages(messages: List[dict]) -> ChatRequest:
    """Rebuild a ChatRequest from OpenAI-style messages (inverse of content_parts)."""
    prompt = None
    images: List[EncodedImage] = []
    captions: List[str] = []
    for message in messages:
        content = message.get("content")
        if isinstance(content, str):
            content = [{"type": "text", "text": content}]
        for part in content or []:
            if part.get("type") == "text":
                if prompt is None:
                    prompt = part.get("text", "")
                else:
                    captions.append(part.get("text", ""))
            elif part.get("type") == "image_url":
                url = part.get("image_url", {}).get("url", "")
                header, _, payload = url.partition(",")
                mime = header[len("data:"):].split(";")[0] or "image/png"
                images.append(EncodedImage(mime, base64.b64decode(payload) if payload else b""))
    if captions and len(captions) != len(images):
        captions = []
    return ChatRequest(prompt=prompt or "", images=tuple(images), image_captions=tuple(captions))


class _Handler(BaseHTTPRequestHandler):
    server: "MockServer"

    def do_POST(self):
        if not self.path.rstrip("/").endswith("/chat/completions"):
            self._send(404, {"error": {"message": f"Unknown path {self.path}"}})
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length).decode("utf-8"))
            request = request_from_messages(body.get("messages") or [])
        except (ValueError, AttributeError) as e:
            self._send(400, {"error": {"message": f"Bad request: {e}"}})
            return
        text = self.server.model.complete(request)
        self._send(200, {
            "object": "chat.completion",
            "model": body.get("model", "mock"),
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": "stop",
            }],
        })

    def _send(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, format, *args):
        logger.debug("mock %s - %s", self.address_string(), format % args)


class MockServer(ThreadingHTTPServer):
    """Local HTTP server exposing a MockModel as POST /chat/completions."""

    daemon_threads = True

    def __init__(self, model: MockModel, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.model = model
        self._thread: Optional[threading.Thread] = None

    @property
    def base_url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread:
            self._thread.join()

    def __enter__(self) -> "MockServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def main():
    parser = argparse.ArgumentParser(description="Serve a scripted mock chat model")
    parser.add_argument("--script", required=True, help="YAML or JSON script file")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8765)
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    server = MockServer(MockModel(MockScript.from_file(Path(args.script))), args.host, args.port)
    logger.info("Mock model listening on %s", server.base_url)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


if __name__ == "__main__":
    main()
