"""Shared fixtures: a scriptable OpenAI-compatible mock service."""

from __future__ import annotations

import hashlib
import json
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable

import numpy as np
import pytest

API_KEY_ENV = "IMWEAVE_API_KEY"

# Fixed 8-turn dialogue the mock generator returns; token counts are
# asserted by hand in the stats tests.
CANNED_DIALOGUE = (
    "User: What changes across the four scenes?, "
    "Assistant: The lighting shifts from dawn to dusk over the sequence.\n"
    "User: Which scene is brightest?, Assistant: The second scene is brightest.\n"
    "User: Why?, Assistant: Direct sunlight hits the subject there.\n"
    "User: Summarize the sequence., "
    "Assistant: A single day passes from morning to night."
)


def deterministic_vector(payload_input: Any, dim: int = 8) -> list[float]:
    """Stable pseudo-embedding derived from the request content."""
    digest = hashlib.sha256(
        json.dumps(payload_input, sort_keys=True).encode()
    ).digest()
    seed = int.from_bytes(digest[:8], "big")
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, dim).tolist()


class MockService:
    """State backing the mock server.

    ``script`` entries (status, body) are consumed first, one per request,
    regardless of path; a ``None`` body falls through to the default
    handler. Custom behavior goes through ``embed_fn`` / ``chat_fn``.
    """

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.requests: list[dict[str, Any]] = []
        self.script: deque[tuple[int, dict | None]] = deque()
        self.embed_dim = 8
        self.embed_fn: Callable[[dict], tuple[int, dict]] | None = None
        self.chat_fn: Callable[[dict], tuple[int, dict]] | None = None
        self.chat_text = CANNED_DIALOGUE
        self.base_url = ""

    # -- default behaviors ---------------------------------------------

    def _default_embed(self, payload: dict) -> tuple[int, dict]:
        vec = deterministic_vector(payload.get("input"), self.embed_dim)
        return 200, {
            "data": [{"embedding": vec, "index": 0}],
            "model": payload.get("model", "mock"),
        }

    def _default_chat(self, payload: dict) -> tuple[int, dict]:
        return 200, {
            "choices": [{"message": {"role": "assistant", "content": self.chat_text}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 50},
        }

    def respond(self, path: str, payload: dict) -> tuple[int, dict]:
        if self.script:
            status, body = self.script.popleft()
            if body is not None:
                return status, body
            if status != 200:
                return status, {"error": "scripted failure"}
        if path.endswith("/embeddings"):
            fn = self.embed_fn or self._default_embed
        elif path.endswith("/chat/completions"):
            fn = self.chat_fn or self._default_chat
        else:
            return 404, {"error": f"unknown path {path}"}
        return fn(payload)

    def count(self, path_suffix: str) -> int:
        return sum(1 for r in self.requests if r["path"].endswith(path_suffix))


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        state: MockService = self.server.state  # type: ignore[attr-defined]
        length = int(self.headers.get("Content-Length", 0))
        payload = json.loads(self.rfile.read(length) or b"{}")
        with state.lock:
            state.requests.append({"path": self.path, "payload": payload})
            status, body = state.respond(self.path, payload)
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args: Any) -> None:
        pass


@pytest.fixture
def mock_service():
    state = MockService()
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    server.state = state  # type: ignore[attr-defined]
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    state.base_url = f"http://127.0.0.1:{server.server_port}"
    try:
        yield state
    finally:
        server.shutdown()
        server.server_close()


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "test-key")
    return API_KEY_ENV
