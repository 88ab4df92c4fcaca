"""Minimal client for OpenAI-compatible embeddings and chat endpoints."""

from __future__ import annotations

import logging
import os
import random
import time
from dataclasses import dataclass
from typing import Any

import requests

from .errors import AuthError, ConfigError, ServiceError

logger = logging.getLogger(__name__)

RETRYABLE_STATUSES = {429, 500, 502, 503, 504}
AUTH_STATUSES = {401, 403}

DEFAULT_API_KEY_ENV = "IMWEAVE_API_KEY"


@dataclass(frozen=True)
class Endpoint:
    """Where requests go and how hard to try before giving up."""

    base_url: str
    model: str
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = 120.0
    max_retries: int = 5
    backoff_base: float = 0.5
    backoff_cap: float = 30.0


@dataclass
class ChatResult:
    text: str
    usage: dict[str, Any]
    retries: int


class ServiceClient:
    """Issues requests with exponential backoff and jitter.

    The credential is resolved from the endpoint's env var at construction
    time so misconfiguration fails before any request leaves the process.
    Instances are safe to share across worker threads.
    """

    def __init__(self, endpoint: Endpoint):
        self.endpoint = endpoint
        key = os.environ.get(endpoint.api_key_env, "")
        if not key:
            raise ConfigError(
                f"credential env var {endpoint.api_key_env!r} is unset or empty"
            )
        self._headers = {"Authorization": f"Bearer {key}"}

    def _post(self, path: str, payload: dict[str, Any]) -> tuple[dict[str, Any], int]:
        url = self.endpoint.base_url.rstrip("/") + path
        retries = 0
        while True:
            error = ""
            status = None
            try:
                resp = requests.post(
                    url,
                    json=payload,
                    headers=self._headers,
                    timeout=self.endpoint.timeout,
                )
                status = resp.status_code
            except requests.RequestException as exc:
                error = f"transport error: {exc}"
            if status is not None:
                if status == 200:
                    try:
                        return resp.json(), retries
                    except ValueError as exc:
                        raise ServiceError(f"{url}: unparseable response body: {exc}")
                if status in AUTH_STATUSES:
                    raise AuthError(f"{url} rejected credential (HTTP {status})")
                if status not in RETRYABLE_STATUSES:
                    raise ServiceError(
                        f"{url} returned HTTP {status}: {resp.text[:200]}"
                    )
                error = f"HTTP {status}"
            if retries >= self.endpoint.max_retries:
                raise ServiceError(f"{url} failed after {retries} retries ({error})")
            delay = min(
                self.endpoint.backoff_cap,
                self.endpoint.backoff_base * (2.0**retries),
            )
            delay *= 0.5 + random.random()  # jitter; timing is not reproducible
            logger.debug("retrying %s in %.2fs (%s)", url, delay, error)
            time.sleep(delay)
            retries += 1

    def embed(self, item: Any) -> tuple[list[float], int]:
        """Embed one input item; returns (vector, retries_used)."""
        payload = {"model": self.endpoint.model, "input": [item]}
        data, retries = self._post("/embeddings", payload)
        try:
            raw = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError):
            raise ServiceError("malformed embeddings response: missing data[0].embedding")
        if not isinstance(raw, list) or not raw:
            raise ServiceError("malformed embeddings response: empty embedding")
        return [float(x) for x in raw], retries

    def chat(
        self,
        messages: list[dict[str, Any]],
        *,
        temperature: float = 0.7,
        top_p: float = 0.9,
        max_tokens: int | None = None,
        seed: int | None = None,
    ) -> ChatResult:
        payload: dict[str, Any] = {
            "model": self.endpoint.model,
            "messages": messages,
            "temperature": temperature,
            "top_p": top_p,
        }
        if max_tokens is not None:
            payload["max_tokens"] = max_tokens
        if seed is not None:
            payload["seed"] = seed
        data, retries = self._post("/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ServiceError("malformed chat response: missing choices[0].message.content")
        if not isinstance(text, str) or not text.strip():
            raise ServiceError("chat endpoint returned an empty completion")
        usage = data.get("usage")
        return ChatResult(text=text, usage=usage if isinstance(usage, dict) else {}, retries=retries)
