"""Pluggable token counting.

The counting scheme is always named alongside reported token statistics,
since different counters give different numbers for the same text.
"""

from __future__ import annotations

from typing import Callable

from .errors import ConfigError

TOKEN_COUNTERS: dict[str, Callable[[str], int]] = {
    "whitespace": lambda text: len(text.split()),
}

DEFAULT_COUNTER = "whitespace"


def get_counter(name: str) -> Callable[[str], int]:
    try:
        return TOKEN_COUNTERS[name]
    except KeyError:
        raise ConfigError(
            f"unknown token counter {name!r}; choose from {sorted(TOKEN_COUNTERS)}"
        ) from None
