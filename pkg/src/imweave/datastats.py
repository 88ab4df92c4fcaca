"""Dataset validation and summary statistics."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import DataError
from .generation import MAX_TURNS, MIN_TURNS, ROLE_ASSISTANT, ROLE_USER
from .tokencount import DEFAULT_COUNTER, get_counter

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ("id", "group_id", "images", "template", "model", "conversations")


def _open_dataset(path: str | Path):
    try:
        return open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


@dataclass
class Violation:
    line: int
    message: str


@dataclass
class ValidationReport:
    checked: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class DatasetStats:
    num_samples: int
    max_turns: int
    min_turns: int
    avg_turns: float
    avg_images: float
    avg_user_tokens: float
    avg_assistant_tokens: float
    token_counter: str
    generator_model: str

    def __post_init__(self) -> None:
        if not self.min_turns <= self.avg_turns <= self.max_turns:
            raise DataError("turn statistics are inconsistent")
        if min(self.avg_images, self.avg_user_tokens, self.avg_assistant_tokens) < 0:
            raise DataError("averages must be nonnegative")


def _check_sample(
    record: dict[str, Any], min_turns: int, max_turns: int
) -> list[str]:
    problems: list[str] = []
    for key in REQUIRED_FIELDS:
        if key not in record:
            problems.append(f"missing field {key!r}")
    if problems:
        return problems
    for key in ("id", "group_id", "template", "model"):
        if not isinstance(record[key], str) or not record[key]:
            problems.append(f"field {key!r} must be a non-empty string")
    images = record["images"]
    if (
        not isinstance(images, list)
        or not images
        or not all(isinstance(i, str) and i for i in images)
    ):
        problems.append("field 'images' must be a non-empty list of non-empty strings")
    turns = record["conversations"]
    if not isinstance(turns, list):
        return problems + ["field 'conversations' must be a list"]
    if not min_turns <= len(turns) <= max_turns:
        problems.append(f"turn count {len(turns)} outside [{min_turns}, {max_turns}]")
    for i, turn in enumerate(turns):
        if not isinstance(turn, dict):
            problems.append(f"turn {i} is not an object")
            continue
        role = turn.get("role")
        content = turn.get("content")
        expected = ROLE_USER if i % 2 == 0 else ROLE_ASSISTANT
        if role != expected:
            problems.append(f"turn {i} role {role!r}, expected {expected!r}")
        if not isinstance(content, str) or not content.strip():
            problems.append(f"turn {i} has empty content")
    if isinstance(turns, list) and len(turns) % 2 != 0:
        problems.append("dialogue must end with an assistant turn")
    return problems


def validate_dataset(
    path: str | Path,
    strict: bool = False,
    *,
    min_turns: int = MIN_TURNS,
    max_turns: int = MAX_TURNS,
) -> ValidationReport:
    """Check every line against the sample schema and dialogue invariants.

    All lines are checked even after a failure, so one truncated line does
    not mask the rest. ``strict`` is a reporting policy for callers: the
    checks themselves are identical.
    """
    report = ValidationReport()
    seen_ids: dict[str, int] = {}
    with _open_dataset(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            report.checked += 1
            try:
                record = json.loads(line)
            except ValueError as exc:
                report.violations.append(Violation(lineno, f"unparseable line: {exc}"))
                continue
            if not isinstance(record, dict):
                report.violations.append(Violation(lineno, "expected a JSON object"))
                continue
            for problem in _check_sample(record, min_turns, max_turns):
                report.violations.append(Violation(lineno, problem))
            sid = record.get("id")
            if isinstance(sid, str) and sid:
                if sid in seen_ids:
                    report.violations.append(
                        Violation(lineno, f"duplicate id {sid!r} (first at line {seen_ids[sid]})")
                    )
                else:
                    seen_ids[sid] = lineno
    if report.violations and strict:
        logger.warning("%d validation violations", len(report.violations))
    return report


def compute_stats(
    path: str | Path, token_counter: str = DEFAULT_COUNTER
) -> DatasetStats:
    """Exact turn, image, and token averages over a dataset file."""
    count = get_counter(token_counter)
    num_samples = 0
    total_turns = 0
    total_images = 0
    max_turns = 0
    min_turns = 0
    user_tokens = 0
    assistant_tokens = 0
    user_turns = 0
    assistant_turns = 0
    models: set[str] = set()
    with _open_dataset(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            problems = _check_sample(record, min_turns=1, max_turns=10**9)
            if problems:
                raise DataError(f"{path}: line {lineno}: {problems[0]}")
            turns = record["conversations"]
            n = len(turns)
            num_samples += 1
            total_turns += n
            total_images += len(record["images"])
            max_turns = n if num_samples == 1 else max(max_turns, n)
            min_turns = n if num_samples == 1 else min(min_turns, n)
            models.add(record["model"])
            for turn in turns:
                tokens = count(turn["content"])
                if turn["role"] == ROLE_USER:
                    user_tokens += tokens
                    user_turns += 1
                else:
                    assistant_tokens += tokens
                    assistant_turns += 1
    if num_samples == 0:
        raise DataError(f"{path}: empty dataset")
    return DatasetStats(
        num_samples=num_samples,
        max_turns=max_turns,
        min_turns=min_turns,
        avg_turns=total_turns / num_samples,
        avg_images=total_images / num_samples,
        avg_user_tokens=user_tokens / user_turns if user_turns else 0.0,
        avg_assistant_tokens=assistant_tokens / assistant_turns if assistant_turns else 0.0,
        token_counter=token_counter,
        generator_model=models.pop() if len(models) == 1 else "mixed",
    )


STATS_ROWS = (
    ("Number of Samples", lambda s: f"{s.num_samples:,}"),
    ("Maximum Number of Turns", lambda s: str(s.max_turns)),
    ("Minimum Number of Turns", lambda s: str(s.min_turns)),
    ("Average Number of Turns", lambda s: f"{s.avg_turns:.2f}"),
    ("Average Number of Images", lambda s: f"{s.avg_images:.2f}"),
    ("Average User Tokens", lambda s: f"{s.avg_user_tokens:.2f}"),
    ("Average Assistant Tokens", lambda s: f"{s.avg_assistant_tokens:.2f}"),
    ("Open-Source LLM", lambda s: s.generator_model),
)


def render_stats_table(stats: DatasetStats) -> str:
    """Two-column table with the canonical dataset-statistics row labels."""
    labels = [label for label, _ in STATS_ROWS]
    values = [fmt(stats) for _, fmt in STATS_ROWS]
    width = max(len(l) for l in labels)
    lines = [f"{'Metric'.ljust(width)} | Value", f"{'-' * width}-+-{'-' * 24}"]
    lines += [f"{l.ljust(width)} | {v}" for l, v in zip(labels, values)]
    lines.append(f"(token counter: {stats.token_counter})")
    return "\n".join(lines)


def stats_to_record(stats: DatasetStats) -> dict[str, Any]:
    return {
        "num_samples": stats.num_samples,
        "max_turns": stats.max_turns,
        "min_turns": stats.min_turns,
        "avg_turns": stats.avg_turns,
        "avg_images": stats.avg_images,
        "avg_user_tokens": stats.avg_user_tokens,
        "avg_assistant_tokens": stats.avg_assistant_tokens,
        "token_counter": stats.token_counter,
        "generator_model": stats.generator_model,
    }
