"""Multi-image benchmark harness.

Collects multi-turn model answers, obtains pairwise judge verdicts on a
five-level preference scale, aggregates them into weighted battles, fits
Bradley-Terry strengths anchored at a baseline, and reports a leaderboard
with bootstrap confidence intervals.

Scores are the predicted win probability against the baseline times 100,
so the baseline row is exactly 50.0. One pseudo-win and one pseudo-loss
against the baseline per model keep sweep outcomes finite.
"""

from __future__ import annotations

import logging
import math
import re
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import jsonl
from .api import Endpoint, ServiceClient
from .corpus import _image_input
from .errors import AuthError, ConfigError, DataError, ServiceError
from .seeds import STREAM_BOOTSTRAP, rng_from
from .tokencount import DEFAULT_COUNTER, get_counter

logger = logging.getLogger(__name__)

TOPICS = ("bird", "matching", "ocr", "pattern", "ranking", "storytelling", "visual")

LABELS = ("A>>B", "A>B", "A=B", "B>A", "B>>A")
_MIRROR = {"A>>B": "B>>A", "A>B": "B>A", "A=B": "A=B", "B>A": "A>B", "B>>A": "A>>B"}
_LABEL_RE = re.compile(r"\[\[(A>>B|A>B|A=B|B>A|B>>A)\]\]")

# A decisive win counts triple; a plain win counts once; ties split.
STRONG_WIN_WEIGHT = 3

OUTCOME_A = "a"
OUTCOME_B = "b"
OUTCOME_TIE = "tie"

JUDGE_SYSTEM_PROMPT = """You are an impartial judge comparing how two AI assistants handled the same multi-image, multi-turn task. Decide which assistant served the user better across the whole transcript, weighing helpfulness, relevance, and conciseness. Do not let presentation order, response length alone, or assistant identity influence your decision.

After a brief explanation, end your reply with exactly one verdict tag on the final line:
[[A>>B]] assistant A is significantly better
[[A>B]] assistant A is better
[[A=B]] both are roughly equal
[[B>A]] assistant B is better
[[B>>A]] assistant B is significantly better"""


@dataclass(frozen=True)
class BenchExample:
    example_id: str
    topic: str
    image_refs: tuple[str, ...]
    turns: tuple[str, ...]
    reference: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.example_id:
            raise DataError("example_id must be non-empty")
        if self.topic not in TOPICS:
            raise DataError(
                f"example {self.example_id!r}: topic {self.topic!r} not in {TOPICS}"
            )
        if not self.turns:
            raise DataError(f"example {self.example_id!r}: needs at least one question")
        if self.reference is not None and len(self.reference) != len(self.turns):
            raise DataError(
                f"example {self.example_id!r}: reference answers do not cover every turn"
            )


@dataclass(frozen=True)
class ModelAnswer:
    example_id: str
    model_id: str
    responses: tuple[str, ...]
    token_count: int


@dataclass(frozen=True)
class JudgeVerdict:
    example_id: str
    model_a: str
    model_b: str
    label: str
    rationale: str
    swapped: bool = False
    flagged: bool = False

    def __post_init__(self) -> None:
        if self.model_a == self.model_b:
            raise DataError("a verdict needs two distinct models")
        if self.label not in LABELS:
            raise DataError(f"unknown verdict label {self.label!r}")


@dataclass(frozen=True)
class Battle:
    model_a: str
    model_b: str
    outcome: str  # OUTCOME_A | OUTCOME_B | OUTCOME_TIE


@dataclass(frozen=True)
class LeaderboardRow:
    model_id: str
    score: float
    ci_low_delta: float
    ci_high_delta: float
    avg_tokens: int


@dataclass(frozen=True)
class Leaderboard:
    rows: tuple[LeaderboardRow, ...]
    baseline_id: str


# ---------------------------------------------------------------------------
# Benchmark and answers IO


def read_bench_examples(path: str | Path) -> list[BenchExample]:
    examples: list[BenchExample] = []
    seen: set[str] = set()
    for lineno, rec in jsonl.iter_records(path):
        try:
            eid = rec["example_id"]
            topic = rec["topic"]
            images = rec["images"]
            turns = rec["turns"]
        except KeyError as exc:
            raise DataError(f"{path}: line {lineno}: missing field {exc}")
        if not isinstance(turns, list) or not all(isinstance(t, str) and t for t in turns):
            raise DataError(f"{path}: line {lineno}: turns must be non-empty strings")
        if not isinstance(images, list) or not all(isinstance(i, str) for i in images):
            raise DataError(f"{path}: line {lineno}: images must be a list of strings")
        reference = rec.get("reference")
        if reference is not None and (
            not isinstance(reference, list)
            or not all(isinstance(r, str) for r in reference)
        ):
            raise DataError(f"{path}: line {lineno}: reference must be a list of strings")
        if eid in seen:
            raise DataError(f"{path}: line {lineno}: duplicate example_id {eid!r}")
        seen.add(eid)
        try:
            examples.append(
                BenchExample(
                    example_id=eid,
                    topic=topic,
                    image_refs=tuple(images),
                    turns=tuple(turns),
                    reference=tuple(reference) if reference is not None else None,
                )
            )
        except DataError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
    return examples


def write_answers(answers: Iterable[ModelAnswer], path: str | Path) -> int:
    return jsonl.write_records(
        path,
        (
            {
                "example_id": a.example_id,
                "model_id": a.model_id,
                "responses": list(a.responses),
                "token_count": a.token_count,
            }
            for a in answers
        ),
    )


def read_answers(path: str | Path) -> list[ModelAnswer]:
    out: list[ModelAnswer] = []
    for lineno, rec in jsonl.iter_records(path):
        try:
            out.append(
                ModelAnswer(
                    example_id=rec["example_id"],
                    model_id=rec["model_id"],
                    responses=tuple(rec["responses"]),
                    token_count=int(rec["token_count"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: line {lineno}: bad answer record ({exc})")
    return out


def write_verdicts(verdicts: Iterable[JudgeVerdict], path: str | Path) -> int:
    return jsonl.write_records(
        path,
        (
            {
                "example_id": v.example_id,
                "model_a": v.model_a,
                "model_b": v.model_b,
                "label": v.label,
                "rationale": v.rationale,
                "swapped": v.swapped,
                "flagged": v.flagged,
            }
            for v in verdicts
        ),
    )


def read_verdicts(path: str | Path) -> list[JudgeVerdict]:
    out: list[JudgeVerdict] = []
    for lineno, rec in jsonl.iter_records(path):
        try:
            out.append(
                JudgeVerdict(
                    example_id=rec["example_id"],
                    model_a=rec["model_a"],
                    model_b=rec["model_b"],
                    label=rec["label"],
                    rationale=rec.get("rationale", ""),
                    swapped=bool(rec.get("swapped", False)),
                    flagged=bool(rec.get("flagged", False)),
                )
            )
        except (KeyError, DataError) as exc:
            raise DataError(f"{path}: line {lineno}: bad verdict record ({exc})")
    return out


# ---------------------------------------------------------------------------
# Answer collection


@dataclass
class CollectFailure:
    example_id: str
    reason: str


def collect_answers(
    examples: Sequence[BenchExample],
    endpoint: Endpoint,
    concurrency: int = 4,
    *,
    model_id: str | None = None,
    token_counter: str = DEFAULT_COUNTER,
    temperature: float = 0.0,
    max_tokens: int | None = None,
) -> tuple[list[ModelAnswer], list[CollectFailure]]:
    """Run every example's question turns against a model endpoint.

    Each turn is sent with the full prior dialogue; the example's images
    ride along as content parts on the first user message.
    """
    client = ServiceClient(endpoint)
    count = get_counter(token_counter)
    model = model_id or endpoint.model

    def one(example: BenchExample) -> ModelAnswer | CollectFailure:
        messages: list[dict[str, Any]] = []
        responses: list[str] = []
        try:
            for i, question in enumerate(example.turns):
                if i == 0 and example.image_refs:
                    parts: list[dict[str, Any]] = [{"type": "text", "text": question}]
                    for ref in example.image_refs:
                        parts.extend(_image_input(ref))
                    messages.append({"role": "user", "content": parts})
                else:
                    messages.append({"role": "user", "content": question})
                result = client.chat(
                    messages, temperature=temperature, max_tokens=max_tokens
                )
                responses.append(result.text)
                messages.append({"role": "assistant", "content": result.text})
            return ModelAnswer(
                example_id=example.example_id,
                model_id=model,
                responses=tuple(responses),
                token_count=sum(count(r) for r in responses),
            )
        except AuthError:
            raise
        except (ServiceError, DataError) as exc:
            return CollectFailure(example.example_id, str(exc))

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        outcomes = list(pool.map(one, examples))
    answers = [o for o in outcomes if isinstance(o, ModelAnswer)]
    failures = [o for o in outcomes if isinstance(o, CollectFailure)]
    return answers, failures


# ---------------------------------------------------------------------------
# Judging


def extract_label(text: str) -> str | None:
    """Final bracketed verdict tag in the judge's reply, if any."""
    matches = _LABEL_RE.findall(text)
    return matches[-1] if matches else None


def _transcript(title: str, example: BenchExample, responses: Sequence[str]) -> str:
    lines = [f"<{title}>"]
    for question, answer in zip(example.turns, responses):
        lines.append(f"Q: {question}")
        lines.append(f"{title}: {answer}")
    lines.append(f"</{title}>")
    return "\n".join(lines)


def _judge_user_message(
    example: BenchExample, first: ModelAnswer, second: ModelAnswer
) -> str:
    parts = [f"Task questions ({example.topic}):"]
    parts.extend(f"{i + 1}. {q}" for i, q in enumerate(example.turns))
    if example.reference:
        parts.append("")
        parts.append("Reference answers:")
        parts.extend(f"{i + 1}. {r}" for i, r in enumerate(example.reference))
    parts.append("")
    parts.append(_transcript("Assistant A", example, first.responses))
    parts.append("")
    parts.append(_transcript("Assistant B", example, second.responses))
    return "\n".join(parts)


def judge_pair(
    example: BenchExample,
    answer_a: ModelAnswer,
    answer_b: ModelAnswer,
    judge_endpoint: Endpoint,
    *,
    temperature: float = 0.0,
    max_tokens: int | None = None,
    _client: ServiceClient | None = None,
) -> tuple[JudgeVerdict, JudgeVerdict]:
    """Two judge games per pair: original order and position-swapped.

    The swapped game's label is mirrored back so both verdicts read in the
    canonical (answer_a, answer_b) orientation. A reply with no verdict
    tag is re-asked once, then recorded as a flagged tie.
    """
    for answer in (answer_a, answer_b):
        if answer.example_id != example.example_id:
            raise DataError("answers do not cover the example being judged")
        if len(answer.responses) != len(example.turns):
            raise DataError(
                f"{answer.model_id!r} gave {len(answer.responses)} responses for "
                f"{len(example.turns)} questions on {example.example_id!r}"
            )
    client = _client or ServiceClient(judge_endpoint)

    def play(first: ModelAnswer, second: ModelAnswer) -> tuple[str, str, bool]:
        messages = [
            {"role": "system", "content": JUDGE_SYSTEM_PROMPT},
            {"role": "user", "content": _judge_user_message(example, first, second)},
        ]
        text = client.chat(messages, temperature=temperature, max_tokens=max_tokens).text
        label = extract_label(text)
        if label is None:
            logger.warning(
                "judge reply for %s had no verdict tag; re-asking", example.example_id
            )
            text = client.chat(messages, temperature=temperature, max_tokens=max_tokens).text
            label = extract_label(text)
        if label is None:
            return "A=B", text, True
        return label, text, False

    label1, rationale1, flagged1 = play(answer_a, answer_b)
    label2, rationale2, flagged2 = play(answer_b, answer_a)
    original = JudgeVerdict(
        example_id=example.example_id,
        model_a=answer_a.model_id,
        model_b=answer_b.model_id,
        label=label1,
        rationale=rationale1,
        swapped=False,
        flagged=flagged1,
    )
    mirrored = JudgeVerdict(
        example_id=example.example_id,
        model_a=answer_a.model_id,
        model_b=answer_b.model_id,
        label=_MIRROR[label2],
        rationale=rationale2,
        swapped=True,
        flagged=flagged2,
    )
    return original, mirrored


def judge_all(
    examples: Sequence[BenchExample],
    candidate: Sequence[ModelAnswer],
    baseline: Sequence[ModelAnswer],
    judge_endpoint: Endpoint,
    *,
    concurrency: int = 4,
    temperature: float = 0.0,
    max_tokens: int | None = None,
) -> tuple[list[JudgeVerdict], list[str]]:
    """Judge the candidate against the baseline on every shared example.

    Examples missing an answer on either side are skipped and reported.
    """
    cand_by_id = {a.example_id: a for a in candidate}
    base_by_id = {a.example_id: a for a in baseline}
    client = ServiceClient(judge_endpoint)
    todo = []
    skipped = []
    for example in examples:
        sides = (cand_by_id.get(example.example_id), base_by_id.get(example.example_id))
        if any(
            a is None or len(a.responses) != len(example.turns) for a in sides
        ):
            skipped.append(example.example_id)
        else:
            todo.append(example)

    def one(example: BenchExample) -> tuple[JudgeVerdict, JudgeVerdict]:
        return judge_pair(
            example,
            cand_by_id[example.example_id],
            base_by_id[example.example_id],
            judge_endpoint,
            temperature=temperature,
            max_tokens=max_tokens,
            _client=client,
        )

    verdicts: list[JudgeVerdict] = []
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        for pair in pool.map(one, todo):
            verdicts.extend(pair)
    if skipped:
        logger.warning("skipped %d examples lacking answers on a side", len(skipped))
    return verdicts, skipped


# ---------------------------------------------------------------------------
# Aggregation and ranking


def verdicts_to_battles(verdicts: Sequence[JudgeVerdict]) -> list[Battle]:
    """Expand labels into weighted battle rows: a decisive verdict counts
    as three wins, a plain one as one win, a tie as half each."""
    battles: list[Battle] = []
    for v in verdicts:
        if v.label == "A=B":
            battles.append(Battle(v.model_a, v.model_b, OUTCOME_TIE))
        elif v.label in ("A>>B", "B>>A"):
            outcome = OUTCOME_A if v.label == "A>>B" else OUTCOME_B
            battles.extend(
                Battle(v.model_a, v.model_b, outcome) for _ in range(STRONG_WIN_WEIGHT)
            )
        else:
            outcome = OUTCOME_A if v.label == "A>B" else OUTCOME_B
            battles.append(Battle(v.model_a, v.model_b, outcome))
    return battles


def win_totals(battles: Sequence[Battle]) -> dict[str, float]:
    totals: dict[str, float] = defaultdict(float)
    for b in battles:
        if b.outcome == OUTCOME_A:
            totals[b.model_a] += 1.0
            totals[b.model_b] += 0.0
        elif b.outcome == OUTCOME_B:
            totals[b.model_b] += 1.0
            totals[b.model_a] += 0.0
        else:
            totals[b.model_a] += 0.5
            totals[b.model_b] += 0.5
    return dict(totals)


def _check_connected(battles: Sequence[Battle], models: Sequence[str], baseline_id: str) -> None:
    adjacency: dict[str, set[str]] = {m: set() for m in models}
    for b in battles:
        adjacency[b.model_a].add(b.model_b)
        adjacency[b.model_b].add(b.model_a)
    reached = {baseline_id}
    queue = deque([baseline_id])
    while queue:
        for other in adjacency[queue.popleft()]:
            if other not in reached:
                reached.add(other)
                queue.append(other)
    unreachable = sorted(set(models) - reached)
    if unreachable:
        raise DataError(
            "comparison graph is disconnected; no battle path from baseline to: "
            + ", ".join(unreachable)
        )


def fit_bradley_terry(
    battles: Sequence[Battle],
    baseline_id: str,
    *,
    models: Sequence[str] | None = None,
    tol: float = 1e-9,
    max_iter: int = 10_000,
) -> dict[str, float]:
    """Maximum-likelihood strengths via minorization-maximization.

    The baseline strength is fixed at 0 (the gauge). Before fitting, one
    pseudo-win and one pseudo-loss against the baseline are added per
    model so sweep outcomes stay finite. The raw battle graph must
    connect every model to the baseline.
    """
    if models is None:
        names = sorted({m for b in battles for m in (b.model_a, b.model_b)})
    else:
        names = list(models)
    if baseline_id not in names:
        raise DataError(f"baseline {baseline_id!r} has no battles")
    if models is None:
        _check_connected(battles, names, baseline_id)
    index = {m: i for i, m in enumerate(names)}
    n = len(names)
    wins = np.zeros((n, n))
    games = np.zeros((n, n))
    for b in battles:
        i, j = index[b.model_a], index[b.model_b]
        games[i, j] += 1.0
        games[j, i] += 1.0
        if b.outcome == OUTCOME_A:
            wins[i, j] += 1.0
        elif b.outcome == OUTCOME_B:
            wins[j, i] += 1.0
        else:
            wins[i, j] += 0.5
            wins[j, i] += 0.5
    base = index[baseline_id]
    for i in range(n):
        if i == base:
            continue
        wins[i, base] += 1.0
        wins[base, i] += 1.0
        games[i, base] += 2.0
        games[base, i] += 2.0

    strength = np.ones(n)
    total_wins = wins.sum(axis=1)
    active = games > 0
    for _ in range(max_iter):
        pair_sum = strength[:, None] + strength[None, :]
        rates = np.zeros((n, n))
        rates[active] = games[active] / pair_sum[active]
        updated = total_wins / rates.sum(axis=1)
        updated = updated / updated[base]
        if np.max(np.abs(updated - strength) / np.maximum(strength, 1e-300)) < tol:
            strength = updated
            break
        strength = updated
    return {m: float(np.log(strength[index[m]])) for m in names}


def score_from_strength(beta: float) -> float:
    """Predicted win probability against the baseline, scaled to [0, 100]."""
    return 100.0 / (1.0 + math.exp(-beta))


def fit_scores(
    battles: Sequence[Battle],
    baseline_id: str,
    *,
    models: Sequence[str] | None = None,
) -> dict[str, float]:
    strengths = fit_bradley_terry(battles, baseline_id, models=models)
    return {m: score_from_strength(b) for m, b in strengths.items()}


def bootstrap_ci(
    battles: Sequence[Battle],
    baseline_id: str,
    rounds: int = 1000,
    seed: int = 0,
) -> dict[str, tuple[float, float]]:
    """Percentile bootstrap deltas around the point scores.

    Battles are resampled with replacement each round and refit over the
    full model list, and the 2.5/97.5 percentiles of the resampled scores
    are reported as signed offsets from the point estimate.
    """
    if rounds < 100:
        raise ConfigError("bootstrap needs at least 100 rounds")
    models = sorted({m for b in battles for m in (b.model_a, b.model_b)})
    point = fit_scores(battles, baseline_id)
    samples = {m: np.empty(rounds) for m in models}
    n = len(battles)
    battle_list = list(battles)
    for r in range(rounds):
        rng = rng_from(seed, STREAM_BOOTSTRAP, r)
        picks = rng.integers(0, n, size=n)
        resampled = [battle_list[i] for i in picks]
        scores = fit_scores(resampled, baseline_id, models=models)
        for m in models:
            samples[m][r] = scores[m]
    out: dict[str, tuple[float, float]] = {}
    for m in models:
        low, high = np.percentile(samples[m], [2.5, 97.5])
        out[m] = (float(low - point[m]), float(high - point[m]))
    return out


def build_leaderboard(
    scores: Mapping[str, float],
    cis: Mapping[str, tuple[float, float]],
    answers: Sequence[ModelAnswer],
    baseline_id: str,
) -> Leaderboard:
    """Rows sorted by score descending; equal scores break by model id."""
    token_sums: dict[str, list[int]] = defaultdict(list)
    for a in answers:
        token_sums[a.model_id].append(a.token_count)
    missing = [m for m in scores if m not in cis or m not in token_sums]
    if missing:
        raise DataError(f"models missing from inputs: {sorted(missing)}")
    rows = []
    for m, score in scores.items():
        low, high = cis[m]
        avg = round(sum(token_sums[m]) / len(token_sums[m]))
        rows.append(
            LeaderboardRow(
                model_id=m,
                score=score,
                ci_low_delta=low,
                ci_high_delta=high,
                avg_tokens=int(avg),
            )
        )
    rows.sort(key=lambda r: (-r.score, r.model_id))
    return Leaderboard(rows=tuple(rows), baseline_id=baseline_id)


LEADERBOARD_COLUMNS = ("Model", "Score", "Δ", "95% CI", "Average Tokens")


def render_leaderboard_table(board: Leaderboard) -> str:
    rows = [
        (
            row.model_id,
            f"{row.score:.1f}",
            "--",
            f"({row.ci_low_delta:.1f}, {row.ci_high_delta:.1f})",
            str(row.avg_tokens),
        )
        for row in board.rows
    ]
    widths = [
        max(len(LEADERBOARD_COLUMNS[c]), *(len(r[c]) for r in rows)) if rows else len(LEADERBOARD_COLUMNS[c])
        for c in range(len(LEADERBOARD_COLUMNS))
    ]
    header = " | ".join(h.ljust(w) for h, w in zip(LEADERBOARD_COLUMNS, widths))
    sep = "-+-".join("-" * w for w in widths)
    lines = [header, sep]
    lines += [" | ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    lines.append(f"(baseline: {board.baseline_id})")
    return "\n".join(lines)


def write_leaderboard(board: Leaderboard, path: str | Path) -> int:
    return jsonl.write_records(
        path,
        (
            {
                "model_id": r.model_id,
                "score": r.score,
                "ci_low_delta": r.ci_low_delta,
                "ci_high_delta": r.ci_high_delta,
                "avg_tokens": r.avg_tokens,
            }
            for r in board.rows
        ),
    )
