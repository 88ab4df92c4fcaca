"""Correlated image-group construction and batch planning.

Two group builders:

* iterative proximity sampling ("rsi"): after a uniform first pick, each
  next member is drawn with probability inversely proportional to the sum
  of its distances to the already-selected members, raised to the power
  ``k`` (plus a small epsilon to keep coincident points finite);
* cluster matching ("gcma"): clusters from two embedding spaces are
  greedily paired by an overlap-over-mean-size score and their unions are
  sampled down to group size.

Both are deterministic given a run seed; see :mod:`imweave.seeds` for the
stream-splitting rule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import AbstractSet, Iterable, Sequence

import numpy as np

from . import jsonl
from .errors import ConfigError, DataError, PlanError
from .fusion import FusedEmbedding
from .seeds import STREAM_BATCH, STREAM_UNION, child_seed, rng_from

logger = logging.getLogger(__name__)

METHOD_RSI = "rsi"
METHOD_GCMA = "gcma"

DEFAULT_K = 12
DEFAULT_EPSILON = 1e-8
DEFAULT_IMAGES_PER_BATCH = 20_000
DEFAULT_CONVERSATIONS_PER_BATCH = 5_000
DEFAULT_GROUP_SIZE_RANGE = (4, 5)


@dataclass(frozen=True)
class MatchedPair:
    """Union of one cluster from each embedding space."""

    union_ids: tuple[str, ...]
    score: float
    source_sizes: tuple[int, int]

    def __post_init__(self) -> None:
        if not self.union_ids:
            raise DataError("matched pair has empty union")
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"match score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class ImageGroup:
    group_id: str
    member_ids: tuple[str, ...]
    method: str
    seed: int
    k: int
    epsilon: float

    def __post_init__(self) -> None:
        if len(self.member_ids) < 2:
            raise DataError(f"group {self.group_id!r}: needs at least 2 members")
        if len(set(self.member_ids)) != len(self.member_ids):
            raise DataError(f"group {self.group_id!r}: duplicate member ids")
        if self.method not in (METHOD_RSI, METHOD_GCMA):
            raise DataError(f"group {self.group_id!r}: unknown method {self.method!r}")


def match_score(a: AbstractSet[str], b: AbstractSet[str]) -> float:
    """Overlap divided by mean set size; 1.0 for identical sets."""
    if not a or not b:
        raise DataError("match_score requires non-empty sets")
    return len(a & b) / ((len(a) + len(b)) / 2)


def greedy_cluster_match(
    c1: Sequence[AbstractSet[str]], c2: Sequence[AbstractSet[str]]
) -> tuple[list[MatchedPair], int]:
    """Greedily pair clusters from two spaces, largest first.

    Both lists are ordered by size descending; the larger head cluster is
    popped and unioned with its best-scoring partner from the opposite
    list (first maximum wins), which is then removed. Stops when either
    list is empty. Returns the matched pairs and the total union size.
    """
    for side, clusters in (("first", c1), ("second", c2)):
        if any(not c for c in clusters):
            raise DataError(f"{side} cluster list contains an empty set")
    left = sorted((set(c) for c in c1), key=len, reverse=True)
    right = sorted((set(c) for c in c2), key=len, reverse=True)
    pairs: list[MatchedPair] = []
    total_samples = 0
    while left and right:
        if len(left[0]) >= len(right[0]):
            larger = left.pop(0)
            smaller_list = right
        else:
            larger = right.pop(0)
            smaller_list = left
        best_index = 0
        best_score = -1.0
        for i, cluster in enumerate(smaller_list):
            score = match_score(larger, cluster)
            if score > best_score:
                best_score = score
                best_index = i
        best = smaller_list.pop(best_index)
        union = larger | best
        pairs.append(
            MatchedPair(
                union_ids=tuple(sorted(union)),
                score=best_score,
                source_sizes=(len(larger), len(best)),
            )
        )
        total_samples += len(union)
    return pairs, total_samples


def sampling_distribution(
    candidates: Sequence[FusedEmbedding],
    selected: Sequence[FusedEmbedding],
    k: int,
    epsilon: float,
) -> np.ndarray:
    """Selection probabilities for each candidate given the selected set.

    Weight of candidate x is 1 / (sum over selected u of ||x - u||^k +
    epsilon), normalized to sum 1. Closer candidates dominate, more so
    for larger k.
    """
    if not candidates:
        raise DataError("no candidates to sample from")
    if not selected:
        raise DataError("selected set must be non-empty")
    if k < 1:
        raise ConfigError("k must be >= 1")
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    overlap = {c.id for c in candidates} & {s.id for s in selected}
    if overlap:
        raise DataError(f"candidates overlap selected set: {sorted(overlap)[:5]}")
    C = np.stack([c.vector for c in candidates])
    S = np.stack([s.vector for s in selected])
    if C.shape[1] != S.shape[1]:
        raise DataError("candidate/selected dimension mismatch")
    dist = np.sqrt(((C[:, None, :] - S[None, :, :]) ** 2).sum(axis=-1))
    with np.errstate(over="ignore"):
        summed = (dist**k).sum(axis=1) + epsilon
        weights = 1.0 / summed
    weights[~np.isfinite(weights)] = 0.0
    total = weights.sum()
    if total <= 0.0:
        # all candidates astronomically far; fall back to uniform
        return np.full(len(candidates), 1.0 / len(candidates))
    return weights / total


def _summed_powered_distances(
    candidates: Sequence[FusedEmbedding], selected: Sequence[FusedEmbedding], k: int
) -> np.ndarray:
    C = np.stack([c.vector for c in candidates])
    S = np.stack([s.vector for s in selected])
    dist = np.sqrt(((C[:, None, :] - S[None, :, :]) ** 2).sum(axis=-1))
    with np.errstate(over="ignore"):
        return (dist**k).sum(axis=1)


def random_sample_iteration(
    pool: Sequence[FusedEmbedding],
    n: int,
    k: int = DEFAULT_K,
    epsilon: float = DEFAULT_EPSILON,
    seed: int = 0,
    *,
    group_id: str = "group-0",
    method: str = METHOD_RSI,
    variant: str = "nearest",
) -> ImageGroup:
    """Iteratively select ``n`` members from ``pool`` without replacement.

    The first member is uniform; later members follow
    :func:`sampling_distribution`. ``variant="farthest"`` replaces the
    draw with a deterministic argmax of summed powered distances.
    """
    if n < 2:
        raise DataError("group size must be >= 2")
    if n > len(pool):
        raise DataError(f"cannot draw {n} members from a pool of {len(pool)}")
    if variant not in ("nearest", "farthest"):
        raise ConfigError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(seed)
    remaining = list(pool)
    first = int(rng.integers(len(remaining)))
    chosen = [remaining.pop(first)]
    while len(chosen) < n:
        if variant == "farthest":
            totals = _summed_powered_distances(remaining, chosen, k)
            idx = int(np.argmax(totals))
        else:
            probs = sampling_distribution(remaining, chosen, k, epsilon)
            idx = int(rng.choice(len(remaining), p=probs))
        chosen.append(remaining.pop(idx))
    return ImageGroup(
        group_id=group_id,
        member_ids=tuple(e.id for e in chosen),
        method=method,
        seed=int(seed),
        k=int(k),
        epsilon=float(epsilon),
    )


# ---------------------------------------------------------------------------
# Batch planning and group generation


@dataclass(frozen=True)
class BatchSpec:
    index: int
    start: int  # pool slice [start, end)
    end: int
    conversations: int


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[BatchSpec, ...]
    group_size_range: tuple[int, int]
    leftover: int

    @property
    def total_groups(self) -> int:
        return sum(b.conversations for b in self.batches)


def plan_batches(
    pool_size: int,
    images_per_batch: int = DEFAULT_IMAGES_PER_BATCH,
    conversations_per_batch: int = DEFAULT_CONVERSATIONS_PER_BATCH,
    group_size_range: tuple[int, int] = DEFAULT_GROUP_SIZE_RANGE,
    *,
    with_replacement: bool = False,
) -> BatchPlan:
    """Partition the corpus into generation batches.

    Only full batches are planned; a trailing remainder smaller than
    ``images_per_batch`` is reported as leftover. Without replacement,
    every batch must be able to host ``conversations_per_batch`` groups of
    at least the minimum size.
    """
    lo, hi = group_size_range
    if lo < 2 or hi < lo:
        raise PlanError(f"invalid group size range ({lo}, {hi})")
    if images_per_batch < 1:
        raise PlanError("images_per_batch must be >= 1")
    if conversations_per_batch < 0:
        raise PlanError("conversations_per_batch must be >= 0")
    if conversations_per_batch == 0:
        return BatchPlan(batches=(), group_size_range=(lo, hi), leftover=pool_size)
    if pool_size < images_per_batch:
        raise PlanError(
            f"pool of {pool_size} images is smaller than one batch of {images_per_batch}"
        )
    if not with_replacement and conversations_per_batch * lo > images_per_batch:
        raise PlanError(
            f"infeasible plan: {conversations_per_batch} groups of at least {lo} images "
            f"need more than the {images_per_batch} images available per batch"
        )
    count = pool_size // images_per_batch
    batches = tuple(
        BatchSpec(
            index=b,
            start=b * images_per_batch,
            end=(b + 1) * images_per_batch,
            conversations=conversations_per_batch,
        )
        for b in range(count)
    )
    return BatchPlan(
        batches=batches,
        group_size_range=(lo, hi),
        leftover=pool_size - count * images_per_batch,
    )


def generate_batch_groups(
    pool: Sequence[FusedEmbedding],
    plan: BatchPlan,
    *,
    seed: int,
    k: int = DEFAULT_K,
    epsilon: float = DEFAULT_EPSILON,
    with_replacement: bool = False,
    variant: str = "nearest",
) -> list[ImageGroup]:
    """Run iterative sampling over every planned batch.

    Without replacement, a drawn group size is capped so the remaining
    groups in the batch can still reach the minimum size, and selected
    ids leave the batch pool.
    """
    lo, hi = plan.group_size_range
    groups: list[ImageGroup] = []
    for batch in plan.batches:
        available = list(pool[batch.start : batch.end])
        size_rng = rng_from(seed, STREAM_BATCH, batch.index)
        for g in range(batch.conversations):
            drawn = int(size_rng.integers(lo, hi + 1))
            if with_replacement:
                size = min(drawn, len(available))
            else:
                budget = len(available) - (batch.conversations - 1 - g) * lo
                size = min(drawn, budget)
            group_seed = child_seed(seed, STREAM_BATCH, batch.index, g)
            group = random_sample_iteration(
                available,
                size,
                k,
                epsilon,
                group_seed,
                group_id=f"rsi-{batch.index:04d}-{g:04d}",
                method=METHOD_RSI,
                variant=variant,
            )
            groups.append(group)
            if not with_replacement:
                members = set(group.member_ids)
                available = [e for e in available if e.id not in members]
    return groups


def generate_union_groups(
    matches: Sequence[MatchedPair],
    embeddings: Sequence[FusedEmbedding],
    *,
    seed: int,
    k: int = DEFAULT_K,
    epsilon: float = DEFAULT_EPSILON,
    group_size_range: tuple[int, int] = DEFAULT_GROUP_SIZE_RANGE,
    variant: str = "nearest",
) -> list[ImageGroup]:
    """Sample one group from each matched union; unions smaller than the
    minimum group size are skipped."""
    lo, hi = group_size_range
    if lo < 2 or hi < lo:
        raise ConfigError(f"invalid group size range ({lo}, {hi})")
    by_id = {e.id: e for e in embeddings}
    groups: list[ImageGroup] = []
    skipped = 0
    for u, pair in enumerate(matches):
        missing = [i for i in pair.union_ids if i not in by_id]
        if missing:
            raise DataError(f"union {u}: ids missing from embeddings: {missing[:5]}")
        members = [by_id[i] for i in pair.union_ids]
        if len(members) < lo:
            skipped += 1
            continue
        size_rng = rng_from(seed, STREAM_UNION, u)
        size = min(int(size_rng.integers(lo, hi + 1)), len(members))
        group = random_sample_iteration(
            members,
            size,
            k,
            epsilon,
            child_seed(seed, STREAM_UNION, u, 0),
            group_id=f"gcma-{u:04d}",
            method=METHOD_GCMA,
            variant=variant,
        )
        groups.append(group)
    if skipped:
        logger.info("skipped %d unions smaller than %d members", skipped, lo)
    return groups


# ---------------------------------------------------------------------------
# File IO


def write_groups(groups: Iterable[ImageGroup], path: str | Path) -> int:
    return jsonl.write_records(
        path,
        (
            {
                "group_id": g.group_id,
                "member_ids": list(g.member_ids),
                "method": g.method,
                "seed": g.seed,
                "k": g.k,
                "epsilon": g.epsilon,
            }
            for g in groups
        ),
    )


def read_groups(path: str | Path) -> list[ImageGroup]:
    groups: list[ImageGroup] = []
    seen: set[str] = set()
    for lineno, rec in jsonl.iter_records(path):
        try:
            gid = rec["group_id"]
            members = rec["member_ids"]
            method = rec["method"]
            seed = rec["seed"]
            k = rec["k"]
            epsilon = rec["epsilon"]
        except KeyError as exc:
            raise DataError(f"{path}: line {lineno}: missing field {exc}")
        if not isinstance(members, list) or not all(isinstance(m, str) for m in members):
            raise DataError(f"{path}: line {lineno}: member_ids must be a list of strings")
        if gid in seen:
            raise DataError(f"{path}: line {lineno}: duplicate group_id {gid!r}")
        seen.add(gid)
        groups.append(
            ImageGroup(
                group_id=gid,
                member_ids=tuple(members),
                method=method,
                seed=int(seed),
                k=int(k),
                epsilon=float(epsilon),
            )
        )
    return groups


def write_matches(matches: Iterable[MatchedPair], path: str | Path) -> int:
    return jsonl.write_records(
        path,
        (
            {
                "union_ids": list(m.union_ids),
                "score": m.score,
                "source_sizes": list(m.source_sizes),
            }
            for m in matches
        ),
    )


def read_matches(path: str | Path) -> list[MatchedPair]:
    out: list[MatchedPair] = []
    for lineno, rec in jsonl.iter_records(path):
        union = rec.get("union_ids")
        if not isinstance(union, list) or not all(isinstance(u, str) for u in union):
            raise DataError(f"{path}: line {lineno}: union_ids must be a list of strings")
        sizes = rec.get("source_sizes", [0, 0])
        out.append(
            MatchedPair(
                union_ids=tuple(union),
                score=float(rec.get("score", 0.0)),
                source_sizes=(int(sizes[0]), int(sizes[1])),
            )
        )
    return out
