"""Density-based clustering of fused embeddings.

Two clusterers over Euclidean distance:

* ``dbscan_cluster`` — classic flat DBSCAN with a deterministic
  border-point tie-break (lowest adjacent core label wins).
* ``hdbscan_cluster`` — hierarchical density clustering: core distances,
  mutual reachability, a minimum spanning tree, single linkage, a
  condensed hierarchy at ``min_cluster_size``, and excess-of-mass cluster
  extraction. Points outside every selected cluster are noise (-1).

Everything is O(n^2) time with O(n) memory for the spanning tree, which
is fine at batch scale (tens of thousands of points).
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import jsonl
from .errors import ConfigError, DataError
from .fusion import FusedEmbedding

logger = logging.getLogger(__name__)

NOISE = -1


@dataclass(frozen=True)
class ClusterParams:
    min_cluster_size: int = 8
    min_samples: int = 5
    dbscan_eps: float = 0.5

    def __post_init__(self) -> None:
        if self.min_cluster_size < 2:
            raise ConfigError("min_cluster_size must be >= 2")
        if self.min_samples < 1:
            raise ConfigError("min_samples must be >= 1")
        if self.min_samples > self.min_cluster_size:
            raise ConfigError("min_samples must be <= min_cluster_size")
        if not self.dbscan_eps > 0:
            raise ConfigError("dbscan_eps must be > 0")


@dataclass(frozen=True)
class ClusterAssignment:
    """Labels per corpus id; -1 is noise. ``clusters[k]`` holds label k's ids."""

    labels: dict[str, int]
    clusters: tuple[frozenset[str], ...]

    @property
    def noise_ids(self) -> frozenset[str]:
        return frozenset(i for i, l in self.labels.items() if l == NOISE)


def _make_assignment(ids: Sequence[str], labels: np.ndarray) -> ClusterAssignment:
    by_label: dict[int, set[str]] = defaultdict(set)
    label_map: dict[str, int] = {}
    for pid, lab in zip(ids, labels):
        lab = int(lab)
        label_map[pid] = lab
        if lab != NOISE:
            by_label[lab].add(pid)
    clusters = tuple(frozenset(by_label[k]) for k in sorted(by_label))
    return ClusterAssignment(labels=label_map, clusters=clusters)


def _stack_points(points: Sequence[FusedEmbedding]) -> tuple[list[str], np.ndarray]:
    if not points:
        raise DataError("clustering needs at least 1 point")
    dims = {p.dim for p in points}
    if len(dims) > 1:
        raise DataError(f"points have inconsistent dimensions: {sorted(dims)}")
    ids = [p.id for p in points]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate point ids in clustering input")
    return ids, np.stack([p.vector for p in points])


def _distance_row(X: np.ndarray, i: int) -> np.ndarray:
    return np.sqrt(((X - X[i]) ** 2).sum(axis=1))


def _row_chunk(n: int, d: int) -> int:
    # keep the broadcast intermediate around 64M float64s
    return max(1, 8_000_000 // max(1, n * d))


def core_distances(X: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance from each point to its min_samples-th nearest neighbor.

    The point itself is not counted as a neighbor (scikit-learn's port
    counts it, so its equivalent setting is ``min_samples + 1``).
    """
    n, d = X.shape
    k = min(min_samples, n - 1)
    if k < 1:
        return np.zeros(n)
    out = np.empty(n)
    step = _row_chunk(n, d)
    for start in range(0, n, step):
        chunk = X[start : start + step]
        dist = np.sqrt(((chunk[:, None, :] - X[None, :, :]) ** 2).sum(axis=-1))
        out[start : start + step] = np.partition(dist, k, axis=1)[:, k]
    return out


def mutual_reachability(points: Sequence[FusedEmbedding], min_samples: int) -> np.ndarray:
    """Dense mutual reachability matrix: max(core_a, core_b, d(a, b))."""
    _, X = _stack_points(points)
    n = X.shape[0]
    core = core_distances(X, min_samples)
    mr = np.empty((n, n))
    for i in range(n):
        row = _distance_row(X, i)
        mr[i] = np.maximum(np.maximum(core, core[i]), row)
    np.fill_diagonal(mr, 0.0)
    return mr


def _mst_prim(X: np.ndarray, core: np.ndarray) -> np.ndarray:
    """Minimum spanning tree of the implicit mutual-reachability graph.

    Streams one distance row per step instead of materializing the full
    matrix. Returns (n-1, 3) rows of (u, v, weight).
    """
    n = X.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    edges = np.empty((n - 1, 3))
    current = 0
    in_tree[0] = True
    for step in range(n - 1):
        row = _distance_row(X, current)
        mr = np.maximum(np.maximum(core, core[current]), row)
        better = (mr < best) & ~in_tree
        best[better] = mr[better]
        parent[better] = current
        candidate = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(candidate))
        edges[step] = (parent[nxt], nxt, best[nxt])
        in_tree[nxt] = True
        current = nxt
    return edges


def minimum_spanning_edges(
    points: Sequence[FusedEmbedding], min_samples: int
) -> np.ndarray:
    """Expose the mutual-reachability MST for inspection and testing."""
    _, X = _stack_points(points)
    if X.shape[0] < 2:
        return np.empty((0, 3))
    core = core_distances(X, min_samples)
    return _mst_prim(X, core)


def _single_linkage(edges: np.ndarray, n: int) -> np.ndarray:
    """Merge MST edges by ascending weight into a dendrogram.

    Output rows are (left_node, right_node, distance, size) where leaves
    are 0..n-1 and row i creates node n+i.
    """
    order = np.argsort(edges[:, 2], kind="stable")
    edges = edges[order]
    uf_parent = np.arange(2 * n - 1, dtype=np.int64)
    size = np.zeros(2 * n - 1)
    size[:n] = 1.0

    def find(x: int) -> int:
        root = x
        while uf_parent[root] != root:
            root = uf_parent[root]
        while uf_parent[x] != root:
            uf_parent[x], x = root, uf_parent[x]
        return root

    rows = np.empty((n - 1, 4))
    next_node = n
    for i in range(n - 1):
        u, v, w = edges[i]
        ru, rv = find(int(u)), find(int(v))
        merged = size[ru] + size[rv]
        rows[i] = (ru, rv, w, merged)
        size[next_node] = merged
        uf_parent[ru] = next_node
        uf_parent[rv] = next_node
        next_node += 1
    return rows


def _condense_tree(
    hierarchy: np.ndarray, n: int, min_cluster_size: int
) -> list[tuple[int, int, float, int]]:
    """Collapse the dendrogram into cluster births and point fall-outs.

    Walking down from the root, a split child smaller than
    ``min_cluster_size`` sheds its points at that level (lambda = 1 /
    distance); a child at least that large either continues the parent
    cluster or, when both children qualify, starts two new clusters.
    Cluster ids start at n (the root cluster).
    """
    children: dict[int, tuple[int, int, float]] = {}
    for i in range(hierarchy.shape[0]):
        left, right, dist, _ = hierarchy[i]
        children[n + i] = (int(left), int(right), float(dist))

    def size_of(node: int) -> int:
        return 1 if node < n else int(hierarchy[node - n][3])

    def leaves_under(node: int) -> list[int]:
        out: list[int] = []
        stack = [node]
        while stack:
            x = stack.pop()
            if x < n:
                out.append(x)
            else:
                left, right, _ = children[x]
                stack.append(left)
                stack.append(right)
        return out

    root = 2 * n - 2
    rows: list[tuple[int, int, float, int]] = []
    relabel = {root: n}
    next_cluster = n + 1
    stack = [root]
    while stack:
        node = stack.pop()
        cluster = relabel[node]
        left, right, dist = children[node]
        lam = math.inf if dist <= 0.0 else 1.0 / dist
        left_size, right_size = size_of(left), size_of(right)
        if left_size >= min_cluster_size and right_size >= min_cluster_size:
            for child, child_size in ((left, left_size), (right, right_size)):
                rows.append((cluster, next_cluster, lam, child_size))
                relabel[child] = next_cluster
                next_cluster += 1
                stack.append(child)
        elif left_size < min_cluster_size and right_size < min_cluster_size:
            for leaf in leaves_under(left):
                rows.append((cluster, leaf, lam, 1))
            for leaf in leaves_under(right):
                rows.append((cluster, leaf, lam, 1))
        else:
            big, small = (left, right) if left_size >= right_size else (right, left)
            for leaf in leaves_under(small):
                rows.append((cluster, leaf, lam, 1))
            relabel[big] = cluster
            stack.append(big)
    return rows


def _stability_scores(
    rows: list[tuple[int, int, float, int]], n: int
) -> dict[int, float]:
    """Excess of mass per cluster: sum of (exit lambda - birth lambda) * size."""
    births: dict[int, float] = {n: 0.0}
    for _, child, lam, _ in rows:
        if child >= n:
            births[child] = lam
    stability: dict[int, float] = defaultdict(float)
    for parent, _, lam, size in rows:
        stability[parent] += (lam - births[parent]) * size
    return dict(stability)


def _extract_eom(
    rows: list[tuple[int, int, float, int]],
    stability: dict[int, float],
    n: int,
) -> list[int]:
    """Pick clusters leaves-up: a parent wins only if it beats the sum of
    its children's (possibly propagated) stabilities. The root is never
    selectable; ties favor the parent."""
    cluster_children: dict[int, list[int]] = defaultdict(list)
    clusters: set[int] = set()
    for parent, child, _, _ in rows:
        clusters.add(parent)
        if child >= n:
            cluster_children[parent].append(child)
            clusters.add(child)
    root = n
    scores = dict(stability)
    selected = {c: True for c in clusters if c != root}
    for node in sorted(selected, reverse=True):
        kids = cluster_children[node]
        child_sum = sum(scores[c] for c in kids)
        if kids and child_sum > scores[node]:
            selected[node] = False
            scores[node] = child_sum
        else:
            stack = list(kids)
            while stack:
                c = stack.pop()
                selected[c] = False
                stack.extend(cluster_children[c])
    return sorted(c for c, keep in selected.items() if keep)


def _label_points(
    rows: list[tuple[int, int, float, int]],
    chosen: list[int],
    n: int,
) -> np.ndarray:
    point_parent: dict[int, int] = {}
    cluster_parent: dict[int, int] = {}
    for parent, child, _, _ in rows:
        if child < n:
            point_parent[child] = parent
        else:
            cluster_parent[child] = parent
    index = {c: i for i, c in enumerate(chosen)}
    labels = np.full(n, NOISE, dtype=np.int64)
    for p in range(n):
        c: int | None = point_parent.get(p)
        while c is not None:
            if c in index:
                labels[p] = index[c]
                break
            c = cluster_parent.get(c)
    return labels


def hdbscan_cluster(
    points: Sequence[FusedEmbedding], params: ClusterParams
) -> ClusterAssignment:
    """Hierarchical density clustering with excess-of-mass extraction.

    Fewer points than ``min_cluster_size`` yields an all-noise result with
    a warning. A zero-diameter input (all points coincident) is treated as
    one infinitely dense cluster rather than noise.
    """
    ids, X = _stack_points(points)
    n = X.shape[0]
    if n < params.min_cluster_size:
        logger.warning(
            "only %d points for min_cluster_size=%d; labeling all noise",
            n,
            params.min_cluster_size,
        )
        return _make_assignment(ids, np.full(n, NOISE, dtype=np.int64))
    core = core_distances(X, params.min_samples)
    edges = _mst_prim(X, core)
    if float(edges[:, 2].max()) == 0.0:
        return _make_assignment(ids, np.zeros(n, dtype=np.int64))
    hierarchy = _single_linkage(edges, n)
    rows = _condense_tree(hierarchy, n, params.min_cluster_size)
    stability = _stability_scores(rows, n)
    chosen = _extract_eom(rows, stability, n)
    labels = _label_points(rows, chosen, n)
    return _make_assignment(ids, labels)


def dbscan_cluster(
    points: Sequence[FusedEmbedding], params: ClusterParams
) -> ClusterAssignment:
    """Flat DBSCAN: clusters are eps-connected components of core points
    plus border points; border points join the lowest-labeled adjacent
    core cluster, which makes the labeling order-independent."""
    ids, X = _stack_points(points)
    n, d = X.shape
    eps = params.dbscan_eps
    neighbors: list[np.ndarray] = []
    step = _row_chunk(n, d)
    for start in range(0, n, step):
        chunk = X[start : start + step]
        dist = np.sqrt(((chunk[:, None, :] - X[None, :, :]) ** 2).sum(axis=-1))
        for r in range(dist.shape[0]):
            neighbors.append(np.flatnonzero(dist[r] <= eps))
    core = np.array([len(nb) >= params.min_samples for nb in neighbors])

    labels = np.full(n, NOISE, dtype=np.int64)
    next_label = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        labels[i] = next_label
        queue = [i]
        while queue:
            j = queue.pop()
            for nb in neighbors[j]:
                if core[nb] and labels[nb] == NOISE:
                    labels[nb] = next_label
                    queue.append(int(nb))
        next_label += 1
    for i in range(n):
        if core[i]:
            continue
        adjacent = [int(labels[nb]) for nb in neighbors[i] if core[nb]]
        if adjacent:
            labels[i] = min(adjacent)
    return _make_assignment(ids, labels)


def cluster_summary(assignment: ClusterAssignment) -> dict:
    """Cluster count, sizes in descending order, and noise fraction."""
    total = len(assignment.labels)
    if total == 0:
        raise DataError("empty assignment")
    sizes = sorted((len(c) for c in assignment.clusters), reverse=True)
    noise = sum(1 for l in assignment.labels.values() if l == NOISE)
    return {
        "clusters": len(assignment.clusters),
        "sizes": sizes,
        "noise_fraction": noise / total,
    }


def write_assignment(assignment: ClusterAssignment, path: str | Path) -> int:
    return jsonl.write_records(
        path,
        ({"id": i, "label": int(l)} for i, l in assignment.labels.items()),
    )


def read_assignment(path: str | Path) -> ClusterAssignment:
    labels: dict[str, int] = {}
    for lineno, rec in jsonl.iter_records(path):
        rid = rec.get("id")
        lab = rec.get("label")
        if not isinstance(rid, str) or not rid:
            raise DataError(f"{path}: line {lineno}: missing or empty id")
        if isinstance(lab, bool) or not isinstance(lab, int):
            raise DataError(f"{path}: line {lineno}: label must be an integer")
        if rid in labels:
            raise DataError(f"{path}: line {lineno}: duplicate id {rid!r}")
        labels[rid] = lab
    ids = list(labels)
    arr = np.array([labels[i] for i in ids], dtype=np.int64)
    # normalize arbitrary non-negative labels to 0..K-1 in sorted order
    distinct = sorted(set(arr[arr != NOISE].tolist()))
    remap = {old: new for new, old in enumerate(distinct)}
    arr = np.array([remap.get(int(l), NOISE) for l in arr], dtype=np.int64)
    return _make_assignment(ids, arr)
