"""Embedding fusion, dimensionality reduction, and distances.

Fusion adds the caption embedding onto the image embedding with a scalar
weight ``c``; grouping then runs on plain Euclidean distances, either in
the fused space or after a linear reduction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import jsonl
from .corpus import EmbeddingRecord
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

STAGE_FUSED = "fused"
STAGE_REDUCED = "reduced"


@dataclass(frozen=True)
class FusionConfig:
    c: float = 0.2
    normalize_inputs: bool = False
    reduced_dim: int | None = None

    def __post_init__(self) -> None:
        if not np.isfinite(self.c) or self.c < 0:
            raise ConfigError(f"caption weight c must be finite and >= 0, got {self.c}")
        if self.reduced_dim is not None and self.reduced_dim < 1:
            raise ConfigError(f"reduced_dim must be a positive integer, got {self.reduced_dim}")


@dataclass(frozen=True, eq=False)
class FusedEmbedding:
    id: str
    vector: np.ndarray
    stage: str = STAGE_FUSED

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float64)
        object.__setattr__(self, "vector", vec)
        if vec.ndim != 1 or vec.size < 1:
            raise DataError(f"embedding {self.id!r}: vector must be 1-d, non-empty")
        if not np.isfinite(vec).all():
            raise DataError(f"embedding {self.id!r}: non-finite component")
        if self.stage not in (STAGE_FUSED, STAGE_REDUCED):
            raise DataError(f"embedding {self.id!r}: unknown stage {self.stage!r}")

    @property
    def dim(self) -> int:
        return int(self.vector.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FusedEmbedding):
            return NotImplemented
        return (
            self.id == other.id
            and self.stage == other.stage
            and np.array_equal(self.vector, other.vector)
        )


def _unit(vec: np.ndarray, pair_id: str, part: str) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DataError(f"record {pair_id!r}: cannot normalize zero {part} embedding")
    return vec / norm


def fuse_embedding(rec: EmbeddingRecord, cfg: FusionConfig) -> FusedEmbedding:
    """Combine one record's image and caption vectors: image + c * caption."""
    img = rec.image_embedding
    cap = rec.caption_embedding
    if cfg.normalize_inputs:
        img = _unit(img, rec.id, "image")
        cap = _unit(cap, rec.id, "caption")
    return FusedEmbedding(id=rec.id, vector=img + cfg.c * cap, stage=STAGE_FUSED)


def fuse_all(records: Sequence[EmbeddingRecord], cfg: FusionConfig) -> list[FusedEmbedding]:
    dims = {r.dim for r in records}
    if len(dims) > 1:
        raise DataError(f"records have inconsistent dimensions: {sorted(dims)}")
    return [fuse_embedding(r, cfg) for r in records]


def pairwise_distance(a: FusedEmbedding, b: FusedEmbedding) -> float:
    """Euclidean distance between two embeddings."""
    if a.dim != b.dim:
        raise DataError(f"dimension mismatch: {a.id!r} has {a.dim}, {b.id!r} has {b.dim}")
    return float(np.linalg.norm(a.vector - b.vector))


def reduce_dimensions(
    embeddings: Sequence[FusedEmbedding], cfg: FusionConfig
) -> list[FusedEmbedding]:
    """Project embeddings onto their top principal components.

    Exact eigendecomposition of the sample covariance; component signs are
    fixed so the output is a pure function of the input set. With
    ``reduced_dim`` unset this is the identity.
    """
    if cfg.reduced_dim is None:
        return list(embeddings)
    if len(embeddings) < 2:
        raise ConfigError("dimensionality reduction needs at least 2 points")
    dims = {e.dim for e in embeddings}
    if len(dims) > 1:
        raise DataError(f"embeddings have inconsistent dimensions: {sorted(dims)}")
    d = dims.pop()
    if cfg.reduced_dim >= d:
        raise ConfigError(f"reduced_dim {cfg.reduced_dim} must be < input dimension {d}")

    X = np.stack([e.vector for e in embeddings])
    Xc = X - X.mean(axis=0)
    cov = (Xc.T @ Xc) / (len(embeddings) - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending eigenvalues
    components = eigvecs[:, ::-1][:, : cfg.reduced_dim]
    # Deterministic sign: largest-magnitude loading of each component is positive.
    for j in range(components.shape[1]):
        i = int(np.argmax(np.abs(components[:, j])))
        if components[i, j] < 0:
            components[:, j] = -components[:, j]
    Y = Xc @ components
    return [
        FusedEmbedding(id=e.id, vector=Y[i], stage=STAGE_REDUCED)
        for i, e in enumerate(embeddings)
    ]


def import_reduction(path: str | Path, ids: Sequence[str]) -> list[FusedEmbedding]:
    """Load externally computed reduced coordinates covering exactly ``ids``."""
    rows: dict[str, list[float]] = {}
    for lineno, rec in jsonl.iter_records(path):
        rid = rec.get("id")
        if not isinstance(rid, str) or not rid:
            raise DataError(f"{path}: line {lineno}: missing or empty id")
        if rid in rows:
            raise DataError(f"{path}: line {lineno}: duplicate id {rid!r}")
        rows[rid] = jsonl.as_float_vector(rec.get("vector"), f"id {rid!r} vector")

    wanted = list(ids)
    missing = [i for i in wanted if i not in rows]
    extra = sorted(set(rows) - set(wanted))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing ids: {', '.join(repr(i) for i in missing[:10])}")
        if extra:
            parts.append(f"extra ids: {', '.join(repr(i) for i in extra[:10])}")
        raise DataError(f"{path}: reduction coverage mismatch ({'; '.join(parts)})")

    dims = {len(v) for v in rows.values()}
    if len(dims) > 1:
        raise DataError(f"{path}: inconsistent vector dimensions: {sorted(dims)}")
    return [
        FusedEmbedding(id=i, vector=np.asarray(rows[i]), stage=STAGE_REDUCED)
        for i in wanted
    ]


def write_vectors(embeddings: Iterable[FusedEmbedding], path: str | Path) -> int:
    return jsonl.write_records(
        path,
        ({"id": e.id, "vector": [float(x) for x in e.vector]} for e in embeddings),
    )


def read_vectors(path: str | Path, stage: str = STAGE_FUSED) -> list[FusedEmbedding]:
    out: list[FusedEmbedding] = []
    seen: set[str] = set()
    for lineno, rec in jsonl.iter_records(path):
        rid = rec.get("id")
        if not isinstance(rid, str) or not rid:
            raise DataError(f"{path}: line {lineno}: missing or empty id")
        if rid in seen:
            raise DataError(f"{path}: line {lineno}: duplicate id {rid!r}")
        seen.add(rid)
        vec = jsonl.as_float_vector(rec.get("vector"), f"id {rid!r} vector")
        out.append(FusedEmbedding(id=rid, vector=np.asarray(vec), stage=stage))
    return out
