"""Image-caption corpus ingestion and embedding acquisition.

The corpus file holds one ``{"id", "image", "caption"}`` object per line;
the embedding file one ``{"id", "image_embedding", "caption_embedding"}``
object per line. Both round-trip bit-exactly through :mod:`imweave.jsonl`.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import jsonl
from .api import Endpoint, ServiceClient
from .errors import AuthError, DataError, ParseError, PipelineError, ServiceError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageCaptionPair:
    id: str
    image_ref: str
    caption: str

    def __post_init__(self) -> None:
        if not self.id:
            raise DataError("pair id must be non-empty")
        if not self.caption:
            raise DataError(f"pair {self.id!r}: caption must be non-empty")


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    id: str
    image_embedding: np.ndarray
    caption_embedding: np.ndarray

    def __post_init__(self) -> None:
        img = np.asarray(self.image_embedding, dtype=np.float64)
        cap = np.asarray(self.caption_embedding, dtype=np.float64)
        object.__setattr__(self, "image_embedding", img)
        object.__setattr__(self, "caption_embedding", cap)
        if img.ndim != 1 or cap.ndim != 1 or img.size < 1:
            raise DataError(f"record {self.id!r}: embeddings must be 1-d, non-empty")
        if img.shape != cap.shape:
            raise DataError(
                f"record {self.id!r}: image/caption dimensions differ "
                f"({img.size} vs {cap.size})"
            )
        if not (np.isfinite(img).all() and np.isfinite(cap).all()):
            raise DataError(f"record {self.id!r}: non-finite embedding component")

    @property
    def dim(self) -> int:
        return int(self.image_embedding.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.image_embedding, other.image_embedding)
            and np.array_equal(self.caption_embedding, other.caption_embedding)
        )


def parse_corpus(source: str | Path | Iterable[str]) -> list[ImageCaptionPair]:
    """Parse a line-delimited corpus into pairs, preserving file order.

    ``source`` may be a path or an iterable of lines. Malformed lines and
    duplicate ids are rejected.
    """
    if isinstance(source, (str, Path)):
        try:
            with open(source, "r", encoding="utf-8") as fh:
                return parse_corpus(list(fh))
        except OSError as exc:
            raise DataError(f"cannot read {source}: {exc}") from None
    pairs: list[ImageCaptionPair] = []
    seen: set[str] = set()
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        if not isinstance(record, dict):
            raise ParseError(f"line {lineno}: expected a JSON object")
        for key in ("id", "image", "caption"):
            if key not in record:
                raise ParseError(f"line {lineno}: missing field {key!r}")
            if not isinstance(record[key], str):
                raise ParseError(f"line {lineno}: field {key!r} must be a string")
        pair_id = record["id"]
        if pair_id in seen:
            raise DataError(f"duplicate id {pair_id!r} at line {lineno}")
        seen.add(pair_id)
        try:
            pairs.append(
                ImageCaptionPair(id=pair_id, image_ref=record["image"], caption=record["caption"])
            )
        except DataError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    return pairs


def write_corpus(pairs: Iterable[ImageCaptionPair], path: str | Path) -> int:
    return jsonl.write_records(
        path,
        ({"id": p.id, "image": p.image_ref, "caption": p.caption} for p in pairs),
    )


# ---------------------------------------------------------------------------
# Embedding acquisition


@dataclass
class FetchFailure:
    id: str
    reason: str


@dataclass
class FetchReport:
    requested: int = 0
    succeeded: int = 0
    retries: int = 0
    failures: list[FetchFailure] = field(default_factory=list)


def _image_input(image_ref: str) -> list[dict[str, Any]]:
    """Build the content-part payload for an image embedding request.

    Remote references pass through as URLs; local files are inlined as
    data URLs so the service never needs filesystem access.
    """
    if image_ref.startswith(("http://", "https://", "data:")):
        url = image_ref
    else:
        path = Path(image_ref)
        if not path.is_file():
            raise DataError(f"image reference {image_ref!r} does not exist")
        mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        payload = base64.b64encode(path.read_bytes()).decode("ascii")
        url = f"data:{mime};base64,{payload}"
    return [{"type": "image_url", "image_url": {"url": url}}]


class _EmbeddingCache:
    """One JSON file per (endpoint, model, id, part) key."""

    def __init__(self, cache_dir: str | Path, endpoint: Endpoint):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._prefix = f"{endpoint.base_url}\n{endpoint.model}\n"

    def _path(self, pair_id: str, part: str) -> Path:
        key = hashlib.sha256(f"{self._prefix}{pair_id}\n{part}".encode()).hexdigest()
        return self.dir / f"{key}.json"

    def get(self, pair_id: str, part: str) -> list[float] | None:
        path = self._path(pair_id, part)
        if not path.is_file():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        return jsonl.as_float_vector(data["vector"], f"cache entry for {pair_id!r}")

    def put(self, pair_id: str, part: str, vector: list[float]) -> None:
        self._path(pair_id, part).write_text(
            json.dumps({"vector": vector}), encoding="utf-8"
        )


def fetch_embeddings(
    pairs: list[ImageCaptionPair],
    endpoint: Endpoint,
    concurrency: int = 4,
    *,
    cache_dir: str | Path | None = None,
    strict: bool = False,
) -> tuple[list[EmbeddingRecord], FetchReport]:
    """Fetch image and caption embeddings for every pair, in input order.

    Per-item failures are collected into the report; with ``strict`` the
    batch raises instead of proceeding. A dimension mismatch between
    records is always fatal.
    """
    if concurrency < 1:
        raise DataError("concurrency must be >= 1")
    client = ServiceClient(endpoint)
    cache = _EmbeddingCache(cache_dir, endpoint) if cache_dir else None
    report = FetchReport(requested=len(pairs))

    def one(pair: ImageCaptionPair) -> tuple[EmbeddingRecord | None, str | None, int]:
        retries = 0
        vectors: dict[str, list[float]] = {}
        try:
            for part, item in (
                ("image", None),
                ("caption", pair.caption),
            ):
                cached = cache.get(pair.id, part) if cache else None
                if cached is not None:
                    vectors[part] = cached
                    continue
                if part == "image":
                    item = _image_input(pair.image_ref)
                vec, used = client.embed(item)
                retries += used
                vectors[part] = vec
                if cache:
                    cache.put(pair.id, part, vec)
            record = EmbeddingRecord(
                id=pair.id,
                image_embedding=np.asarray(vectors["image"]),
                caption_embedding=np.asarray(vectors["caption"]),
            )
            return record, None, retries
        except AuthError:
            raise
        except PipelineError as exc:
            return None, str(exc), retries

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        outcomes = list(pool.map(one, pairs))

    records: list[EmbeddingRecord] = []
    for pair, (record, reason, retries) in zip(pairs, outcomes):
        report.retries += retries
        if record is None:
            report.failures.append(FetchFailure(id=pair.id, reason=reason or "unknown"))
        else:
            records.append(record)
    report.succeeded = len(records)
    if report.retries:
        logger.info("embedding fetch used %d retries", report.retries)

    dims = {r.dim for r in records}
    if len(dims) > 1:
        by_dim = sorted((r.dim, r.id) for r in records)
        raise DataError(
            "embedding dimension mismatch across records: "
            f"id {by_dim[0][1]!r} has d={by_dim[0][0]} but id {by_dim[-1][1]!r} has d={by_dim[-1][0]}"
        )
    if strict and report.failures:
        raise ServiceError(
            f"{len(report.failures)} of {report.requested} items failed "
            f"(first: {report.failures[0].id}: {report.failures[0].reason})"
        )
    return records, report


# ---------------------------------------------------------------------------
# Embedding file IO


def write_embeddings(records: Iterable[EmbeddingRecord], path: str | Path) -> int:
    return jsonl.write_records(
        path,
        (
            {
                "id": r.id,
                "image_embedding": [float(x) for x in r.image_embedding],
                "caption_embedding": [float(x) for x in r.caption_embedding],
            }
            for r in records
        ),
    )


def read_embeddings(path: str | Path) -> list[EmbeddingRecord]:
    records: list[EmbeddingRecord] = []
    seen: set[str] = set()
    for lineno, rec in jsonl.iter_records(path):
        rid = rec.get("id")
        if not isinstance(rid, str) or not rid:
            raise DataError(f"{path}: line {lineno}: missing or empty id")
        if rid in seen:
            raise DataError(f"{path}: line {lineno}: duplicate id {rid!r}")
        seen.add(rid)
        img = jsonl.as_float_vector(rec.get("image_embedding"), f"id {rid!r} image_embedding")
        cap = jsonl.as_float_vector(rec.get("caption_embedding"), f"id {rid!r} caption_embedding")
        records.append(
            EmbeddingRecord(id=rid, image_embedding=np.asarray(img), caption_embedding=np.asarray(cap))
        )
    return records
