"""Vector retrieval over the technique corpus by cosine similarity.

The index is an exact scan — at corpus scale (~800 techniques) nothing
fancier is warranted. Two embedders are provided: a remote HTTP endpoint
speaking the common ``/embeddings`` JSON contract, and a deterministic local
hash embedder so every retrieval invariant is testable without a network.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from tmf.errors import ProviderError, ValidationError
from tmf.model import TechniqueId, parse_technique_id

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1


class DimensionMismatch(ValidationError):
    pass


class ZeroVector(ValidationError):
    pass


class FormatVersionMismatch(ValidationError):
    pass


class EmbedderTagMismatch(ValidationError):
    pass


class EmbedderError(ProviderError):
    pass


@dataclass(frozen=True, eq=False)
class Embedding:
    """A fixed-length real vector; components must be finite."""

    vector: np.ndarray

    def __post_init__(self) -> None:
        array = np.asarray(self.vector, dtype=np.float32)
        if array.ndim != 1 or array.size == 0:
            raise ValidationError("embedding must be a non-empty 1-d vector")
        if not np.all(np.isfinite(array)):
            raise ValidationError("embedding contains NaN or Inf components")
        object.__setattr__(self, "vector", array)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return np.array_equal(self.vector, other.vector)

    def __hash__(self) -> int:
        return hash(self.vector.tobytes())


def cosine_similarity(a: Embedding, b: Embedding) -> float:
    """Cosine of the angle between two embeddings, in [-1, 1]."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"dims differ: {a.dim} vs {b.dim}")
    va = a.vector.astype(np.float64)
    vb = b.vector.astype(np.float64)
    norm_a = float(np.linalg.norm(va))
    norm_b = float(np.linalg.norm(vb))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("cosine similarity is undefined for an all-zero vector")
    value = float(np.dot(va, vb) / (norm_a * norm_b))
    return max(-1.0, min(1.0, value))


class Embedder(Protocol):
    tag: str

    def embed(self, texts: Sequence[str]) -> list[Embedding]: ...


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashEmbedder:
    """Deterministic token-hash bag embedder for offline runs and tests.

    Each token (and each adjacent-token bigram, for a little phrase
    sensitivity) is hashed to a bucket and a sign; vectors are L2-normalized.
    Same (dim, seed) always produces the same vectors.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim < 8:
            raise ValidationError("hash embedder dim must be >= 8")
        self.dim = dim
        self.seed = seed
        self.tag = f"hash-{dim}-{seed}"

    def _slot(self, token: str) -> tuple[int, float]:
        digest = hashlib.blake2b(
            f"{self.seed}|{token}".encode(), digest_size=8
        ).digest()
        bucket = int.from_bytes(digest[:4], "little") % self.dim
        sign = 1.0 if digest[4] % 2 == 0 else -1.0
        return bucket, sign

    def embed_one(self, text: str) -> Embedding:
        vector = np.zeros(self.dim, dtype=np.float64)
        tokens = _TOKEN_RE.findall(text.lower())
        for token in tokens:
            bucket, sign = self._slot(token)
            vector[bucket] += sign
        for left, right in zip(tokens, tokens[1:]):
            bucket, sign = self._slot(f"{left}__{right}")
            vector[bucket] += 0.5 * sign
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            # Empty or non-lexical text: fall back to a fixed unit direction.
            vector[0] = 1.0
        else:
            vector /= norm
        return Embedding(vector=vector.astype(np.float32))

    def embed(self, texts: Sequence[str]) -> list[Embedding]:
        return [self.embed_one(text) for text in texts]


class RemoteEmbedder:
    """Client for an HTTP embeddings endpoint (``POST <base>/embeddings``)."""

    def __init__(self, base_url: str, api_key: str, model: str,
                 timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.tag = f"remote-{model}"

    def embed(self, texts: Sequence[str]) -> list[Embedding]:
        import requests

        try:
            response = requests.post(
                f"{self.base_url}/embeddings",
                headers={"Authorization": f"Bearer {self.api_key}"},
                json={"model": self.model, "input": list(texts)},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise EmbedderError(f"embedding request failed: {exc}") from exc
        if response.status_code != 200:
            raise EmbedderError(
                f"embedding endpoint returned HTTP {response.status_code}"
            )
        payload = response.json()
        data = sorted(payload.get("data", []), key=lambda item: item.get("index", 0))
        if len(data) != len(texts):
            raise EmbedderError(
                f"embedding endpoint returned {len(data)} vectors for {len(texts)} inputs"
            )
        return [Embedding(vector=np.asarray(item["embedding"], dtype=np.float32))
                for item in data]


@dataclass(frozen=True)
class RetrievalConfig:
    """Retrieval knobs: candidates per probe, relevance floor, embed batching."""

    top_k: int = 3
    cutoff: float = 0.6
    batch_size: int = 32

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValidationError("top_k must be >= 1")
        if not -1.0 <= self.cutoff <= 1.0:
            raise ValidationError("cutoff must be in [-1, 1]")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


@dataclass(frozen=True)
class IndexEntry:
    technique_id: TechniqueId
    embedding: Embedding
    text: str


@dataclass(frozen=True)
class VectorIndex:
    """Immutable collection of embedded corpus entries, one per technique."""

    dim: int
    entries: tuple[IndexEntry, ...]
    embedder_tag: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        seen: set[TechniqueId] = set()
        for entry in self.entries:
            if entry.embedding.dim != self.dim:
                raise DimensionMismatch(
                    f"entry {entry.technique_id} has dim {entry.embedding.dim}, "
                    f"index dim is {self.dim}"
                )
            if entry.technique_id in seen:
                raise ValidationError(f"duplicate index entry: {entry.technique_id}")
            seen.add(entry.technique_id)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> set[TechniqueId]:
        return {entry.technique_id for entry in self.entries}


def build_index(
    corpus: Sequence[tuple[TechniqueId, str]],
    embedder: Embedder,
    cfg: RetrievalConfig,
    base: VectorIndex | None = None,
) -> VectorIndex:
    """Embed a corpus in batches of ``cfg.batch_size`` and build an index.

    When ``base`` is given, entries whose technique id is already indexed are
    reused untouched and only new corpus entries are embedded (incremental
    insert). The embedder must match the base index's tag.
    """
    if not corpus:
        raise ValidationError("corpus must be non-empty")
    existing: dict[TechniqueId, IndexEntry] = {}
    if base is not None:
        if base.embedder_tag != embedder.tag:
            raise EmbedderTagMismatch(
                f"index was built with {base.embedder_tag!r}, embedder is {embedder.tag!r}"
            )
        existing = {entry.technique_id: entry for entry in base.entries}

    pending = [(tid, text) for tid, text in corpus if tid not in existing]
    new_entries: list[IndexEntry] = []
    for start in range(0, len(pending), cfg.batch_size):
        batch = pending[start:start + cfg.batch_size]
        try:
            embeddings = embedder.embed([text for _, text in batch])
        except Exception as exc:
            raise EmbedderError(
                f"embedder failed on batch starting at corpus entry {start} "
                f"({batch[0][0]}): {exc}"
            ) from exc
        for (tid, text), embedding in zip(batch, embeddings):
            new_entries.append(IndexEntry(technique_id=tid, embedding=embedding, text=text))

    all_entries = list(existing.values()) + new_entries
    dim = all_entries[0].embedding.dim
    return VectorIndex(dim=dim, entries=tuple(all_entries), embedder_tag=embedder.tag)


def query(
    index: VectorIndex, probe: Embedding, cfg: RetrievalConfig
) -> list[tuple[TechniqueId, float]]:
    """Top matches by descending cosine similarity.

    All returned similarities are >= ``cfg.cutoff``; at most ``cfg.top_k``
    results; ties broken by ascending technique id.
    """
    if probe.dim != index.dim:
        raise DimensionMismatch(f"probe dim {probe.dim} != index dim {index.dim}")
    scored = []
    for entry in index.entries:
        similarity = cosine_similarity(probe, entry.embedding)
        if similarity >= cfg.cutoff:
            scored.append((entry.technique_id, similarity))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:cfg.top_k]


def ensure_embedder(index: VectorIndex, embedder: Embedder) -> None:
    """Refuse to probe an index with an embedder it was not built with."""
    if index.embedder_tag != embedder.tag:
        raise EmbedderTagMismatch(
            f"index was built with {index.embedder_tag!r}, embedder is {embedder.tag!r}"
        )


def save_index(index: VectorIndex, path: str | Path) -> None:
    """Persist as versioned JSON with base64-encoded little-endian f32 vectors."""
    payload = {
        "format_version": INDEX_FORMAT_VERSION,
        "embedder_tag": index.embedder_tag,
        "dim": index.dim,
        "entries": [
            {
                "id": str(entry.technique_id),
                "text": entry.text,
                "vector": base64.b64encode(
                    entry.embedding.vector.astype("<f4").tobytes()
                ).decode("ascii"),
            }
            for entry in index.entries
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n",
                          encoding="utf-8")


def load_index(path: str | Path, expected_embedder_tag: str | None = None) -> VectorIndex:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"index file is not valid JSON: {exc}") from None
    version = payload.get("format_version")
    if version != INDEX_FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"index format_version {version!r} is not supported "
            f"(this build reads version {INDEX_FORMAT_VERSION})"
        )
    tag = payload.get("embedder_tag", "")
    if expected_embedder_tag is not None and tag != expected_embedder_tag:
        raise EmbedderTagMismatch(
            f"index was built with {tag!r}, expected {expected_embedder_tag!r}"
        )
    entries = []
    for obj in payload.get("entries", []):
        raw = base64.b64decode(obj["vector"])
        vector = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        entries.append(
            IndexEntry(
                technique_id=parse_technique_id(obj["id"]),
                embedding=Embedding(vector=vector),
                text=obj.get("text", ""),
            )
        )
    return VectorIndex(dim=int(payload["dim"]), entries=tuple(entries), embedder_tag=tag)
