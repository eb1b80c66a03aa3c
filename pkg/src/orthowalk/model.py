"""Model parameters, scoring, partition sums, and binary serialization.

A model holds one d-vector per entity and, per relation, a pair of d-by-d
maps: `head_map` applied to the head entity and `tail_map` applied to the
tail entity.  The plausibility score of a triple (h, r, t) is

    score = || head_map^T h + tail_map^T t ||^2

which is non-negative, and larger for more plausible triples.  Under the
generative model the log joint probability of the pair given the relation is
score / (2 d) minus twice the log partition sum, which is how scores connect
to probabilities.

Vectors are stored and manipulated as rows, so `head_map^T h` is computed as
`entities[h] @ head_map`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .kgdata import Triple, Vocabulary
from .sampling import random_orthogonal

FILE_MAGIC = b"OWKG"
MODEL_FORMAT_VERSION = 1

_UNIT_NORM_TOL = 1e-9


class ModelFormatError(ValueError):
    """Model file is not readable: bad magic, version, or truncation."""


@dataclass
class RelationEmbedding:
    """The pair of d-by-d maps representing one relation."""

    head_map: np.ndarray
    tail_map: np.ndarray

    def copy(self) -> "RelationEmbedding":
        return RelationEmbedding(self.head_map.copy(), self.tail_map.copy())


@dataclass
class Model:
    entities: np.ndarray  # (n_entities, dim) float64
    relations: list[RelationEmbedding]
    vocab: Vocabulary

    @property
    def n_entities(self) -> int:
        return self.entities.shape[0]

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def dim(self) -> int:
        return self.entities.shape[1]

    def copy(self) -> "Model":
        return Model(
            entities=self.entities.copy(),
            relations=[rel.copy() for rel in self.relations],
            vocab=self.vocab,
        )


class PartitionValue(NamedTuple):
    value: float
    log_value: float


def _placeholder_vocab(n_entities: int, n_relations: int) -> Vocabulary:
    return Vocabulary(
        entities=[f"e{i}" for i in range(n_entities)],
        relations=[f"r{j}" for j in range(n_relations)],
    )


def init_model(
    n_entities: int,
    n_relations: int,
    dim: int,
    rng: np.random.Generator,
    vocab: Vocabulary | None = None,
) -> Model:
    """Fresh parameters: Gaussian entities, exactly orthogonal relation maps.

    Entity components are i.i.d. mean-zero Gaussian with standard deviation
    1/sqrt(dim), so initial expected squared norms are 1.  Relation maps are
    Haar-random orthogonal, which starts the orthogonality penalty at zero.
    """
    if n_entities < 1 or n_relations < 1 or dim < 1:
        raise ValueError("n_entities, n_relations and dim must all be positive")
    if vocab is not None:
        if vocab.n_entities != n_entities or vocab.n_relations != n_relations:
            raise ValueError("vocabulary size does not match requested model size")
    else:
        vocab = _placeholder_vocab(n_entities, n_relations)
    entities = rng.standard_normal((n_entities, dim)) / np.sqrt(dim)
    relations = [
        RelationEmbedding(random_orthogonal(dim, rng), random_orthogonal(dim, rng))
        for _ in range(n_relations)
    ]
    return Model(entities=entities, relations=relations, vocab=vocab)


def check_triple(model: Model, triple: Triple) -> None:
    h, r, t = triple
    if not (0 <= h < model.n_entities and 0 <= t < model.n_entities):
        raise IndexError(f"entity id out of range in triple {triple!r}")
    if not (0 <= r < model.n_relations):
        raise IndexError(f"relation id out of range in triple {triple!r}")


def combined_vector(model: Model, triple: Triple) -> np.ndarray:
    """head_map^T h + tail_map^T t, the vector whose squared norm is the score."""
    check_triple(model, triple)
    h, r, t = triple
    rel = model.relations[r]
    return model.entities[h] @ rel.head_map + model.entities[t] @ rel.tail_map


def score(model: Model, triple: Triple) -> float:
    """Plausibility score of a triple; non-negative, larger is more plausible."""
    u = combined_vector(model, triple)
    return float(u @ u)


def log_probability(model: Model, triple: Triple, log_z: float) -> float:
    """Log joint probability of (h, t) given r implied by the score.

    `log_z` is the log partition sum treated as a constant; it must be
    finite.
    """
    if not np.isfinite(log_z):
        raise ValueError(f"log_z must be finite, got {log_z}")
    return score(model, triple) / (2.0 * model.dim) - 2.0 * log_z


def partition_function(
    model: Model,
    relation: int,
    slot: Literal["head", "tail"],
    state: np.ndarray,
    entity_ids: Sequence[int] | None = None,
) -> PartitionValue:
    """Sum over entities v of exp(v^T M c) for the slot's map M and state c.

    `state` must be a unit vector.  `entity_ids` restricts the sum to a
    subset; the full vocabulary is used when omitted.  The summation is done
    with a max shift, so the log value is finite whenever the inputs are,
    while the linear value may overflow to inf for extreme exponents.
    """
    if not (0 <= relation < model.n_relations):
        raise IndexError(f"relation id out of range: {relation}")
    if slot not in ("head", "tail"):
        raise ValueError(f"slot must be 'head' or 'tail', got {slot!r}")
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (model.dim,):
        raise ValueError(f"state must have shape ({model.dim},), got {state.shape}")
    norm = float(np.linalg.norm(state))
    if abs(norm - 1.0) > _UNIT_NORM_TOL:
        raise ValueError(f"state must be a unit vector, norm is {norm}")
    rel = model.relations[relation]
    mapped = rel.head_map if slot == "head" else rel.tail_map
    if entity_ids is None:
        rows = model.entities
    else:
        ids = np.asarray(entity_ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("entity subset must be non-empty")
        if ids.min() < 0 or ids.max() >= model.n_entities:
            raise IndexError("entity id out of range in subset")
        rows = model.entities[ids]
    exponents = rows @ (mapped @ state)
    log_value = float(logsumexp(exponents))
    return PartitionValue(float(np.exp(log_value)), log_value)


def validate_finite(model: Model) -> None:
    """Raise if any parameter is NaN or infinite."""
    if not np.all(np.isfinite(model.entities)):
        raise ValueError("non-finite entity parameters")
    for r, rel in enumerate(model.relations):
        if not (np.all(np.isfinite(rel.head_map)) and np.all(np.isfinite(rel.tail_map))):
            raise ValueError(f"non-finite relation parameters for relation {r}")


# ---------------------------------------------------------------------------
# Serialization.
#
# Layout, all little-endian:
#   magic "OWKG" | uint32 version | uint64 n, m, d
#   entities: n*d float64, row-major
#   per relation: head_map then tail_map, each d*d float64, row-major
#   vocabulary: n length-prefixed (uint32) UTF-8 entity names, then m
#   relation names
# A JSON sidecar at <path>.json duplicates the counts plus caller metadata.


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise ModelFormatError("truncated model file")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def done(self) -> bool:
        return self._pos == len(self._data)


def _write_array(stream, array: np.ndarray) -> None:
    stream.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_array(reader: _Reader, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape))
    raw = reader.take(count * 8)
    return np.frombuffer(raw, dtype="<f8", count=count).reshape(shape).copy()


def _write_names(stream, names: Sequence[str]) -> None:
    for name in names:
        encoded = name.encode("utf-8")
        stream.write(struct.pack("<I", len(encoded)))
        stream.write(encoded)


def _read_names(reader: _Reader, count: int) -> list[str]:
    names = []
    for _ in range(count):
        (length,) = struct.unpack("<I", reader.take(4))
        try:
            names.append(reader.take(length).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise ModelFormatError(f"undecodable name: {exc}") from None
    return names


def write_sidecar(path: str | Path, payload: dict) -> None:
    """Deterministic JSON sidecar next to a binary artifact."""
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_model(model: Model, path: str | Path, metadata: dict | None = None) -> None:
    """Write the binary model file plus its JSON sidecar."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(FILE_MAGIC)
        f.write(struct.pack("<I", MODEL_FORMAT_VERSION))
        f.write(struct.pack("<QQQ", model.n_entities, model.n_relations, model.dim))
        _write_array(f, model.entities)
        for rel in model.relations:
            _write_array(f, rel.head_map)
            _write_array(f, rel.tail_map)
        _write_names(f, model.vocab.entities)
        _write_names(f, model.vocab.relations)
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "n_entities": model.n_entities,
        "n_relations": model.n_relations,
        "dim": model.dim,
    }
    if metadata:
        payload.update(metadata)
    write_sidecar(path, payload)


def read_header(reader: _Reader, expected_version: int) -> tuple[int, int, int]:
    magic = reader.take(4)
    if magic != FILE_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, not a model file")
    (version,) = struct.unpack("<I", reader.take(4))
    if version != expected_version:
        raise ModelFormatError(f"unsupported format version {version}")
    n, m, d = struct.unpack("<QQQ", reader.take(24))
    if n < 1 or m < 1 or d < 1:
        raise ModelFormatError(f"invalid dimensions n={n} m={m} d={d}")
    return int(n), int(m), int(d)


def load_model(path: str | Path) -> Model:
    """Read a model file back; exact inverse of save_model."""
    reader = _Reader(Path(path).read_bytes())
    n, m, d = read_header(reader, MODEL_FORMAT_VERSION)
    entities = _read_array(reader, (n, d))
    relations = [
        RelationEmbedding(_read_array(reader, (d, d)), _read_array(reader, (d, d)))
        for _ in range(m)
    ]
    entity_names = _read_names(reader, n)
    relation_names = _read_names(reader, m)
    if not reader.done():
        raise ModelFormatError("trailing bytes after model payload")
    try:
        vocab = Vocabulary(entities=entity_names, relations=relation_names)
    except Exception as exc:
        raise ModelFormatError(f"invalid vocabulary: {exc}") from None
    return Model(entities=entities, relations=relations, vocab=vocab)
