"""Low-rank compression of relation maps around the identity.

A trained relation map sits near the identity plus a low-rank correction,
so each map M is stored as I + sum_k s_k * left_k right_k^T where the
factors come from a rank-K truncated SVD of M - I (the Frobenius-optimal
truncation).  An alternative mode decomposes the symmetric part
(M - I + (M - I)^T) / 2 by eigenvalues instead, which halves the stored
factors when the correction is nearly symmetric but discards the
antisymmetric part.

Storage per relation map drops from d*d to K*(2d + 1), a ratio of K/d for
large d.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .evaluation import link_prediction
from .kgdata import Dataset, Vocabulary
from .model import (
    FILE_MAGIC,
    Model,
    ModelFormatError,
    RelationEmbedding,
    _Reader,
    _read_array,
    _read_names,
    _write_array,
    _write_names,
    read_header,
    write_sidecar,
)

COMPRESSED_FORMAT_VERSION = 2

METHODS = ("svd", "symmetric")


@dataclass
class LowRankFactors:
    """Rank-K factorization of one map's deviation from the identity."""

    singular_values: np.ndarray  # (K,), non-negative, descending
    left: np.ndarray  # (K, d)
    right: np.ndarray  # (K, d)
    frobenius_error: float  # ||M - I - approximation||_F

    @property
    def rank(self) -> int:
        return int(self.singular_values.shape[0])

    def reconstruct(self) -> np.ndarray:
        """I plus the stored low-rank correction."""
        d = self.left.shape[1]
        return np.eye(d) + (self.left.T * self.singular_values) @ self.right


@dataclass
class LowRankRelation:
    rank: int
    head_map: LowRankFactors
    tail_map: LowRankFactors

    def reconstruct(self) -> RelationEmbedding:
        return RelationEmbedding(
            self.head_map.reconstruct(), self.tail_map.reconstruct()
        )


def compression_ratio(rank: int, dim: int) -> float:
    """Fraction of the dense d*d coefficients kept by a rank-K truncation."""
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    if not (1 <= rank <= dim):
        raise ValueError(f"rank must be in [1, {dim}], got {rank}")
    return rank / dim


def _factor_matrix(mapped: np.ndarray, rank: int, method: str) -> LowRankFactors:
    d = mapped.shape[0]
    deviation = mapped - np.eye(d)
    if method == "svd":
        u, s, vt = np.linalg.svd(deviation)
        tail = s[rank:]
        return LowRankFactors(
            singular_values=s[:rank].copy(),
            left=u[:, :rank].T.copy(),
            right=vt[:rank].copy(),
            frobenius_error=float(np.sqrt(np.sum(tail * tail))),
        )
    # Symmetric mode: eigendecompose the symmetric part, order by magnitude.
    symmetric = 0.5 * (deviation + deviation.T)
    eigenvalues, vectors = np.linalg.eigh(symmetric)
    order = np.argsort(-np.abs(eigenvalues), kind="stable")
    keep = order[:rank]
    values = eigenvalues[keep]
    vecs = vectors[:, keep]
    left = vecs.T.copy()
    # Fold each eigenvalue's sign into the right factor so the stored
    # values are non-negative like singular values.
    signs = np.where(values >= 0.0, 1.0, -1.0)
    right = (vecs * signs).T.copy()
    approx = (left.T * np.abs(values)) @ right
    residual = deviation - approx
    return LowRankFactors(
        singular_values=np.abs(values),
        left=left,
        right=right,
        frobenius_error=float(np.linalg.norm(residual)),
    )


def compress_relation(
    rel: RelationEmbedding, rank: int, method: str = "svd"
) -> LowRankRelation:
    """Truncate both maps of a relation to rank `rank`."""
    d = rel.head_map.shape[0]
    if not (1 <= rank <= d):
        raise ValueError(f"rank must be in [1, {d}], got {rank}")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    return LowRankRelation(
        rank=rank,
        head_map=_factor_matrix(rel.head_map, rank, method),
        tail_map=_factor_matrix(rel.tail_map, rank, method),
    )


def compress_model(
    model: Model, rank: int, method: str = "svd"
) -> tuple[Model, list[LowRankRelation]]:
    """Model with every relation replaced by its rank-K reconstruction."""
    factored = [compress_relation(rel, rank, method) for rel in model.relations]
    reconstructed = Model(
        entities=model.entities.copy(),
        relations=[lr.reconstruct() for lr in factored],
        vocab=model.vocab,
    )
    return reconstructed, factored


@dataclass
class SweepRow:
    rank: int
    ratio: float
    mrr: float
    mr: float
    hits: dict[int, float]
    mean_frobenius_error: float


def sweep_ranks(
    model: Model,
    dataset: Dataset,
    ranks: Sequence[int],
    split: str = "test",
    method: str = "svd",
) -> list[SweepRow]:
    """Ranking quality and reconstruction error across truncation ranks.

    Rank d keeps the original maps untouched (truncating nothing), so that
    row reproduces the uncompressed metrics exactly.
    """
    if len(ranks) == 0:
        raise ValueError("no ranks requested")
    rows = []
    for rank in ranks:
        if rank == model.dim:
            eval_model = model
            mean_error = 0.0
        else:
            eval_model, factored = compress_model(model, rank, method)
            errors = [
                err
                for lr in factored
                for err in (lr.head_map.frobenius_error, lr.tail_map.frobenius_error)
            ]
            mean_error = float(np.mean(errors))
        report = link_prediction(eval_model, dataset, split=split)
        rows.append(
            SweepRow(
                rank=rank,
                ratio=compression_ratio(rank, model.dim),
                mrr=report.mrr,
                mr=report.mr,
                hits=dict(report.hits),
                mean_frobenius_error=mean_error,
            )
        )
    return rows


def write_sweep_tsv(rows: Sequence[SweepRow], stream: IO[str]) -> None:
    stream.write(
        "rank\tratio\tmrr\tmean_rank\thits_at_1\thits_at_3\thits_at_10\tmean_frobenius_error\n"
    )
    for row in rows:
        stream.write(
            f"{row.rank}\t{row.ratio:.17g}\t{row.mrr:.17g}\t{row.mr:.17g}"
            f"\t{row.hits[1]:.17g}\t{row.hits[3]:.17g}\t{row.hits[10]:.17g}"
            f"\t{row.mean_frobenius_error:.17g}\n"
        )


# ---------------------------------------------------------------------------
# Compressed model files: same header as the dense format but version 2,
# a uint32 rank, dense entities, then per relation the factor blocks
# (singular values, left, right for the head map, then the tail map),
# followed by the vocabulary.


@dataclass
class CompressedModel:
    entities: np.ndarray
    relations: list[LowRankRelation]
    vocab: Vocabulary

    def to_model(self) -> Model:
        return Model(
            entities=self.entities.copy(),
            relations=[lr.reconstruct() for lr in self.relations],
            vocab=self.vocab,
        )


def save_compressed_model(
    model: Model,
    factored: Sequence[LowRankRelation],
    path: str | Path,
    metadata: dict | None = None,
) -> None:
    if len(factored) != model.n_relations:
        raise ValueError("factor count does not match relation count")
    ranks = {lr.rank for lr in factored}
    if len(ranks) != 1:
        raise ValueError("all relations must share one truncation rank")
    rank = ranks.pop()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(FILE_MAGIC)
        f.write(struct.pack("<I", COMPRESSED_FORMAT_VERSION))
        f.write(struct.pack("<QQQ", model.n_entities, model.n_relations, model.dim))
        f.write(struct.pack("<I", rank))
        _write_array(f, model.entities)
        for lr in factored:
            for factors in (lr.head_map, lr.tail_map):
                _write_array(f, factors.singular_values)
                _write_array(f, factors.left)
                _write_array(f, factors.right)
        _write_names(f, model.vocab.entities)
        _write_names(f, model.vocab.relations)
    payload = {
        "format_version": COMPRESSED_FORMAT_VERSION,
        "n_entities": model.n_entities,
        "n_relations": model.n_relations,
        "dim": model.dim,
        "rank": rank,
    }
    if metadata:
        payload.update(metadata)
    write_sidecar(path, payload)


def load_compressed_model(path: str | Path) -> CompressedModel:
    reader = _Reader(Path(path).read_bytes())
    n, m, d = read_header(reader, COMPRESSED_FORMAT_VERSION)
    (rank,) = struct.unpack("<I", reader.take(4))
    if not (1 <= rank <= d):
        raise ModelFormatError(f"invalid rank {rank} for dim {d}")
    entities = _read_array(reader, (n, d))
    relations = []
    for _ in range(m):
        factors = []
        for _ in range(2):
            values = _read_array(reader, (rank,))
            left = _read_array(reader, (rank, d))
            right = _read_array(reader, (rank, d))
            # The stored error is not serialized; it is a property of the
            # original dense map, recomputable against it when needed.
            factors.append(
                LowRankFactors(
                    singular_values=values,
                    left=left,
                    right=right,
                    frobenius_error=float("nan"),
                )
            )
        relations.append(
            LowRankRelation(rank=int(rank), head_map=factors[0], tail_map=factors[1])
        )
    entity_names = _read_names(reader, n)
    relation_names = _read_names(reader, m)
    if not reader.done():
        raise ModelFormatError("trailing bytes after model payload")
    try:
        vocab = Vocabulary(entities=entity_names, relations=relation_names)
    except Exception as exc:
        raise ModelFormatError(f"invalid vocabulary: {exc}") from None
    return CompressedModel(entities=entities, relations=relations, vocab=vocab)
