"""Checks of the modelling assumptions on a trained model.

Two quantities are tracked per relation:

  * the orthogonality residual: the total absolute off-diagonal mass of the
    Gram matrices of both relation maps, zero iff the maps have exactly
    orthogonal columns of any length;

  * partition-sum spread: standard deviation of the slot partition sums
    over random unit states, estimated on an entity subset.  Small spread
    means scores translate to probabilities with a near-constant offset.

A relation whose residual or spread is large breaks the assumptions, so
correlating these columns with per-relation ranking quality localizes where
degraded predictions come from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO

import numpy as np

from .kgdata import Vocabulary
from .model import Model, RelationEmbedding
from .sampling import sample_unit_sphere


def gram_offdiag_mass(rel: RelationEmbedding) -> float:
    """Sum of absolute off-diagonal entries of both maps' Gram matrices."""
    total = 0.0
    for mapped in (rel.head_map, rel.tail_map):
        gram = mapped.T @ mapped
        total += float(np.abs(gram).sum() - np.abs(np.diag(gram)).sum())
    return total


@dataclass
class ConcentrationRow:
    """Partition-sum spread for one relation."""

    relation: int
    mean_head: float
    sigma_head: float
    mean_tail: float
    sigma_tail: float
    sigma_combined: float
    n_states: int
    subset_size: int

    @property
    def cv_head(self) -> float:
        return self.sigma_head / self.mean_head

    @property
    def cv_tail(self) -> float:
        return self.sigma_tail / self.mean_tail


def concentration_stats(
    model: Model,
    relation: int,
    n_states: int,
    subset_size: int,
    rng: np.random.Generator,
) -> ConcentrationRow:
    """Sampled spread of both slots' partition sums for one relation.

    Draws `n_states` unit state vectors, evaluates the partition sum over a
    random entity subset for the head and tail maps, and reports the means
    and standard deviations.  The combined column is the root of the summed
    slot variances.
    """
    if not (0 <= relation < model.n_relations):
        raise IndexError(f"relation id out of range: {relation}")
    if n_states < 2:
        raise ValueError(f"need at least 2 state samples, got {n_states}")
    if subset_size < 1:
        raise ValueError(f"subset_size must be positive, got {subset_size}")
    size = min(subset_size, model.n_entities)
    subset = rng.choice(model.n_entities, size=size, replace=False)
    states = sample_unit_sphere(n_states, model.dim, rng)
    rel = model.relations[relation]
    rows = model.entities[subset]
    sums = []
    for mapped in (rel.head_map, rel.tail_map):
        exponents = (rows @ mapped) @ states.T  # (size, n_states)
        sums.append(np.exp(exponents).sum(axis=0))
    mean_head, mean_tail = float(sums[0].mean()), float(sums[1].mean())
    sigma_head, sigma_tail = float(sums[0].std()), float(sums[1].std())
    return ConcentrationRow(
        relation=relation,
        mean_head=mean_head,
        sigma_head=sigma_head,
        mean_tail=mean_tail,
        sigma_tail=sigma_tail,
        sigma_combined=float(np.sqrt(sigma_head * sigma_head + sigma_tail * sigma_tail)),
        n_states=n_states,
        subset_size=size,
    )


def correlate(a, b) -> float:
    """Pearson correlation; NaN when either side has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-d arrays of equal length")
    if a.size < 3:
        raise ValueError(f"need at least 3 paired values, got {a.size}")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if denom == 0.0:
        return float("nan")
    return float(np.sum(da * db) / denom)


def dump_gram(rel: RelationEmbedding, which: str, stream: IO[str]) -> None:
    """Gram matrix of one map as TSV, full float64 precision."""
    if which not in ("head", "tail"):
        raise ValueError(f"which must be 'head' or 'tail', got {which!r}")
    mapped = rel.head_map if which == "head" else rel.tail_map
    gram = mapped.T @ mapped
    np.savetxt(stream, gram, delimiter="\t", fmt="%.17g")


@dataclass
class DiagnosticsTable:
    """Per-relation assumption checks next to ranking quality."""

    relations: list[int]
    hits_at_10: list[float]
    ortho_residual: list[float]
    sigma_head: list[float]
    sigma_tail: list[float]
    sigma_combined: list[float]
    correlations: dict[str, float]


def diagnostics_table(
    model: Model,
    per_relation_hits10: dict[int, float],
    rows: dict[int, ConcentrationRow],
) -> DiagnosticsTable:
    """Join ranking quality with assumption checks, relation by relation.

    Only relations present in both inputs enter the correlation footer; with
    fewer than 3 such relations the correlations are NaN.
    """
    relations = sorted(set(per_relation_hits10) & set(rows))
    if not relations:
        raise ValueError("no relations shared between ranking and concentration rows")
    hits = [per_relation_hits10[r] for r in relations]
    residual = [gram_offdiag_mass(model.relations[r]) for r in relations]
    sig_h = [rows[r].sigma_head for r in relations]
    sig_t = [rows[r].sigma_tail for r in relations]
    sig_c = [rows[r].sigma_combined for r in relations]
    if len(relations) >= 3:
        correlations = {
            "ortho_residual": correlate(residual, hits),
            "sigma_head": correlate(sig_h, hits),
            "sigma_tail": correlate(sig_t, hits),
            "sigma_combined": correlate(sig_c, hits),
        }
    else:
        correlations = {
            key: float("nan")
            for key in ("ortho_residual", "sigma_head", "sigma_tail", "sigma_combined")
        }
    return DiagnosticsTable(
        relations=relations,
        hits_at_10=hits,
        ortho_residual=residual,
        sigma_head=sig_h,
        sigma_tail=sig_t,
        sigma_combined=sig_c,
        correlations=correlations,
    )


def write_diagnostics_tsv(
    table: DiagnosticsTable, stream: IO[str], vocab: Vocabulary | None = None
) -> None:
    """One row per relation plus a correlation footer against hits at 10."""
    stream.write(
        "relation\thits_at_10\tortho_residual\tsigma_head\tsigma_tail\tsigma_combined\n"
    )
    for i, r in enumerate(table.relations):
        name = vocab.relations[r] if vocab is not None else str(r)
        stream.write(
            f"{name}\t{table.hits_at_10[i]:.17g}\t{table.ortho_residual[i]:.17g}"
            f"\t{table.sigma_head[i]:.17g}\t{table.sigma_tail[i]:.17g}"
            f"\t{table.sigma_combined[i]:.17g}\n"
        )
    c = table.correlations
    stream.write(
        "correlation_vs_hits_at_10\t\t"
        f"{c['ortho_residual']:.17g}\t{c['sigma_head']:.17g}"
        f"\t{c['sigma_tail']:.17g}\t{c['sigma_combined']:.17g}\n"
    )
