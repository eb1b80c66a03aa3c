"""Filtered link-prediction ranking and threshold-based triple classification.

Ranking protocol: for each test triple both completion queries are posed,
(h, r, ?) and (?, r, t).  Every entity is a candidate; candidates forming a
triple known true in any split are removed, except the target itself.  The
target's rank among the survivors is

    rank = 1 + #{strictly better} + 0.5 * #{exact score ties}

so tie handling is deterministic and order-independent.  Reported figures
are mean reciprocal rank, mean rank, and hits at 1, 3, 10, overall and per
relation.

Classification: a triple is predicted true when its score clears the
relation's threshold.  Thresholds maximize accuracy on a labeled validation
split; relations unseen there inherit the global threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Literal, NamedTuple, Sequence

import numpy as np

from .kgdata import Dataset, KnownIndex, LabeledTriple, Triple, Vocabulary
from .model import Model, check_triple, score

HITS_LEVELS = (1, 3, 10)

_QUERY_CHUNK = 256


class QueryRecord(NamedTuple):
    """Outcome of one completion query."""

    relation: int
    slot: str  # which slot was predicted: "head" or "tail"
    rank: float


@dataclass
class RelationMetrics:
    n_queries: int
    mrr: float
    mr: float
    hits: dict[int, float]


@dataclass
class RankingReport:
    n_queries: int
    mrr: float
    mr: float
    hits: dict[int, float]
    per_relation: dict[int, RelationMetrics]
    records: list[QueryRecord] = field(repr=False, default_factory=list)


def _metrics(ranks: np.ndarray) -> tuple[float, float, dict[int, float]]:
    mrr = float(np.mean(1.0 / ranks))
    mr = float(np.mean(ranks))
    hits = {level: float(np.mean(ranks <= level)) for level in HITS_LEVELS}
    return mrr, mr, hits


def aggregate_ranks(records: Sequence[QueryRecord]) -> RankingReport:
    """Build the full report from per-query ranks; pure recomputation."""
    if len(records) == 0:
        raise ValueError("no queries to aggregate")
    all_ranks = np.array([rec.rank for rec in records])
    mrr, mr, hits = _metrics(all_ranks)
    per_relation: dict[int, RelationMetrics] = {}
    for r in sorted({rec.relation for rec in records}):
        ranks = np.array([rec.rank for rec in records if rec.relation == r])
        r_mrr, r_mr, r_hits = _metrics(ranks)
        per_relation[r] = RelationMetrics(len(ranks), r_mrr, r_mr, r_hits)
    return RankingReport(
        n_queries=len(records),
        mrr=mrr,
        mr=mr,
        hits=hits,
        per_relation=per_relation,
        records=list(records),
    )


def candidate_scores(
    model: Model,
    relation: int,
    fixed_entity: int,
    open_slot: Literal["head", "tail"],
) -> np.ndarray:
    """Scores of all entities placed in the open slot of a completion query.

    open_slot "tail" scores (fixed_entity, relation, v) for every v;
    open_slot "head" scores (v, relation, fixed_entity).
    """
    if open_slot not in ("head", "tail"):
        raise ValueError(f"open_slot must be 'head' or 'tail', got {open_slot!r}")
    if not (0 <= relation < model.n_relations):
        raise IndexError(f"relation id out of range: {relation}")
    if not (0 <= fixed_entity < model.n_entities):
        raise IndexError(f"entity id out of range: {fixed_entity}")
    rel = model.relations[relation]
    if open_slot == "tail":
        fixed_part = model.entities[fixed_entity] @ rel.head_map
        open_all = model.entities @ rel.tail_map
    else:
        fixed_part = model.entities[fixed_entity] @ rel.tail_map
        open_all = model.entities @ rel.head_map
    open_norms = np.einsum("ij,ij->i", open_all, open_all)
    return open_norms + 2.0 * (open_all @ fixed_part) + float(fixed_part @ fixed_part)


def rank_from_scores(
    scores: np.ndarray, target: int, filtered_ids: frozenset[int] | set[int]
) -> float:
    """Mid-tie filtered rank of `target` within `scores`."""
    mask = np.ones(scores.shape[0], dtype=bool)
    if filtered_ids:
        drop = np.fromiter((i for i in filtered_ids if i != target), dtype=np.int64)
        if drop.size:
            mask[drop] = False
    mask[target] = False
    others = scores[mask]
    target_score = scores[target]
    greater = int((others > target_score).sum())
    equal = int((others == target_score).sum())
    return 1.0 + greater + 0.5 * equal


def rank_candidates(
    model: Model,
    known: KnownIndex,
    relation: int,
    fixed_entity: int,
    target: int,
    open_slot: Literal["head", "tail"],
) -> float:
    """Filtered rank of `target` for one completion query."""
    if not (0 <= target < model.n_entities):
        raise IndexError(f"target id out of range: {target}")
    scores = candidate_scores(model, relation, fixed_entity, open_slot)
    if open_slot == "tail":
        filtered = known.tails(fixed_entity, relation)
    else:
        filtered = known.heads(relation, fixed_entity)
    return rank_from_scores(scores, target, filtered)


def link_prediction(
    model: Model,
    dataset: Dataset,
    split: str | Sequence[Triple] = "test",
) -> RankingReport:
    """Filtered ranking over both completion queries of every split triple.

    Work is grouped by relation so each entity-by-map product is formed
    once, then queries are scored in blocks against the precomputed
    candidate transforms.
    """
    if isinstance(split, str):
        try:
            triples = getattr(dataset, split)
        except AttributeError:
            raise ValueError(f"unknown split {split!r}") from None
    else:
        triples = list(split)
    if len(triples) == 0:
        raise ValueError("no triples to evaluate")
    for triple in triples:
        check_triple(model, triple)

    by_relation: dict[int, list[Triple]] = {}
    for triple in triples:
        by_relation.setdefault(triple[1], []).append(triple)

    known = dataset.known
    ent = model.entities
    records: list[QueryRecord] = []
    for r in sorted(by_relation):
        rel = model.relations[r]
        mapped_head = ent @ rel.head_map
        mapped_tail = ent @ rel.tail_map
        norms_head = np.einsum("ij,ij->i", mapped_head, mapped_head)
        norms_tail = np.einsum("ij,ij->i", mapped_tail, mapped_tail)
        group = by_relation[r]
        for lo in range(0, len(group), _QUERY_CHUNK):
            chunk = group[lo : lo + _QUERY_CHUNK]
            h_ids = np.array([tr[0] for tr in chunk])
            t_ids = np.array([tr[2] for tr in chunk])
            # (h, r, ?): fixed head transform against all tail candidates.
            tail_scores = (
                norms_tail[None, :]
                + 2.0 * (mapped_head[h_ids] @ mapped_tail.T)
                + norms_head[h_ids][:, None]
            )
            # (?, r, t): fixed tail transform against all head candidates.
            head_scores = (
                norms_head[None, :]
                + 2.0 * (mapped_tail[t_ids] @ mapped_head.T)
                + norms_tail[t_ids][:, None]
            )
            for row, (h, _, t) in enumerate(chunk):
                records.append(
                    QueryRecord(
                        r,
                        "tail",
                        rank_from_scores(tail_scores[row], t, known.tails(h, r)),
                    )
                )
                records.append(
                    QueryRecord(
                        r,
                        "head",
                        rank_from_scores(head_scores[row], h, known.heads(r, t)),
                    )
                )
    return aggregate_ranks(records)


# ---------------------------------------------------------------------------
# Triple classification.


@dataclass
class Thresholds:
    per_relation: dict[int, float]
    default: float

    def threshold_for(self, relation: int) -> float:
        return self.per_relation.get(relation, self.default)


@dataclass
class ClassificationReport:
    accuracy: float
    n_examples: int
    thresholds: Thresholds
    per_relation_accuracy: dict[int, float]
    per_relation_counts: dict[int, int]


def _best_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold maximizing accuracy of `score >= threshold` vs labels.

    Candidates are midpoints between adjacent distinct sorted scores plus
    one value below the minimum and one above the maximum.  Accuracy ties
    resolve to the smallest candidate, so the result is deterministic.
    """
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    positive = labels[order] == 1
    n = len(s)
    # Cut j predicts items [j:] positive.  Walk j = 0..n, valid only where
    # the score actually changes, tracking accuracy via prefix counts.
    neg_before = np.concatenate([[0], np.cumsum(~positive)])
    pos_after = positive.sum() - np.concatenate([[0], np.cumsum(positive)])
    correct = neg_before + pos_after
    best_acc = -1
    best_threshold = 0.0
    for j in range(n + 1):
        if 0 < j < n and s[j - 1] == s[j]:
            continue
        if j == 0:
            threshold = s[0] - 1.0
        elif j == n:
            threshold = s[-1] + 1.0
        else:
            threshold = 0.5 * (s[j - 1] + s[j])
        if correct[j] > best_acc:
            best_acc = correct[j]
            best_threshold = float(threshold)
    return best_threshold


def learn_thresholds(model: Model, labeled: Sequence[LabeledTriple]) -> Thresholds:
    """Per-relation decision thresholds fitted on a labeled split."""
    if len(labeled) == 0:
        raise ValueError("no labeled examples")
    scores = np.array([score(model, triple) for triple, _ in labeled])
    labels = np.array([lab for _, lab in labeled])
    relations = np.array([triple[1] for triple, _ in labeled])
    default = _best_threshold(scores, labels)
    per_relation: dict[int, float] = {}
    for r in sorted(set(relations.tolist())):
        mask = relations == r
        per_relation[int(r)] = _best_threshold(scores[mask], labels[mask])
    return Thresholds(per_relation=per_relation, default=default)


def classify(
    model: Model,
    thresholds: Thresholds,
    labeled: Sequence[LabeledTriple],
) -> ClassificationReport:
    """Accuracy of thresholded scores against labels."""
    if len(labeled) == 0:
        raise ValueError("no labeled examples")
    correct_total = 0
    per_rel_correct: dict[int, int] = {}
    per_rel_count: dict[int, int] = {}
    for triple, label in labeled:
        predicted = 1 if score(model, triple) >= thresholds.threshold_for(triple[1]) else -1
        r = triple[1]
        per_rel_count[r] = per_rel_count.get(r, 0) + 1
        if predicted == label:
            correct_total += 1
            per_rel_correct[r] = per_rel_correct.get(r, 0) + 1
    per_relation_accuracy = {
        r: per_rel_correct.get(r, 0) / per_rel_count[r] for r in sorted(per_rel_count)
    }
    return ClassificationReport(
        accuracy=correct_total / len(labeled),
        n_examples=len(labeled),
        thresholds=thresholds,
        per_relation_accuracy=per_relation_accuracy,
        per_relation_counts=dict(sorted(per_rel_count.items())),
    )


# ---------------------------------------------------------------------------
# Report emission.


def ranking_report_json(report: RankingReport, vocab: Vocabulary | None = None) -> dict:
    def hits_obj(hits: dict[int, float]) -> dict:
        return {f"hits_at_{level}": hits[level] for level in HITS_LEVELS}

    def rel_name(r: int) -> str:
        return vocab.relations[r] if vocab is not None else str(r)

    return {
        "n_queries": report.n_queries,
        "mrr": report.mrr,
        "mean_rank": report.mr,
        **hits_obj(report.hits),
        "per_relation": {
            rel_name(r): {
                "n_queries": m.n_queries,
                "mrr": m.mrr,
                "mean_rank": m.mr,
                **hits_obj(m.hits),
            }
            for r, m in sorted(report.per_relation.items())
        },
    }


def format_ranking_text(report: RankingReport) -> str:
    lines = [
        f"queries        {report.n_queries}",
        f"MRR            {report.mrr:.4f}",
        f"mean rank      {report.mr:.1f}",
    ]
    for level in HITS_LEVELS:
        lines.append(f"hits@{level:<2}        {report.hits[level]:.4f}")
    return "\n".join(lines) + "\n"


def write_per_relation_tsv(
    report: RankingReport, stream: IO[str], vocab: Vocabulary | None = None
) -> None:
    stream.write("relation\tn_queries\tmrr\tmean_rank\thits_at_1\thits_at_3\thits_at_10\n")
    for r, m in sorted(report.per_relation.items()):
        name = vocab.relations[r] if vocab is not None else str(r)
        stream.write(
            f"{name}\t{m.n_queries}\t{m.mrr:.17g}\t{m.mr:.17g}"
            f"\t{m.hits[1]:.17g}\t{m.hits[3]:.17g}\t{m.hits[10]:.17g}\n"
        )


def classification_report_json(
    report: ClassificationReport, vocab: Vocabulary | None = None
) -> dict:
    def rel_name(r: int) -> str:
        return vocab.relations[r] if vocab is not None else str(r)

    return {
        "accuracy": report.accuracy,
        "n_examples": report.n_examples,
        "default_threshold": report.thresholds.default,
        "per_relation": {
            rel_name(r): {
                "threshold": report.thresholds.per_relation.get(
                    r, report.thresholds.default
                ),
                "accuracy": report.per_relation_accuracy[r],
                "n_examples": report.per_relation_counts[r],
            }
            for r in sorted(report.per_relation_accuracy)
        },
    }


def write_json(payload: dict, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
