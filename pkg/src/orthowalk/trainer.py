"""Margin training of entity vectors and relation map pairs.

The per-example loss is a hinge requiring the positive to outscore its
corruptions by a margin, plus a soft orthogonality penalty on the relation
maps:

    single-negative:     sum_k max(0, margin + s(neg_k) - s(pos))
    multi-negative-max:  max(0, margin + max_k s(neg_k) - s(pos))

    penalty = lambda1 * ||H^T H - I||_F^2 + lambda2 * ||T^T T - I||_F^2

where H, T are the relation's head and tail maps.  The penalty is applied in
every example's gradient; orthogonality is never enforced by projection.
Optimization is plain minibatch SGD on the mean per-example gradient.

Gradients, with u = combined vector of the positive and u' of a corruption
whose hinge is active (row convention, so d/dh of h M = grad @ M^T):

    d/dh       -2 u H^T          d/dt       -2 u T^T
    d/dh'      +2 u' H^T         d/dt'      +2 u' T^T
    d/dH       2 (h'^T u' - h^T u)   as outer products of rows
    d/dT       2 (t'^T u' - t^T u)

A corruption keeps one slot of the positive, so the kept entity receives
both its positive-side and negative-side contributions.  A hinge exactly at
zero is treated as inactive (strict > 0), and in max mode ties between
corruptions resolve to the first maximal one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from . import evaluation
from .diagnostics import gram_offdiag_mass
from .kgdata import Dataset, Triple, sample_negative_batch
from .model import Model, RelationEmbedding, init_model, combined_vector
from .sampling import substream

LOSS_MODES = ("single-negative", "multi-negative-max")

# Cap on rows of the flattened (positive, corruption) score matrix held at
# once; bounds memory at roughly this many d-vectors.
_NEG_CHUNK_ROWS = 16384


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(
            f"non-finite loss or parameters at epoch {epoch}, batch {batch}; "
            "lower the learning rate"
        )
        self.epoch = epoch
        self.batch = batch


@dataclass
class Hyperparams:
    dim: int = 100
    margin: float = 1.0
    learning_rate: float = 0.01
    lambda1: float = 10.0
    lambda2: float = 10.0
    n_negatives: int = 100
    loss_mode: str = "multi-negative-max"
    max_epochs: int = 1000
    batches_per_epoch: int = 100
    eval_every: int = 20
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("penalty weights must be non-negative")
        if self.n_negatives < 1:
            raise ValueError(f"n_negatives must be at least 1, got {self.n_negatives}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be positive, got {self.max_epochs}")
        if self.batches_per_epoch < 1:
            raise ValueError(f"batches_per_epoch must be positive, got {self.batches_per_epoch}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be positive, got {self.eval_every}")
        if self.patience < 1:
            raise ValueError(f"patience must be positive, got {self.patience}")


def margin_loss_single(pos_score: float, neg_score: float, margin: float) -> float:
    """Hinge for one (positive, corruption) pair."""
    return max(0.0, margin + neg_score - pos_score)


def margin_loss_multi(pos_score: float, neg_scores, margin: float) -> float:
    """Hinge against the hardest corruption of the set."""
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    if neg_scores.size == 0:
        raise ValueError("need at least one corruption score")
    return max(0.0, margin + float(neg_scores.max()) - pos_score)


def orthogonality_penalty(rel: RelationEmbedding, lambda1: float, lambda2: float) -> float:
    d = rel.head_map.shape[0]
    eye = np.eye(d)
    g1 = rel.head_map.T @ rel.head_map - eye
    g2 = rel.tail_map.T @ rel.tail_map - eye
    return float(lambda1 * np.sum(g1 * g1) + lambda2 * np.sum(g2 * g2))


def penalty_gradients(
    rel: RelationEmbedding, lambda1: float, lambda2: float
) -> tuple[np.ndarray, np.ndarray]:
    """d(penalty)/d(head_map), d(penalty)/d(tail_map)."""
    d = rel.head_map.shape[0]
    eye = np.eye(d)
    g1 = 4.0 * lambda1 * rel.head_map @ (rel.head_map.T @ rel.head_map - eye)
    g2 = 4.0 * lambda2 * rel.tail_map @ (rel.tail_map.T @ rel.tail_map - eye)
    return g1, g2


@dataclass
class TripleGradients:
    """Exact gradient of one example's loss (hinge plus penalty)."""

    relation: int
    entity: dict[int, np.ndarray]
    head_map: np.ndarray
    tail_map: np.ndarray
    hinge: float
    penalty: float


def gradients(
    model: Model,
    positive: Triple,
    negatives: Sequence[Triple],
    hyper: Hyperparams,
) -> TripleGradients:
    """Per-example reference gradient; the batch engine must match its mean.

    All corruptions must share the positive's relation.  Entity gradients
    are accumulated per id, so an entity appearing on both sides of a pair
    gets the sum of its contributions.
    """
    if len(negatives) == 0:
        raise ValueError("need at least one corruption")
    h, r, t = positive
    if any(neg[1] != r for neg in negatives):
        raise ValueError("corruptions must share the positive's relation")
    rel = model.relations[r]
    d = model.dim

    u = combined_vector(model, positive)
    pos_score = float(u @ u)
    neg_vectors = [combined_vector(model, neg) for neg in negatives]
    neg_scores = np.array([float(v @ v) for v in neg_vectors])

    entity: dict[int, np.ndarray] = {}
    g_head = np.zeros((d, d))
    g_tail = np.zeros((d, d))

    def add_entity(eid: int, grad: np.ndarray) -> None:
        slot = entity.setdefault(int(eid), np.zeros(d))
        slot += grad

    def add_pair(neg: Triple, v: np.ndarray) -> None:
        nonlocal g_head, g_tail
        nh, _, nt = neg
        add_entity(h, -2.0 * (u @ rel.head_map.T))
        add_entity(t, -2.0 * (u @ rel.tail_map.T))
        add_entity(nh, 2.0 * (v @ rel.head_map.T))
        add_entity(nt, 2.0 * (v @ rel.tail_map.T))
        g_head += 2.0 * (
            np.outer(model.entities[nh], v) - np.outer(model.entities[h], u)
        )
        g_tail += 2.0 * (
            np.outer(model.entities[nt], v) - np.outer(model.entities[t], u)
        )

    if hyper.loss_mode == "multi-negative-max":
        k_star = int(np.argmax(neg_scores))
        hinge = margin_loss_multi(pos_score, neg_scores, hyper.margin)
        if hyper.margin + neg_scores[k_star] - pos_score > 0.0:
            add_pair(negatives[k_star], neg_vectors[k_star])
    else:
        hinge = 0.0
        for neg, v, s in zip(negatives, neg_vectors, neg_scores):
            gap = hyper.margin + float(s) - pos_score
            if gap > 0.0:
                hinge += gap
                add_pair(neg, v)

    p1, p2 = penalty_gradients(rel, hyper.lambda1, hyper.lambda2)
    g_head += p1
    g_tail += p2
    penalty = orthogonality_penalty(rel, hyper.lambda1, hyper.lambda2)

    return TripleGradients(
        relation=r,
        entity=entity,
        head_map=g_head,
        tail_map=g_tail,
        hinge=hinge,
        penalty=penalty,
    )


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_penalty: float
    ortho_residual_mean: float
    validation_mrr: float | None = None


@dataclass
class TrainState:
    model: Model
    best_model: Model
    best_metric: float
    best_epoch: int
    history: list[EpochStats] = field(default_factory=list)


def _batch_arrays(
    model: Model,
    batch: np.ndarray,
    neg_ids: np.ndarray,
    neg_is_head: np.ndarray,
    hyper: Hyperparams,
) -> tuple[float, float, list, list, list]:
    """Gradient of the batch-summed loss, evaluated at the current parameters.

    Returns (hinge_sum, penalty_sum, entity_id_blocks, entity_grad_blocks,
    relation_updates) without touching the model, so every example sees the
    pre-step parameters.
    """
    ent = model.entities
    k = neg_ids.shape[1]
    chunk = max(1, _NEG_CHUNK_ROWS // k)
    hinge_sum = 0.0
    penalty_sum = 0.0
    id_blocks: list[np.ndarray] = []
    grad_blocks: list[np.ndarray] = []
    rel_updates: list[tuple[int, np.ndarray, np.ndarray]] = []

    for r in np.unique(batch[:, 1]):
        rows = np.nonzero(batch[:, 1] == r)[0]
        rel = model.relations[int(r)]
        h_map, t_map = rel.head_map, rel.tail_map
        h_ids = batch[rows, 0]
        t_ids = batch[rows, 2]
        ah = ent[h_ids] @ h_map
        at = ent[t_ids] @ t_map
        u = ah + at
        pos_scores = np.einsum("ij,ij->i", u, u)

        g_head = np.zeros((model.dim, model.dim))
        g_tail = np.zeros((model.dim, model.dim))

        for lo in range(0, len(rows), chunk):
            hi = min(lo + chunk, len(rows))
            sel = slice(lo, hi)
            c = hi - lo
            ids_flat = neg_ids[rows[sel]].reshape(-1)
            head_flat = neg_is_head[rows[sel]].reshape(-1)
            # Corrupted slot transformed by its own map; the kept slot
            # reuses the positive's transform.
            x = np.empty((c * k, model.dim))
            if head_flat.any():
                x[head_flat] = ent[ids_flat[head_flat]] @ h_map
            if (~head_flat).any():
                x[~head_flat] = ent[ids_flat[~head_flat]] @ t_map
            kept = np.where(
                head_flat[:, None],
                np.repeat(at[sel], k, axis=0),
                np.repeat(ah[sel], k, axis=0),
            )
            u_neg = x + kept
            neg_scores = np.einsum("ij,ij->i", u_neg, u_neg).reshape(c, k)

            pos_chunk = pos_scores[sel]
            if hyper.loss_mode == "multi-negative-max":
                k_star = np.argmax(neg_scores, axis=1)
                gaps = hyper.margin + neg_scores[np.arange(c), k_star] - pos_chunk
                hinge_sum += float(np.maximum(gaps, 0.0).sum())
                active = np.nonzero(gaps > 0.0)[0]
                if active.size == 0:
                    continue
                flat_idx = active * k + k_star[active]
            else:
                gaps = hyper.margin + neg_scores - pos_chunk[:, None]
                active_mask = gaps > 0.0
                hinge_sum += float(gaps[active_mask].sum())
                act_i, act_k = np.nonzero(active_mask)
                if act_i.size == 0:
                    continue
                flat_idx = act_i * k + act_k
                # One entry per active pair; a positive with several active
                # corruptions repeats, which accumulates its contributions.
                active = act_i

            u_act = u[sel][active]
            un_act = u_neg[flat_idx]
            ph = h_ids[sel][active]
            pt = t_ids[sel][active]
            is_head = head_flat[flat_idx]
            corrupted = ids_flat[flat_idx]
            nh = np.where(is_head, corrupted, ph)
            nt = np.where(is_head, pt, corrupted)

            id_blocks.extend([ph, pt, nh, nt])
            grad_blocks.extend(
                [
                    -2.0 * (u_act @ h_map.T),
                    -2.0 * (u_act @ t_map.T),
                    2.0 * (un_act @ h_map.T),
                    2.0 * (un_act @ t_map.T),
                ]
            )
            g_head += 2.0 * (ent[nh].T @ un_act - ent[ph].T @ u_act)
            g_tail += 2.0 * (ent[nt].T @ un_act - ent[pt].T @ u_act)

        # Penalty enters every example's gradient, so a relation seen in
        # b_r examples carries b_r times its penalty gradient in the sum.
        b_r = len(rows)
        p1, p2 = penalty_gradients(rel, hyper.lambda1, hyper.lambda2)
        g_head += b_r * p1
        g_tail += b_r * p2
        penalty_sum += b_r * orthogonality_penalty(rel, hyper.lambda1, hyper.lambda2)
        rel_updates.append((int(r), g_head, g_tail))

    return hinge_sum, penalty_sum, id_blocks, grad_blocks, rel_updates


def apply_batch(
    model: Model,
    batch: np.ndarray,
    neg_ids: np.ndarray,
    neg_is_head: np.ndarray,
    hyper: Hyperparams,
) -> tuple[float, float]:
    """One SGD step on the mean batch gradient; returns (mean hinge, mean penalty)."""
    b = batch.shape[0]
    hinge_sum, penalty_sum, id_blocks, grad_blocks, rel_updates = _batch_arrays(
        model, batch, neg_ids, neg_is_head, hyper
    )
    scale = hyper.learning_rate / b
    for r, g_head, g_tail in rel_updates:
        rel = model.relations[r]
        rel.head_map -= scale * g_head
        rel.tail_map -= scale * g_tail
        if not (np.all(np.isfinite(rel.head_map)) and np.all(np.isfinite(rel.tail_map))):
            raise ValueError("non-finite relation update")
    if id_blocks:
        all_ids = np.concatenate(id_blocks)
        all_grads = np.concatenate(grad_blocks, axis=0)
        np.add.at(model.entities, all_ids, -scale * all_grads)
    return hinge_sum / b, penalty_sum / b


def train(
    dataset: Dataset,
    hyper: Hyperparams,
    *,
    seed: int | None = None,
    log_stream: IO[str] | None = None,
) -> TrainState:
    """Minibatch SGD with periodic filtered validation and early stopping.

    Epochs are split into `batches_per_epoch` slices of a fresh shuffle.
    Every `eval_every` epochs the model is scored by filtered MRR on the
    validation split; the best snapshot is kept and training stops after
    `patience` evaluations without improvement.  With an empty validation
    split the final model doubles as the best one.

    Randomness comes from three substreams of the root seed (`init`,
    `shuffle`, `negatives`), so runs are reproducible and the loss history
    for a given seed is deterministic.
    """
    if len(dataset.train) == 0:
        raise ValueError("training split is empty")
    root_seed = hyper.seed if seed is None else seed
    init_rng = substream(root_seed, "init")
    shuffle_rng = substream(root_seed, "shuffle")
    neg_rng = substream(root_seed, "negatives")

    model = init_model(
        dataset.vocab.n_entities,
        dataset.vocab.n_relations,
        hyper.dim,
        init_rng,
        vocab=dataset.vocab,
    )
    train_arr = np.asarray(dataset.train, dtype=np.int64).reshape(len(dataset.train), 3)
    n = train_arr.shape[0]
    batch_size = math.ceil(n / hyper.batches_per_epoch)

    best_model: Model | None = None
    best_metric = -np.inf
    best_epoch = 0
    evals_since_best = 0
    history: list[EpochStats] = []

    for epoch in range(1, hyper.max_epochs + 1):
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        penalty_sum = 0.0
        n_batches = 0
        for b in range(hyper.batches_per_epoch):
            idx = perm[b * batch_size : (b + 1) * batch_size]
            if idx.size == 0:
                continue
            batch = train_arr[idx]
            neg_ids, neg_is_head = sample_negative_batch(
                batch, hyper.n_negatives, neg_rng, model.n_entities
            )
            try:
                mean_hinge, mean_penalty = apply_batch(
                    model, batch, neg_ids, neg_is_head, hyper
                )
            except ValueError as exc:
                raise TrainingDiverged(epoch, b) from exc
            if not (np.isfinite(mean_hinge) and np.isfinite(mean_penalty)):
                raise TrainingDiverged(epoch, b)
            loss_sum += mean_hinge
            penalty_sum += mean_penalty
            n_batches += 1
        if not np.all(np.isfinite(model.entities)):
            raise TrainingDiverged(epoch, -1)

        mean_loss = loss_sum / max(n_batches, 1)
        mean_penalty = penalty_sum / max(n_batches, 1)
        residual = float(
            np.mean([gram_offdiag_mass(rel) for rel in model.relations])
        )

        validation_mrr: float | None = None
        if dataset.valid and epoch % hyper.eval_every == 0:
            report = evaluation.link_prediction(model, dataset, split="valid")
            validation_mrr = report.mrr
            if validation_mrr > best_metric:
                best_metric = validation_mrr
                best_model = model.copy()
                best_epoch = epoch
                evals_since_best = 0
            else:
                evals_since_best += 1

        history.append(
            EpochStats(epoch, mean_loss, mean_penalty, residual, validation_mrr)
        )
        if log_stream is not None:
            metric_text = "" if validation_mrr is None else f"{validation_mrr:.17g}"
            log_stream.write(
                f"{epoch}\t{mean_loss:.17g}\t{mean_penalty:.17g}\t{metric_text}\n"
            )
        if dataset.valid and evals_since_best >= hyper.patience:
            break

    if best_model is None:
        best_model = model.copy()
        best_epoch = history[-1].epoch if history else 0
        best_metric = float("nan")
    return TrainState(
        model=model,
        best_model=best_model,
        best_metric=best_metric,
        best_epoch=best_epoch,
        history=history,
    )
