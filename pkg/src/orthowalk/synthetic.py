"""Synthetic worlds for validating the generative story behind the scores.

The generative process: a knowledge state c walks slowly on the unit
sphere (consecutive states at most `step_bound` apart).  Given a relation,
the head entity is emitted from state c with probability proportional to
exp(h^T H c) and the tail from the next state c' via exp(t^T T c'), where
H, T are the relation's orthogonal maps.  Entity vectors follow a bounded
isotropic prior: uniform direction, length uniform on [0, kappa].

Under these assumptions the log joint probability of a pair should match
score / (2 d) - 2 log Z up to the concentration error of the partition sum
Z.  `check_theorem` measures that match on a sampled world by comparing a
Monte Carlo estimate of the log joint against the score-based prediction;
`check_concentration` measures how tightly Z concentrates across states.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma, log

import numpy as np
from scipy.special import ive, logsumexp

from .kgdata import Triple, Vocabulary
from .model import Model, RelationEmbedding, log_probability
from .sampling import random_orthogonal, sample_unit_sphere

_MC_COLUMN_CHUNK = 2048


@dataclass
class SyntheticWorld:
    """Ground-truth parameters plus any triples emitted from them."""

    model: Model
    kappa: float
    step_bound: float
    walk: np.ndarray  # (n_steps, dim) unit states, consecutive rows close
    triples: list[Triple]
    # Generating states per triple: [i, 0] emitted the head, [i, 1] the tail.
    states: np.ndarray


def bounded_steps(
    states: np.ndarray, step_bound: float, rng: np.random.Generator
) -> np.ndarray:
    """One walk step from each row: unit vectors within `step_bound` of it.

    A random direction of length `step_bound` is added and the result is
    renormalized; renormalization can stretch the displacement slightly
    past the bound, in which case the perturbation is shrunk until the
    moved point honors it.
    """
    if step_bound <= 0:
        raise ValueError(f"step_bound must be positive, got {step_bound}")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    deltas = rng.standard_normal(states.shape)
    deltas *= step_bound / np.linalg.norm(deltas, axis=1)[:, None]
    out = np.empty_like(states)
    pending = np.arange(states.shape[0])
    while pending.size:
        moved = states[pending] + deltas[pending]
        moved /= np.linalg.norm(moved, axis=1)[:, None]
        displacement = np.linalg.norm(moved - states[pending], axis=1)
        ok = displacement <= step_bound
        out[pending[ok]] = moved[ok]
        pending = pending[~ok]
        deltas[pending] *= 0.5
    return out


def sample_walk(
    dim: int, n_steps: int, step_bound: float, rng: np.random.Generator
) -> np.ndarray:
    """A slow walk on the unit sphere: (n_steps, dim), rows unit length."""
    if dim < 2:
        raise ValueError(f"dim must be at least 2, got {dim}")
    if n_steps < 1:
        raise ValueError(f"n_steps must be positive, got {n_steps}")
    walk = np.empty((n_steps, dim))
    walk[0] = sample_unit_sphere(1, dim, rng)[0]
    for i in range(1, n_steps):
        walk[i] = bounded_steps(walk[i - 1 : i], step_bound, rng)[0]
    return walk


def emit_entity(
    world: SyntheticWorld,
    relation: int,
    slot: str,
    state: np.ndarray,
    rng: np.random.Generator,
) -> int:
    """Draw an entity for the slot from the exact softmax over the vocabulary."""
    if slot not in ("head", "tail"):
        raise ValueError(f"slot must be 'head' or 'tail', got {slot!r}")
    rel = world.model.relations[relation]
    mapped = rel.head_map if slot == "head" else rel.tail_map
    exponents = world.model.entities @ (mapped @ state)
    exponents -= exponents.max()
    weights = np.exp(exponents)
    weights /= weights.sum()
    return int(rng.choice(world.model.n_entities, p=weights))


def build_world(
    n_entities: int,
    n_relations: int,
    dim: int,
    kappa: float,
    step_bound: float,
    rng: np.random.Generator,
    n_triples: int = 0,
) -> SyntheticWorld:
    """Sample ground-truth parameters and optionally emit triples.

    Entities: uniform directions scaled by lengths uniform on [0, kappa].
    Relations: independent Haar-orthogonal map pairs.  When `n_triples` is
    positive, one walk supplies consecutive state pairs (c, c'); each
    triple takes a uniform relation, emits the head from c and the tail
    from c', and the walk continues from c'.
    """
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if n_triples < 0:
        raise ValueError(f"n_triples must be non-negative, got {n_triples}")
    directions = sample_unit_sphere(n_entities, dim, rng)
    lengths = rng.uniform(0.0, kappa, size=n_entities)
    entities = directions * lengths[:, None]
    relations = [
        RelationEmbedding(random_orthogonal(dim, rng), random_orthogonal(dim, rng))
        for _ in range(n_relations)
    ]
    vocab = Vocabulary(
        entities=[f"e{i}" for i in range(n_entities)],
        relations=[f"r{j}" for j in range(n_relations)],
    )
    model = Model(entities=entities, relations=relations, vocab=vocab)
    world = SyntheticWorld(
        model=model,
        kappa=kappa,
        step_bound=step_bound,
        walk=np.empty((0, dim)),
        triples=[],
        states=np.empty((0, 2, dim)),
    )
    if n_triples == 0:
        return world

    n_steps = n_triples + 1
    walk = sample_walk(dim, n_steps, step_bound, rng)
    triples: list[Triple] = []
    states = np.empty((n_triples, 2, dim))
    for i in range(n_triples):
        relation = int(rng.integers(n_relations))
        c, c_next = walk[i], walk[i + 1]
        h = emit_entity(world, relation, "head", c, rng)
        t = emit_entity(world, relation, "tail", c_next, rng)
        triples.append((h, relation, t))
        states[i, 0] = c
        states[i, 1] = c_next
    world.walk = walk
    world.triples = triples
    world.states = states
    return world


def log_sphere_tilt(dim: int, concentration: float) -> float:
    """log of the sphere average of exp(kappa * u^T c) over uniform c.

    This is the normalizer relating the uniform sphere measure to the
    directionally tilted density exp(kappa u^T c); expressed through the
    modified Bessel function of order dim/2 - 1, evaluated in scaled form
    for stability.
    """
    if dim < 2:
        raise ValueError(f"dim must be at least 2, got {dim}")
    if concentration < 0:
        raise ValueError(f"concentration must be non-negative, got {concentration}")
    if concentration < 1e-8:
        # Series limit: 1 + kappa^2 / (2 dim) + O(kappa^4).
        return concentration * concentration / (2.0 * dim)
    nu = dim / 2.0 - 1.0
    log_bessel = log(float(ive(nu, concentration))) + concentration
    return lgamma(dim / 2.0) + nu * (log(2.0) - log(concentration)) + log_bessel


def sample_tilted_sphere(
    direction: np.ndarray,
    concentration: float,
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Unit vectors with density proportional to exp(concentration * dir^T c).

    Standard rejection construction: the cosine against `direction` is drawn
    through a Beta envelope, the orthogonal part uniformly.  Zero
    concentration degenerates to the uniform sphere.
    """
    direction = np.asarray(direction, dtype=np.float64)
    dim = direction.shape[0]
    if dim < 2:
        raise ValueError(f"dim must be at least 2, got {dim}")
    if concentration < 0:
        raise ValueError(f"concentration must be non-negative, got {concentration}")
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    if concentration < 1e-12:
        return sample_unit_sphere(count, dim, rng)
    mu = direction / np.linalg.norm(direction)
    kappa = concentration
    b = (-2.0 * kappa + np.sqrt(4.0 * kappa * kappa + (dim - 1.0) ** 2)) / (dim - 1.0)
    x0 = (1.0 - b) / (1.0 + b)
    c0 = kappa * x0 + (dim - 1.0) * np.log(1.0 - x0 * x0)
    cosines = np.empty(count)
    filled = 0
    while filled < count:
        need = count - filled
        z = rng.beta((dim - 1.0) / 2.0, (dim - 1.0) / 2.0, size=need)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(need)
        accept = kappa * w + (dim - 1.0) * np.log(1.0 - x0 * w) - c0 >= np.log(u)
        taken = w[accept]
        cosines[filled : filled + taken.size] = taken
        filled += taken.size
    tangent = rng.standard_normal((count, dim))
    tangent -= (tangent @ mu)[:, None] * mu
    norms = np.linalg.norm(tangent, axis=1)
    while np.any(norms == 0.0):
        bad = norms == 0.0
        fresh = rng.standard_normal((int(bad.sum()), dim))
        fresh -= (fresh @ mu)[:, None] * mu
        tangent[bad] = fresh
        norms = np.linalg.norm(tangent, axis=1)
    tangent /= norms[:, None]
    sines = np.sqrt(np.maximum(0.0, 1.0 - cosines * cosines))
    return cosines[:, None] * mu + sines[:, None] * tangent


@dataclass
class JointEstimate:
    log_p: float
    std_err: float  # approximate standard error of log_p
    n_samples: int


def estimate_joint(
    world: SyntheticWorld,
    triple: Triple,
    n_samples: int,
    rng: np.random.Generator,
) -> JointEstimate:
    """Monte Carlo estimate of the log joint probability of a triple.

    The estimand is the average over state pairs (c uniform on the sphere,
    c' one bounded step away) of the exact emission probabilities
    p(h | c) * p(t | c').  States are importance-sampled from the density
    proportional to exp(v^T c) with v the triple's combined vector, which
    cancels the dominant exponential factor of the integrand exactly; the
    surviving weight variation comes only from the walk step and the
    partition sums, so the estimator's noise stays far below the model
    error being measured.  The average is formed in log space.
    """
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples, got {n_samples}")
    h, r, t = triple
    model = world.model
    rel = model.relations[r]
    mapped_head = model.entities @ rel.head_map  # (n, d)
    mapped_tail = model.entities @ rel.tail_map
    combined = mapped_head[h] + mapped_tail[t]
    concentration = float(np.linalg.norm(combined))
    tilt = log_sphere_tilt(model.dim, concentration)
    log_weights = np.empty(n_samples)
    for lo in range(0, n_samples, _MC_COLUMN_CHUNK):
        count = min(_MC_COLUMN_CHUNK, n_samples - lo)
        c = sample_tilted_sphere(combined, concentration, count, rng)
        c_next = bounded_steps(c, world.step_bound, rng)
        log_z_head = logsumexp(mapped_head @ c.T, axis=0)
        log_z_tail = logsumexp(mapped_tail @ c_next.T, axis=0)
        # Integrand over proposal: exp(h-part + t-part - v^T c) reduces to
        # exp(t-part at c' minus t-part at c).
        step_term = (c_next - c) @ mapped_tail[t]
        log_weights[lo : lo + count] = step_term + tilt - log_z_head - log_z_tail
    shift = log_weights.max()
    scaled = np.exp(log_weights - shift)
    mean = scaled.mean()
    log_p = float(shift + np.log(mean))
    # Relative standard error of the mean approximates the absolute
    # standard error of its log.
    std_err = float(scaled.std(ddof=1) / (mean * np.sqrt(n_samples)))
    return JointEstimate(log_p=log_p, std_err=std_err, n_samples=n_samples)


def reference_log_z(
    world: SyntheticWorld,
    relation: int,
    n_states: int,
    rng: np.random.Generator,
) -> float:
    """Log partition sum treated as a constant for the score prediction.

    Averages log Z over sampled states and over the two slots; if Z really
    concentrates, the spread around this value is small and the choice of
    average does not matter.
    """
    if n_states < 1:
        raise ValueError(f"n_states must be positive, got {n_states}")
    model = world.model
    rel = model.relations[relation]
    states = sample_unit_sphere(n_states, model.dim, rng)
    total = 0.0
    for mapped in (rel.head_map, rel.tail_map):
        exponents = (model.entities @ mapped) @ states.T
        total += float(np.mean(logsumexp(exponents, axis=0)))
    return total / 2.0


@dataclass
class TheoremCheck:
    """Monte Carlo log joints against the score-based prediction."""

    triples: list[Triple]
    log_p: np.ndarray
    predicted: np.ndarray
    std_err: np.ndarray
    log_z: dict[int, float]
    pearson_r: float
    slope: float
    intercept: float
    max_abs_deviation: float
    n_samples: int


def check_theorem(
    world: SyntheticWorld,
    n_triples: int,
    n_samples: int,
    rng: np.random.Generator,
    n_z_states: int = 1000,
) -> TheoremCheck:
    """Compare estimated log joints with score / (2 d) - 2 log Z.

    Triples are sampled uniformly (entities and relation independent), so
    scores spread over their full range rather than clustering at the high
    end the walk would visit.  Reports the Pearson correlation, the
    least-squares line of estimate against prediction, and the largest
    absolute deviation.  Degenerate spreads make the correlation NaN.
    """
    if n_triples < 3:
        raise ValueError(f"need at least 3 triples, got {n_triples}")
    model = world.model
    heads = rng.integers(model.n_entities, size=n_triples)
    tails = rng.integers(model.n_entities, size=n_triples)
    rels = rng.integers(model.n_relations, size=n_triples)
    triples = [(int(h), int(r), int(t)) for h, r, t in zip(heads, rels, tails)]

    log_z = {
        int(r): reference_log_z(world, int(r), n_z_states, rng)
        for r in sorted(set(rels.tolist()))
    }
    log_p = np.empty(n_triples)
    predicted = np.empty(n_triples)
    std_err = np.empty(n_triples)
    for i, triple in enumerate(triples):
        estimate = estimate_joint(world, triple, n_samples, rng)
        log_p[i] = estimate.log_p
        std_err[i] = estimate.std_err
        predicted[i] = log_probability(model, triple, log_z[triple[1]])

    dx = predicted - predicted.mean()
    dy = log_p - log_p.mean()
    var_x = float(np.sum(dx * dx))
    var_y = float(np.sum(dy * dy))
    if var_x == 0.0 or var_y == 0.0:
        pearson = float("nan")
        slope = float("nan")
        intercept = float("nan")
    else:
        cov = float(np.sum(dx * dy))
        pearson = cov / np.sqrt(var_x * var_y)
        slope = cov / var_x
        intercept = float(log_p.mean() - slope * predicted.mean())
    return TheoremCheck(
        triples=triples,
        log_p=log_p,
        predicted=predicted,
        std_err=std_err,
        log_z=log_z,
        pearson_r=pearson,
        slope=slope,
        intercept=intercept,
        max_abs_deviation=float(np.max(np.abs(log_p - predicted))),
        n_samples=n_samples,
    )


@dataclass
class SlotConcentration:
    mean_log_z: float
    cv: float
    fraction_within: dict[float, float]


@dataclass
class ConcentrationCheck:
    relation: int
    n_states: int
    head: SlotConcentration
    tail: SlotConcentration


def check_concentration(
    world: SyntheticWorld,
    relation: int,
    n_states: int,
    rng: np.random.Generator,
    bands: tuple[float, ...] = (0.01, 0.05, 0.10),
) -> ConcentrationCheck:
    """Spread of the exact partition sum over random states, per slot.

    Reports the coefficient of variation of Z and, for each relative band
    epsilon, the fraction of states whose Z lies within (1 +/- epsilon)
    of the mean.
    """
    if n_states < 2:
        raise ValueError(f"need at least 2 states, got {n_states}")
    model = world.model
    if not (0 <= relation < model.n_relations):
        raise IndexError(f"relation id out of range: {relation}")
    rel = model.relations[relation]
    states = sample_unit_sphere(n_states, model.dim, rng)
    slots = []
    for mapped in (rel.head_map, rel.tail_map):
        exponents = (model.entities @ mapped) @ states.T
        log_z = logsumexp(exponents, axis=0)
        z = np.exp(log_z)
        mean = float(z.mean())
        cv = float(z.std() / mean)
        fractions = {
            float(eps): float(np.mean(np.abs(z - mean) <= eps * mean)) for eps in bands
        }
        slots.append(
            SlotConcentration(
                mean_log_z=float(log_z.mean()), cv=cv, fraction_within=fractions
            )
        )
    return ConcentrationCheck(
        relation=relation, n_states=n_states, head=slots[0], tail=slots[1]
    )


def theorem_check_json(check: TheoremCheck) -> dict:
    return {
        "n_triples": len(check.triples),
        "n_samples": check.n_samples,
        "pearson_r": check.pearson_r,
        "slope": check.slope,
        "intercept": check.intercept,
        "max_abs_deviation": check.max_abs_deviation,
        "log_z": {str(r): v for r, v in sorted(check.log_z.items())},
    }


def concentration_check_json(check: ConcentrationCheck) -> dict:
    def slot_obj(slot: SlotConcentration) -> dict:
        return {
            "mean_log_z": slot.mean_log_z,
            "cv": slot.cv,
            "fraction_within": {f"{eps:g}": v for eps, v in slot.fraction_within.items()},
        }

    return {
        "relation": check.relation,
        "n_states": check.n_states,
        "head": slot_obj(check.head),
        "tail": slot_obj(check.tail),
    }


def write_scatter_tsv(check: TheoremCheck, stream) -> None:
    """Per-triple points of the estimate-vs-prediction scatter."""
    stream.write("head\trelation\ttail\tpredicted\testimated\tstd_err\n")
    for (h, r, t), pred, est, se in zip(
        check.triples, check.predicted, check.log_p, check.std_err
    ):
        stream.write(f"{h}\t{r}\t{t}\t{pred:.17g}\t{est:.17g}\t{se:.17g}\n")
