"""Seeded randomness: named substreams and basic geometric sampling.

Every stochastic component of a run (parameter init, negative corruption,
batch shuffling, diagnostics, synthetic worlds) draws from its own generator
derived from one root seed plus a component name.  Rerunning any single
component with the same root seed reproduces it exactly, independent of what
the other components consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEED_MASK = (1 << 64) - 1


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the component `name`, derived from the root `seed`.

    The component name is hashed so that adding or renaming components never
    shifts the streams of the others.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed & _SEED_MASK, key]))


def sample_unit_sphere(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Rows drawn uniformly from the unit sphere in `dim` dimensions."""
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    points = rng.standard_normal((count, dim))
    norms = np.linalg.norm(points, axis=1)
    # A zero draw has probability zero but would poison the division.
    while np.any(norms == 0.0):
        bad = norms == 0.0
        points[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(points, axis=1)
    return points / norms[:, None]


def random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix drawn uniformly (Haar) via QR with sign correction."""
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    a = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    # Without fixing the signs of R's diagonal the QR factorization is not
    # Haar-distributed.
    signs = np.where(np.diag(r) >= 0.0, 1.0, -1.0)
    return q * signs[None, :]
