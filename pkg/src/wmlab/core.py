"""Vocabulary and probability-simplex primitives shared by every module.

Tokens are dense integers ``0..size-1``; anything with a surface form
(bytes, words) is mapped to dense ids at ingestion so the math stays
allocation-light.  All values are immutable after construction and safe
to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    LengthMismatchError,
    NegativeWeightError,
    NonFiniteError,
    NotNormalizedError,
    TokenOutOfRangeError,
)

# Post-normalization tolerance on |sum - 1|.  Downstream solvers accumulate
# rounding from exp/log, hence looser than machine epsilon.
SIMPLEX_ATOL = 1e-9
# validate_dist renormalizes inputs whose sum deviates by less than this.
RENORM_ATOL = 1e-6
# Entries above this floor of negativity are treated as rounding noise.
NEG_ATOL = 1e-12


@dataclass(frozen=True)
class Vocabulary:
    """A finite token alphabet of dense integer ids ``0..size-1``."""

    size: int

    def __post_init__(self):
        if self.size < 2:
            raise TokenOutOfRangeError(f"vocabulary needs at least 2 tokens, got {self.size}")

    @property
    def tokens(self) -> range:
        return range(self.size)


@dataclass(frozen=True, eq=False)
class ProbDist:
    """A point on the probability simplex over the vocabulary.

    The constructor enforces the strict invariants (non-negative entries,
    sum within :data:`SIMPLEX_ATOL` of one); use :func:`validate_dist` for
    lenient ingestion of user-supplied vectors.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 2:
            raise LengthMismatchError(f"expected a 1-D vector of length >= 2, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise NonFiniteError("distribution contains NaN or infinite weights")
        if np.any(w < -NEG_ATOL):
            raise NegativeWeightError(f"negative weight {w.min():.3e}")
        w = np.where(w < 0.0, 0.0, w)
        total = float(w.sum())
        if abs(total - 1.0) > SIMPLEX_ATOL:
            raise NotNormalizedError(f"weights sum to {total!r}, not 1")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.size

    @property
    def support(self) -> np.ndarray:
        """Indices of strictly positive weights."""
        return np.flatnonzero(self.weights > 0.0)

    def __repr__(self) -> str:  # keep reprs short in test output
        return f"ProbDist({np.array2string(self.weights, precision=6, threshold=8)})"


def validate_dist(weights) -> ProbDist:
    """Validate a raw weight vector and return it as a :class:`ProbDist`.

    Weights are renormalized only when the sum deviates from one by less
    than :data:`RENORM_ATOL`; larger deviations are an error rather than
    silently fixed.

    Raises
    ------
    NonFiniteError, NegativeWeightError, NotNormalizedError, LengthMismatchError
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 2:
        raise LengthMismatchError(f"expected a 1-D vector of length >= 2, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NonFiniteError("weights contain NaN or infinity")
    if np.any(w < -NEG_ATOL):
        raise NegativeWeightError(f"negative weight {w.min():.3e}")
    w = np.where(w < 0.0, 0.0, w)
    total = float(w.sum())
    if abs(total - 1.0) >= RENORM_ATOL:
        raise NotNormalizedError(f"weights sum to {total!r}; |sum-1| >= {RENORM_ATOL}")
    return ProbDist(w / total)


def dirac(vocab: Vocabulary | int, token: int) -> ProbDist:
    """Distribution with all mass on ``token``."""
    size = vocab.size if isinstance(vocab, Vocabulary) else int(vocab)
    if not 0 <= token < size:
        raise TokenOutOfRangeError(f"token {token} outside vocabulary of size {size}")
    w = np.zeros(size)
    w[token] = 1.0
    return ProbDist(w)


def expected_score(q: ProbDist, g) -> float:
    """Expected per-token score ``g . q`` under distribution ``q``."""
    gv = np.asarray(g, dtype=np.float64)
    if gv.shape != q.weights.shape:
        raise LengthMismatchError(f"score length {gv.shape} != distribution length {q.weights.shape}")
    return float(q.weights @ gv)


def as_scores(g, size: int | None = None) -> np.ndarray:
    """Coerce ``g`` to a finite 1-D float64 score vector, optionally of length ``size``."""
    gv = np.asarray(g, dtype=np.float64)
    if gv.ndim != 1:
        raise LengthMismatchError(f"scores must be 1-D, got shape {gv.shape}")
    if size is not None and gv.size != size:
        raise LengthMismatchError(f"score length {gv.size} != expected {size}")
    if not np.all(np.isfinite(gv)):
        raise NonFiniteError("scores contain NaN or infinity")
    return gv
