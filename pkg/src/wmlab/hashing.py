"""Keyed mapping from generation context to per-token pseudorandom scores.

The same function runs at generation and at detection time, so every step
is pinned bit-exactly:

Seed derivation (``context_seed``)
    The context hash is a *sum hash*: only the sum ``S`` of the context's
    token ids enters the mix, which makes the seed invariant to
    permutations of the window by construction.  With ``fin`` the 64-bit
    SplitMix64 finalizer::

        fin(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9 (mod 2^64)
                z ^= z >> 27; z *= 0x94D049BB133111EB (mod 2^64)
                z ^= z >> 31

    the seed for ``(key, context, layer)`` is::

        h0   = fin(key mod 2^64)
        h1   = fin(h0 XOR (S * 0x9E3779B97F4A7C15 mod 2^64))
        seed = fin(h1 XOR (layer * 0xC2B2AE3D27D4EB4F mod 2^64))

    Windows shorter than ``context_width`` are left-padded with the
    sentinel id ``vocab_size`` (one past the vocabulary) before hashing.

Score streams (``sample_scores`` / ``score_of``)
    The seed initializes a NumPy ``PCG64`` bit generator.  Token ``t``'s
    score is derived from the ``t``-th uniform of the stream
    ``U_t = (k_t + 0.5) * 2**-53`` with ``k_t`` the ``t``-th 53-bit integer
    draw, mapped through the family's inverse CDF:

    ==================  ====================================================
    bernoulli(gamma)    ``1 if U < gamma else 0``
    binomial(n, p)      smallest ``k`` with ``BinomCDF(k; n, p) >= U``
    gumbel(loc, s)      ``loc - s * log(-log U)``
    normal(loc, s)      ``loc + s * ndtri(U)``
    lognormal(loc, s)   ``exp(loc + s * ndtri(U))``
    uniform(a, b)       ``a + (b - a) * U``
    ==================  ====================================================

    ``fixed_partition(gamma)`` is the one correlated family: exactly
    ``round(gamma * V)`` ones, placed on the tokens whose uniforms
    ``U_0..U_{V-1}`` have the smallest ranks (stable argsort), i.e. a
    seeded random subset of that exact size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import (
    InvalidParamsError,
    LayerOutOfRangeError,
    LengthMismatchError,
    TokenOutOfRangeError,
)

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_LAYER_SALT = 0xC2B2AE3D27D4EB4F

CONTINUOUS_FAMILIES = frozenset({"gumbel", "normal", "lognormal", "uniform"})
BINARY_FAMILIES = frozenset({"bernoulli", "fixed_partition"})
FAMILIES = CONTINUOUS_FAMILIES | BINARY_FAMILIES | {"binomial"}


def _finalize(z: int) -> int:
    z &= _MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return z


@dataclass(frozen=True)
class HashConfig:
    """Secret key plus the window geometry of the context hash."""

    key: int
    context_width: int = 4
    layer_count: int = 1

    def __post_init__(self):
        if self.context_width < 1:
            raise InvalidParamsError("context_width must be >= 1")
        if self.layer_count < 1:
            raise InvalidParamsError("layer_count must be >= 1")

    def padding_token(self, vocab_size: int) -> int:
        """Sentinel id used to left-pad windows at sequence start."""
        return vocab_size


@dataclass(frozen=True)
class ScoreSpec:
    """A score law: family name plus its parameter tuple."""

    family: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidParamsError(f"unknown score family {self.family!r}")
        p = self.params
        if self.family in ("bernoulli", "fixed_partition"):
            if len(p) != 1 or not 0.0 < p[0] < 1.0:
                raise InvalidParamsError("gamma must lie in (0, 1)")
        elif self.family == "binomial":
            if len(p) != 2 or p[0] < 1 or p[0] != int(p[0]) or not 0.0 < p[1] < 1.0:
                raise InvalidParamsError("binomial needs integer n >= 1 and p in (0, 1)")
        elif self.family == "uniform":
            if len(p) != 2 or not p[0] < p[1]:
                raise InvalidParamsError("uniform needs a < b")
        else:  # gumbel / normal / lognormal: location, scale
            if len(p) != 2 or not p[1] > 0.0:
                raise InvalidParamsError(f"{self.family} needs scale > 0")

    # -- constructors ---------------------------------------------------
    @classmethod
    def bernoulli(cls, gamma: float) -> "ScoreSpec":
        return cls("bernoulli", (float(gamma),))

    @classmethod
    def fixed_partition(cls, gamma: float) -> "ScoreSpec":
        return cls("fixed_partition", (float(gamma),))

    @classmethod
    def binomial(cls, n: int, p: float) -> "ScoreSpec":
        return cls("binomial", (float(n), float(p)))

    @classmethod
    def gumbel(cls, loc: float = 0.0, scale: float = 1.0) -> "ScoreSpec":
        return cls("gumbel", (float(loc), float(scale)))

    @classmethod
    def normal(cls, loc: float = 0.0, scale: float = 1.0) -> "ScoreSpec":
        return cls("normal", (float(loc), float(scale)))

    @classmethod
    def lognormal(cls, loc: float = 0.0, scale: float = 1.0) -> "ScoreSpec":
        return cls("lognormal", (float(loc), float(scale)))

    @classmethod
    def uniform(cls, a: float = 0.0, b: float = 1.0) -> "ScoreSpec":
        return cls("uniform", (float(a), float(b)))

    @classmethod
    def parse(cls, text: str) -> "ScoreSpec":
        """Parse strings like ``gumbel(0,1)`` or ``binomial(30,0.5)``."""
        text = text.strip()
        if "(" not in text or not text.endswith(")"):
            raise InvalidParamsError(f"cannot parse score spec {text!r}")
        family, _, rest = text.partition("(")
        params = tuple(float(tok) for tok in rest[:-1].split(",") if tok.strip())
        return cls(family.strip(), params)

    def __str__(self) -> str:
        inner = ",".join(format(v, "g") for v in self.params)
        return f"{self.family}({inner})"

    @property
    def is_continuous(self) -> bool:
        return self.family in CONTINUOUS_FAMILIES

    @property
    def is_binary(self) -> bool:
        return self.family in BINARY_FAMILIES

    def ones_count(self, vocab_size: int) -> int:
        """Number of ones a fixed partition places over ``vocab_size`` tokens."""
        if self.family != "fixed_partition":
            raise InvalidParamsError("ones_count only applies to fixed_partition")
        return int(round(self.params[0] * vocab_size))


def context_window(tokens, width: int, pad_token: int) -> tuple[int, ...]:
    """Last ``width`` entries of ``tokens``, left-padded with ``pad_token``."""
    tail = tuple(int(t) for t in tokens[-width:]) if width else ()
    if len(tail) < width:
        tail = (pad_token,) * (width - len(tail)) + tail
    return tail


def context_seed(cfg: HashConfig, context, layer: int = 0) -> int:
    """Deterministic 64-bit seed for ``(key, context, layer)``.

    The context enters only through the sum of its token ids, so any
    permutation of the same window yields the same seed.
    """
    context = tuple(int(t) for t in context)
    if len(context) != cfg.context_width:
        raise LengthMismatchError(
            f"context has {len(context)} tokens, expected {cfg.context_width}"
        )
    if not 0 <= layer < cfg.layer_count:
        raise LayerOutOfRangeError(f"layer {layer} outside [0, {cfg.layer_count})")
    h0 = _finalize(cfg.key & _MASK64)
    h1 = _finalize(h0 ^ ((sum(context) * _GOLDEN) & _MASK64))
    return _finalize(h1 ^ ((layer * _LAYER_SALT) & _MASK64))


def _uniforms(rng: np.random.Generator, shape) -> np.ndarray:
    """Open-interval uniforms ``(k + 0.5) * 2**-53`` from 53-bit draws."""
    k = rng.integers(0, 1 << 53, size=shape, dtype=np.uint64)
    return (k.astype(np.float64) + 0.5) * 2.0**-53


def _binomial_cdf(n: int, p: float) -> np.ndarray:
    k = np.arange(n + 1)
    from math import lgamma

    logc = [lgamma(n + 1) - lgamma(i + 1) - lgamma(n - i + 1) for i in k]
    logpmf = np.asarray(logc) + k * np.log(p) + (n - k) * np.log1p(-p)
    return np.minimum(np.cumsum(np.exp(logpmf)), 1.0)


def _inverse_cdf(spec: ScoreSpec, u: np.ndarray) -> np.ndarray:
    """Map uniforms in (0,1) through the family's inverse CDF."""
    family, p = spec.family, spec.params
    if family == "bernoulli":
        return (u < p[0]).astype(np.float64)
    if family == "binomial":
        cdf = _binomial_cdf(int(p[0]), p[1])
        return np.searchsorted(cdf, u, side="left").astype(np.float64)
    if family == "gumbel":
        return p[0] - p[1] * np.log(-np.log(u))
    if family == "normal":
        return p[0] + p[1] * ndtri(u)
    if family == "lognormal":
        return np.exp(p[0] + p[1] * ndtri(u))
    if family == "uniform":
        return p[0] + (p[1] - p[0]) * u
    raise InvalidParamsError(f"no inverse CDF for family {family!r}")


def draw_scores(rng: np.random.Generator, spec: ScoreSpec, vocab_size: int, size: int | None = None) -> np.ndarray:
    """Draw score vectors from the law of ``spec`` using ``rng``.

    Returns shape ``(vocab_size,)`` when ``size`` is None, else
    ``(size, vocab_size)``.  This is the single source of randomness for
    both hashed score streams and fresh Monte-Carlo batches.
    """
    shape = vocab_size if size is None else (size, vocab_size)
    u = _uniforms(rng, shape)
    if spec.family == "fixed_partition":
        ones = spec.ones_count(vocab_size)
        ranks = np.argsort(np.argsort(u, axis=-1, kind="stable"), axis=-1, kind="stable")
        return (ranks < ones).astype(np.float64)
    return _inverse_cdf(spec, u)


def sample_scores(seed: int, spec: ScoreSpec, vocab_size: int) -> np.ndarray:
    """Deterministic per-token scores for one seed; see module docstring."""
    if vocab_size < 2:
        raise InvalidParamsError("vocab_size must be >= 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    return draw_scores(rng, spec, vocab_size)


def score_of(seed: int, spec: ScoreSpec, vocab_size: int, token: int) -> float:
    """Score of one token, bit-identical to ``sample_scores(...)[token]``.

    For i.i.d. families only the prefix of the uniform stream up to the
    token's position is materialized; the fixed partition needs the full
    ranking to decide membership.
    """
    if not 0 <= token < vocab_size:
        raise TokenOutOfRangeError(f"token {token} outside vocabulary of size {vocab_size}")
    rng = np.random.Generator(np.random.PCG64(seed))
    if spec.family == "fixed_partition":
        u = _uniforms(rng, vocab_size)
        ones = spec.ones_count(vocab_size)
        ranks = np.argsort(np.argsort(u, kind="stable"), kind="stable")
        return float(ranks[token] < ones)
    u = _uniforms(rng, token + 1)[token]
    return float(_inverse_cdf(spec, np.asarray([u]))[0])
