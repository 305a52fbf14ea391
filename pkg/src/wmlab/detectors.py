"""Model-free watermark detection.

Detection re-derives each token's pseudorandom score from the secret key
and the token's preceding context window, deduplicates repeated
(context, token) pairs, and turns the score collection into a p-value
under the no-watermark null:

* binary score laws (``bernoulli``, ``fixed_partition``): one-sided
  binomial test on the count of one-scored tokens,
* ``binomial(n, p)`` scores: each position contributes ``n`` Bernoulli
  trials, pooled into a single one-sided binomial test,
* tournament watermarks: the per-layer binary scores of each position are
  pooled the same way over ``n_eff * layers`` trials,
* continuous laws: one-sample two-sided Kolmogorov-Smirnov statistic
  against the family CDF, p-value from the asymptotic Kolmogorov series.

Only positions with a full real context window are scored, so a sequence
must be at least ``context_width + 1`` tokens long.  Tests are one-sided
toward large scores (watermarks only push scores up).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import (
    EmptyInputError,
    EmptySequenceError,
    InvalidParamsError,
)
from .hashing import HashConfig, ScoreSpec, context_seed, sample_scores, score_of
from .samplers import WatermarkConfig

EXACT_TAIL_MAX_TRIALS = 10_000
KOLMOGOROV_TERMS = 20


@dataclass(frozen=True)
class ScoreObservation:
    """One scored position: the context window, the token, and its score.

    ``seed`` is the context's hash class.  The sum hash deliberately
    identifies windows with equal token-id sums (permutations and, at small
    vocabularies, many accidental ties), and identified windows yield
    bit-identical score streams, so the seed is the context identity the
    detector can actually distinguish.
    """

    context: tuple[int, ...]
    token: int
    score: float
    seed: int = 0
    layer_scores: tuple[float, ...] | None = None


@dataclass(frozen=True)
class DetectionResult:
    """Test outcome; ``decision`` is exactly ``p_value < alpha``."""

    statistic: float
    p_value: float
    n_effective: int
    decision: bool
    alpha: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise InvalidParamsError(f"p-value {self.p_value} outside [0, 1]")
        if self.decision != (self.p_value < self.alpha):
            raise InvalidParamsError("decision must equal p_value < alpha")

    @classmethod
    def from_pvalue(cls, statistic: float, p_value: float, n_effective: int, alpha: float) -> "DetectionResult":
        return cls(float(statistic), float(p_value), int(n_effective), bool(p_value < alpha), float(alpha))


def reconstruct(tokens, hash_cfg: HashConfig, spec: ScoreSpec, vocab_size: int) -> list[ScoreObservation]:
    """Re-derive the score of every position with a full context window.

    Position ``t`` is scored under the seed of ``tokens[t-width:t]``, which
    is bit-identical to the seed used at generation time for any position
    at least ``width`` tokens into the sequence.
    """
    tokens = [int(t) for t in tokens]
    width = hash_cfg.context_width
    if len(tokens) < width + 1:
        raise EmptySequenceError(
            f"need at least {width + 1} tokens to score one position, got {len(tokens)}"
        )
    out = []
    for t in range(width, len(tokens)):
        ctx = tuple(tokens[t - width : t])
        tok = tokens[t]
        seed = context_seed(hash_cfg, ctx, 0)
        if hash_cfg.layer_count == 1:
            out.append(ScoreObservation(ctx, tok, score_of(seed, spec, vocab_size, tok), seed))
        else:
            layers = tuple(
                score_of(context_seed(hash_cfg, ctx, layer), spec, vocab_size, tok)
                for layer in range(hash_cfg.layer_count)
            )
            out.append(ScoreObservation(ctx, tok, float(sum(layers)), seed, layers))
    return out


def dedup(observations: list[ScoreObservation]) -> list[ScoreObservation]:
    """Keep the first occurrence of each (context class, token) pair, in order.

    The context class is the hash seed: windows the sum hash identifies
    (permutations, equal-sum ties) produce bit-identical scores, and
    counting such a score twice would break every null distribution.
    """
    seen: set[tuple] = set()
    out = []
    for obs in observations:
        key = (obs.seed, obs.token)
        if key not in seen:
            seen.add(key)
            out.append(obs)
    return out


def binomial_pvalue(successes: int, trials: int, p0: float) -> float:
    """One-sided upper tail ``P[X >= successes]`` for ``X ~ Binomial(trials, p0)``.

    Exact log-space summation up to 10^4 trials, normal approximation with
    continuity correction above.
    """
    successes, trials = int(successes), int(trials)
    if trials < 1 or not 0 <= successes <= trials or not 0.0 < p0 < 1.0:
        raise InvalidParamsError(f"bad binomial test params ({successes}, {trials}, {p0})")
    if successes == 0:
        return 1.0
    if trials <= EXACT_TAIL_MAX_TRIALS:
        k = np.arange(successes, trials + 1, dtype=np.float64)
        lg = math.lgamma(trials + 1)
        logpmf = (
            lg
            - np.array([math.lgamma(v + 1) for v in k])
            - np.array([math.lgamma(trials - v + 1) for v in k])
            + k * math.log(p0)
            + (trials - k) * math.log1p(-p0)
        )
        peak = logpmf.max()
        return float(min(1.0, math.exp(peak) * np.exp(logpmf - peak).sum()))
    z = (successes - 0.5 - trials * p0) / math.sqrt(trials * p0 * (1.0 - p0))
    return float(min(1.0, max(0.0, 0.5 * math.erfc(z / math.sqrt(2.0)))))


def kolmogorov_sf(t: float, terms: int = KOLMOGOROV_TERMS) -> float:
    """Asymptotic Kolmogorov survival function ``2 sum (-1)^{k-1} e^{-2k^2 t^2}``.

    Below t=0.2 the survival probability differs from 1 by less than 1e-13
    while the alternating series converges slowly, so 1 is returned.
    """
    if t <= 0.2:
        return 1.0
    k = np.arange(1, terms + 1, dtype=np.float64)
    s = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * (k * t) ** 2))
    return float(min(1.0, max(0.0, s)))


def _ks_statistic(scores: np.ndarray, cdf_values: np.ndarray) -> float:
    n = scores.size
    order = np.argsort(scores)
    f = cdf_values[order]
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - f)
    d_minus = np.max(f - (i - 1) / n)
    return float(max(d_plus, d_minus))


def _family_cdf(spec: ScoreSpec, x: np.ndarray) -> np.ndarray:
    loc_scale = spec.params
    if spec.family == "gumbel":
        return np.exp(-np.exp(-(x - loc_scale[0]) / loc_scale[1]))
    if spec.family == "normal":
        return ndtr((x - loc_scale[0]) / loc_scale[1])
    if spec.family == "lognormal":
        out = np.zeros_like(x)
        pos = x > 0
        out[pos] = ndtr((np.log(x[pos]) - loc_scale[0]) / loc_scale[1])
        return out
    if spec.family == "uniform":
        a, b = loc_scale
        return np.clip((x - a) / (b - a), 0.0, 1.0)
    raise InvalidParamsError(f"no continuous CDF for family {spec.family!r}")


def ks_pvalue(scores, spec: ScoreSpec) -> tuple[float, float]:
    """(statistic, p-value) of the one-sample KS test against ``spec``'s CDF."""
    x = np.asarray(list(scores), dtype=np.float64)
    if x.size == 0:
        raise EmptyInputError("KS test needs at least one score")
    d = _ks_statistic(x, _family_cdf(spec, x))
    return d, kolmogorov_sf(math.sqrt(x.size) * d)


def ks_gumbel_pvalue(scores) -> float:
    """One-sample KS p-value against the standard Gumbel CDF exp(-exp(-x))."""
    return ks_pvalue(scores, ScoreSpec.gumbel(0.0, 1.0))[1]


def _binary_null_rate(spec: ScoreSpec, vocab_size: int) -> float:
    """Exact null probability that one token's binary score is one."""
    if spec.family == "fixed_partition":
        return spec.ones_count(vocab_size) / vocab_size
    return spec.params[0]


def detect(tokens, watermark_cfg: WatermarkConfig, hash_cfg: HashConfig, vocab_size: int, alpha: float = 0.01) -> DetectionResult:
    """Full detection pipeline: reconstruct, dedup, test, decide at ``alpha``.

    The test is chosen by the score law of ``watermark_cfg`` (see module
    docstring); the scheme itself only matters for the tournament pooling.
    """
    spec = watermark_cfg.score_spec
    obs = dedup(reconstruct(tokens, hash_cfg, spec, vocab_size))
    n_eff = len(obs)

    if watermark_cfg.scheme == "synthid":
        if not spec.is_binary:
            raise InvalidParamsError("tournament detection requires a binary score law")
        total = int(round(sum(obs_i.score for obs_i in obs)))
        trials = n_eff * hash_cfg.layer_count
        p0 = _binary_null_rate(spec, vocab_size)
        p = binomial_pvalue(total, trials, p0)
        return DetectionResult.from_pvalue(total, p, n_eff, alpha)

    if spec.is_binary:
        greens = int(round(sum(obs_i.score for obs_i in obs)))
        p0 = _binary_null_rate(spec, vocab_size)
        p = binomial_pvalue(greens, n_eff, p0)
        return DetectionResult.from_pvalue(greens, p, n_eff, alpha)

    if spec.family == "binomial":
        n_per = int(spec.params[0])
        total = int(round(sum(obs_i.score for obs_i in obs)))
        p = binomial_pvalue(total, n_eff * n_per, spec.params[1])
        return DetectionResult.from_pvalue(total, p, n_eff, alpha)

    d, p = ks_pvalue([obs_i.score for obs_i in obs], spec)
    return DetectionResult.from_pvalue(d, p, n_eff, alpha)
