"""Watermark sampling mechanisms.

Each mechanism maps the model's next-token distribution ``p`` and a score
vector ``g`` to a watermarked distribution ``q(g)``:

============  ==========================================  ==============
scheme        q(g)                                        strength
============  ==========================================  ==============
red_green     ``p * exp(delta * g)``, normalized          delta >= 0
aar_kth       Dirac at argmax ``g + log(p)/(1+delta)``    delta >= 0
chi2          ``p * [1 + delta*(g + mu)]_+`` with the     delta >= 0
              water-filling shift ``mu``
synthid       m chained binary-score tournament layers    layers m
ppl_hard      support-<=2 maximizer of ``g.q`` under      epsilon >= 0
              ``q.log p >= p.log p - epsilon``
ppl_soft      Dirac at argmax ``g + lambda * log p``,     epsilon >= 0
              lambda calibrated by Monte-Carlo bisection
============  ==========================================  ==============

Tokens with ``p_u = 0`` (e.g. after top-k filtering) are excluded from
every argmax and constraint and stay at zero mass.  All argmax ties break
toward the lowest token id.  Every function is pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ProbDist, as_scores, dirac
from .errors import (
    BracketFailureError,
    ConstantScoresError,
    DiscreteSpecUnsupportedError,
    EpsilonTooLargeError,
    InvalidParamsError,
    NonBinaryScoresError,
    NumericalFailureError,
)
from .hashing import ScoreSpec, draw_scores

SCHEMES = ("red_green", "aar_kth", "chi2", "synthid", "ppl_hard", "ppl_soft")
_DELTA_SCHEMES = frozenset({"red_green", "aar_kth", "chi2"})
_EPSILON_SCHEMES = frozenset({"ppl_hard", "ppl_soft"})


@dataclass(frozen=True)
class WatermarkConfig:
    """A scheme identifier plus its strength parameter and score law.

    Exactly one of ``delta`` / ``epsilon`` is meaningful per scheme:
    red_green, aar_kth and chi2 are penalized (``delta``); ppl_hard and
    ppl_soft are constrained (``epsilon``); synthid is parametrized by its
    tournament depth ``layers`` alone.
    """

    scheme: str
    score_spec: ScoreSpec
    delta: float | None = None
    epsilon: float | None = None
    layers: int = 30
    mc_samples: int = 128

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidParamsError(f"unknown scheme {self.scheme!r}")
        if self.layers < 1 or self.mc_samples < 1:
            raise InvalidParamsError("layers and mc_samples must be >= 1")
        if self.scheme in _DELTA_SCHEMES:
            if self.delta is None or self.delta < 0 or self.epsilon is not None:
                raise InvalidParamsError(f"{self.scheme} takes delta >= 0 and no epsilon")
        elif self.scheme in _EPSILON_SCHEMES:
            if self.epsilon is None or self.epsilon < 0 or self.delta is not None:
                raise InvalidParamsError(f"{self.scheme} takes epsilon >= 0 and no delta")
        else:  # synthid
            if self.delta is not None or self.epsilon is not None:
                raise InvalidParamsError("synthid is parametrized by layers only")

    @property
    def strength(self) -> float:
        if self.scheme in _DELTA_SCHEMES:
            return float(self.delta)
        if self.scheme in _EPSILON_SCHEMES:
            return float(self.epsilon)
        return float(self.layers)


def _support(p: ProbDist) -> np.ndarray:
    s = p.support
    if s.size == 0:
        raise InvalidParamsError("distribution has empty support")
    return s


def _kl_weights(q: np.ndarray, p: np.ndarray) -> float:
    mask = q > 0.0
    return float(np.sum(q[mask] * (np.log(q[mask]) - np.log(p[mask]))))


def red_green(p: ProbDist, g, delta: float) -> ProbDist:
    """Exponential tilt ``q proportional to p * exp(delta * g)``.

    The exponent is shifted by its maximum on the support before
    exponentiating, so overflow cannot occur for finite inputs.
    """
    if delta < 0:
        raise InvalidParamsError("delta must be >= 0")
    w = p.weights
    gv = as_scores(g, w.size)
    s = _support(p)
    z = delta * gv
    z = z - z[s].max()
    q = w * np.exp(z)
    return ProbDist(q / q.sum())


def calibrate_delta(p: ProbDist, g, epsilon: float, tol: float = 1e-11) -> float:
    """Invert ``delta -> KL(q_delta(g) || p)`` for a target budget.

    The map is strictly increasing from 0 toward
    ``eps_max = -log(sum of p over argmax g)``; bisection returns a delta
    whose achieved KL is within 1e-8 of ``epsilon`` (typically ``tol``).
    """
    if epsilon <= 0:
        raise InvalidParamsError("epsilon must be > 0")
    w = p.weights
    gv = as_scores(g, w.size)
    s = _support(p)
    gs = gv[s]
    if gs.max() == gs.min():
        raise ConstantScoresError("scores are constant on the support")
    eps_max = -np.log(w[s][gs == gs.max()].sum())
    if epsilon >= eps_max:
        raise EpsilonTooLargeError(
            f"epsilon {epsilon:.6g} >= eps_max {eps_max:.6g}; use the argmax-restricted limit"
        )

    def achieved(delta: float) -> float:
        return _kl_weights(red_green(p, gv, delta).weights, w)

    hi = 1.0
    while achieved(hi) < epsilon:
        hi *= 2.0
        if hi > 1e13:
            raise EpsilonTooLargeError("budget numerically indistinguishable from eps_max")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gap = achieved(mid) - epsilon
        if abs(gap) <= tol:
            return mid
        if gap > 0:
            hi = mid
        else:
            lo = mid
    if abs(achieved(hi) - epsilon) > 1e-8:
        raise NumericalFailureError("bisection failed to reach the KL target")
    return hi


def aar_kth(p: ProbDist, g, delta: float = 0.0) -> ProbDist:
    """Dirac at ``argmax g + log(p) / (1 + delta)``; at delta=0 this is the
    Gumbel-max rule and reproduces ``p`` in expectation over Gumbel scores."""
    if delta < 0:
        raise InvalidParamsError("delta must be >= 0")
    w = p.weights
    gv = as_scores(g, w.size)
    s = _support(p)
    keys = gv[s] + np.log(w[s]) / (1.0 + delta)
    return dirac(w.size, int(s[int(np.argmax(keys))]))


def compute_mu(p: ProbDist, g, delta: float) -> float:
    """Water-filling shift for the clipped affine reweighting.

    Returns the ``mu`` for which ``q = p * [1 + delta*(g + mu)]_+`` sums to
    one with consistent signs: every in-support factor is non-negative and
    every clipped-out factor is non-positive.  The shortest score-sorted
    prefix satisfying both conditions is selected; checking only the
    in-prefix sign (the printed early-exit) can accept a prefix whose
    excluded tokens still carry positive factors, i.e. mass != 1.
    """
    if delta <= 0:
        raise InvalidParamsError("delta must be > 0")
    w = p.weights
    gv = as_scores(g, w.size)
    s = _support(p)
    ws, gs = w[s], gv[s]
    order = np.argsort(-gs, kind="stable")
    gs_o, ws_o = gs[order], ws[order]
    cw = np.cumsum(ws_o)
    cwg = np.cumsum(ws_o * gs_o)
    mu = (1.0 - (cw + delta * cwg)) / (delta * cw)
    tol = 1e-10 * (1.0 + abs(delta) * max(1.0, float(np.abs(gs).max())))
    inside_ok = 1.0 + delta * (gs_o + mu) >= -tol
    outside_ok = np.empty_like(inside_ok)
    outside_ok[:-1] = 1.0 + delta * (gs_o[1:] + mu[:-1]) <= tol
    outside_ok[-1] = True
    ok = np.flatnonzero(inside_ok & outside_ok)
    if ok.size == 0:
        raise NumericalFailureError("no prefix satisfies both water-filling sign conditions")
    return float(mu[ok[0]])


def chi2(p: ProbDist, g, delta: float) -> ProbDist:
    """Clipped affine reweighting ``q = p * [1 + delta*(g + mu)]_+``.

    When ``delta <= 1 / (max g - min g)`` no clipping occurs and the result
    equals ``p * (1 + delta*(g - p.g))`` exactly.
    """
    if delta < 0:
        raise InvalidParamsError("delta must be >= 0")
    if delta == 0:
        return ProbDist(p.weights.copy())
    w = p.weights
    gv = as_scores(g, w.size)
    mu = compute_mu(p, gv, delta)
    q = w * np.clip(1.0 + delta * (gv + mu), 0.0, None)
    return ProbDist(q)


def synthid_tournament(p: ProbDist, g_layers) -> ProbDist:
    """Chain ``m`` one-layer tournament updates ``q <- q * (1 + g - q.g)``.

    Requires binary score layers; each intermediate stays on the simplex
    because the update is the unclipped reweighting at unit strength.
    """
    w = p.weights
    layers = np.atleast_2d(np.asarray(g_layers, dtype=np.float64))
    if layers.shape[1] != w.size:
        raise NonBinaryScoresError(f"layer length {layers.shape[1]} != vocab size {w.size}")
    if not np.all((layers == 0.0) | (layers == 1.0)):
        raise NonBinaryScoresError("tournament layers must be 0/1 valued")
    q = w.copy()
    for row in layers:
        q = q * (1.0 + row - q @ row)
    return ProbDist(q)


def ppl_hard(p: ProbDist, g, epsilon: float) -> ProbDist:
    """Maximize ``g . q`` subject to ``q . log p >= p . log p - epsilon``.

    Solved structurally: tokens whose own log-probability meets the budget
    are feasible as singletons; otherwise the optimum mixes one feasible
    token with one infeasible higher-score token at the tightness point.
    The solution support never exceeds two tokens.
    """
    if epsilon < 0:
        raise InvalidParamsError("epsilon must be >= 0")
    w = p.weights
    gv = as_scores(g, w.size)
    s = _support(p)
    ws, gs = w[s], gv[s]
    logw = np.log(ws)
    c = float(ws @ logw) - epsilon
    feasible = logw >= c - 1e-12

    feas = np.flatnonzero(feasible)
    best_single = feas[int(np.argmax(gs[feas]))]
    best_obj = float(gs[best_single])
    best = (best_single, None, 0.0)

    infeas = np.flatnonzero(~feasible)
    if infeas.size:
        t = (logw[feas][:, None] - c) / (logw[feas][:, None] - logw[infeas][None, :])
        t = np.clip(t, 0.0, 1.0)
        obj = (1.0 - t) * gs[feas][:, None] + t * gs[infeas][None, :]
        flat = int(np.argmax(obj))
        i, j = np.unravel_index(flat, obj.shape)
        if float(obj[i, j]) > best_obj:
            best = (int(feas[i]), int(infeas[j]), float(t[i, j]))
            best_obj = float(obj[i, j])

    q = np.zeros_like(w)
    i, j, t = best
    if j is None:
        q[s[i]] = 1.0
    else:
        q[s[i]] = 1.0 - t
        q[s[j]] = t
    return ProbDist(q)


def solve_lambda(p: ProbDist, epsilon: float, spec: ScoreSpec, mc_samples: int = 128, seed=0) -> float:
    """Calibrate the soft-perplexity multiplier by Monte-Carlo bisection.

    One batch of ``mc_samples`` score vectors is drawn up front and reused
    for every bisection iterate, which makes the bisected map monotone and
    the whole solve deterministic given ``seed``.  The estimate is a step
    function of lambda, so bisection narrows the bracket to width 1e-9 and
    returns the feasible end (or any iterate whose constraint gap already
    lands within 1e-6).  Returns 0 when the constraint holds untightened.
    """
    if epsilon < 0:
        raise InvalidParamsError("epsilon must be >= 0")
    if not spec.is_continuous:
        raise DiscreteSpecUnsupportedError(
            f"{spec.family} is discrete; the soft-perplexity calibration needs a continuous law"
        )
    if mc_samples < 1:
        raise InvalidParamsError("mc_samples must be >= 1")
    w = p.weights
    s = _support(p)
    logw = np.log(w[s])
    target = float(w[s] @ logw) - epsilon
    rng = np.random.default_rng(seed)
    scores = draw_scores(rng, spec, w.size, size=mc_samples)[:, s]

    def estimate(lam: float) -> float:
        picks = np.argmax(scores + lam * logw, axis=1)
        return float(logw[picks].mean())

    if estimate(0.0) >= target - 1e-12:
        return 0.0
    hi = 1.0
    while estimate(hi) < target:
        hi *= 2.0
        if hi > 1e6:
            raise BracketFailureError("no lambda below 1e6 satisfies the constraint")
    lo = 0.0
    while hi - lo > 1e-9:
        mid = 0.5 * (lo + hi)
        value = estimate(mid)
        if abs(value - target) <= 1e-6:
            return mid
        if value >= target:
            hi = mid
        else:
            lo = mid
    return hi


def ppl_soft(p: ProbDist, g, lam: float) -> ProbDist:
    """Dirac at ``argmax g + lambda * log p`` over the support of ``p``."""
    if lam < 0:
        raise InvalidParamsError("lambda must be >= 0")
    w = p.weights
    gv = as_scores(g, w.size)
    s = _support(p)
    keys = gv[s] + lam * np.log(w[s])
    return dirac(w.size, int(s[int(np.argmax(keys))]))


def sample_token(q: ProbDist, rng) -> int:
    """Inverse-CDF sample from ``q``; deterministic given the seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    cdf = np.cumsum(q.weights)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, len(q) - 1)


def scheme_sampler(cfg: WatermarkConfig | None, lam: float | None = None):
    """Closure ``(p, scores) -> ProbDist`` for a watermark config.

    ``scores`` is a single vector for every scheme except synthid, which
    takes the ``(layers, vocab)`` stack.  ``cfg=None`` gives the identity
    (unwatermarked) sampler.  ppl_soft needs its resolved multiplier.
    """
    if cfg is None:
        return lambda p, g: p
    scheme = cfg.scheme
    if scheme == "red_green":
        return lambda p, g: red_green(p, g, cfg.delta)
    if scheme == "aar_kth":
        return lambda p, g: aar_kth(p, g, cfg.delta)
    if scheme == "chi2":
        return lambda p, g: chi2(p, g, cfg.delta)
    if scheme == "synthid":
        return lambda p, g: synthid_tournament(p, g)
    if scheme == "ppl_hard":
        return lambda p, g: ppl_hard(p, g, cfg.epsilon)
    if lam is None:
        raise InvalidParamsError("ppl_soft requires a resolved lambda")
    return lambda p, g: ppl_soft(p, g, lam)


# ---------------------------------------------------------------------------
# Batched expectation path.  Equivalent to averaging scheme_sampler outputs
# over the rows of a score batch, but vectorized; equivalence is covered by
# tests.  Used by the constraint-measurement pipeline where the per-step
# Monte-Carlo average would otherwise dominate the runtime.
# ---------------------------------------------------------------------------


def _mean_dirac(vocab_size: int, support: np.ndarray, picks: np.ndarray) -> np.ndarray:
    out = np.zeros(vocab_size)
    np.add.at(out, support[picks], 1.0)
    return out / picks.size


def expected_dist_weights(cfg: WatermarkConfig | None, p: ProbDist, scores: np.ndarray, lam: float | None = None) -> np.ndarray:
    """Mean watermarked distribution over a batch of score draws.

    ``scores`` has shape ``(n, vocab)`` (or ``(n, layers, vocab)`` for
    synthid).  Returns the averaged weight vector.
    """
    w = p.weights
    if cfg is None:
        return w.copy()
    n = scores.shape[0]
    s = _support(p)
    scheme = cfg.scheme

    if scheme == "synthid":
        q = np.broadcast_to(w, (n, w.size)).copy()
        for layer in range(scores.shape[1]):
            g = scores[:, layer, :]
            q *= 1.0 + g - np.einsum("ij,ij->i", q, g)[:, None]
        return q.mean(axis=0)

    gs = scores[:, s]
    ws = w[s]
    if scheme == "red_green":
        z = cfg.delta * gs
        z -= z.max(axis=1, keepdims=True)
        q = ws * np.exp(z)
        q /= q.sum(axis=1, keepdims=True)
        out = np.zeros(w.size)
        out[s] = q.mean(axis=0)
        return out
    if scheme == "aar_kth":
        keys = gs + np.log(ws) / (1.0 + cfg.delta)
        return _mean_dirac(w.size, s, np.argmax(keys, axis=1))
    if scheme == "ppl_soft":
        if lam is None:
            raise InvalidParamsError("ppl_soft requires a resolved lambda")
        keys = gs + lam * np.log(ws)
        return _mean_dirac(w.size, s, np.argmax(keys, axis=1))
    if scheme == "chi2":
        if cfg.delta == 0:
            return w.copy()
        delta = cfg.delta
        order = np.argsort(-gs, axis=1, kind="stable")
        gs_o = np.take_along_axis(gs, order, axis=1)
        ws_o = np.broadcast_to(ws, gs.shape)
        ws_o = np.take_along_axis(ws_o, order, axis=1)
        cw = np.cumsum(ws_o, axis=1)
        cwg = np.cumsum(ws_o * gs_o, axis=1)
        mu = (1.0 - (cw + delta * cwg)) / (delta * cw)
        tol = 1e-10 * (1.0 + abs(delta) * max(1.0, float(np.abs(gs).max())))
        inside_ok = 1.0 + delta * (gs_o + mu) >= -tol
        outside_ok = np.ones_like(inside_ok)
        outside_ok[:, :-1] = 1.0 + delta * (gs_o[:, 1:] + mu[:, :-1]) <= tol
        ok = inside_ok & outside_ok
        if not ok.any(axis=1).all():
            raise NumericalFailureError("batched water-filling found no valid prefix")
        first = np.argmax(ok, axis=1)
        mu_row = mu[np.arange(n), first]
        q = ws * np.clip(1.0 + delta * (gs + mu_row[:, None]), 0.0, None)
        out = np.zeros(w.size)
        out[s] = q.mean(axis=0)
        return out
    if scheme == "ppl_hard":
        logw = np.log(ws)
        c = float(ws @ logw) - cfg.epsilon
        feasible = logw >= c - 1e-12
        feas = np.flatnonzero(feasible)
        infeas = np.flatnonzero(~feasible)
        gf = gs[:, feas]
        besti = np.argmax(gf, axis=1)
        out = np.zeros(w.size)
        if infeas.size == 0:
            np.add.at(out, s[feas[besti]], 1.0)
            return out / n
        t = (logw[feas][:, None] - c) / (logw[feas][:, None] - logw[infeas][None, :])
        t = np.clip(t, 0.0, 1.0)
        obj = (1.0 - t)[None] * gf[:, :, None] + t[None] * gs[:, infeas][:, None, :]
        flat = obj.reshape(n, -1)
        pair_best = np.argmax(flat, axis=1)
        pair_obj = flat[np.arange(n), pair_best]
        single_obj = gf[np.arange(n), besti]
        use_pair = pair_obj > single_obj
        ii, jj = np.unravel_index(pair_best, (feas.size, infeas.size))
        for r in range(n):
            if use_pair[r]:
                tv = t[ii[r], jj[r]]
                out[s[feas[ii[r]]]] += 1.0 - tv
                out[s[infeas[jj[r]]]] += tv
            else:
                out[s[feas[besti[r]]]] += 1.0
        return out / n
    raise InvalidParamsError(f"unknown scheme {scheme!r}")
