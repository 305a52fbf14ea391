"""Constraint and quality/diversity measurements.

The three divergence-style distances are the per-step constraints a
watermark can be held to; the soft variants apply them to the
Monte-Carlo average of the watermarked distribution over fresh score
draws.  ``self_bleu`` and ``tpr_at_fpr`` implement the sequence-level
diversity and detectability aggregates.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import ProbDist
from .errors import (
    EmptyInputError,
    InvalidParamsError,
    SupportViolationError,
    TooFewTextsError,
)
from .hashing import ScoreSpec, draw_scores
from .samplers import expected_dist_weights


class ConstraintKind(str, Enum):
    HARD_KL = "hard_kl"
    SOFT_KL = "soft_kl"
    CHI2 = "chi2"
    HARD_PPL = "hard_ppl"
    SOFT_PPL = "soft_ppl"


SOFT_KINDS = frozenset({ConstraintKind.SOFT_KL, ConstraintKind.SOFT_PPL})


def kl(q: ProbDist, p: ProbDist) -> float:
    """Kullback-Leibler divergence ``sum q log(q/p)`` with ``0 log 0 = 0``."""
    qw, pw = q.weights, p.weights
    if qw.shape != pw.shape:
        raise InvalidParamsError("distributions must share a vocabulary")
    mask = qw > 0.0
    if np.any(pw[mask] == 0.0):
        raise SupportViolationError("q places mass outside the support of p")
    return float(np.sum(qw[mask] * (np.log(qw[mask]) - np.log(pw[mask]))))


def chi2_dist(q: ProbDist, p: ProbDist) -> float:
    """Chi-square distance ``sum (q - p)^2 / p`` over the support of ``p``."""
    qw, pw = q.weights, p.weights
    if qw.shape != pw.shape:
        raise InvalidParamsError("distributions must share a vocabulary")
    zero = pw == 0.0
    if np.any(qw[zero] > 0.0):
        raise SupportViolationError("q places mass outside the support of p")
    mask = ~zero
    return float(np.sum((qw[mask] - pw[mask]) ** 2 / pw[mask]))


def ppl_gap(q: ProbDist, p: ProbDist) -> float:
    """Perplexity-proxy gap ``(p - q) . log p``.

    Positive when ``q`` sits on lower-probability tokens than ``p`` does;
    may be negative (the watermark can improve expected log-probability).
    """
    qw, pw = q.weights, p.weights
    if qw.shape != pw.shape:
        raise InvalidParamsError("distributions must share a vocabulary")
    mask = (pw > 0.0) | (qw > 0.0)
    if np.any(pw[mask] == 0.0):
        raise SupportViolationError("p must have full support where mass sits")
    return float(np.sum((pw[mask] - qw[mask]) * np.log(pw[mask])))


def constraint_value(kind: ConstraintKind, q: ProbDist, p: ProbDist) -> float:
    """Hard per-realization constraint value (soft kinds use the same D on E[q])."""
    kind = ConstraintKind(kind)
    if kind in (ConstraintKind.HARD_KL, ConstraintKind.SOFT_KL):
        return kl(q, p)
    if kind is ConstraintKind.CHI2:
        return chi2_dist(q, p)
    return ppl_gap(q, p)


def mc_expected_dist(sampler, p: ProbDist, spec: ScoreSpec, n_samples: int, seed, layers: int = 1) -> ProbDist:
    """Monte-Carlo average of ``sampler(p, g)`` over fresh draws of ``g``.

    ``layers > 1`` hands the sampler a ``(layers, vocab)`` score stack per
    draw (tournament schemes).
    """
    if n_samples < 1:
        raise InvalidParamsError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    vocab_size = len(p)
    if layers == 1:
        batch = draw_scores(rng, spec, vocab_size, size=n_samples)
    else:
        batch = draw_scores(rng, spec, vocab_size, size=n_samples * layers)
        batch = batch.reshape(n_samples, layers, vocab_size)
    total = np.zeros(vocab_size)
    for draw in batch:
        total += sampler(p, draw).weights
    total /= n_samples
    return ProbDist(total / total.sum())


def _soft_expected(record, step_index: int, p: ProbDist, spec: ScoreSpec, mc_samples: int, seed) -> ProbDist:
    cfg = record.wm_cfg
    if cfg is None:
        return p
    rng = np.random.default_rng((seed, step_index))
    if cfg.scheme == "synthid":
        batch = draw_scores(rng, spec, len(p), size=mc_samples * cfg.layers)
        batch = batch.reshape(mc_samples, cfg.layers, len(p))
    else:
        batch = draw_scores(rng, spec, len(p), size=mc_samples)
    w = expected_dist_weights(cfg, p, batch, lam=record.lam)
    return ProbDist(w / w.sum())


def measure_constraints(record, kinds, spec: ScoreSpec | None = None, mc_samples: int = 128, seed=0) -> dict:
    """Mean per-step constraint values of a generation record, one per kind.

    Soft kinds share one fresh Monte-Carlo batch per step.  Hard kinds read
    the realized (p, q) pairs straight from the traces.
    """
    kinds = [ConstraintKind(k) for k in kinds]
    if not record.steps:
        raise EmptyInputError("record has no step traces")
    spec = spec if spec is not None else (record.wm_cfg.score_spec if record.wm_cfg else None)
    needs_soft = any(k in SOFT_KINDS for k in kinds)
    totals = {k: 0.0 for k in kinds}
    for t, step in enumerate(record.steps):
        expected = None
        if needs_soft and spec is not None:
            expected = _soft_expected(record, t, step.p, spec, mc_samples, seed)
        elif needs_soft:
            expected = step.p
        for k in kinds:
            if k is ConstraintKind.HARD_KL:
                totals[k] += kl(step.q, step.p)
            elif k is ConstraintKind.CHI2:
                totals[k] += chi2_dist(step.q, step.p)
            elif k is ConstraintKind.HARD_PPL:
                totals[k] += ppl_gap(step.q, step.p)
            elif k is ConstraintKind.SOFT_KL:
                totals[k] += kl(expected, step.p)
            else:
                totals[k] += ppl_gap(expected, step.p)
    n = len(record.steps)
    return {k: totals[k] / n for k in kinds}


def sequence_constraint(record, kind, spec: ScoreSpec | None = None, mc_samples: int = 128, seed=0) -> float:
    """Mean per-step constraint of one kind over a generation record."""
    return measure_constraints(record, [kind], spec=spec, mc_samples=mc_samples, seed=seed)[ConstraintKind(kind)]


# ---------------------------------------------------------------------------
# Sequence-level aggregates
# ---------------------------------------------------------------------------


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _bleu_against(cand_index: int, texts, counters, max_n: int) -> float:
    """Sentence BLEU with uniform weights, clipped precisions, no smoothing."""
    candidate = texts[cand_index]
    c = len(candidate)
    if c == 0:
        return 0.0
    log_precision_sum = 0.0
    for n in range(1, max_n + 1):
        cand_counts = counters[n][cand_index]
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        clipped = 0
        for gram, count in cand_counts.items():
            best = max(
                (counters[n][j].get(gram, 0) for j in range(len(texts)) if j != cand_index),
                default=0,
            )
            clipped += min(count, best)
        if clipped == 0:
            return 0.0
        log_precision_sum += np.log(clipped / total) / max_n
    ref_len = min(
        (abs(len(texts[j]) - c), len(texts[j])) for j in range(len(texts)) if j != cand_index
    )[1]
    brevity = 1.0 if c > ref_len else float(np.exp(1.0 - ref_len / c))
    return float(brevity * np.exp(log_precision_sum))


def self_bleu(texts, n: int = 3) -> float:
    """Mean BLEU-n of each text against the rest as references.

    1.0 means the texts are n-gram identical (zero diversity); disjoint
    symbol sets score 0.
    """
    texts = [tuple(t) for t in texts]
    if len(texts) < 2:
        raise TooFewTextsError("self-BLEU needs at least two texts")
    counters = {order: [_ngram_counts(t, order) for t in texts] for order in range(1, n + 1)}
    scores = [_bleu_against(i, texts, counters, n) for i in range(len(texts))]
    return float(np.mean(scores))


def tpr_at_fpr(p_pos, p_neg=None, fpr: float = 0.01) -> float:
    """True-positive rate at the threshold whose false-positive rate is ``fpr``.

    With ``p_neg=None`` the analytic null is assumed (p-values uniform), so
    the threshold is ``fpr`` itself.  With an empirical negative sample the
    threshold is the largest value keeping the realized FPR at or below
    ``fpr``.
    """
    pos = np.asarray(list(p_pos), dtype=np.float64)
    if pos.size == 0:
        raise EmptyInputError("no positive p-values")
    if not 0.0 < fpr < 1.0:
        raise InvalidParamsError("fpr must lie in (0, 1)")
    if p_neg is None:
        threshold = fpr
    else:
        neg = np.sort(np.asarray(list(p_neg), dtype=np.float64))
        if neg.size == 0:
            raise EmptyInputError("no negative p-values")
        k = int(np.floor(fpr * neg.size))
        threshold = np.inf if k >= neg.size else float(neg[k])
    return float(np.mean(pos < threshold))


@dataclass
class SweepPoint:
    """One (scheme, strength) row of the trade-off sweep."""

    scheme: str
    strength: float
    constraints: dict
    tpr: float
    mean_log_ppl: float
    mean_self_bleu: float | None = None
    n_sequences: int = 0
