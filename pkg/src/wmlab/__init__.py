"""wmlab: a desk-scale laboratory for LLM watermark sampling mechanisms.

Watermarks decompose into a keyed hashing mechanism (context -> per-token
pseudorandom scores), a sampling mechanism (model distribution + scores ->
watermarked distribution), and a model-free detector (token sequence ->
p-value).  This package implements six sampling mechanisms as solutions to
one constrained-optimization template, together with exact detection, an
order-k Markov token source so everything runs without an LLM, constraint
and diversity metrics, and brute-force oracles that certify the closed
forms on tiny vocabularies.
"""

from .core import ProbDist, Vocabulary, dirac, expected_score, validate_dist
from .hashing import HashConfig, ScoreSpec, context_seed, sample_scores, score_of
from .samplers import (
    WatermarkConfig,
    aar_kth,
    calibrate_delta,
    chi2,
    compute_mu,
    ppl_hard,
    ppl_soft,
    red_green,
    sample_token,
    solve_lambda,
    synthid_tournament,
)
from .detectors import (
    DetectionResult,
    ScoreObservation,
    binomial_pvalue,
    dedup,
    detect,
    ks_gumbel_pvalue,
    reconstruct,
)
from .lm import GenerationRecord, MarkovModel, SamplingConfig, generate, next_dist, perplexity, shape_dist, train
from .metrics import ConstraintKind, chi2_dist, kl, mc_expected_dist, ppl_gap, self_bleu, sequence_constraint, tpr_at_fpr
from .oracle import check_distortion_free, feasible_random, grid_optimize_penalized, lp_vertex_oracle

__version__ = "0.1.0"

__all__ = [
    "ProbDist", "Vocabulary", "dirac", "expected_score", "validate_dist",
    "HashConfig", "ScoreSpec", "context_seed", "sample_scores", "score_of",
    "WatermarkConfig", "red_green", "calibrate_delta", "aar_kth", "compute_mu",
    "chi2", "synthid_tournament", "ppl_hard", "solve_lambda", "ppl_soft", "sample_token",
    "DetectionResult", "ScoreObservation", "reconstruct", "dedup",
    "binomial_pvalue", "ks_gumbel_pvalue", "detect",
    "MarkovModel", "SamplingConfig", "GenerationRecord", "train", "next_dist",
    "shape_dist", "generate", "perplexity",
    "ConstraintKind", "kl", "chi2_dist", "ppl_gap", "mc_expected_dist",
    "sequence_constraint", "self_bleu", "tpr_at_fpr",
    "feasible_random", "grid_optimize_penalized", "lp_vertex_oracle", "check_distortion_free",
    "__version__",
]
