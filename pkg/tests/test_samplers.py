import math

import numpy as np
import pytest

from wmlab.core import dirac, validate_dist
from wmlab.errors import (
    ConstantScoresError,
    DiscreteSpecUnsupportedError,
    EpsilonTooLargeError,
    InvalidParamsError,
    NonBinaryScoresError,
)
from wmlab.hashing import ScoreSpec, draw_scores
from wmlab.metrics import ConstraintKind, chi2_dist, kl, ppl_gap
from wmlab.oracle import feasible_random
from wmlab.samplers import (
    WatermarkConfig,
    aar_kth,
    calibrate_delta,
    chi2,
    compute_mu,
    expected_dist_weights,
    ppl_hard,
    ppl_soft,
    red_green,
    sample_token,
    scheme_sampler,
    solve_lambda,
    synthid_tournament,
)

HALF = validate_dist([0.5, 0.5])


def random_dist(rng, size):
    return validate_dist(rng.dirichlet(np.ones(size)))


class TestRedGreen:
    def test_zero_strength_is_identity(self):
        assert np.allclose(red_green(HALF, [1.0, 0.0], 0.0).weights, HALF.weights)

    def test_constant_scores_identity(self):
        p = validate_dist([0.2, 0.3, 0.5])
        assert np.allclose(red_green(p, [2.5, 2.5, 2.5], 3.0).weights, p.weights, atol=1e-15)

    def test_hand_case(self):
        q = red_green(HALF, [1.0, 0.0], math.log(2.0))
        assert np.allclose(q.weights, [2 / 3, 1 / 3], atol=1e-12)

    def test_zeros_stay_zero(self):
        p = validate_dist([0.5, 0.5, 0.0])
        q = red_green(p, [0.0, 1.0, 100.0], 5.0)
        assert q.weights[2] == 0.0

    def test_overflow_guard(self):
        q = red_green(HALF, [1e4, -1e4], 100.0)
        assert np.all(np.isfinite(q.weights))
        assert q.weights[0] == pytest.approx(1.0)

    def test_kl_monotone_in_delta(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            p = random_dist(rng, 6)
            g = rng.normal(size=6)
            kls = [kl(red_green(p, g, d), p) for d in [0.0, 0.25, 0.5, 1.0, 2.0, 4.0]]
            assert all(a <= b + 1e-12 for a, b in zip(kls, kls[1:]))


class TestCalibrateDelta:
    EPS_HAND = 2 / 3 * math.log(4 / 3) + 1 / 3 * math.log(2 / 3)  # 0.0566330122651324

    def test_hand_inversion(self):
        delta = calibrate_delta(HALF, [1.0, 0.0], self.EPS_HAND)
        assert delta == pytest.approx(math.log(2.0), abs=1e-6)
        assert kl(red_green(HALF, [1.0, 0.0], delta), HALF) == pytest.approx(self.EPS_HAND, abs=1e-8)

    def test_epsilon_above_max(self):
        # eps_max = -log(0.5) = ln 2 < 0.8
        with pytest.raises(EpsilonTooLargeError):
            calibrate_delta(HALF, [1.0, 0.0], 0.8)

    def test_constant_scores(self):
        with pytest.raises(ConstantScoresError):
            calibrate_delta(HALF, [1.0, 1.0], 0.01)

    def test_small_epsilon_small_delta(self):
        assert calibrate_delta(HALF, [1.0, 0.0], 1e-9) < 1e-3

    def test_round_trip_random_instances(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            p = random_dist(rng, 5)
            g = rng.normal(size=5)
            eps_max = -math.log(p.weights[g == g.max()].sum())
            eps = float(rng.uniform(0.1, 0.9)) * eps_max
            delta = calibrate_delta(p, g, eps)
            assert kl(red_green(p, g, delta), p) == pytest.approx(eps, abs=1e-8)


class TestAarKth:
    def test_hand_case(self):
        q = aar_kth(validate_dist([0.7, 0.3]), [0.1, 0.2], 0.0)
        assert np.array_equal(q.weights, [1.0, 0.0])

    def test_dirac_p_fixed_point(self):
        p = dirac(4, 2)
        for delta in (0.0, 1.0, 7.5):
            assert np.array_equal(aar_kth(p, [9.0, 9.0, -9.0, 9.0], delta).weights, p.weights)

    def test_always_support_one(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            p = random_dist(rng, 8)
            q = aar_kth(p, rng.gumbel(size=8), float(rng.uniform(0, 3)))
            assert np.count_nonzero(q.weights) == 1

    def test_distortion_free_at_zero(self):
        # Gumbel-max reproduces p in expectation (1e5 draws, sup-norm 0.01)
        rng = np.random.default_rng(5)
        p = random_dist(rng, 10)
        batch = draw_scores(rng, ScoreSpec.gumbel(0, 1), 10, size=100_000)
        picks = np.argmax(batch + np.log(p.weights), axis=1)
        freq = np.bincount(picks, minlength=10) / batch.shape[0]
        assert np.max(np.abs(freq - p.weights)) <= 0.01

    def test_zero_prob_tokens_excluded(self):
        p = validate_dist([0.5, 0.5, 0.0])
        q = aar_kth(p, [0.0, -1.0, 50.0], 0.0)
        assert q.weights[2] == 0.0


class TestComputeMu:
    def test_hand_case_unclipped(self):
        assert compute_mu(HALF, [1.0, 0.0], 1.0) == pytest.approx(-0.5, abs=1e-12)

    def test_constant_scores_force_mu(self):
        p = validate_dist([0.3, 0.7])
        assert compute_mu(p, [2.0, 2.0], 1.5) == pytest.approx(-2.0, abs=1e-12)

    def test_clipped_case_satisfies_kkt(self):
        # delta=4 clips token 1; validate via the post-condition, not a fixed mu
        mu = compute_mu(HALF, [1.0, 0.0], 4.0)
        factors = 1.0 + 4.0 * (np.array([1.0, 0.0]) + mu)
        q = HALF.weights * np.clip(factors, 0.0, None)
        assert q.sum() == pytest.approx(1.0, abs=1e-12)
        assert factors[0] >= -1e-9 and factors[1] <= 1e-9

    def test_requires_positive_delta(self):
        with pytest.raises(InvalidParamsError):
            compute_mu(HALF, [1.0, 0.0], 0.0)


def kkt_ok(p, g, delta, mu, atol=1e-9):
    """Water-filling post-condition: mass one plus consistent factor signs."""
    w = np.asarray(p.weights if hasattr(p, "weights") else p)
    s = w > 0
    factors = 1.0 + delta * (np.asarray(g) + mu)
    q = w * np.clip(factors, 0.0, None)
    inside = q > 0
    if abs(q.sum() - 1.0) > atol:
        return False
    if np.any(factors[s & inside] < -atol):
        return False
    if np.any(factors[s & ~inside] > atol):
        return False
    return True


class TestChi2:
    def test_zero_strength_identity(self):
        assert np.array_equal(chi2(HALF, [1.0, 0.0], 0.0).weights, HALF.weights)

    def test_hand_case(self):
        assert np.allclose(chi2(HALF, [1.0, 0.0], 1.0).weights, [0.75, 0.25], atol=1e-15)

    def test_unclipped_form_when_delta_small(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            p = random_dist(rng, 7)
            g = rng.normal(size=7)
            delta = float(rng.uniform(0.1, 1.0)) / (g.max() - g.min())
            q = chi2(p, g, delta)
            direct = p.weights * (1.0 + delta * (g - p.weights @ g))
            assert np.max(np.abs(q.weights - direct)) <= 1e-12

    def test_clipping_active_still_normalized(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            p = random_dist(rng, 6)
            g = rng.normal(size=6)
            delta = float(rng.uniform(1.5, 6.0)) / (g.max() - g.min())
            mu = compute_mu(p, g, delta)
            assert kkt_ok(p, g, delta, mu)

    def test_zeros_stay_zero(self):
        p = validate_dist([0.6, 0.4, 0.0])
        q = chi2(p, [0.0, 1.0, 10.0], 0.5)
        assert q.weights[2] == 0.0


class TestSynthid:
    def test_single_layer_hand_case(self):
        q = synthid_tournament(HALF, [[1.0, 0.0]])
        assert np.allclose(q.weights, [0.75, 0.25], atol=1e-15)

    def test_constant_layers_identity(self):
        p = validate_dist([0.2, 0.8])
        q = synthid_tournament(p, [[1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
        assert np.allclose(q.weights, p.weights, atol=1e-15)

    def test_two_layer_hand_chain(self):
        q = synthid_tournament(HALF, [[1.0, 0.0], [1.0, 0.0]])
        assert np.allclose(q.weights, [0.9375, 0.0625], atol=1e-15)

    def test_rejects_non_binary(self):
        with pytest.raises(NonBinaryScoresError):
            synthid_tournament(HALF, [[0.5, 1.0]])

    def test_matches_chi2_at_unit_strength(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            p = random_dist(rng, 9)
            g = (rng.random(9) < 0.5).astype(float)
            if g.max() == g.min():
                continue
            q_t = synthid_tournament(p, g[None, :])
            q_c = chi2(p, g, 1.0)
            assert np.max(np.abs(q_t.weights - q_c.weights)) <= 1e-12

    def test_deep_chain_stays_on_simplex(self):
        rng = np.random.default_rng(9)
        p = random_dist(rng, 12)
        layers = (rng.random((30, 12)) < 0.5).astype(float)
        q = synthid_tournament(p, layers)  # ProbDist construction re-validates
        assert q.weights.sum() == pytest.approx(1.0, abs=1e-9)


class TestPplHard:
    P73 = validate_dist([0.7, 0.3])

    def test_unconstrained_greedy_when_slack(self):
        # budget covers even the rarest token: plain argmax of scores
        p = validate_dist([0.6, 0.3, 0.1])
        eps = float(p.weights @ np.log(p.weights) - math.log(0.1)) + 0.01
        q = ppl_hard(p, [0.0, 0.0, 5.0], eps)
        assert np.array_equal(q.weights, [0.0, 0.0, 1.0])

    def test_tight_budget_hand_case(self):
        q = ppl_hard(self.P73, [0.0, 1.0], 0.0)
        assert np.allclose(q.weights, [0.7, 0.3], atol=1e-12)
        assert q.weights @ np.array([0.0, 1.0]) == pytest.approx(0.3, abs=1e-12)

    def test_vertex_feasible_hand_case(self):
        # needed slack p.log p - log 0.3 ~ 0.593 <= 0.6
        q = ppl_hard(self.P73, [0.0, 1.0], 0.6)
        assert np.array_equal(q.weights, [0.0, 1.0])

    def test_support_at_most_two_and_feasible(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            p = random_dist(rng, 10)
            g = rng.normal(size=10)
            eps = float(rng.uniform(0.0, 2.0))
            q = ppl_hard(p, g, eps)
            assert np.count_nonzero(q.weights) <= 2
            slack = q.weights @ np.log(np.where(p.weights > 0, p.weights, 1.0))
            assert slack >= p.weights @ np.log(p.weights) - eps - 1e-9


class TestSolveLambda:
    GUMBEL = ScoreSpec.gumbel(0, 1)

    def test_zero_when_already_feasible(self):
        p = validate_dist([0.4, 0.3, 0.3])
        assert solve_lambda(p, 10.0, self.GUMBEL, 64, seed=0) == 0.0

    def test_degenerate_dirac_p(self):
        assert solve_lambda(dirac(5, 2), 0.0, self.GUMBEL, 64, seed=0) == 0.0

    def test_rejects_discrete_families(self):
        with pytest.raises(DiscreteSpecUnsupportedError):
            solve_lambda(HALF, 0.0, ScoreSpec.binomial(30, 0.5), 64, seed=0)
        with pytest.raises(DiscreteSpecUnsupportedError):
            solve_lambda(HALF, 0.0, ScoreSpec.bernoulli(0.5), 64, seed=0)

    def test_unit_multiplier_at_zero_budget(self):
        # lambda(0) = 1 for Gumbel scores; mean over 10 instances, CLT-scale bound
        rng = np.random.default_rng(12)
        lams = []
        for i in range(10):
            logits = rng.normal(0.0, 2.0, 10)
            p = validate_dist(np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum())
            lams.append(solve_lambda(p, 0.0, self.GUMBEL, 128, seed=(12, i)))
        assert float(np.mean(lams)) == pytest.approx(1.0, abs=0.05)

    def test_achieved_constraint_near_target(self):
        rng = np.random.default_rng(13)
        p = random_dist(rng, 10)
        eps = 0.2
        lam = solve_lambda(p, eps, self.GUMBEL, 256, seed=77)
        scores = draw_scores(np.random.default_rng(77), self.GUMBEL, 10, size=256)
        logw = np.log(p.weights)
        picks = np.argmax(scores + lam * logw, axis=1)
        target = float(p.weights @ logw) - eps
        # step function: the feasible end of the bracket sits just above target
        assert logw[picks].mean() >= target - 1e-6


class TestPplSoft:
    def test_zero_multiplier_pure_greedy(self):
        p = validate_dist([0.8, 0.1, 0.1])
        q = ppl_soft(p, [0.0, 3.0, 1.0], 0.0)
        assert np.array_equal(q.weights, [0.0, 1.0, 0.0])

    def test_large_multiplier_greedy_on_p(self):
        p = validate_dist([0.8, 0.1, 0.1])
        g = np.array([0.0, 3.0, 1.0])
        lam = (g.max() - g.min()) / (math.log(0.8) - math.log(0.1)) + 1.0
        q = ppl_soft(p, g, lam)
        assert np.array_equal(q.weights, [1.0, 0.0, 0.0])

    def test_unit_multiplier_equals_aar(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            p = random_dist(rng, 8)
            g = rng.gumbel(size=8)
            assert np.array_equal(ppl_soft(p, g, 1.0).weights, aar_kth(p, g, 0.0).weights)


class TestSampleToken:
    def test_dirac_any_seed(self):
        q = dirac(6, 4)
        assert all(sample_token(q, seed) == 4 for seed in range(25))

    def test_deterministic_given_seed(self):
        assert sample_token(HALF, 123) == sample_token(HALF, 123)

    def test_frequency_matches_weights(self):
        hits = sum(sample_token(HALF, seed) == 0 for seed in range(100_000))
        assert 0.49 <= hits / 100_000 <= 0.51


class TestPointwiseOptimality:
    """Hard schemes beat every feasible competitor under their own constraint."""

    def test_red_green_beats_feasible_kl_ball(self):
        rng = np.random.default_rng(15)
        for i in range(5):
            p = random_dist(rng, 5)
            g = rng.normal(size=5)
            delta = float(rng.uniform(0.5, 2.0))
            q = red_green(p, g, delta)
            budget = kl(q, p)
            best = max(float(f.weights @ g) for f in feasible_random(p, ConstraintKind.HARD_KL, budget, 1000, seed=(15, i)))
            assert float(q.weights @ g) >= best - 1e-7

    def test_chi2_beats_feasible_chi2_ball(self):
        rng = np.random.default_rng(16)
        for i in range(5):
            p = random_dist(rng, 5)
            g = rng.normal(size=5)
            delta = float(rng.uniform(0.3, 1.5)) / (g.max() - g.min())
            q = chi2(p, g, delta)
            budget = chi2_dist(q, p)
            best = max(float(f.weights @ g) for f in feasible_random(p, ConstraintKind.CHI2, budget, 1000, seed=(16, i)))
            assert float(q.weights @ g) >= best - 1e-7

    def test_ppl_hard_beats_feasible_ppl_ball(self):
        rng = np.random.default_rng(17)
        for i in range(5):
            p = random_dist(rng, 5)
            g = rng.normal(size=5)
            eps = float(rng.uniform(0.1, 1.0))
            q = ppl_hard(p, g, eps)
            best = max(float(f.weights @ g) for f in feasible_random(p, ConstraintKind.HARD_PPL, eps, 1000, seed=(17, i)))
            assert float(q.weights @ g) >= best - 1e-7


class TestBatchedExpectation:
    """The vectorized mean-distribution path equals the per-draw loop."""

    @pytest.mark.parametrize(
        "cfg,lam",
        [
            (WatermarkConfig("red_green", ScoreSpec.fixed_partition(0.5), delta=2.0), None),
            (WatermarkConfig("aar_kth", ScoreSpec.gumbel(0, 1), delta=0.5), None),
            (WatermarkConfig("chi2", ScoreSpec.binomial(30, 0.5), delta=0.02), None),
            (WatermarkConfig("ppl_hard", ScoreSpec.binomial(30, 0.5), epsilon=0.5), None),
            (WatermarkConfig("ppl_soft", ScoreSpec.gumbel(0, 1), epsilon=0.0), 1.0),
        ],
    )
    def test_matches_loop(self, cfg, lam):
        rng = np.random.default_rng(18)
        p = random_dist(rng, 12)
        batch = draw_scores(rng, cfg.score_spec, 12, size=64)
        sampler = scheme_sampler(cfg, lam)
        loop_mean = np.mean([sampler(p, row).weights for row in batch], axis=0)
        fast = expected_dist_weights(cfg, p, batch, lam=lam)
        assert np.max(np.abs(loop_mean - fast)) <= 1e-12

    def test_matches_loop_synthid(self):
        rng = np.random.default_rng(19)
        p = random_dist(rng, 12)
        cfg = WatermarkConfig("synthid", ScoreSpec.bernoulli(0.5), layers=5)
        batch = draw_scores(rng, cfg.score_spec, 12, size=64 * 5).reshape(64, 5, 12)
        loop_mean = np.mean([synthid_tournament(p, stack).weights for stack in batch], axis=0)
        fast = expected_dist_weights(cfg, p, batch)
        assert np.max(np.abs(loop_mean - fast)) <= 1e-12


class TestWatermarkConfig:
    def test_strength_routing(self):
        with pytest.raises(InvalidParamsError):
            WatermarkConfig("red_green", ScoreSpec.bernoulli(0.5), epsilon=1.0)
        with pytest.raises(InvalidParamsError):
            WatermarkConfig("ppl_hard", ScoreSpec.binomial(30, 0.5), delta=1.0)
        with pytest.raises(InvalidParamsError):
            WatermarkConfig("synthid", ScoreSpec.bernoulli(0.5), delta=1.0)
        with pytest.raises(InvalidParamsError):
            WatermarkConfig("unknown", ScoreSpec.bernoulli(0.5), delta=1.0)

    def test_strength_property(self):
        assert WatermarkConfig("red_green", ScoreSpec.bernoulli(0.5), delta=2.0).strength == 2.0
        assert WatermarkConfig("synthid", ScoreSpec.bernoulli(0.5), layers=30).strength == 30.0
