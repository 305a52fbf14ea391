import numpy as np
import pytest

from wmlab.core import ProbDist, Vocabulary, as_scores, dirac, expected_score, validate_dist
from wmlab.errors import (
    LengthMismatchError,
    NegativeWeightError,
    NonFiniteError,
    NotNormalizedError,
    TokenOutOfRangeError,
)


class TestValidateDist:
    def test_symmetric_valid_input(self):
        assert np.array_equal(validate_dist([0.5, 0.5]).weights, [0.5, 0.5])

    def test_simplex_vertex(self):
        assert np.array_equal(validate_dist([1.0, 0.0]).weights, [1.0, 0.0])

    def test_not_normalized(self):
        with pytest.raises(NotNormalizedError):
            validate_dist([0.5, 0.6])

    def test_negative_weight(self):
        with pytest.raises(NegativeWeightError):
            validate_dist([1.1, -0.1])

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            validate_dist([np.nan, 1.0])
        with pytest.raises(NonFiniteError):
            validate_dist([np.inf, 0.0])

    def test_renormalizes_small_deviation(self):
        q = validate_dist([0.5, 0.5 + 2e-7])
        assert q.weights.sum() == pytest.approx(1.0, abs=1e-15)

    def test_rejects_large_deviation(self):
        with pytest.raises(NotNormalizedError):
            validate_dist([0.5, 0.5 + 2e-6])

    def test_tiny_negative_clamped(self):
        q = validate_dist([1.0 + 1e-13, -1e-13])
        assert q.weights[1] == 0.0

    def test_too_short(self):
        with pytest.raises(LengthMismatchError):
            validate_dist([1.0])

    def test_weights_read_only(self):
        q = validate_dist([0.5, 0.5])
        with pytest.raises(ValueError):
            q.weights[0] = 0.9


class TestDirac:
    def test_middle_token(self):
        assert np.array_equal(dirac(Vocabulary(3), 1).weights, [0.0, 1.0, 0.0])

    def test_first_token(self):
        assert np.array_equal(dirac(Vocabulary(2), 0).weights, [1.0, 0.0])

    def test_out_of_range(self):
        with pytest.raises(TokenOutOfRangeError):
            dirac(Vocabulary(2), 5)

    def test_vocab_needs_two_tokens(self):
        with pytest.raises(TokenOutOfRangeError):
            Vocabulary(1)


class TestExpectedScore:
    def test_symmetric(self):
        assert expected_score(validate_dist([0.5, 0.5]), [1.0, 0.0]) == pytest.approx(0.5)

    def test_dirac_selects_one_score(self):
        assert expected_score(validate_dist([1.0, 0.0]), [3.2, -1.0]) == pytest.approx(3.2)

    def test_hand_dot_product(self):
        assert expected_score(validate_dist([0.75, 0.25]), [1.0, 0.0]) == pytest.approx(0.75)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            expected_score(validate_dist([0.5, 0.5]), [1.0, 0.0, 0.0])

    def test_constant_scores_give_the_constant(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            size = rng.integers(2, 9)
            q = ProbDist(rng.dirichlet(np.ones(size)))
            c = float(rng.normal())
            assert expected_score(q, np.full(size, c)) == pytest.approx(c, abs=1e-12)

    def test_dirac_at_argmax_maximizes(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            size = int(rng.integers(2, 9))
            g = rng.normal(size=size)
            best = max(expected_score(dirac(Vocabulary(size), t), g) for t in range(size))
            assert best == pytest.approx(g.max())
            assert expected_score(dirac(Vocabulary(size), int(np.argmax(g))), g) == pytest.approx(g.max())


class TestAsScores:
    def test_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            as_scores([1.0, np.nan])

    def test_rejects_wrong_length(self):
        with pytest.raises(LengthMismatchError):
            as_scores([1.0, 2.0], size=3)
