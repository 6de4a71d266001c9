import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ual.errors import ShapeError
from ual.gaussian_embedding import GaussianEmbedding, StochasticDraw, reparameterize
from ual.numerics import SeededRng
from ual.uncertainty_scoring import (
    aggregate_group,
    importance_scalars,
    score_individuals,
    split_high_low,
    uncertainty_score,
)


class TestUncertaintyScore:
    def test_equal_products(self):
        assert uncertainty_score([1.0, 1.0], [1.0, 1.0]) == pytest.approx(1.0)

    def test_scaling(self):
        assert uncertainty_score([2.0, 2.0], [1.0, 1.0]) == pytest.approx(2.0)

    def test_hand_evaluated_harmonic_mean(self):
        # harmonic mean of {1, 3} = 2 / (1 + 1/3) = 1.5
        assert uncertainty_score([1.0, 3.0], [1.0, 1.0]) == pytest.approx(1.5)

    def test_negative_products_use_magnitude(self):
        assert uncertainty_score([1.0, 3.0], [-1.0, 1.0]) == pytest.approx(1.5)

    def test_zero_product_floored(self):
        s = uncertainty_score([1.0, 1.0], [0.0, 1.0])
        assert s > 0.0
        assert s == pytest.approx(2.0 / (1e8 + 1.0))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            uncertainty_score([1.0, 2.0], [1.0])


class TestImportanceScalars:
    def test_three_point_reflection(self):
        assert np.allclose(importance_scalars([1.0, 2.0, 3.0]), [3.0, 2.0, 1.0])

    def test_degenerate_equal_scores(self):
        assert np.array_equal(importance_scalars([2.0, 2.0, 2.0]), [1.0, 1.0, 1.0])

    def test_single_face(self):
        assert np.array_equal(importance_scalars([0.7]), [1.0])

    def test_two_point_swap(self):
        assert np.allclose(importance_scalars([0.5, 1.0]), [1.0, 0.5])

    @given(st.integers(0, 2**32), st.integers(2, 12))
    @settings(max_examples=60, deadline=None)
    def test_conservation_and_antimonotonicity(self, seed, n):
        s = SeededRng(seed).uniforms(n) + 0.05
        if np.unique(s).shape[0] != n:
            return  # distinct-score property only
        alpha = importance_scalars(s)
        # conservation: alpha + s is constant at s_min + s_max
        assert np.allclose(alpha + s, s.min() + s.max(), atol=1e-12)
        # ordering of alpha is the exact reverse of the ordering of s
        assert np.array_equal(np.argsort(alpha, kind="stable")[::-1], np.argsort(s, kind="stable"))


def _draws(z_rows):
    return [StochasticDraw(z_star=np.asarray(z, dtype=np.float64), eps=np.zeros(len(z))) for z in z_rows]


class TestAggregateGroup:
    def test_uniform_weights_mean(self):
        z = [[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]
        out = aggregate_group(_draws(z), [0.4, 0.4, 0.4])
        assert np.allclose(out, np.mean(z, axis=0))

    def test_dominant_weight(self):
        z = [[5.0, -1.0], [100.0, 100.0]]
        out = aggregate_group(_draws(z), [1.0, 1e-12])
        assert np.max(np.abs(out - np.array([5.0, -1.0]))) < 1e-9

    def test_hand_evaluated(self):
        out = aggregate_group(_draws([[1.0, 0.0], [0.0, 1.0]]), [2.0, 1.0])
        assert np.allclose(out, [2.0 / 3.0, 1.0 / 3.0])

    def test_single_face_identity(self):
        out = aggregate_group(_draws([[3.0, 4.0]]), [0.2])
        assert np.array_equal(out, [3.0, 4.0])

    def test_empty_group_rejected(self):
        with pytest.raises(ValueError):
            aggregate_group([], [])

    def test_nonpositive_weights_rejected(self):
        with pytest.raises(ValueError):
            aggregate_group(_draws([[1.0], [2.0]]), [1.0, 0.0])

    @given(st.integers(0, 2**32), st.integers(1, 8))
    @settings(max_examples=50, deadline=None)
    def test_convexity_and_permutation_invariance(self, seed, n):
        rng = SeededRng(seed)
        z = rng.normals((n, 3))
        alpha = rng.uniforms(n) + 0.01
        out = aggregate_group(z, alpha)
        assert np.all(out >= z.min(axis=0) - 1e-12)
        assert np.all(out <= z.max(axis=0) + 1e-12)
        perm = rng.permutation(n)
        out_perm = aggregate_group(z[perm], alpha[perm])
        assert np.allclose(out, out_perm, atol=1e-12)


class TestScoreIndividuals:
    def test_scores_use_stored_noise_and_importance_bounds(self):
        rng = SeededRng(44)
        embs, draws = [], []
        for i in range(5):
            mu = rng.normals(6)
            sigma = np.exp(rng.normals(6))
            emb = GaussianEmbedding(mu=mu, sigma=sigma, log_var=2 * np.log(sigma))
            embs.append(emb)
            draws.append(reparameterize(emb, rng))
        scored = score_individuals(embs, draws)
        scores = np.array([si.score for si in scored])
        for si, emb, draw in zip(scored, embs, draws):
            assert si.score == pytest.approx(uncertainty_score(emb.sigma, draw.eps))
            # the closed form (s_min + s_max) - s can undershoot the range
            # bound by one ulp, hence the 1e-12 slack
            assert scores.min() - 1e-12 <= si.importance <= scores.max() + 1e-12
            assert si.importance + si.score == pytest.approx(scores.min() + scores.max())

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            score_individuals([], [StochasticDraw(np.zeros(2), np.zeros(2))])


class TestSplitHighLow:
    def test_two_faces(self):
        assert split_high_low([1.0, 0.0], 0.5) == (1.0, 0.0)

    def test_ceil_split(self):
        high, low = split_high_low([3.0, 2.0, 1.0], 0.5)
        assert high == pytest.approx(2.5)
        assert low == pytest.approx(1.0)

    def test_all_equal(self):
        high, low = split_high_low([0.8, 0.8, 0.8, 0.8], 0.5)
        assert high == low == pytest.approx(0.8)

    def test_order_independent_of_input_position(self):
        assert split_high_low([1.0, 3.0, 2.0], 0.5) == split_high_low([3.0, 2.0, 1.0], 0.5)

    def test_high_never_swallows_all(self):
        # ratio near 1 still leaves a low group
        high, low = split_high_low([5.0, 1.0], 0.99)
        assert (high, low) == (5.0, 1.0)

    def test_needs_two(self):
        with pytest.raises(ShapeError):
            split_high_low([1.0], 0.5)

    @given(st.integers(0, 2**32), st.integers(2, 10))
    @settings(max_examples=50, deadline=None)
    def test_high_geq_low(self, seed, n):
        alphas = SeededRng(seed).uniforms(n)
        high, low = split_high_low(alphas, 0.5)
        assert high >= low
