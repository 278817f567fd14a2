import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_close, rng
from twopass import distill as dst
from twopass import lattice as lat


def lattice_with_node(p_y, p_blank, K=3, token=2):
    """1x1 lattice whose single node has the given token/blank probabilities,
    remaining mass split over the other labels."""
    rest = 1.0 - p_y - p_blank
    others = K - 1
    probs = np.full(K + 1, rest / others if others else 0.0)
    probs[lat.BLANK_ID] = p_blank
    probs[token] = p_y
    logp = np.log(np.maximum(probs, 1e-300)).reshape(1, 1, K + 1)
    logp[logp < -600] = lat.LOG_ZERO
    return lat.LatticeDist(logp), lat.LabelSequence.of([token])


def random_coarse(r) -> dst.CoarseDist:
    v = r.dirichlet(np.ones(3))
    return dst.CoarseDist(float(v[0]), float(v[1]), float(max(0.0, 1 - v[0] - v[1])))


class TestCoarseProject:
    def test_complement_arithmetic(self):
        d, y = lattice_with_node(0.3, 0.5)
        c = dst.coarse_project(d, y, 0, 0)
        assert_close([c.p_y, c.p_blank, c.p_r], [0.3, 0.5, 0.2], rtol=1e-9)

    def test_single_token_vocab_has_empty_remainder(self):
        d, y = lattice_with_node(0.4, 0.6, K=1, token=1)
        c = dst.coarse_project(d, y, 0, 0)
        assert c.p_r == 0.0

    def test_top_row_convention(self):
        r = rng(0)
        d = lat.random_lattice(r, 2, 1, 3)
        y = lat.LabelSequence.of([2])
        c = dst.coarse_project(d, y, 1, 1)
        assert c.p_y == 0.0
        assert_close(c.p_r, 1.0 - math.exp(d.logp[1, 1, lat.BLANK_ID]), rtol=1e-9)

    def test_out_of_range_indices(self):
        r = rng(1)
        d = lat.random_lattice(r, 2, 1, 3)
        y = lat.LabelSequence.of([1])
        for t, u in [(-1, 0), (2, 0), (0, 2), (0, -1)]:
            with pytest.raises(IndexError):
                dst.coarse_project(d, y, t, u)

    def test_matches_vectorized_targets(self):
        r = rng(2)
        d = lat.random_lattice(r, 3, 2, 4)
        y = lat.LabelSequence.of([1, 4])
        t3 = dst.coarse_targets(d, y)
        assert t3.shape == (3, 3, 3)
        for t in range(3):
            for u in range(3):
                c = dst.coarse_project(d, y, t, u)
                assert_close(t3[t, u], c.as_array(), rtol=1e-12)


class TestCoarseKL:
    def test_identity_is_zero(self):
        r = rng(3)
        for _ in range(20):
            c = random_coarse(r)
            assert dst.coarse_kl(c, c) == 0.0

    def test_one_hot_teacher_single_term(self):
        t = dst.CoarseDist(1.0, 0.0, 0.0)
        s = dst.CoarseDist(0.5, 0.25, 0.25)
        assert_close(dst.coarse_kl(t, s), math.log(2.0), rtol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_nonnegative_and_zero_iff_equal(self, seed):
        r = rng(seed)
        a, b = random_coarse(r), random_coarse(r)
        kl = dst.coarse_kl(a, b)
        assert kl >= 0.0
        if kl < 1e-12:
            assert_close(a.as_array(), b.as_array(), rtol=0, atol=1e-5)

    def test_rational_grid_exact(self):
        # Small rational grid where the KL has a closed form.
        t = dst.CoarseDist(0.5, 0.25, 0.25)
        s = dst.CoarseDist(0.25, 0.5, 0.25)
        expected = 0.5 * math.log(2.0) + 0.25 * math.log(0.5)
        assert_close(dst.coarse_kl(t, s), expected, rtol=1e-12)


class TestFullKL:
    def test_identity_is_zero(self):
        r = rng(4)
        d = lat.random_lattice(r, 3, 2, 4)
        assert dst.full_kl(d, d) == 0.0

    def test_shape_mismatch(self):
        r = rng(5)
        a = lat.random_lattice(r, 3, 2, 4)
        b = lat.random_lattice(r, 3, 2, 3)
        with pytest.raises(ValueError):
            dst.full_kl(a, b)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_dominates_coarse_sum(self, seed):
        # Coarsening is a 3-way lumping of each node, so the full KL can only
        # be larger (data-processing inequality).
        r = rng(seed)
        T, U, K = int(r.integers(1, 4)), int(r.integers(0, 3)), int(r.integers(2, 5))
        t_lat = lat.random_lattice(r, T, U, K)
        s_lat = lat.random_lattice(r, T, U, K)
        y = lat.LabelSequence.of(r.integers(1, K + 1, size=U))
        full = dst.full_kl(t_lat, s_lat)
        coarse = dst.coarse_kl_sum(t_lat, s_lat, y)
        assert full >= coarse - 1e-9

    def test_single_node_binary_vocab_reduces_to_binary_kl(self):
        t_lat, y = lattice_with_node(0.7, 0.3, K=1, token=1)
        s_lat, _ = lattice_with_node(0.4, 0.6, K=1, token=1)
        expected = 0.7 * math.log(0.7 / 0.4) + 0.3 * math.log(0.3 / 0.6)
        assert_close(dst.full_kl(t_lat, s_lat), expected, rtol=1e-9)

    def test_remainder_reallocation_is_invisible_to_coarse(self):
        # Moving mass between two non-target, non-blank labels changes the
        # full KL but not the coarse one.
        probs_a = np.array([[[0.4, 0.3, 0.2, 0.1]]])
        probs_b = np.array([[[0.4, 0.3, 0.1, 0.2]]])
        da = lat.LatticeDist(np.log(probs_a))
        db = lat.LatticeDist(np.log(probs_b))
        y = lat.LabelSequence.of([1])
        r = rng(6)
        s = lat.random_lattice(r, 1, 1, 3)
        assert_close(
            dst.coarse_kl_sum(da, s, y), dst.coarse_kl_sum(db, s, y), rtol=1e-12
        )
        assert dst.full_kl(da, s) != dst.full_kl(db, s)

    def test_coarse_summary_is_three_wide(self):
        # The stored distillation target is 3 numbers per node regardless of K.
        r = rng(7)
        for K in (2, 5, 9):
            d = lat.random_lattice(r, 4, 2, K)
            y = lat.LabelSequence.of(r.integers(1, K + 1, size=2))
            t3 = dst.coarse_targets(d, y)
            assert t3.shape == (4, 3, 3)
            assert t3.nbytes == 4 * 3 * 3 * 8


class TestLasKL:
    def steps_from(self, r, n, vocab):
        return [
            dst.StepDist(lat.log_softmax(r.standard_normal(vocab))) for _ in range(n)
        ]

    def test_identity_is_zero(self):
        r = rng(8)
        steps = self.steps_from(r, 4, 6)
        assert dst.las_kl(steps, steps) == 0.0

    def test_one_hot_teacher_is_cross_entropy(self):
        r = rng(9)
        student = self.steps_from(r, 1, 5)
        onehot = np.full(5, lat.LOG_ZERO)
        onehot[3] = 0.0
        teacher = [dst.StepDist(onehot)]
        assert_close(dst.las_kl(teacher, student), -student[0].logp[3], rtol=1e-12)

    def test_additive_over_concatenation(self):
        r = rng(10)
        t1, s1 = self.steps_from(r, 2, 4), self.steps_from(r, 2, 4)
        t2, s2 = self.steps_from(r, 3, 4), self.steps_from(r, 3, 4)
        assert_close(
            dst.las_kl(t1 + t2, s1 + s2),
            dst.las_kl(t1, s1) + dst.las_kl(t2, s2),
            rtol=1e-12,
        )

    def test_mismatch_errors(self):
        r = rng(11)
        with pytest.raises(ValueError):
            dst.las_kl(self.steps_from(r, 2, 4), self.steps_from(r, 3, 4))
        with pytest.raises(ValueError):
            dst.las_kl(self.steps_from(r, 2, 4), self.steps_from(r, 2, 5))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_nonnegative(self, seed):
        r = rng(seed)
        t = self.steps_from(r, 2, 5)
        s = self.steps_from(r, 2, 5)
        assert dst.las_kl(t, s) >= 0.0


class TestStageLosses:
    def test_stage1_endpoints_and_default(self):
        w0 = dst.LossWeights(beta=0.0)
        w1 = dst.LossWeights(beta=1.0)
        assert dst.stage1_loss(3.7, 9.9, w0) == 3.7
        assert dst.stage1_loss(3.7, 9.9, w1) == 9.9
        assert dst.LossWeights().beta == 1e-2

    def test_stage1_linear_in_beta(self):
        lo = dst.stage1_loss(2.0, 6.0, dst.LossWeights(beta=0.2))
        hi = dst.stage1_loss(2.0, 6.0, dst.LossWeights(beta=0.8))
        mid = dst.stage1_loss(2.0, 6.0, dst.LossWeights(beta=0.5))
        assert_close(mid, 0.5 * (lo + hi), rtol=1e-12)

    def test_stage2_examples(self):
        assert dst.stage2_loss(2.0, 1.0, dst.LossWeights(gamma=0.0)) == 2.0
        assert dst.stage2_loss(2.0, 1.0, dst.LossWeights(gamma=1.0)) == 1.0
        assert_close(dst.stage2_loss(2.0, 1.0, dst.LossWeights(gamma=0.5)), 1.5, rtol=0)

    def test_stage3_examples_and_linearity(self):
        assert_close(dst.stage3_loss(4.0, 2.0, dst.LossWeights(lam=0.5)), 3.0, rtol=0)
        assert dst.stage3_loss(4.0, 2.0, dst.LossWeights(lam=1.0)) == 4.0
        assert dst.stage3_loss(4.0, 2.0, dst.LossWeights(lam=0.0)) == 2.0
        lo = dst.stage3_loss(4.0, 2.0, dst.LossWeights(lam=0.25))
        hi = dst.stage3_loss(4.0, 2.0, dst.LossWeights(lam=0.75))
        assert_close(dst.stage3_loss(4.0, 2.0, dst.LossWeights(lam=0.5)), 0.5 * (lo + hi), rtol=1e-12)

    def test_weights_validated(self):
        for kw in ({"beta": -0.1}, {"gamma": 1.5}, {"lam": 2.0}):
            with pytest.raises(ValueError):
                dst.LossWeights(**kw)


class TestStepDist:
    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            dst.StepDist(np.array([-1.0, -1.0, -1.0]))

    def test_rejects_scalar(self):
        with pytest.raises(ValueError):
            dst.StepDist(np.array(0.0))
