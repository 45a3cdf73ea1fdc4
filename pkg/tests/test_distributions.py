"""Width/depth distribution tests: softmax oracles, sampling statistics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunesearch import autodiff as ad
from prunesearch import distributions as dist
from prunesearch.autodiff import Tensor
from prunesearch.distributions import (
    ArchParams,
    DepthDistribution,
    GumbelSample,
    TemperatureSchedule,
    WidthDistribution,
)

from helpers import check_gradient, subset_membership_probs


class TestWidthProbs:
    def test_uniform_logits(self):
        d = WidthDistribution([4, 8, 16])
        np.testing.assert_allclose(dist.width_probs(d).data, 1.0 / 3.0)

    def test_log_logits(self):
        d = WidthDistribution([4, 8, 16], logits=np.log([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(dist.width_probs(d).data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_gradient_vs_finite_differences(self):
        d = WidthDistribution([4, 8, 16, 24], logits=np.array([0.3, -0.2, 0.9, 0.1]))
        readout = Tensor(np.array([1.0, -2.0, 0.5, 3.0]))
        check_gradient(lambda: (dist.width_probs(d) * readout).sum(), [d.logits], rtol=1e-8)

    def test_sums_to_one(self):
        d = WidthDistribution([2, 4], logits=np.array([12.0, -7.0]))
        assert abs(dist.width_probs(d).data.sum() - 1.0) < 1e-9

    def test_candidate_validation(self):
        with pytest.raises(ValueError, match="increasing"):
            WidthDistribution([8, 4])
        with pytest.raises(ValueError, match="at least 2"):
            WidthDistribution([8])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-8, 8), min_size=2, max_size=6), st.floats(-20, 20))
def test_width_probs_shift_invariant(logits, shift):
    cands = list(range(1, len(logits) + 1))
    a = dist.width_probs(WidthDistribution(cands, logits=np.array(logits)))
    b = dist.width_probs(WidthDistribution(cands, logits=np.array(logits) + shift))
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


class TestGumbelSoftSample:
    def test_argmax_frequencies_match_categorical(self):
        # Gumbel-max: argmax of the softened weights follows softmax(alpha)
        # for any tau; checked at the low-temperature end.
        p = np.array([0.5, 0.3, 0.2])
        d = WidthDistribution([4, 8, 16], logits=np.log(p))
        rng = np.random.default_rng(123)
        counts = np.zeros(3)
        for _ in range(10_000):
            s = dist.gumbel_soft_sample(d, tau=0.1, rng=rng)
            counts[int(np.argmax(s.p_hat.data))] += 1
        np.testing.assert_allclose(counts / 10_000, p, atol=0.02)

    def test_high_temperature_is_uniform(self):
        d = WidthDistribution([4, 8, 16, 24], logits=np.array([2.0, -1.0, 0.5, 0.0]))
        rng = np.random.default_rng(7)
        s = dist.gumbel_soft_sample(d, tau=1e6, rng=rng)
        np.testing.assert_allclose(s.p_hat.data, 0.25, atol=1e-3)

    def test_seed_reproducible_bit_exact(self):
        d = WidthDistribution([4, 8], logits=np.array([0.4, -0.4]))
        a = dist.gumbel_soft_sample(d, tau=2.0, rng=np.random.default_rng(99))
        b = dist.gumbel_soft_sample(d, tau=2.0, rng=np.random.default_rng(99))
        np.testing.assert_array_equal(a.p_hat.data, b.p_hat.data)

    def test_soft_weights_sum_to_one(self):
        d = WidthDistribution([4, 8, 16], logits=np.array([3.0, 0.0, -3.0]))
        s = dist.gumbel_soft_sample(d, tau=0.5, rng=np.random.default_rng(5))
        assert abs(s.p_hat.data.sum() - 1.0) < 1e-9
        assert np.all(s.p_hat.data > 0)

    def test_nonpositive_temperature_rejected(self):
        d = WidthDistribution([4, 8])
        with pytest.raises(ValueError, match="temperature"):
            dist.gumbel_soft_sample(d, tau=0.0, rng=np.random.default_rng(0))

    def test_gradient_flows_to_logits(self):
        d = WidthDistribution([4, 8, 16], logits=np.array([0.2, -0.1, 0.4]))
        readout = Tensor(np.array([1.0, 2.0, -1.0]))

        def loss():
            s = dist.gumbel_soft_sample(d, tau=1.5, rng=np.random.default_rng(11))
            return (s.p_hat * readout).sum()

        check_gradient(loss, [d.logits], rtol=1e-6)


class TestSampleSubset:
    def _sample(self, logits, tau=1.0, seed=0):
        d = WidthDistribution(list(range(4, 4 + 4 * len(logits), 4)), logits=np.array(logits))
        return d, dist.gumbel_soft_sample(d, tau=tau, rng=np.random.default_rng(seed))

    def test_full_subset_is_permutation(self):
        d, s = self._sample([0.5, -0.5, 1.0])
        full = dist.sample_subset(s, 3, np.random.default_rng(1))
        assert sorted(full.indices) == [0, 1, 2]
        np.testing.assert_allclose(full.weights.data, s.p_hat.data[full.indices], atol=1e-12)
        assert abs(full.weights.data.sum() - 1.0) < 1e-9

    def test_singleton_weight_is_one_with_zero_gradient(self):
        d, s = self._sample([0.3, 0.7])
        single = dist.sample_subset(s, 1, np.random.default_rng(2))
        assert single.weights.data.shape == (1,)
        assert single.weights.data[0] == 1.0
        d.logits.zero_grad()
        single.weights.sum().backward()
        np.testing.assert_array_equal(d.logits.grad, np.zeros(2))

    def test_pair_weight_gradient_nonzero(self):
        d, s = self._sample([0.3, 0.7, -0.2])
        pair = dist.sample_subset(s, 2, np.random.default_rng(3))
        d.logits.zero_grad()
        ad.take(pair.weights, [0]).sum().backward()
        assert np.any(d.logits.grad != 0.0)

    def test_membership_frequency_matches_enumeration(self):
        # oracle: exact membership probabilities from enumerating all ordered
        # draw sequences with sequential renormalization
        p_hat = np.array([0.7, 0.2, 0.1])
        expected = subset_membership_probs(p_hat, k=2)
        sample = GumbelSample(
            scaled_logits=Tensor(np.log(p_hat)),
            p_hat=Tensor(p_hat),
            tau=1.0,
            candidates=[4, 8, 16],
        )
        rng = np.random.default_rng(42)
        counts = np.zeros(3)
        trials = 10_000
        for _ in range(trials):
            got = dist.sample_subset(sample, 2, rng)
            for i in got.indices:
                counts[i] += 1
        np.testing.assert_allclose(counts / trials, expected, atol=0.02)

    def test_oversized_subset_rejected(self):
        _, s = self._sample([0.0, 0.0])
        with pytest.raises(ValueError, match="subset"):
            dist.sample_subset(s, 3, np.random.default_rng(0))

    def test_indices_distinct(self):
        _, s = self._sample([1.0, 0.0, -1.0, 0.5], seed=11)
        rng = np.random.default_rng(13)
        for _ in range(50):
            got = dist.sample_subset(s, 2, rng)
            assert len(set(got.indices)) == 2

    def test_renormalized_weights_sum_to_one(self):
        rng = np.random.default_rng(17)
        for seed in range(20):
            d, s = self._sample([0.8, -0.3, 0.1, 1.2], tau=0.7, seed=seed)
            got = dist.sample_subset(s, 2, rng)
            assert abs(got.weights.data.sum() - 1.0) < 1e-9
            assert np.all(got.weights.data > 0)


class TestDepthSoftSample:
    def test_single_layer_always_one(self):
        d = DepthDistribution(1)
        q = dist.depth_soft_sample(d, tau=0.5, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(q.data, [1.0])

    def test_uniform_logits_high_tau(self):
        d = DepthDistribution(3)
        q = dist.depth_soft_sample(d, tau=1e6, rng=np.random.default_rng(1))
        np.testing.assert_allclose(q.data, 1.0 / 3.0, atol=1e-3)

    def test_gradient_vs_finite_differences(self):
        d = DepthDistribution(3, logits=np.array([0.1, -0.4, 0.2]))
        readout = Tensor(np.array([2.0, -1.0, 0.5]))

        def loss():
            q = dist.depth_soft_sample(d, tau=1.2, rng=np.random.default_rng(21))
            return (q * readout).sum()

        check_gradient(loss, [d.logits], rtol=1e-6)


class TestDerive:
    def _arch(self, width_logits, depth_logits):
        widths = [WidthDistribution([8, 16, 24], logits=np.array(l)) for l in width_logits]
        depths = [DepthDistribution(len(l), logits=np.array(l)) for l in depth_logits]
        return ArchParams(widths=widths, depths=depths)

    def test_argmax_width(self):
        arch = self._arch([[0.1, 0.9, 0.3]], [[0.0]])
        assert dist.derive(arch).widths == [16]

    def test_depth_tie_prefers_larger(self):
        arch = self._arch([[0.0, 0.0, 1.0]], [[0.0, 0.0]])
        assert dist.derive(arch).depths == [2]

    def test_width_tie_prefers_larger(self):
        arch = self._arch([[0.5, 0.2, 0.5]], [[0.0]])
        assert dist.derive(arch).widths == [24]

    def test_invariant_under_shift(self):
        base = self._arch([[0.3, -0.2, 0.1]], [[0.4, 0.1, -0.5]])
        shifted = self._arch([[5.3, 4.8, 5.1]], [[10.4, 10.1, 9.5]])
        a, b = dist.derive(base), dist.derive(shifted)
        assert a.widths == b.widths and a.depths == b.depths

    def test_disabled_axes_pin_maximum(self):
        arch = self._arch([[3.0, 0.0, 0.0]], [[3.0, 0.0]])
        arch.search_width = False
        arch.search_depth = False
        got = dist.derive(arch)
        assert got.widths == [24] and got.depths == [2]


class TestDiscrepancy:
    def test_uniform_is_zero(self):
        assert dist.discrepancy(WidthDistribution([4, 8, 16])) == 0.0

    def test_direct_subtraction(self):
        d = WidthDistribution([4, 8, 16], logits=np.log([0.7, 0.2, 0.1]))
        assert abs(dist.discrepancy(d) - 0.5) < 1e-12

    def test_in_unit_interval(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            d = WidthDistribution([4, 8, 16, 24], logits=rng.standard_normal(4) * 3)
            assert 0.0 <= dist.discrepancy(d) <= 1.0


class TestTemperatureSchedule:
    def test_endpoints_and_midpoint(self):
        sched = TemperatureSchedule(start=10.0, end=0.1, total_epochs=51)
        assert sched.value(0) == 10.0
        assert sched.value(50) == pytest.approx(0.1)
        assert sched.value(25) == pytest.approx((10.0 + 0.1) / 2)

    def test_single_epoch(self):
        assert TemperatureSchedule(10.0, 0.1, 1).value(0) == 0.1

    def test_monotone_decay(self):
        sched = TemperatureSchedule(total_epochs=20)
        vals = [sched.value(e) for e in range(20)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
