import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradleak.metrics import (
    ExtractionMetrics,
    aggregate_ci,
    bounds,
    expected_A,
    expected_P,
    expected_R,
    isolation_probability,
    metrics_from_mask,
    observed_metrics,
    simulate_bernoulli_metrics,
)
from gradleak.model import LinearLayer, MaliciousModel, forward
from gradleak.numerics import RngStream

from oracles import bernoulli_isolation_counts


def mp_expected_R(n, b):
    with mpmath.workdps(50):
        b = mpmath.mpf(b)
        p = (1 / b) * ((b - 1) / b) ** (b - 1)
        return float(1 - (1 - p) ** n)


class TestClosedForms:
    def test_single_sample(self):
        assert expected_A(1) == 1.0 and expected_P(1) == 1.0

    def test_b20_against_table(self):
        # predicted columns of the synthetic table, in percent
        assert abs(expected_A(20) - 0.642) <= 0.001
        assert abs(expected_P(20) - 0.377) <= 0.001
        assert expected_A(20) == pytest.approx(1 - 0.95**20, abs=1e-15)
        assert expected_P(20) == pytest.approx(0.95**19, abs=1e-15)

    def test_limits(self):
        assert expected_A(10**6) == pytest.approx(1 - 1 / math.e, abs=1e-6)
        assert expected_P(10**6) == pytest.approx(1 / math.e, abs=1e-6)
        assert round(expected_A(10**6), 4) == 0.6321
        assert round(expected_P(10**6), 4) == 0.3679

    @pytest.mark.parametrize("n,b,pct", [(200, 20, 97.8), (1000, 200, 84.2), (200, 200, 30.9), (500, 100, 84.3)])
    def test_expected_R_against_table(self, n, b, pct):
        assert abs(100 * expected_R(n, b) - pct) <= 0.1

    @pytest.mark.parametrize("n,b", [(1, 2), (200, 20), (1000, 200), (10**5, 3), (7, 10**4)])
    def test_expected_R_high_precision(self, n, b):
        assert expected_R(n, b) == pytest.approx(mp_expected_R(n, b), rel=1e-12)

    def test_no_neurons(self):
        assert expected_R(0, 20) == 0.0

    def test_zero_batch(self):
        with pytest.raises(ValueError):
            expected_A(0)
        with pytest.raises(ValueError):
            expected_P(0)

    def test_bound_set(self):
        bs = bounds(1000, 200)
        assert bs.p_R == expected_R(1000, 200)
        assert bs.asymptotes == pytest.approx((0.632, 0.368), abs=1e-3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5000), st.integers(2, 500))
    def test_R_identity_and_monotone(self, n, b):
        p = expected_P(b) / b
        assert expected_R(n, b) == pytest.approx(1 - (1 - p) ** n, rel=1e-9, abs=1e-15)
        assert isolation_probability(b) == pytest.approx(p)
        assert expected_R(n + 1, b) >= expected_R(n, b)


class TestObservedMetrics:
    def test_all_dead(self, rng):
        layer = LinearLayer(np.zeros((6, 3)), -np.ones(6))
        m = observed_metrics(forward(MaliciousModel.build(layer, rng), rng.normal((4, 3))))
        assert (m.A, m.P, m.R) == (0.0, 0.0, 0.0)

    def test_diagonal(self):
        m = metrics_from_mask(np.eye(5, dtype=bool))
        assert (m.A, m.P, m.R) == (1.0, 1.0, 1.0)

    def test_distinct_sample_semantics(self):
        mask = np.zeros((3, 4), dtype=bool)
        mask[0, 0] = mask[0, 1] = True  # sample 0 isolated twice
        mask[1, 2] = mask[2, 2] = True  # shared neuron
        m = metrics_from_mask(mask)
        assert (m.A, m.P, m.R) == (0.75, 0.5, 1 / 3)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 12), st.integers(1, 12))
    def test_matches_loop_oracle_and_invariants(self, seed, b, n):
        mask = RngStream(seed).uniform((b, n)) < 0.3
        m = metrics_from_mask(mask)
        assert (m.A, m.P, m.R) == pytest.approx(bernoulli_isolation_counts(mask))
        assert m.P <= m.A
        assert m.R * m.B <= m.P * m.N + 1e-9

    def test_invalid_metrics_rejected(self):
        with pytest.raises(ValueError):
            ExtractionMetrics(0.2, 0.5, 0.1, 10, 10)

    def test_bernoulli_mask_500_100(self):
        a, p, r = simulate_bernoulli_metrics(500, 100, 10**4, RngStream(5))
        # experimental row (500, 100) of the synthetic table: 63.3 / 36.8 / 83.9
        assert abs(100 * a - 63.4) <= 0.5
        assert abs(100 * p - 37.0) <= 0.5
        assert abs(100 * r - 84.3) <= 0.5


class TestAggregateCi:
    def test_identical_runs(self):
        assert aggregate_ci([0.4] * 10) == (pytest.approx(0.4), 0.0)

    def test_two_runs(self):
        mean, half = aggregate_ci([0.8, 1.0])
        # sample std of {0.8, 1.0} is sqrt(0.02); SE = 0.1
        assert mean == pytest.approx(0.9)
        assert half == pytest.approx(1.96 * 0.1)

    def test_needs_two_runs(self):
        with pytest.raises(ValueError):
            aggregate_ci([0.5])

    def test_coverage(self):
        r = RngStream(77)
        truth, covered = 0.3, 0
        for _ in range(1000):
            runs = (r.uniform((10, 50)) < truth).mean(axis=1)
            mean, half = aggregate_ci(runs)
            covered += abs(mean - truth) <= half
        assert covered >= 900
