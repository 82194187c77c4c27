import numpy as np
import pytest
from scipy import stats

from gradleak.attack import (
    PairsParams,
    QbiParams,
    pairs_init,
    pairs_search,
    qbi_bias,
    qbi_init,
    trap_weights_init,
)
from gradleak.experiment import ExperimentConfig, run_grid
from gradleak.model import LinearLayer
from gradleak.numerics import RngStream, normal_cdf

# quantile_oracle(0.05) * sqrt(3072)
QBI_BIAS_B20_CIFAR = -91.16704169260464


def qbi_layer(n, m, b, seed=0):
    return qbi_init(LinearLayer.zeros(n, m), QbiParams(b, m), RngStream(seed))


class TestQbi:
    def test_b2_gives_zero_bias(self):
        assert np.all(qbi_layer(10, 77, 2).bias == 0.0)

    def test_cifar_width_bias(self):
        assert qbi_bias(20, 3072) == pytest.approx(QBI_BIAS_B20_CIFAR, abs=1e-9)
        assert np.all(qbi_layer(5, 3072, 20).bias == qbi_bias(20, 3072))

    def test_rejects_batch_size_one(self):
        with pytest.raises(ValueError):
            QbiParams(1, 10)
        with pytest.raises(ValueError):
            qbi_bias(1, 10)

    def test_width_must_match_layer(self):
        with pytest.raises(ValueError):
            qbi_init(LinearLayer.zeros(3, 4), QbiParams(5, 8), RngStream(0))

    def test_deterministic(self):
        a, b = qbi_layer(20, 50, 10, seed=4), qbi_layer(20, 50, 10, seed=4)
        assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)

    def test_weights_are_standard_normal(self):
        w = qbi_layer(40, 2500, 20).weights.ravel()
        assert stats.kstest(w, "norm").pvalue > 0.01

    def test_activation_rate_monte_carlo(self):
        m, n, b = 3072, 16, 20
        layer = qbi_layer(n, m, b, seed=11)
        r = RngStream(12)
        hits = np.zeros(n)
        rows = 0
        while rows < 10**5:
            x = r.normal((5000, m))
            hits += ((x @ layer.weights.T + layer.bias) > 0).sum(0)
            rows += 5000
        rate = hits / rows
        assert 0.045 <= rate.mean() <= 0.055
        # given its weight row a neuron fires with probability Phi(b / |w|)
        exact = np.array([normal_cdf(layer.bias[0] / np.linalg.norm(w)) for w in layer.weights])
        assert np.all(np.abs(rate - exact) <= 5 * np.sqrt(exact * (1 - exact) / rows))


class TestPairs:
    def test_zero_retries_is_identity(self):
        layer = qbi_layer(30, 40, 10)
        aux = RngStream(1).normal((30, 40))
        out = pairs_init(layer, PairsParams(aux, 10, retries=0), RngStream(2))
        assert np.array_equal(out.weights, layer.weights)
        assert np.array_equal(out.bias, layer.bias)

    def test_already_isolating_rows_untouched(self):
        n = 4
        aux = 10.0 * np.eye(n)
        layer = LinearLayer(np.eye(n), np.full(n, -5.0))
        res = pairs_search(layer, PairsParams(aux, n, retries=50), RngStream(0))
        assert res.reinitialized.tolist() == [0, 0, 0, 0]
        assert np.array_equal(res.layer.weights, layer.weights)
        assert res.frozen == [{0, 1, 2, 3}]

    def test_needs_enough_auxiliary_samples(self):
        with pytest.raises(ValueError):
            pairs_init(qbi_layer(10, 8, 5), PairsParams(np.zeros((9, 8)), 5), RngStream(0))

    def test_bias_never_modified(self):
        layer = qbi_layer(60, 100, 20)
        out = pairs_init(layer, PairsParams(RngStream(3).normal((60, 100)), 20, 200), RngStream(4))
        assert np.array_equal(out.bias, layer.bias)

    def test_frozen_set_soundness(self):
        n, b, m = 50, 20, 64
        layer = qbi_layer(n, m, b)
        aux = RngStream(5).normal((n, m))
        res = pairs_search(layer, PairsParams(aux, b, 300), RngStream(6))
        assert len(res.aux_batches) == 3  # ceil(50 / 20), last group short
        for g, idx in enumerate(res.aux_batches):
            neurons = range(g * b, min((g + 1) * b, n))
            act = (aux[idx] @ res.layer.weights[list(neurons)].T + res.layer.bias[0]) > 0
            isolated = {int(np.flatnonzero(act[:, j])[0]) for j in range(act.shape[1]) if act[:, j].sum() == 1}
            assert res.frozen[g] <= isolated
            for j, neuron in enumerate(neurons):
                s = res.isolating[neuron]
                if s >= 0:
                    assert np.flatnonzero(act[:, j]).tolist() == [s]

    def test_wraparound_batches(self):
        res = pairs_search(qbi_layer(50, 16, 20), PairsParams(RngStream(1).normal((50, 16)), 20, 5), RngStream(2))
        assert res.aux_batches[2].tolist() == [40, 41, 42, 43, 44, 45, 46, 47, 48, 49] + list(range(10))

    def test_exhausted_retries_counted(self):
        # unreachable isolation: every neuron is dead for every sample
        layer = LinearLayer(RngStream(0).normal((3, 5)), np.full(3, -1e6))
        res = pairs_search(layer, PairsParams(np.ones((3, 5)), 3, retries=7), RngStream(1))
        assert res.reinitialized.tolist() == [7, 7, 7]
        assert np.all(res.isolating == -1)

    def test_weight_space_indistinguishable(self):
        n, b, m = 200, 20, 3072
        layer = qbi_layer(n, m, b, seed=21)
        out = pairs_init(layer, PairsParams(RngStream(22).normal((n, m)), b), RngStream(23))
        pooled = RngStream(24).generator.choice(out.weights.ravel(), 10**5, replace=False)
        assert stats.kstest(pooled, "norm").statistic < stats.kstwo.ppf(0.99, 10**5)

    def test_recall_matches_qbi_on_iid_data(self):
        kw = dict(grid=[(200, 20)], runs=10, batches_per_run=10, base_seed=3)
        qbi = run_grid(ExperimentConfig(attack="qbi", **kw)).cells[0].R_mean
        pairs = run_grid(ExperimentConfig(attack="pairs", **kw)).cells[0].R_mean
        assert abs(pairs - qbi) <= 0.02


class TestTrapWeights:
    def test_zero_shift_is_gaussian(self):
        layer = trap_weights_init(LinearLayer.zeros(50, 2000), 0.0, RngStream(0))
        assert stats.kstest(layer.weights.ravel(), "norm").pvalue > 0.01
        assert np.all(layer.bias == 0)

    def test_half_negative_per_row(self):
        w = trap_weights_init(LinearLayer.zeros(4, 10), 0.5, RngStream(1)).weights
        assert np.all((w < 0).sum(1) == 5)

    def test_negative_shift_validated(self):
        with pytest.raises(ValueError):
            trap_weights_init(LinearLayer.zeros(2, 2), -1.0, RngStream(0))

    def test_large_shift_leaks_nothing(self):
        cfg = ExperimentConfig(grid=[(200, 20)], attack="trap_weights", trap_shift=10.0,
                               runs=2, batches_per_run=3, eval="gradient")
        assert run_grid(cfg).cells[0].R_mean <= 0.01

    def test_best_shift_stays_below_qbi(self):
        base = dict(grid=[(1000, 200)], runs=2, batches_per_run=2, base_seed=9)
        qbi_r = run_grid(ExperimentConfig(attack="qbi", **base)).cells[0].R_mean
        best = max(
            run_grid(ExperimentConfig(attack="trap_weights", trap_shift=s, **base)).cells[0].R_mean
            for s in np.round(np.arange(0.1, 2.01, 0.3), 2)
        )
        assert best < qbi_r
