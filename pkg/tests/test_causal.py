import math

import numpy as np
import pytest

from debias import causal
from debias.causal import CausalProblem, DeltaResult
from debias.core import ConfigError, DataError, NumericalError
from debias.synth import generate_causal_pair


def tiny(seed, regime="causal", N=10, p=2):
    problem, _ = generate_causal_pair(N, p, 1, regime, seed=seed)
    return problem


class TestProblem:
    def test_standardized(self):
        rng = np.random.default_rng(0)
        pr = CausalProblem(rng.normal(3, 2, (50, 3)), rng.normal(-1, 5, 50))
        assert np.allclose(pr.X.mean(0), 0) and np.allclose(pr.X.std(0), 1)
        assert pr.Y.std() == pytest.approx(1.0)

    def test_size_checks(self):
        with pytest.raises(DataError):
            CausalProblem(np.ones((3, 3)), np.arange(3.0))
        with pytest.raises(DataError):
            CausalProblem(np.random.default_rng(0).normal(size=(5, 2)), np.arange(5.0), k=5)


class TestCausalEvidence:
    def test_permutation_control(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=20)
        y = 2 * x + rng.normal(0, 1e-3, 20)
        fit = causal.evidence_causal(CausalProblem(x, y)).code_length
        perm = causal.evidence_causal(CausalProblem(x, rng.permutation(y))).code_length
        assert perm - fit > 10

    def test_fixed_sigma_matches_naive_mc(self):
        pr = tiny(2)
        exact = causal.evidence_causal(pr, sigma_x=1.0, sigma_y=0.8)
        naive = causal.evidence_causal_naive(pr, 1_000_000, seed=3, sigma_x=1.0, sigma_y=0.8)
        assert exact.method == "analytic" and exact.mc_std_error == 0.0
        assert abs(exact.log_ml - naive.log_ml) <= 0.1

    def test_quadrature_matches_naive_mc(self):
        pr = tiny(4)
        quad = causal.evidence_causal(pr)
        naive = causal.evidence_causal_naive(pr, 1_000_000, seed=5)
        assert quad.mc_std_error <= 1e-6
        assert abs(quad.log_ml - naive.log_ml) <= 3 * math.hypot(naive.mc_std_error, quad.mc_std_error) + 1e-3

    def test_scaling_invariance(self):
        pr = tiny(6, N=40)
        scaled = CausalProblem(pr.X * 7.0, pr.Y * -3.0 + 2.0)
        assert causal.evidence_causal(scaled).log_ml == pytest.approx(causal.evidence_causal(pr).log_ml, abs=1e-9)

    def test_column_permutation(self):
        pr = tiny(7, N=60, p=3)
        swapped = CausalProblem(pr.X[:, ::-1], pr.Y)
        assert causal.evidence_causal(swapped).log_ml == pytest.approx(causal.evidence_causal(pr).log_ml, abs=1e-8)


class TestConfoundedEvidence:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_naive_mc(self, seed):
        pr = tiny(seed, regime="confounded")
        est = causal.evidence_confounded(pr, seed=seed)
        naive = causal.evidence_confounded_naive(pr, 1_000_000, seed=100 + seed)
        assert est.method == "importance" and est.ess >= causal.MIN_ESS
        assert abs(est.log_ml - naive.log_ml) <= 3 * math.hypot(est.mc_std_error, naive.mc_std_error)

    def test_column_permutation(self):
        pr = tiny(8, regime="confounded", N=100, p=3)
        a = causal.evidence_confounded(pr, seed=1)
        b = causal.evidence_confounded(CausalProblem(pr.X[:, [2, 0, 1]], pr.Y), seed=1)
        assert abs(a.log_ml - b.log_ml) <= 3 * math.hypot(a.mc_std_error, b.mc_std_error) + 0.05

    def test_rejects_low_ess(self):
        pr = tiny(9, regime="confounded")
        sampler = causal.ConfoundedEvidence(pr, adapt_rounds=0)
        with pytest.raises(NumericalError, match="effective sample size"):
            sampler.estimate(n_samples=20, max_rounds=1)

    def test_duplication_doubles_code_lengths(self):
        pr = tiny(10, regime="confounded", N=200, p=2)
        dup = CausalProblem(np.vstack([pr.X, pr.X]), np.concatenate([pr.Y, pr.Y]))
        one, two = causal.delta(pr, repetitions=2), causal.delta(dup, repetitions=2)
        assert two.L_ca.code_length / one.L_ca.code_length == pytest.approx(2.0, rel=0.1)
        assert two.L_co.code_length / one.L_co.code_length == pytest.approx(2.0, rel=0.1)
        assert abs(two.delta_normalized - one.delta_normalized) <= 0.1


class TestDelta:
    def test_report_arithmetic(self):
        r = DeltaResult.from_code_lengths(20238, 18782, N=1456)
        assert r.delta == -1456
        assert r.delta_normalized == -1.0
        assert causal.format_count(r.delta) == "-1,456"

    def test_interval_format(self):
        r = DeltaResult.from_code_lengths([10.0, 10.0, 10.0], [8.0, 9.0, 12.0], N=2)
        assert (r.median, r.min, r.max) == (-1.0, -2.0, 2.0)
        assert r.interval() == "-0.500 [-1.000; 1.000]"
        with pytest.raises(ConfigError):
            DeltaResult.from_code_lengths([1.0, 2.0], [1.0, 2.0, 3.0], N=2)

    def test_deterministic_and_consistent(self):
        pr = tiny(11, regime="confounded", N=100, p=3)
        a = causal.delta(pr, repetitions=3, seed=4, n_samples=20_000)
        b = causal.delta(pr, repetitions=3, seed=4, n_samples=20_000)
        assert a.to_dict() == b.to_dict()
        assert a.delta == a.L_co.code_length - a.L_ca.code_length
        assert a.median == pytest.approx(np.median(a.repetitions))
        assert a.min == min(a.repetitions) and a.max == max(a.repetitions)
        assert len(set(a.L_co_repetitions)) == 3

    def test_zero_repetitions(self):
        with pytest.raises(ConfigError):
            causal.delta(tiny(0), repetitions=0)


class TestSelectK:
    def test_single_candidate(self):
        pr = tiny(12, regime="confounded", N=50)
        k, table = causal.select_k(pr, [2], n_samples=10_000)
        assert k == 2 and list(table) == [2]

    def test_empty(self):
        with pytest.raises(ConfigError):
            causal.select_k(tiny(0), [])

    def test_recovers_true_dimension(self):
        # equal column variances keep the isotropic noise model well specified
        # after standardization (see the README note on select_k)
        hits = 0
        for seed in range(10):
            pr, _ = generate_causal_pair(1000, 5, 2, "confounded", seed=seed, equal_column_variance=True)
            k, table = causal.select_k(pr, [1, 2, 3], n_samples=20_000, seed=seed)
            assert all(np.isfinite(v) for v in table.values())
            hits += k == 2
        assert hits >= 8
