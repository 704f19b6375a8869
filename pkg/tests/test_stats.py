import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from debias import stats
from debias.core import DataError


def brute_rank(x):
    """Average ranks by explicit counting (independent of scipy)."""
    x = np.asarray(x, dtype=float)
    return np.array([np.sum(x < v) + (np.sum(x == v) + 1) / 2.0 for v in x])


def brute_spearman(x, y):
    rx, ry = brute_rank(x), brute_rank(y)
    return float(np.corrcoef(rx, ry)[0, 1])


def enumerate_p(d):
    """Two-sided signed-rank p-value by listing all 2^N sign patterns."""
    ranks = brute_rank(np.abs(d))
    w = ranks[d > 0].sum()
    sums = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product((0, 1), repeat=len(d))]
    sums = np.array(sums)
    lo = np.sum(sums <= w + 1e-9)
    hi = np.sum(sums >= w - 1e-9)
    return min(1.0, 2.0 * min(lo, hi) / 2 ** len(d))


class TestOls:
    def test_mean_fit(self):
        coef, res = stats.ols_fit(np.ones((3, 1)), np.array([1.0, 2.0, 3.0]))
        assert coef == pytest.approx([2.0])
        assert res == pytest.approx([-1.0, 0.0, 1.0])

    def test_exact_fit(self):
        X = np.random.default_rng(0).normal(size=(20, 3))
        _, res = stats.ols_fit(X, X @ [1.0, -2.0, 0.5])
        assert np.max(np.abs(res)) <= 1e-12

    def test_normal_equations_oracle(self):
        rng = np.random.default_rng(1)
        X, y = rng.normal(size=(50, 4)), rng.normal(size=50)
        coef, res = stats.ols_fit(X, y)
        oracle = np.linalg.inv(X.T @ X) @ X.T @ y
        assert np.max(np.abs(coef - oracle)) <= 1e-8
        assert np.max(np.abs(X.T @ res)) <= 1e-8 * np.linalg.norm(y)

    def test_rank_deficient(self):
        X = np.column_stack([np.ones(5), np.ones(5)])
        with pytest.raises(DataError):
            stats.ols_fit(X, np.arange(5.0))


class TestPca:
    def test_line(self):
        t = np.linspace(-1, 1, 11)
        b = stats.pca_fit(np.column_stack([t, t]), 2, standardize=False)
        assert np.abs(b.components[0]) == pytest.approx([2**-0.5] * 2)
        assert b.explained_variance[1] == pytest.approx(0.0, abs=1e-12)

    def test_isotropic(self):
        x = np.random.default_rng(2).normal(size=(10_000, 4))
        ev = stats.pca_fit(x, 4).explained_variance
        assert ev.max() / ev.min() < 1.2

    def test_invariants(self):
        x = np.random.default_rng(3).normal(size=(200, 6)) @ np.random.default_rng(4).normal(size=(6, 6))
        b = stats.pca_fit(x, 3)
        assert np.allclose(b.components @ b.components.T, np.eye(3), atol=1e-10)
        assert np.all(np.diff(b.explained_variance) <= 0)
        s = b.transform(x)
        assert np.allclose(s.mean(axis=0), 0, atol=1e-10)
        assert np.allclose(np.cov(s.T), np.diag(b.explained_variance), atol=1e-8)
        shifted = stats.pca_fit(x + 7.5, 3)
        assert np.allclose(np.abs(shifted.components), np.abs(b.components), atol=1e-10)

    def test_constant_feature(self):
        x = np.column_stack([np.arange(5.0), np.ones(5)])
        with pytest.raises(DataError):
            stats.pca_fit(x, 1)


class TestPpca:
    @staticmethod
    def draw(n=2000, f=6, noise=0.5, seed=0):
        rng = np.random.default_rng(seed)
        w0 = rng.normal(size=f)
        x = np.outer(rng.normal(size=n), w0) + rng.normal(0, noise, (n, f))
        return x, w0

    def test_closed_form_likelihood(self):
        x, _ = self.draw()
        fit = stats.ppca_fit(x, 2)
        C = fit.W @ fit.W.T + fit.noise_var * np.eye(6)
        xc = x - x.mean(axis=0)
        _, logdet = np.linalg.slogdet(C)
        ll = -0.5 * (len(x) * (6 * np.log(2 * np.pi) + logdet) + np.sum(xc @ np.linalg.inv(C) * xc))
        assert abs(fit.log_likelihood - ll) <= 1e-8 * max(1.0, abs(ll))

    def test_noise_is_mean_of_discarded_eigenvalues(self):
        x, _ = self.draw()
        fit = stats.ppca_fit(x, 2)
        ev = np.sort(np.linalg.eigvalsh(np.cov(x.T, bias=True)))[::-1]
        assert fit.noise_var == pytest.approx(ev[2:].mean(), abs=1e-8)

    def test_recovers_loading_and_noise(self):
        x, w0 = self.draw(noise=0.5)
        fit = stats.ppca_fit(x, 1)
        angle = linalg.subspace_angles(fit.W, w0[:, None])[0]
        assert angle < 0.1
        assert fit.noise_var == pytest.approx(0.25, rel=0.1)

    def test_span_matches_eigenvectors(self):
        x, _ = self.draw(seed=5)
        fit = stats.ppca_fit(x, 2)
        _, vec = np.linalg.eigh(np.cov(x.T))
        assert linalg.subspace_angles(fit.W, vec[:, -2:]).max() < 1e-6

    def test_likelihood_monotone_in_k(self):
        x, _ = self.draw(f=5, seed=6)
        lls = [stats.ppca_fit(x, k).log_likelihood for k in range(1, 5)]
        assert all(b >= a - 1e-9 for a, b in zip(lls, lls[1:]))
        # k = F - 1 dominates the PCA-restricted one-component Gaussian
        assert lls[-1] >= lls[0]

    def test_errors(self):
        with pytest.raises(DataError):
            stats.ppca_fit(np.random.default_rng(0).normal(size=(10, 3)), 3)

    def test_bic_selection(self):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(3000, 2))
        x = z @ rng.normal(size=(2, 8)) + rng.normal(0, 0.3, (3000, 8))
        assert stats.ppca_select_k(x, [1, 2, 3, 4])[0] == 2


class TestSpearman:
    def test_monotone(self):
        assert stats.spearman([1, 2, 3], [10, 20, 30]) == 1.0
        assert stats.spearman([1, 2, 3], [3, 2, 1]) == -1.0

    def test_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=100)
        y = np.round(x + rng.normal(size=100), 1)  # ties
        assert abs(stats.spearman(x, y) - brute_spearman(x, y)) <= 1e-12

    def test_constant(self):
        with pytest.raises(DataError):
            stats.spearman([1, 1, 1], [1, 2, 3])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(-500, 500), min_size=4, max_size=30, unique=True))
    def test_monotone_transform_invariance(self, xs):
        x = np.array(xs, dtype=float)
        y = np.sin(x) + 0.01 * x
        assert stats.spearman(np.exp(x / 100), y) == pytest.approx(stats.spearman(x, y), abs=1e-12)


class TestWilcoxon:
    def test_identical_is_error(self):
        a = np.arange(6.0)
        with pytest.raises(DataError):
            stats.wilcoxon_signed_rank(a, a)

    def test_all_positive_n6(self):
        r = stats.wilcoxon_signed_rank(np.arange(1.0, 7.0) + 1, np.zeros(6))
        assert r.statistic == 21
        assert r.pvalue == 0.03125

    @pytest.mark.parametrize("n", range(5, 11))
    def test_exact_matches_enumeration(self, n):
        rng = np.random.default_rng(n)
        for _ in range(5):
            d = np.round(rng.normal(0.3, 1, n), 1)
            d[d == 0] = 0.1
            assert stats.wilcoxon_signed_rank(d, np.zeros(n), "exact").pvalue == enumerate_p(d)

    def test_symmetry(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert stats.wilcoxon_signed_rank(a, b).pvalue == stats.wilcoxon_signed_rank(b, a).pvalue
        assert 0 < stats.wilcoxon_signed_rank(a, b).pvalue < 1

    def test_exact_vs_normal_at_25(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            a, b = rng.normal(0.3, 1, 25), rng.normal(size=25)
            pe = stats.wilcoxon_signed_rank(a, b, "exact").pvalue
            pn = stats.wilcoxon_signed_rank(a, b, "approx").pvalue
            assert abs(pe - pn) <= 0.02
