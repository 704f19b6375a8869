"""Numerical kernels: least squares, PCA, probabilistic PCA and rank tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats as sps

from .core import DataError, NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so that its entry of largest magnitude is positive."""
    vectors = np.array(vectors, dtype=float)
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


# --------------------------------------------------------------------------
# Least squares
# --------------------------------------------------------------------------


def ols_fit(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ordinary least squares; ``y`` may hold several responses as columns.

    Returns ``(coef, residuals)``. Raises :class:`DataError` when ``X`` does
    not have full column rank.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape[0] != X.shape[0]:
        raise DataError(f"shape mismatch: X {X.shape}, y {y.shape}")
    n, p = X.shape
    if p == 0:
        return np.zeros((0,) + y.shape[1:]), y.copy()
    if n < p:
        raise DataError(f"underdetermined system: {n} rows, {p} columns")
    if np.linalg.matrix_rank(X) < p:
        raise DataError("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef, y - X @ coef


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PcaBasis:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray  # m x F, orthonormal rows
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def transform(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.mean.shape[0]:
            raise DataError(f"basis expects {self.mean.shape[0]} features, got {values.shape[-1]}")
        return ((values - self.mean) / self.scale) @ self.components.T

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PcaBasis:
        comps = np.asarray(d["components"], dtype=float)
        return cls(
            np.asarray(d["mean"], dtype=float),
            np.asarray(d["scale"], dtype=float),
            comps.reshape(-1, len(d["mean"])),
            np.asarray(d["explained_variance"], dtype=float),
        )


def pca_fit(values: np.ndarray, m: int, standardize: bool = True) -> PcaBasis:
    """Principal components of ``values`` (rows are observations).

    Features are standardized to unit variance first unless
    ``standardize=False``.
    """
    values = np.asarray(values, dtype=float)
    n, f = values.shape
    if n < 2:
        raise DataError("PCA needs at least two rows")
    if not 1 <= m <= min(n - 1, f):
        raise DataError(f"number of components must be in [1, {min(n - 1, f)}], got {m}")
    mean = values.mean(axis=0)
    if standardize:
        scale = values.std(axis=0, ddof=1)
        const = np.flatnonzero(scale <= 1e-12 * np.maximum(1.0, np.abs(mean)))
        if len(const):
            raise DataError(f"constant features cannot be standardized: columns {const.tolist()}")
    else:
        scale = np.ones(f)
    xs = (values - mean) / scale
    _, s, vt = np.linalg.svd(xs, full_matrices=False)
    comps = _fix_signs(vt[:m])
    ev = s[:m] ** 2 / (n - 1)
    return PcaBasis(mean, scale, comps, ev)


# --------------------------------------------------------------------------
# Probabilistic PCA
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PpcaFit:
    W: np.ndarray  # F x k
    noise_var: float
    mean: np.ndarray
    log_likelihood: float
    n_samples: int

    @property
    def k(self) -> int:
        return self.W.shape[1]

    def covariance(self) -> np.ndarray:
        return self.W @ self.W.T + self.noise_var * np.eye(self.W.shape[0])

    @property
    def n_parameters(self) -> int:
        f, k = self.W.shape
        return f * k - k * (k - 1) // 2 + 1 + f

    @property
    def bic(self) -> float:
        return -2.0 * self.log_likelihood + self.n_parameters * np.log(self.n_samples)


def gaussian_loglik(values: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Sum of multivariate normal log densities, via a Cholesky factor."""
    x = np.asarray(values, dtype=float) - mean
    n, f = x.shape
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericalError("covariance is not positive definite") from None
    z = np.linalg.solve(L, x.T)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (n * (f * LOG_2PI + logdet) + np.sum(z * z)))


def ppca_fit(values: np.ndarray, k: int) -> PpcaFit:
    """Maximum-likelihood probabilistic PCA (closed form, Tipping & Bishop).

    The noise variance is the mean of the discarded covariance eigenvalues
    and ``W = U_k (L_k - s2 I)^{1/2}``, with columns signed so that their
    largest-magnitude entry is positive.
    """
    values = np.asarray(values, dtype=float)
    n, f = values.shape
    if not 1 <= k < f:
        raise DataError(f"latent dimension must satisfy 1 <= k < F={f}, got {k}")
    if n <= k:
        raise DataError(f"need more samples than latent dimensions (N={n}, k={k})")
    mean = values.mean(axis=0)
    xc = values - mean
    S = xc.T @ xc / n
    evals, evecs = np.linalg.eigh(S)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    noise_var = float(np.mean(evals[k:]))
    if not noise_var > 0:
        raise NumericalError("noise variance is zero; data lie in a k-dimensional subspace")
    W = evecs[:, :k] * np.sqrt(np.maximum(evals[:k] - noise_var, 0.0))
    W = _fix_signs(W.T).T
    C = W @ W.T + noise_var * np.eye(f)
    ll = gaussian_loglik(values, mean, C)
    return PpcaFit(W, noise_var, mean, ll, n)


def ppca_select_k(values: np.ndarray, candidates: Sequence[int]) -> tuple[int, dict[int, float]]:
    """Pick the latent dimension with the lowest BIC."""
    if not candidates:
        raise DataError("empty candidate list")
    table = {int(k): ppca_fit(values, int(k)).bic for k in candidates}
    best = min(table, key=lambda k: (table[k], k))
    return best, table


# --------------------------------------------------------------------------
# Rank statistics
# --------------------------------------------------------------------------


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman's rho: Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("spearman needs two vectors of equal length")
    if len(x) < 3:
        raise DataError("spearman needs at least 3 observations")
    rx = sps.rankdata(x) - (len(x) + 1) / 2.0
    ry = sps.rankdata(y) - (len(y) + 1) / 2.0
    sxx, syy = rx @ rx, ry @ ry
    if sxx == 0 or syy == 0:
        raise DataError("spearman is undefined for constant input")
    return float(np.clip((rx @ ry) / np.sqrt(sxx * syy), -1.0, 1.0))


class WilcoxonResult(NamedTuple):
    statistic: float  # sum of ranks of positive differences
    pvalue: float


def _signed_rank_inputs(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if d.ndim != 1:
        raise DataError("wilcoxon needs paired vectors")
    d = d[d != 0]
    if len(d) == 0:
        raise DataError("all paired differences are zero")
    if len(d) < 5:
        raise DataError(f"wilcoxon needs at least 5 nonzero differences, got {len(d)}")
    return d, sps.rankdata(np.abs(d))


def signed_rank_null_counts(ranks: np.ndarray) -> np.ndarray:
    """Counts of sign assignments per value of twice the positive rank sum."""
    r2 = np.rint(2.0 * np.asarray(ranks)).astype(np.int64)
    counts = np.zeros(int(r2.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in r2:
        shifted = counts[:-r].copy()
        counts[r:] += shifted
    return counts


def _exact_p(w: float, ranks: np.ndarray) -> float:
    counts = signed_rank_null_counts(ranks)
    w2 = int(round(2.0 * w))
    lower = int(counts[: w2 + 1].sum())
    upper = int(counts[w2:].sum())
    return min(1.0, 2.0 * min(lower, upper) / 2.0 ** len(ranks))


def _normal_p(w: float, ranks: np.ndarray) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, t = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(t**3 - t) / 48.0
    z = max(abs(w - mean) - 0.5, 0.0) / np.sqrt(var)
    return float(min(1.0, 2.0 * sps.norm.sf(z)))


def wilcoxon_signed_rank(a: np.ndarray, b: np.ndarray, method: str = "auto") -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test of paired samples.

    Zero differences are dropped. ``method="auto"`` uses the exact null
    distribution for up to 25 pairs and the normal approximation (with
    continuity and tie correction) above.
    """
    d, ranks = _signed_rank_inputs(a, b)
    w = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if len(d) <= 25 else "approx"
    if method == "exact":
        return WilcoxonResult(w, _exact_p(w, ranks))
    if method == "approx":
        return WilcoxonResult(w, _normal_p(w, ranks))
    raise ValueError(f"unknown method {method!r}")
