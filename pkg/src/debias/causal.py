"""Causal versus confounded: compare code lengths of two factorizations of
P(X, Y).

Causal model (Bayesian linear regression)::

    X ~ N(0, sx^2 I),  w ~ N(0, sw^2 I),  Y | X, w ~ N(X w, sy^2 I)

Confounded model (probabilistic PCA on [X, Y])::

    Z ~ N(0, sz^2 I_k),  [W, w_y] ~ N(0, sw^2 I),
    X | Z ~ N(Z W, sx^2 I),  Y | Z ~ N(Z w_y, sy^2)

Code lengths are negative log marginal likelihoods (nats) with half-normal
hyperpriors on sx, sy, sz and sw fixed. ``delta = L_co - L_ca``; positive
values favour the causal model.

Evidence computation
--------------------
* causal: the regression evidence is Gaussian in closed form for fixed
  scales; the remaining one-dimensional integrals over sx and sy are done
  by adaptive quadrature in log-scale.
* confounded: Z is integrated analytically, so rows of [X, Y] are
  N(0, V'V + diag(sx^2, ..., sy^2)) with V = sz [W, w_y]. The half-normal
  mixture over sz gives p(V) in closed form (modified Bessel function).
  V is reduced to the upper-trapezoidal factor R of its QR decomposition,
  which removes the rotational non-identifiability, and the remaining
  integral is estimated by importance sampling. The proposal is a mixture
  of multivariate t components around the posterior mode (located by
  optimisation started from the PPCA maximum-likelihood solution), widened
  for the log-scale tails and refined by a few adaptive pilot rounds.
* naive Monte Carlo over the prior is available for both models as an
  independent check.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from scipy import integrate, linalg, optimize, special
from scipy import stats as sps

from . import stats
from .core import ConfigError, DataError, NumericalError, derive_seed

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MIN_ESS = 100.0
METHODS = ("analytic", "quadrature", "importance", "naive_mc")


@dataclass(frozen=True)
class Priors:
    sigma_w: float = 1.0
    sigma_x_scale: float = 1.0  # half-normal scales
    sigma_y_scale: float = 1.0
    sigma_z_scale: float = 1.0


@dataclass(frozen=True, eq=False)
class CausalProblem:
    """An (X, Y) pair; both are standardized (mean 0, sd 1) on construction
    unless ``standardize=False``."""

    X: np.ndarray
    Y: np.ndarray
    k: int = 1
    priors: Priors = Priors()
    standardize: bool = True

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise DataError(f"X {X.shape} and Y {Y.shape} disagree on N")
        n, p = X.shape
        if not n > p:
            raise DataError(f"need N > p (N={n}, p={p})")
        if self.k < 1 or not n > self.k:
            raise DataError(f"need k >= 1 and N > k (N={n}, k={self.k})")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise DataError("X and Y must be finite")
        if self.standardize:
            xs, ys = X.std(axis=0), Y.std()
            if np.any(xs == 0) or ys == 0:
                raise DataError("constant column in X or Y")
            X = (X - X.mean(axis=0)) / xs
            Y = (Y - Y.mean()) / ys
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def joint(self) -> np.ndarray:
        return np.column_stack([self.X, self.Y])

    def with_k(self, k: int) -> CausalProblem:
        return CausalProblem(self.X, self.Y, k, self.priors, standardize=False)


@dataclass(frozen=True)
class EvidenceEstimate:
    log_ml: float  # natural log marginal likelihood
    mc_std_error: float  # standard error of log_ml, nats
    n_samples: int
    method: str
    ess: float | None = None

    @property
    def code_length(self) -> float:
        return -self.log_ml

    def to_dict(self) -> dict[str, Any]:
        return {
            "log_ml": self.log_ml,
            "code_length": self.code_length,
            "mc_std_error": self.mc_std_error,
            "n_samples": self.n_samples,
            "method": self.method,
            "ess": self.ess,
        }


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------


def _log_halfnormal(sigma: np.ndarray | float, scale: float) -> np.ndarray | float:
    return 0.5 * math.log(2.0 / math.pi) - math.log(scale) - 0.5 * (np.asarray(sigma) / scale) ** 2


def _log_integrate(logf, x0: float) -> tuple[float, float]:
    """log of the integral over the real line of exp(logf(u)); returns (value, error in nats).

    ``logf`` must be unimodal-ish; the peak is located first and the
    integrand is rescaled so quad works on O(1) values.
    """
    res = optimize.minimize_scalar(lambda u: -logf(u), bracket=(x0 - 1.0, x0 + 1.0))
    u0 = float(res.x)
    f0 = float(logf(u0))
    if not np.isfinite(f0):
        raise NumericalError("integrand is not finite at its mode")
    h = 1e-4
    curv = -(logf(u0 + h) - 2 * f0 + logf(u0 - h)) / h**2
    width = 1.0 / math.sqrt(curv) if curv > 0 else 1.0
    lo, hi = u0 - 40.0 * width, u0 + 40.0 * width
    g = lambda u: math.exp(min(logf(u) - f0, 700.0))  # noqa: E731
    val, err = integrate.quad(g, lo, hi, points=[u0], epsabs=0.0, epsrel=1e-10, limit=200)
    if not (val > 0 and np.isfinite(val)):
        raise NumericalError("quadrature failed")
    tail = g(lo) + g(hi)
    if tail > 1e-12:
        raise NumericalError("quadrature window does not contain the integrand mass")
    return f0 + math.log(val), err / val


def _log_mean_exp(logw: np.ndarray) -> tuple[float, float, float]:
    """log of the mean of exp(logw), its standard error in nats, and the ESS."""
    logw = np.asarray(logw, dtype=float)
    finite = np.isfinite(logw)
    if not finite.any():
        raise NumericalError("all log weights are non-finite")
    m = np.max(logw[finite])
    w = np.where(finite, np.exp(logw - m), 0.0)
    mean = w.mean()
    se = w.std(ddof=1) / (math.sqrt(len(w)) * mean)
    ess = w.sum() ** 2 / np.sum(w**2)
    return float(m + math.log(mean)), float(se), float(ess)


# --------------------------------------------------------------------------
# Causal model
# --------------------------------------------------------------------------


def _log_px_given_sigma(sigma: np.ndarray | float, ss: float, m: int) -> np.ndarray | float:
    s2 = np.asarray(sigma) ** 2
    return -0.5 * m * (LOG_2PI + np.log(s2)) - 0.5 * ss / s2


class _RegressionStats:
    """Sufficient statistics of Y | X for the Gaussian-prior regression."""

    def __init__(self, X: np.ndarray, Y: np.ndarray):
        self.N, self.p = X.shape
        U, s, _ = np.linalg.svd(X, full_matrices=False)
        self.s2 = s**2
        self.c2 = (U.T @ Y) ** 2
        self.yy = float(Y @ Y)
        self.resid = max(self.yy - float(self.c2.sum()), 0.0)
        self.XtX = X.T @ X
        self.XtY = X.T @ Y

    def log_evidence(self, sigma_y: float, sigma_w: float) -> float:
        """log N(Y; 0, sw^2 X X' + sy^2 I)."""
        sy2 = sigma_y**2
        lam = sigma_w**2 * self.s2 + sy2
        logdet = np.sum(np.log(lam)) + (self.N - len(lam)) * math.log(sy2)
        quad = np.sum(self.c2 / lam) + self.resid / sy2
        return float(-0.5 * (self.N * LOG_2PI + logdet + quad))


def evidence_causal(
    problem: CausalProblem,
    sigma_x: float | None = None,
    sigma_y: float | None = None,
) -> EvidenceEstimate:
    """Log evidence of the causal factorization, log P(X) + log P(Y | X).

    With both ``sigma_x`` and ``sigma_y`` given the result is exact
    (method ``analytic``); otherwise the free scales are integrated over
    their half-normal hyperpriors by quadrature.
    """
    pr = problem.priors
    X, Y = problem.X, problem.Y
    m = X.size
    ss = float(np.sum(X * X))
    reg = _RegressionStats(X, Y)
    err = 0.0

    if sigma_x is not None:
        lpx = float(_log_px_given_sigma(sigma_x, ss, m))
    else:
        f = lambda u: float(  # noqa: E731
            _log_px_given_sigma(math.exp(u), ss, m) + _log_halfnormal(math.exp(u), pr.sigma_x_scale) + u
        )
        lpx, e = _log_integrate(f, 0.5 * math.log(max(ss / m, 1e-12)))
        err += e

    if sigma_y is not None:
        lpy = reg.log_evidence(sigma_y, pr.sigma_w)
    else:
        f = lambda u: reg.log_evidence(math.exp(u), pr.sigma_w) + float(  # noqa: E731
            _log_halfnormal(math.exp(u), pr.sigma_y_scale)
        ) + u
        start = 0.5 * math.log(max(reg.resid / max(reg.N - reg.p, 1), 1e-8))
        lpy, e = _log_integrate(f, start)
        err += e

    total = lpx + lpy
    if not np.isfinite(total):
        raise NumericalError("non-finite causal evidence")
    method = "analytic" if sigma_x is not None and sigma_y is not None else "quadrature"
    return EvidenceEstimate(total, err, 0, method)


def evidence_causal_naive(
    problem: CausalProblem,
    n_samples: int = 1_000_000,
    seed: int = 0,
    sigma_x: float | None = None,
    sigma_y: float | None = None,
    chunk: int = 200_000,
) -> EvidenceEstimate:
    """Naive Monte Carlo over prior draws of (sx, w, sy); the independent check."""
    pr = problem.priors
    X, Y = problem.X, problem.Y
    n, p = X.shape
    ss = float(np.sum(X * X))
    XtX, XtY, yy = X.T @ X, X.T @ Y, float(Y @ Y)
    rng = np.random.default_rng(seed)
    lx: list[np.ndarray] = []
    ly: list[np.ndarray] = []
    for start in range(0, n_samples, chunk):
        b = min(chunk, n_samples - start)
        if sigma_x is None:
            sx = np.abs(rng.normal(0.0, pr.sigma_x_scale, b))
            lx.append(_log_px_given_sigma(sx, ss, X.size))
        w = rng.normal(0.0, pr.sigma_w, (b, p))
        sy = np.full(b, sigma_y) if sigma_y is not None else np.abs(rng.normal(0.0, pr.sigma_y_scale, b))
        rss = yy - 2.0 * w @ XtY + np.einsum("bi,ij,bj->b", w, XtX, w)
        ly.append(-0.5 * n * (LOG_2PI + np.log(sy**2)) - 0.5 * rss / sy**2)
    if sigma_x is None:
        lpx, se_x, _ = _log_mean_exp(np.concatenate(lx))
    else:
        lpx, se_x = float(_log_px_given_sigma(sigma_x, ss, X.size)), 0.0
    lpy, se_y, ess = _log_mean_exp(np.concatenate(ly))
    return EvidenceEstimate(lpx + lpy, math.hypot(se_x, se_y), n_samples, "naive_mc", ess)


# --------------------------------------------------------------------------
# Confounded model
# --------------------------------------------------------------------------


def _batched_loglik(V: np.ndarray, noise: np.ndarray, scatter: np.ndarray, n: int) -> np.ndarray:
    """sum_j log N(row_j; 0, V'V + diag(noise)) for a batch.

    V: (B, k, d), noise: (B, d) variances, scatter: sum of row outer products.
    A batched Cholesky of the d x d covariance is used; the Woodbury form
    cancels catastrophically when the noise variance is tiny relative to V.
    """
    B, k, d = V.shape
    out = np.empty(B)
    step = max(1, 2_000_000 // (d * d))
    for s in range(0, B, step):
        v, nz = V[s : s + step], noise[s : s + step]
        Cm = np.swapaxes(v, 1, 2) @ v
        Cm[:, np.arange(d), np.arange(d)] += nz
        try:
            L = np.linalg.cholesky(Cm)
        except np.linalg.LinAlgError:
            out[s : s + step] = [_single_loglik(c, scatter, n) for c in Cm]
            continue
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
        Linv = np.linalg.inv(L)
        trace = np.einsum("bij,jk,bik->b", Linv, scatter, Linv)
        out[s : s + step] = -0.5 * (n * d * LOG_2PI + n * logdet + trace)
    return out


def _single_loglik(Cm: np.ndarray, scatter: np.ndarray, n: int) -> float:
    try:
        L = np.linalg.cholesky(Cm)
    except np.linalg.LinAlgError:
        return -np.inf
    Linv = np.linalg.inv(L)
    d = len(Cm)
    return float(-0.5 * (n * d * LOG_2PI + 2.0 * n * np.sum(np.log(np.diag(L))) + np.sum((Linv @ scatter) * Linv)))


def log_loading_prior(r: np.ndarray, dim: int, sigma_w: float, sigma_z_scale: float) -> np.ndarray:
    """log density of V = sz W (``dim`` entries) at Frobenius norm ``r``, with
    W ~ N(0, sw^2 I) and sz ~ half-normal(sigma_z_scale) integrated out."""
    r = np.asarray(r, dtype=float)
    a = r**2 / (2.0 * sigma_w**2)
    g = 1.0 / (2.0 * sigma_z_scale**2)
    nu = 0.5 * (dim - 1)
    x = 2.0 * np.sqrt(a * g)
    with np.errstate(divide="ignore"):
        logk = np.log(special.kve(nu, x)) - x
    return (
        -0.5 * dim * math.log(2.0 * math.pi * sigma_w**2)
        + 0.5 * math.log(2.0 / math.pi)
        - math.log(sigma_z_scale)
        - 0.5 * nu * np.log(a / g)
        + logk
    )


def _log_orthogonal_volume(k: int) -> float:
    """log of the Haar volume of O(k) in the normalisation that makes the
    QR change of variables exact (Muirhead, Thm 2.1.15)."""
    return k * math.log(2.0) + 0.5 * k * k * math.log(math.pi) - float(special.multigammaln(0.5 * k, k))


class _ConfoundedPosterior:
    """Unnormalised posterior of the confounded model in an unconstrained
    parameterisation theta = (log R_ii, R_ij for j > i, log sx, log sy).

    Columns of [X, Y] are permuted (pivoted QR of the PPCA loadings) so the
    diagonal of R stays away from zero.
    """

    def __init__(self, problem: CausalProblem):
        self.problem = problem
        self.k = k = problem.k
        D = problem.joint
        self.n, self.d = D.shape
        d = self.d
        if k >= d:
            raise DataError(f"latent dimension k={k} must be below the number of columns {d}")
        fit = stats.ppca_fit(D, k)
        V0 = fit.W.T  # k x d
        _, R0, perm = linalg.qr(V0, pivoting=True, mode="economic")
        self.perm = np.asarray(perm)
        self.y_col = int(np.flatnonzero(self.perm == d - 1)[0])
        Dp = D[:, self.perm]
        self.scatter = Dp.T @ Dp
        self.upper = [(i, j) for i in range(k) for j in range(i + 1, d)]
        self.dim = k + len(self.upper) + 2
        self.log_const = _log_orthogonal_volume(k)
        signs = np.sign(np.diag(R0))
        signs[signs == 0] = 1.0
        R0 = R0 * signs[:, None]
        diag = np.maximum(np.abs(np.diag(R0)), 1e-3)
        s0 = math.sqrt(max(fit.noise_var, 1e-6))
        self.theta0 = np.concatenate(
            [np.log(diag), [R0[i, j] for i, j in self.upper], [math.log(s0), math.log(s0)]]
        )

    def unpack(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """theta (B, dim) -> R (B, k, d), noise variances (B, d), log-Jacobian (B,)."""
        theta = np.atleast_2d(theta)
        B, k, d = theta.shape[0], self.k, self.d
        R = np.zeros((B, k, d))
        rho = theta[:, :k]
        R[:, np.arange(k), np.arange(k)] = np.exp(rho)
        if self.upper:
            ii, jj = zip(*self.upper)
            R[:, list(ii), list(jj)] = theta[:, k : k + len(self.upper)]
        log_sx, log_sy = theta[:, -2], theta[:, -1]
        noise = np.repeat(np.exp(2.0 * log_sx)[:, None], d, axis=1)
        noise[:, self.y_col] = np.exp(2.0 * log_sy)
        # dR/drho and the QR Jacobian prod R_ii^(k - i), i = 1..k
        logjac = np.sum(rho * (1.0 + (k - 1 - np.arange(k))), axis=1)
        return R, noise, logjac

    def log_prior(self, theta: np.ndarray) -> np.ndarray:
        """Prior density of theta, Jacobians included."""
        pr = self.problem.priors
        theta = np.atleast_2d(theta)
        R, _, logjac = self.unpack(theta)
        r = np.sqrt(np.sum(R**2, axis=(1, 2)))
        lp = log_loading_prior(r, self.k * self.d, pr.sigma_w, pr.sigma_z_scale)
        sx, sy = np.exp(theta[:, -2]), np.exp(theta[:, -1])
        lh = _log_halfnormal(sx, pr.sigma_x_scale) + theta[:, -2] + _log_halfnormal(sy, pr.sigma_y_scale) + theta[:, -1]
        out = lp + lh + logjac + self.log_const
        return np.where(np.isfinite(out), out, -np.inf)

    def log_density(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        R, noise, _ = self.unpack(theta)
        out = _batched_loglik(R, noise, self.scatter, self.n) + self.log_prior(theta)
        return np.where(np.isfinite(out), out, -np.inf)

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Prior draws mapped to theta through the QR factorisation."""
        pr = self.problem.priors
        k = self.k
        sz = np.abs(rng.normal(0.0, pr.sigma_z_scale, n))
        V = sz[:, None, None] * rng.normal(0.0, pr.sigma_w, (n, k, self.d))
        Q, R1 = np.linalg.qr(V[:, :, :k])
        signs = np.sign(np.diagonal(R1, axis1=1, axis2=2))
        signs[signs == 0] = 1.0
        Q = Q * signs[:, None, :]
        R = np.swapaxes(Q, 1, 2) @ V
        diag = np.abs(np.diagonal(R, axis1=1, axis2=2))
        cols = [R[:, i, j] for i, j in self.upper]
        sx = np.abs(rng.normal(0.0, pr.sigma_x_scale, n))
        sy = np.abs(rng.normal(0.0, pr.sigma_y_scale, n))
        return np.column_stack([np.log(diag), *cols, np.log(sx), np.log(sy)])

    def mode(self) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mode and the inverse Hessian of -log density there."""
        f = lambda t: -float(self.log_density(t)[0])  # noqa: E731
        res = optimize.minimize(f, self.theta0, method="BFGS", options={"gtol": 1e-6, "maxiter": 2000})
        x = res.x
        H = _numerical_hessian(f, x)
        try:
            cov = np.linalg.inv(0.5 * (H + H.T))
        except np.linalg.LinAlgError:
            cov = np.asarray(res.hess_inv)
        return x, _positive_definite(cov)


def _positive_definite(cov: np.ndarray, floor: float = 1e-6, cap: float = 1e2) -> np.ndarray:
    """Symmetrize and clip eigenvalues into [floor, cap]."""
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if np.any(vals <= floor):
        log.debug("clipping %d non-positive curvature directions", int(np.sum(vals <= floor)))
    vals = np.clip(vals, floor, cap)
    return (vecs * vals) @ vecs.T


def _numerical_hessian(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    n = len(x)
    H = np.empty((n, n))
    f0 = f(x)
    E = np.eye(n) * h
    for i in range(n):
        for j in range(i, n):
            if i == j:
                H[i, i] = (f(x + E[i]) - 2 * f0 + f(x - E[i])) / h**2
            else:
                H[i, j] = H[j, i] = (
                    f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j])
                ) / (4 * h**2)
    return H


class _Proposal:
    """Deterministic mixture of multivariate t components plus a share of
    prior draws; the prior share guarantees no region of prior support is
    left uncovered."""

    def __init__(self, posterior: _ConfoundedPosterior, components: Sequence[tuple[float, np.ndarray, np.ndarray]],
                 df: float, prior_share: float):
        self.posterior = posterior
        total = sum(w for w, _, _ in components)
        self.weights = [(1.0 - prior_share) * w / total for w, _, _ in components]
        self.ts = [sps.multivariate_t(loc=m, shape=c, df=df) for _, m, c in components]
        self.prior_share = prior_share

    def log_pdf(self, theta: np.ndarray) -> np.ndarray:
        n = len(theta)
        terms = [math.log(w) + np.asarray(t.logpdf(theta)).reshape(n) for w, t in zip(self.weights, self.ts)]
        if self.prior_share > 0:
            terms.append(math.log(self.prior_share) + self.posterior.log_prior(theta))
        return special.logsumexp(np.vstack(terms), axis=0)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        shares = [*self.weights, self.prior_share]
        counts = np.floor(np.array(shares) * n).astype(int)
        counts[0] += n - counts.sum()
        parts = [t.rvs(size=c, random_state=rng).reshape(c, -1) for t, c in zip(self.ts, counts) if c > 0]
        if counts[-1] > 0:
            parts.append(self.posterior.sample_prior(int(counts[-1]), rng))
        x = np.vstack(parts)
        return x, self.log_pdf(x)


def _ess(logw: np.ndarray) -> float:
    w = np.exp(logw - np.max(logw))
    return float(w.sum() ** 2 / np.sum(w**2))


def _temper(logw: np.ndarray, min_ess: float) -> np.ndarray:
    """Raise degenerate weights to the largest power that keeps the
    effective sample size at ``min_ess`` (bisection on the exponent)."""
    logw = np.where(np.isfinite(logw), logw, -np.inf)
    if _ess(logw) >= min_ess:
        return logw
    lo, hi = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _ess(mid * logw) >= min_ess:
            lo = mid
        else:
            hi = mid
    return lo * logw


def _mixture_fit(
    theta: np.ndarray, logw: np.ndarray, min_ess: float, n_components: int, rng: np.random.Generator
) -> list[tuple[float, np.ndarray, np.ndarray]]:
    """Gaussian mixture fitted to a weighted resample of ``theta``.

    Tempering keeps a degenerate weight vector from collapsing the fit onto a
    handful of draws; several components let the proposal follow curved or
    multimodal posteriors that one moment-matched ellipsoid cannot.
    """
    from sklearn.mixture import GaussianMixture

    logw = _temper(logw, min_ess)
    w = np.exp(logw - np.max(logw))
    w /= w.sum()
    # systematic resampling
    positions = (rng.random() + np.arange(len(w))) / len(w)
    idx = np.minimum(np.searchsorted(np.cumsum(w), positions), len(w) - 1)
    sample = theta[idx]
    n_distinct = len(np.unique(idx))
    n_components = max(1, min(n_components, n_distinct // (2 * theta.shape[1])))
    gm = GaussianMixture(
        n_components, covariance_type="full", reg_covar=1e-6, n_init=1,
        random_state=int(rng.integers(2**31)),
    ).fit(sample)
    return [(float(pi), mu, _positive_definite(c)) for pi, mu, c in zip(gm.weights_, gm.means_, gm.covariances_)]


class ConfoundedEvidence:
    """Reusable importance sampler for one problem.

    Construction locates the posterior mode (BFGS from the PPCA solution)
    and places multivariate t components there, scaled by the inverse
    Hessian and by 4 and 16 times it (the noise scales can have long,
    exponentially decaying tails towards zero). Each of ``adapt_rounds``
    rounds then adds t components fitted to all pilot draws collected so
    far, weighted against the mixture as it currently stands; earlier components are kept,
    so adaptation can only add coverage. Each :meth:`estimate` call draws a
    fresh, independently seeded sample.
    """

    def __init__(
        self,
        problem: CausalProblem,
        df: float = 5.0,
        prior_share: float = 0.1,
        adapt_rounds: int = 3,
        pilot_size: int = 10_000,
        mixture_size: int = 1,
    ):
        self.posterior = _ConfoundedPosterior(problem)
        center, cov = self.posterior.mode()
        # Log-scale coordinates (the k log-diagonals of R first, log sigma_x
        # and log sigma_y last) get their own wide, decoupled component: when
        # a factor is superfluous or a column is reproduced almost exactly,
        # the density in that coordinate keeps an exponential tail towards
        # minus infinity that the Laplace width never reaches.
        k = problem.k
        logs = np.r_[np.arange(k), center.size - 2, center.size - 1]
        tails = 4.0 * cov
        tails[logs, :] = 0.0
        tails[:, logs] = 0.0
        tails[logs, logs] = np.maximum(np.diag(cov)[logs], 1.0)
        laplace = [
            (1.0, center, cov), (0.5, center, 4.0 * cov), (0.25, center, 16.0 * cov), (0.5, center, tails),
        ]
        self.proposal = _Proposal(self.posterior, laplace, df, prior_share)
        rng = np.random.default_rng(derive_seed(0, "proposal-adaptation"))
        components = list(laplace)
        pool, log_target = np.empty((0, center.size)), np.empty(0)
        min_ess = max(4.0 * center.size, 0.02 * pilot_size)
        for _ in range(adapt_rounds):
            theta, _ = self.proposal.sample(pilot_size, rng)
            pool = np.vstack([pool, theta])
            log_target = np.concatenate([log_target, self.posterior.log_density(theta)])
            # every draw so far is reweighted against the current mixture
            fit = _mixture_fit(pool, log_target - self.proposal.log_pdf(pool), min_ess, mixture_size, rng)
            components.extend((3.0 * pi, mu, cov) for pi, mu, cov in fit)
            self.proposal = _Proposal(self.posterior, components, df, prior_share)

    def estimate(
        self, n_samples: int = 50_000, seed: int = 0, chunk: int = 50_000, max_rounds: int = 8
    ) -> EvidenceEstimate:
        """Importance-sampling estimate from ``n_samples`` fresh draws.

        If the effective sample size is below the acceptance floor, further
        blocks of ``n_samples`` draws from the same stream are appended, up to
        ``max_rounds`` blocks in total, before the estimate is rejected. The
        reported ``n_samples`` is the number actually drawn.
        """
        rng = np.random.default_rng(seed)
        logw: list[np.ndarray] = []
        for _ in range(max_rounds):
            for start in range(0, n_samples, chunk):
                theta, logq = self.proposal.sample(min(chunk, n_samples - start), rng)
                logw.append(self.posterior.log_density(theta) - logq)
            lm, se, ess = _log_mean_exp(np.concatenate(logw))
            if ess >= MIN_ESS:
                break
            log.debug("effective sample size %.1f below %.0f; drawing another block", ess, MIN_ESS)
        drawn = sum(len(w) for w in logw)
        if ess < MIN_ESS:
            raise NumericalError(
                f"importance sampling effective sample size {ess:.1f} < {MIN_ESS:.0f} after {drawn} draws"
            )
        if not np.isfinite(lm):
            raise NumericalError("non-finite confounded evidence")
        return EvidenceEstimate(lm, se, drawn, "importance", ess)


def evidence_confounded(problem: CausalProblem, n_samples: int = 50_000, seed: int = 0) -> EvidenceEstimate:
    """Log evidence of the confounded factorization by importance sampling."""
    return ConfoundedEvidence(problem).estimate(n_samples, seed)


def evidence_confounded_naive(
    problem: CausalProblem, n_samples: int = 1_000_000, seed: int = 0, chunk: int = 100_000
) -> EvidenceEstimate:
    """Naive Monte Carlo over prior draws of (sz, W, w_y, sx, sy)."""
    pr = problem.priors
    D = problem.joint
    n, d = D.shape
    k = problem.k
    scatter = D.T @ D
    rng = np.random.default_rng(seed)
    out = []
    for start in range(0, n_samples, chunk):
        b = min(chunk, n_samples - start)
        sz = np.abs(rng.normal(0.0, pr.sigma_z_scale, b))
        V = sz[:, None, None] * rng.normal(0.0, pr.sigma_w, (b, k, d))
        sx = np.abs(rng.normal(0.0, pr.sigma_x_scale, b))
        sy = np.abs(rng.normal(0.0, pr.sigma_y_scale, b))
        noise = np.repeat((sx**2)[:, None], d, axis=1)
        noise[:, -1] = sy**2
        out.append(_batched_loglik(V, noise, scatter, n))
    lm, se, ess = _log_mean_exp(np.concatenate(out))
    return EvidenceEstimate(lm, se, n_samples, "naive_mc", ess)


# --------------------------------------------------------------------------
# Delta and reports
# --------------------------------------------------------------------------


def format_interval(median: float, low: float, high: float, decimals: int = 3) -> str:
    """``'-1.571 [-1.572; -1.570]'`` style: median followed by [min; max]."""
    f = f"{{:.{decimals}f}}"
    return f"{f.format(median)} [{f.format(low)}; {f.format(high)}]"


def format_count(x: float) -> str:
    """Integer with thousands separators, e.g. ``-1,456``."""
    return f"{int(round(x)):,}"


@dataclass(frozen=True)
class DeltaResult:
    L_ca: EvidenceEstimate
    L_co: EvidenceEstimate
    N: int
    repetitions: tuple[float, ...] = ()
    L_co_repetitions: tuple[float, ...] = ()
    k_table: dict[int, float] | None = field(default=None)

    @property
    def delta(self) -> float:
        return self.L_co.code_length - self.L_ca.code_length

    @property
    def delta_normalized(self) -> float:
        return self.delta / self.N

    @property
    def median(self) -> float:
        return float(np.median(self.repetitions)) if self.repetitions else self.delta

    @property
    def min(self) -> float:
        return float(np.min(self.repetitions)) if self.repetitions else self.delta

    @property
    def max(self) -> float:
        return float(np.max(self.repetitions)) if self.repetitions else self.delta

    def interval(self, normalized: bool = True, decimals: int = 3) -> str:
        s = 1.0 / self.N if normalized else 1.0
        return format_interval(self.median * s, self.min * s, self.max * s, decimals)

    @classmethod
    def from_code_lengths(
        cls, L_ca: float | Sequence[float], L_co: float | Sequence[float], N: int
    ) -> DeltaResult:
        """Build a result from reported code lengths (per repetition when sequences)."""
        ca = np.atleast_1d(np.asarray(L_ca, dtype=float))
        co = np.atleast_1d(np.asarray(L_co, dtype=float))
        if len(ca) == 1:
            ca = np.repeat(ca, len(co))
        if len(ca) != len(co):
            raise ConfigError("L_ca and L_co need the same number of repetitions")
        reps = tuple(float(v) for v in co - ca)
        return cls(
            EvidenceEstimate(-float(np.median(ca)), 0.0, 0, "analytic"),
            EvidenceEstimate(-float(np.median(co)), 0.0, 0, "analytic"),
            int(N),
            reps if len(reps) > 1 else (),
            tuple(float(v) for v in co) if len(co) > 1 else (),
        )

    def to_dict(self) -> dict[str, Any]:
        out = {
            "N": self.N,
            "L_ca": self.L_ca.code_length,
            "L_co": self.L_co.code_length,
            "delta": self.delta,
            "delta_normalized": self.delta_normalized,
            "repetitions": list(self.repetitions),
            "L_co_repetitions": list(self.L_co_repetitions),
            "median": self.median,
            "range": [self.min, self.max],
            "interval_normalized": self.interval(normalized=True),
            "method": {"L_ca": self.L_ca.method, "L_co": self.L_co.method},
            "mc_std_error": {"L_ca": self.L_ca.mc_std_error, "L_co": self.L_co.mc_std_error},
            "ess": self.L_co.ess,
        }
        if self.k_table is not None:
            out["k_table"] = {str(k): v for k, v in sorted(self.k_table.items())}
        return out

    def summary_row(self, configuration: str) -> dict[str, Any]:
        """One CSV row: medians of L_ca, L_co and delta plus the delta range."""
        return {
            "configuration": configuration,
            "N": self.N,
            "L_ca_median": self.L_ca.code_length,
            "L_co_median": self.L_co.code_length,
            "delta_median": self.median,
            "delta_min": self.min,
            "delta_max": self.max,
            "delta_normalized_median": self.median / self.N,
            "delta_normalized_interval": self.interval(normalized=True),
        }


def delta(
    problem: CausalProblem,
    repetitions: int = 10,
    seed: int = 0,
    n_samples: int = 50_000,
) -> DeltaResult:
    """Delta = L_co - L_ca over ``repetitions`` independent importance samples.

    ``L_co`` of the result is the median over repetitions; L_ca is exact up
    to quadrature error, so the reported delta equals the median delta.
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    ca = evidence_causal(problem)
    sampler = ConfoundedEvidence(problem)
    runs = [sampler.estimate(n_samples, derive_seed(seed, f"repetition:{r}")) for r in range(repetitions)]
    co_vals = np.array([e.code_length for e in runs])
    mid = int(np.argsort(co_vals)[(len(runs) - 1) // 2])
    med = float(np.median(co_vals))
    co = replace(runs[mid], log_ml=-med, mc_std_error=float(np.median([e.mc_std_error for e in runs])))
    reps = tuple(float(v - ca.code_length) for v in co_vals)
    return DeltaResult(ca, co, problem.N, reps, tuple(float(v) for v in co_vals))


def select_k(
    problem: CausalProblem,
    k_candidates: Sequence[int],
    n_samples: int = 50_000,
    seed: int = 0,
) -> tuple[int, dict[int, float]]:
    """Latent dimension with the shortest confounded code length."""
    if not k_candidates:
        raise ConfigError("empty candidate list")
    table: dict[int, float] = {}
    for k in k_candidates:
        est = evidence_confounded(problem.with_k(int(k)), n_samples, derive_seed(seed, f"k:{k}"))
        table[int(k)] = est.code_length
    best = min(table, key=lambda k: (table[k], k))
    return best, table
