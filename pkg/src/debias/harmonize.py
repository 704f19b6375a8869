"""Feature-level harmonization across sites.

Families
--------
zscore    per-(group, feature) standardization
linear    Y = alpha + gamma_i + beta'k + zeta'r + eps;        update Y - gamma_i - zeta'r
combat    Y = alpha + gamma_i + beta'k + zeta'r + delta_i eps;
          update (Y - alpha - beta'k - zeta'r - gamma_i) / delta_i + alpha + beta'k
combatpp  combat with principal-component scores of all features appended
          to the remove vector r (substitute confounders)

Location and scale site effects of ComBat are shrunk with the parametric
empirical Bayes scheme of Johnson et al. (2007): a normal prior on the
per-site locations and an inverse-gamma prior on the per-site variances,
both fitted across features by the method of moments.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar

import numpy as np

from . import stats
from .core import (
    ConfigError,
    CovariateSpec,
    DataError,
    DesignMatrix,
    FeatureTable,
    NumericalError,
    build_design,
    dependent_columns,
    dumps_canonical,
)

log = logging.getLogger(__name__)

FAMILIES = ("zscore", "linear", "combat", "combatpp")
MODEL_FILE_VERSION = 1
EB_TOL = 1e-6
EB_MAX_ITER = 100


class ModelFormatError(DataError):
    """Model file has the wrong family, version or structure."""


def _group_index(labels: np.ndarray, levels: tuple[str, ...], unseen: str) -> tuple[np.ndarray, np.ndarray]:
    """Map labels to level indices; returns (index, known-mask)."""
    pos = {g: i for i, g in enumerate(levels)}
    idx = np.array([pos.get(g, -1) for g in labels], dtype=np.intp)
    known = idx >= 0
    if not known.all():
        missing = sorted(set(labels[~known]))
        if unseen == "error":
            raise DataError(f"groups not seen at fit time: {missing}")
        if unseen != "passthrough":
            raise ConfigError(f"unseen-group policy must be 'error' or 'passthrough', got {unseen!r}")
        log.warning("passing through %d rows of unseen groups %s unchanged", int((~known).sum()), missing)
    return idx, known


def _check_features(model: Any, table: FeatureTable) -> None:
    if tuple(table.feature_names) != tuple(model.feature_names):
        raise DataError("table features do not match the fitted model")


def _arr(v: Any) -> np.ndarray:
    return np.asarray(v, dtype=float)


# --------------------------------------------------------------------------
# Z-score
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ZScoreModel:
    family: ClassVar[str] = "zscore"
    group_by: str | None
    group_levels: tuple[str, ...]
    feature_names: tuple[str, ...]
    mean: np.ndarray  # G x F
    sd: np.ndarray  # G x F, sample sd

    def apply(self, table: FeatureTable, unseen: str = "error") -> FeatureTable:
        _check_features(self, table)
        idx, known = _group_index(table.labels(self.group_by), self.group_levels, unseen)
        out = np.array(table.values)
        out[known] = (table.values[known] - self.mean[idx[known]]) / self.sd[idx[known]]
        return table.with_values(out)

    def parameters(self) -> dict[str, Any]:
        return {"mean": self.mean, "sd": self.sd}


def fit_zscore(table: FeatureTable, group_by: str | None = None) -> ZScoreModel:
    labels = table.labels(group_by)
    levels = table.group_levels(group_by)
    mean = np.empty((len(levels), table.n_features))
    sd = np.empty_like(mean)
    for i, g in enumerate(levels):
        block = table.values[labels == g]
        if len(block) < 2:
            raise DataError(f"group {g!r} has fewer than 2 subjects")
        mean[i] = block.mean(axis=0)
        sd[i] = block.std(axis=0, ddof=1)
        zero = np.flatnonzero(sd[i] == 0)
        if len(zero):
            raise DataError(f"zero variance in group {g!r}, feature {table.feature_names[zero[0]]!r}")
    return ZScoreModel(group_by, levels, table.feature_names, mean, sd)


# --------------------------------------------------------------------------
# Regression-based models
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _RegressionModel:
    group_by: str | None
    group_levels: tuple[str, ...]
    feature_names: tuple[str, ...]
    spec: CovariateSpec
    keep_design: DesignMatrix
    remove_design: DesignMatrix
    alpha: np.ndarray  # F
    beta: np.ndarray  # n_keep_columns x F
    zeta: np.ndarray  # n_remove_columns x F
    pca_basis: stats.PcaBasis | None = None

    def designs(self, table: FeatureTable) -> tuple[np.ndarray, np.ndarray]:
        K = self.keep_design.encode(table).values
        scores = None
        if self.spec.n_pcs:
            if self.pca_basis is None:
                raise ModelFormatError("model uses substitute confounders but has no PCA basis")
            scores = self.pca_basis.transform(table.values)[:, : self.spec.n_pcs]
        R = self.remove_design.encode(table, scores).values
        return K, R

    def substitute_scores(self, table: FeatureTable) -> np.ndarray:
        if self.pca_basis is None:
            return np.zeros((table.n_subjects, 0))
        return self.pca_basis.transform(table.values)[:, : self.spec.n_pcs]


def _combined_design(
    table: FeatureTable,
    group_by: str | None,
    spec: CovariateSpec,
    pca_basis: stats.PcaBasis | None,
    reference_coding: bool,
) -> tuple[np.ndarray, list[str], DesignMatrix, DesignMatrix, tuple[str, ...], np.ndarray]:
    """Site block + K + R; site block is [1, dummies] or one-hot by ``reference_coding``."""
    spec.validate(table)
    labels = table.labels(group_by)
    levels = table.group_levels(group_by)
    K, R = build_design(table, spec, pca_basis)
    idx = np.searchsorted(np.array(levels, dtype=object), labels)
    onehot = np.zeros((table.n_subjects, len(levels)))
    onehot[np.arange(table.n_subjects), idx] = 1.0
    gname = group_by or "group"
    if reference_coding:
        site = np.column_stack([np.ones(table.n_subjects), onehot[:, 1:]])
        site_names = ["intercept"] + [f"{gname}[{g}]" for g in levels[1:]]
    else:
        site = onehot
        site_names = [f"{gname}[{g}]" for g in levels]
    X = np.hstack([site, K.values, R.values])
    names = site_names + list(K.columns) + list(R.columns)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        bad = dependent_columns(X, names)
        raise DataError(f"design is rank deficient: {bad} collinear with {gname} or earlier covariates")
    return X, names, K, R, levels, idx


@dataclass(frozen=True, eq=False)
class LinearModel(_RegressionModel):
    """Additive site effects estimated jointly with keep/remove effects by OLS.

    ``gamma[0]`` belongs to the reference (lexicographically smallest) group
    and is exactly zero.
    """

    family: ClassVar[str] = "linear"
    gamma: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # G x F

    def apply(self, table: FeatureTable, unseen: str = "error") -> FeatureTable:
        _check_features(self, table)
        idx, known = _group_index(table.labels(self.group_by), self.group_levels, unseen)
        _, R = self.designs(table)
        out = np.array(table.values)
        out[known] = table.values[known] - self.gamma[idx[known]] - R[known] @ self.zeta
        return table.with_values(out)

    def parameters(self) -> dict[str, Any]:
        return {"alpha": self.alpha, "gamma": self.gamma, "beta": self.beta, "zeta": self.zeta}


def fit_linear(
    table: FeatureTable,
    group_by: str | None = None,
    spec: CovariateSpec = CovariateSpec(),
    pca_basis: stats.PcaBasis | None = None,
) -> LinearModel:
    if spec.n_pcs and pca_basis is None:
        pca_basis = substitute_confounders(table, spec.n_pcs)
    X, _, K, R, levels, _ = _combined_design(table, group_by, spec, pca_basis, reference_coding=True)
    coef, _ = stats.ols_fit(X, table.values)
    G, nk = len(levels), K.n_columns
    gamma = np.vstack([np.zeros((1, table.n_features)), coef[1:G]])
    return LinearModel(
        group_by,
        levels,
        table.feature_names,
        spec,
        K,
        R,
        alpha=coef[0],
        beta=coef[G : G + nk],
        zeta=coef[G + nk :],
        pca_basis=pca_basis if spec.n_pcs else None,
        gamma=gamma,
    )


@dataclass(frozen=True, eq=False)
class CombatModel(_RegressionModel):
    """Location/scale site model with empirical-Bayes shrinkage.

    ``gamma_*`` are in standardized units (divide data-unit effects by
    ``scale``); ``delta_*`` are multiplicative scales, i.e. square roots of
    the per-site variances on the standardized scale.
    """

    family: ClassVar[str] = "combat"
    scale: np.ndarray = field(default_factory=lambda: np.zeros(0))  # pooled residual sd, F
    gamma_hat: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    delta_hat: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    gamma_star: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    delta_star: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    gamma_bar: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tau2: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lambda_: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_per_group: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eb: bool = True
    iterations: int = 0

    @property
    def site_location(self) -> np.ndarray:
        """Shrunk additive site effects in data units."""
        return self.gamma_star * self.scale

    @property
    def shrinkage_weights(self) -> np.ndarray:
        """Weight of the per-site mean in the shrunk location, G x F."""
        n_tau = self.n_per_group[:, None] * self.tau2[:, None]
        return n_tau / (n_tau + self.delta_star**2)

    def standardize(self, table: FeatureTable) -> tuple[np.ndarray, np.ndarray]:
        """Standardized data Z and the keep part alpha + K beta."""
        K, R = self.designs(table)
        kept = self.alpha + K @ self.beta
        return (table.values - kept - R @ self.zeta) / self.scale, kept

    def apply(self, table: FeatureTable, unseen: str = "error") -> FeatureTable:
        _check_features(self, table)
        idx, known = _group_index(table.labels(self.group_by), self.group_levels, unseen)
        Z, kept = self.standardize(table)
        out = np.array(table.values)
        g = idx[known]
        out[known] = self.scale * (Z[known] - self.gamma_star[g]) / self.delta_star[g] + kept[known]
        return table.with_values(out)

    def parameters(self) -> dict[str, Any]:
        return {
            name: getattr(self, name)
            for name in (
                "alpha", "beta", "zeta", "scale", "gamma_hat", "delta_hat", "gamma_star", "delta_star",
                "gamma_bar", "tau2", "lambda_", "theta", "n_per_group", "eb", "iterations",
            )
        }


@dataclass(frozen=True, eq=False)
class CombatPPModel(CombatModel):
    """ComBat whose remove vector includes substitute-confounder scores."""

    family: ClassVar[str] = "combatpp"


def substitute_confounders(table: FeatureTable, m: int) -> stats.PcaBasis:
    """PCA basis over all (standardized) features; its scores are the substitute confounders."""
    return stats.pca_fit(table.values, m, standardize=True)


def _inverse_gamma_moments(d2: np.ndarray) -> tuple[float, float]:
    m = float(np.mean(d2))
    v = float(np.var(d2, ddof=1))
    return (2.0 * v + m**2) / v, (m * v + m**3) / v


def _eb_shrink(
    Z: np.ndarray, g_hat: np.ndarray, d2_hat: np.ndarray, g_bar: float, t2: float, lam: float, the: float
) -> tuple[np.ndarray, np.ndarray, int]:
    """Fixed point of the posterior location mean and variance mode for one site."""
    n = Z.shape[0]
    g_old, d_old = g_hat, d2_hat
    change = np.inf
    for it in range(1, EB_MAX_ITER + 1):
        g_new = (n * t2 * g_hat + d_old * g_bar) / (n * t2 + d_old)
        ss = np.sum((Z - g_new) ** 2, axis=0)
        d_new = (the + 0.5 * ss) / (n / 2.0 + lam + 1.0)  # inverse-gamma posterior mode
        change = max(np.max(np.abs(g_new - g_old)), np.max(np.abs(d_new - d_old)))
        g_old, d_old = g_new, d_new
        if change < EB_TOL:
            return g_new, d_new, it
    raise NumericalError(f"empirical Bayes did not converge in {EB_MAX_ITER} iterations (last change {change:.3g})")


def fit_combat(
    table: FeatureTable,
    group_by: str | None = None,
    spec: CovariateSpec = CovariateSpec(),
    pca_basis: stats.PcaBasis | None = None,
    eb: bool = True,
    adjust_scale: bool = True,
) -> CombatModel:
    """Fit ComBat. With ``eb=False`` the raw per-site estimates are used;
    with ``adjust_scale=False`` the multiplicative effect is fixed to 1."""
    return _fit_combat(CombatModel, table, group_by, spec, pca_basis, eb, adjust_scale)


def fit_combatpp(
    table: FeatureTable,
    group_by: str | None = None,
    spec: CovariateSpec = CovariateSpec(),
    n_pcs: int | None = None,
    pca_basis: stats.PcaBasis | None = None,
    eb: bool = True,
) -> CombatPPModel:
    """ComBat with ``m`` principal-component scores added to the remove vector.

    ``m`` is taken from ``n_pcs``, else from a ``substitute_pc(m)`` token in
    ``spec.remove``, else 1. A precomputed ``pca_basis`` (e.g. fitted on the
    whole data set before splitting) is used when given.
    """
    m = n_pcs if n_pcs is not None else (spec.n_pcs or 1)
    if m < 0:
        raise ConfigError("number of principal components must be >= 0")
    spec = spec.with_pcs(m)
    return _fit_combat(CombatPPModel, table, group_by, spec, pca_basis, eb, True)


def _fit_combat(cls, table, group_by, spec, pca_basis, eb, adjust_scale):
    if spec.n_pcs:
        if pca_basis is None:
            pca_basis = substitute_confounders(table, spec.n_pcs)
    else:
        pca_basis = None
    X, _, K, R, levels, idx = _combined_design(table, group_by, spec, pca_basis, reference_coding=False)
    G, nk, F = len(levels), K.n_columns, table.n_features
    counts = np.bincount(idx, minlength=G)
    small = [levels[i] for i in np.flatnonzero(counts < 2)]
    if small:
        raise DataError(f"groups with fewer than 2 subjects: {small}")
    Y = table.values
    B, resid = stats.ols_fit(X, Y)
    alpha = (counts / counts.sum()) @ B[:G]
    beta = B[G : G + nk]
    zeta = B[G + nk :]
    var_pooled = np.mean(resid**2, axis=0)
    if np.any(var_pooled <= 0):
        bad = table.feature_names[int(np.argmin(var_pooled))]
        raise NumericalError(f"zero pooled residual variance for feature {bad!r}")
    scale = np.sqrt(var_pooled)
    Z = (Y - alpha - K.values @ beta - R.values @ zeta) / scale

    g_hat = np.vstack([Z[idx == i].mean(axis=0) for i in range(G)])
    d2_hat = np.vstack([Z[idx == i].var(axis=0, ddof=1) for i in range(G)])
    g_star, d2_star = g_hat.copy(), d2_hat.copy()
    g_bar = np.zeros(G)
    tau2 = np.zeros(G)
    lam = np.full(G, np.nan)
    the = np.full(G, np.nan)
    iterations = 0

    if G == 1:
        # one site: location and scale are absorbed by alpha and the pooled sd
        g_star = np.zeros((1, F))
        d2_star = np.ones((1, F))
    elif eb and F >= 2:
        for i in range(G):
            g_bar[i] = g_hat[i].mean()
            tau2[i] = g_hat[i].var(ddof=1)
            if np.var(d2_hat[i], ddof=1) <= 0 or tau2[i] <= 0:
                raise NumericalError(f"degenerate empirical Bayes prior for group {levels[i]!r}")
            lam[i], the[i] = _inverse_gamma_moments(d2_hat[i])
            g_star[i], d2_star[i], it = _eb_shrink(
                Z[idx == i], g_hat[i], d2_hat[i], g_bar[i], tau2[i], lam[i], the[i]
            )
            iterations = max(iterations, it)
    else:
        if eb:
            log.warning("empirical Bayes needs at least two features; using unshrunk estimates")
        eb = False
    if not adjust_scale:
        d2_star = np.ones_like(d2_star)

    return cls(
        group_by,
        levels,
        table.feature_names,
        spec,
        K,
        R,
        alpha=alpha,
        beta=beta,
        zeta=zeta,
        pca_basis=pca_basis,
        scale=scale,
        gamma_hat=g_hat,
        delta_hat=np.sqrt(d2_hat),
        gamma_star=g_star,
        delta_star=np.sqrt(d2_star),
        gamma_bar=g_bar,
        tau2=tau2,
        lambda_=lam,
        theta=the,
        n_per_group=counts.astype(float),
        eb=bool(eb),
        iterations=iterations,
    )


# --------------------------------------------------------------------------
# Generic entry points
# --------------------------------------------------------------------------

Model = ZScoreModel | LinearModel | CombatModel | CombatPPModel
_CLASSES: dict[str, type] = {
    "zscore": ZScoreModel,
    "linear": LinearModel,
    "combat": CombatModel,
    "combatpp": CombatPPModel,
}


@dataclass(frozen=True)
class Harmonizer:
    """A harmonization recipe that can be fitted to any table."""

    family: str
    spec: CovariateSpec = CovariateSpec()
    group_by: str | None = None
    n_pcs: int | None = None

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")

    @property
    def uses_pcs(self) -> bool:
        if self.family == "combatpp":
            return (self.n_pcs if self.n_pcs is not None else (self.spec.n_pcs or 1)) > 0
        return self.family in ("linear", "combat") and self.spec.n_pcs > 0

    @property
    def n_components(self) -> int:
        if self.family == "combatpp":
            return self.n_pcs if self.n_pcs is not None else (self.spec.n_pcs or 1)
        return self.spec.n_pcs

    def fit(self, table: FeatureTable, pca_basis: stats.PcaBasis | None = None) -> Model:
        return fit(table, self.family, self.group_by, self.spec, n_pcs=self.n_pcs, pca_basis=pca_basis)


def fit(
    table: FeatureTable,
    family: str,
    group_by: str | None = None,
    spec: CovariateSpec = CovariateSpec(),
    n_pcs: int | None = None,
    pca_basis: stats.PcaBasis | None = None,
) -> Model:
    if family == "zscore":
        return fit_zscore(table, group_by)
    if family == "linear":
        return fit_linear(table, group_by, spec, pca_basis)
    if family == "combat":
        return fit_combat(table, group_by, spec, pca_basis)
    if family == "combatpp":
        return fit_combatpp(table, group_by, spec, n_pcs, pca_basis)
    raise ConfigError(f"family must be one of {FAMILIES}, got {family!r}")


def apply(model: Model, table: FeatureTable, unseen: str = "error") -> FeatureTable:
    return model.apply(table, unseen=unseen)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def model_to_dict(model: Model) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "family": model.family,
        "version": MODEL_FILE_VERSION,
        "group_by": model.group_by,
        "group_levels": list(model.group_levels),
        "feature_names": list(model.feature_names),
        "parameters": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in model.parameters().items()},
    }
    if isinstance(model, _RegressionModel):
        doc["spec"] = model.spec.to_dict()
        doc["keep_design"] = model.keep_design.to_recipe()
        doc["remove_design"] = model.remove_design.to_recipe()
        if model.pca_basis is not None:
            doc["pca_basis"] = model.pca_basis.to_dict()
    return doc


def save_model(model: Model, path: str | Path) -> None:
    doc = model_to_dict(model)
    # NaN hyperparameters (no EB) are stored as null
    params = doc["parameters"]
    for key in ("lambda_", "theta"):
        if key in params:
            params[key] = [None if (v is None or not np.isfinite(v)) else v for v in params[key]]
    Path(path).write_text(dumps_canonical(doc) + "\n", encoding="utf-8")


def _matrix(v: Any, rows: int, cols: int) -> np.ndarray:
    return _arr(v).reshape(rows, cols)


def model_from_dict(doc: dict[str, Any], family: str | None = None) -> Model:
    try:
        fam = doc["family"]
        version = doc["version"]
    except (KeyError, TypeError):
        raise ModelFormatError("not a model document (missing family/version)") from None
    if version != MODEL_FILE_VERSION:
        raise ModelFormatError(f"model file version {version} != supported {MODEL_FILE_VERSION}")
    if fam not in _CLASSES:
        raise ModelFormatError(f"unknown model family {fam!r}")
    if family is not None and fam != family:
        raise ModelFormatError(f"expected a {family!r} model, file holds {fam!r}")
    try:
        levels = tuple(doc["group_levels"])
        feats = tuple(doc["feature_names"])
        p = doc["parameters"]
        G, F = len(levels), len(feats)
        if fam == "zscore":
            return ZScoreModel(doc["group_by"], levels, feats, _matrix(p["mean"], G, F), _matrix(p["sd"], G, F))
        spec = CovariateSpec.from_dict(doc["spec"])
        K = DesignMatrix.from_recipe(doc["keep_design"])
        R = DesignMatrix.from_recipe(doc["remove_design"])
        basis = stats.PcaBasis.from_dict(doc["pca_basis"]) if "pca_basis" in doc else None
        common = dict(
            group_by=doc["group_by"],
            group_levels=levels,
            feature_names=feats,
            spec=spec,
            keep_design=K,
            remove_design=R,
            alpha=_arr(p["alpha"]).reshape(F),
            beta=_matrix(p["beta"], K.n_columns, F),
            zeta=_matrix(p["zeta"], R.n_columns, F),
            pca_basis=basis,
        )
        if fam == "linear":
            return LinearModel(**common, gamma=_matrix(p["gamma"], G, F))
        nan_none = lambda v: np.array([np.nan if x is None else x for x in v], dtype=float)  # noqa: E731
        return _CLASSES[fam](
            **common,
            scale=_arr(p["scale"]).reshape(F),
            gamma_hat=_matrix(p["gamma_hat"], G, F),
            delta_hat=_matrix(p["delta_hat"], G, F),
            gamma_star=_matrix(p["gamma_star"], G, F),
            delta_star=_matrix(p["delta_star"], G, F),
            gamma_bar=_arr(p["gamma_bar"]).reshape(G),
            tau2=_arr(p["tau2"]).reshape(G),
            lambda_=nan_none(p["lambda_"]),
            theta=nan_none(p["theta"]),
            n_per_group=_arr(p["n_per_group"]).reshape(G),
            eb=bool(p["eb"]),
            iterations=int(p["iterations"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"corrupted {fam} model: {e}") from None


def load_model(path: str | Path, family: str | None = None) -> Model:
    """Load a model file; pass ``family`` to insist on a particular model type."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not valid JSON ({e})") from None
    return model_from_dict(doc, family)

