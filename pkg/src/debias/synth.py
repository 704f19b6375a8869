"""Synthetic multi-site tables and causal pairs with known ground truth.

Every feature is generated as

    Y_ijf = alpha_f + gamma_if + beta_f' k_j + L_f' z_j + delta_if * eps_ijf

with additive site effects ``gamma``, multiplicative site effects ``delta``,
keep covariates ``k`` (age terms, sex) and an optional latent factor ``z``
whose distribution can differ between sites. The site-free version of each
feature (``delta = 1``, ``gamma = 0``) is retained as ``clean_values``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .core import ConfigError, FeatureTable, derive_seed

# Dataset sizes from the 17-study pool (ABCD and UKB downsampled).
POOLED_STUDY_SIZES: dict[str, int] = {
    "ABCD": 1570,
    "ABIDE_I": 1095,
    "ABIDE_II": 1032,
    "ADHD200": 965,
    "ADNI": 1682,
    "AIBL": 262,
    "COBRE": 146,
    "CORR": 1476,
    "GSP": 1563,
    "HBN": 689,
    "HCP": 1113,
    "IXI": 561,
    "MCIC": 194,
    "NKI": 624,
    "OASIS": 415,
    "PPMI": 390,
    "UKB": 1474,
}

MANUFACTURERS = ("GE", "Philips", "Siemens")
FIELD_STRENGTHS = ("1.5T", "3T")
REGIMES = ("causal", "confounded", "mixed")


def _per_feature(v: float | Sequence[float], n: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.ndim != 1 or len(arr) > n:
        raise ConfigError(f"{name}: expected a scalar or at most {n} per-feature values")
    out = np.zeros(n)
    out[: len(arr)] = arr
    return out


@dataclass(frozen=True)
class GenerativeSpec:
    """Recipe for :func:`generate`.

    Age effects act on ``t = (age - age_center) / 10`` (decades) as
    ``age_linear * t + age_quadratic * t**2``. Scalars apply to every
    feature, sequences to the leading features (the rest get zero).
    ``causal_weight`` weights the site-free features in the optional
    ``outcome`` covariate.
    """

    n_groups: int = 10
    subjects_per_group: int | tuple[int, ...] = 200
    n_features: int = 30
    site_location_sd: float = 1.0
    site_scale_range: tuple[float, float] = (0.5, 2.0)
    intercept_sd: float = 1.0
    age_range: tuple[float, float] = (20.0, 80.0)
    age_windows: tuple[tuple[float, float], ...] | None = None
    age_center: float = 50.0
    age_linear: float | tuple[float, ...] = 0.0
    age_quadratic: float | tuple[float, ...] = 0.0
    sex_effect: float | tuple[float, ...] = 0.0
    latent_dims: int = 0
    loading_sd: float = 1.0
    site_latent_shift_sd: float = 0.0
    site_latent_scale_range: tuple[float, float] = (1.0, 1.0)
    latent_affects_y: bool = False
    outcome_latent_weight: float = 1.0
    causal_weight: float | tuple[float, ...] = 0.0
    outcome: bool = False
    outcome_noise_sd: float = 1.0
    noise_sd: float = 1.0
    icv_scaling: bool = False
    group_names: tuple[str, ...] | None = None
    regime: str = "mixed"
    seed: int = 0

    def __post_init__(self) -> None:
        for key in ("subjects_per_group", "site_scale_range", "age_range", "site_latent_scale_range", "group_names"):
            v = getattr(self, key)
            if isinstance(v, list):
                object.__setattr__(self, key, tuple(v))
        for key in ("age_linear", "age_quadratic", "sex_effect", "causal_weight"):
            v = getattr(self, key)
            if isinstance(v, list):
                object.__setattr__(self, key, tuple(float(x) for x in v))
        if self.age_windows is not None:
            object.__setattr__(self, "age_windows", tuple(tuple(map(float, w)) for w in self.age_windows))
        self.validate()

    def validate(self) -> None:
        if self.n_groups < 1 or self.n_features < 1:
            raise ConfigError("n_groups and n_features must be positive")
        if any(n < 2 for n in self.sizes):
            raise ConfigError("subjects_per_group must be >= 2")
        lo, hi = self.site_scale_range
        if not 0 < lo <= hi:
            raise ConfigError("site_scale_range must be strictly positive and ordered")
        lo, hi = self.site_latent_scale_range
        if not 0 < lo <= hi:
            raise ConfigError("site_latent_scale_range must be strictly positive and ordered")
        if self.age_windows is not None and len(self.age_windows) != self.n_groups:
            raise ConfigError("age_windows needs one (low, high) pair per group")
        if self.group_names is not None and len(set(self.group_names)) != self.n_groups:
            raise ConfigError("group_names needs n_groups distinct names")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        w = _per_feature(self.causal_weight, self.n_features, "causal_weight")
        if self.regime == "confounded" and np.any(w != 0):
            raise ConfigError("confounded regime requires causal_weight = 0")
        if self.regime == "causal" and self.latent_affects_y:
            raise ConfigError("causal regime requires latent_affects_y = false")
        if self.latent_affects_y and self.latent_dims < 1:
            raise ConfigError("latent_affects_y requires latent_dims >= 1")

    @property
    def sizes(self) -> tuple[int, ...]:
        s = self.subjects_per_group
        if isinstance(s, (int, np.integer)):
            return (int(s),) * self.n_groups
        if len(s) != self.n_groups:
            raise ConfigError("subjects_per_group list must have n_groups entries")
        return tuple(int(v) for v in s)

    @property
    def names(self) -> tuple[str, ...]:
        if self.group_names is not None:
            return tuple(self.group_names)
        width = max(2, len(str(self.n_groups - 1)))
        return tuple(f"site{i:0{width}d}" for i in range(self.n_groups))

    @classmethod
    def from_mapping(cls, m: Mapping[str, Any]) -> GenerativeSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(m) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**dict(m))

    def to_mapping(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if isinstance(v, tuple):
                v = [list(x) if isinstance(x, tuple) else x for x in v]
            out[k] = v
        return out


@dataclass(frozen=True, eq=False)
class GroundTruth:
    alpha: np.ndarray  # F
    gamma_true: np.ndarray  # G x F, size-weighted mean zero per feature
    delta_true: np.ndarray  # G x F
    beta_true: np.ndarray  # F x 3: age linear, age quadratic, sex
    latent_scores: np.ndarray  # N x k
    latent_loadings: np.ndarray  # F x k
    w_true: np.ndarray
    regime: str
    clean_values: np.ndarray  # features without site effects
    unscaled_values: np.ndarray  # features before icv scaling
    w_y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    W_true: np.ndarray | None = None


def generate(spec: GenerativeSpec) -> tuple[FeatureTable, GroundTruth]:
    """Sample a multi-site table; fully determined by ``spec.seed``."""
    spec.validate()
    G, F, k = spec.n_groups, spec.n_features, spec.latent_dims
    sizes = np.array(spec.sizes)
    names = spec.names
    prng = np.random.default_rng(derive_seed(spec.seed, "params"))

    alpha = prng.normal(0.0, spec.intercept_sd, F)
    gamma = prng.normal(0.0, spec.site_location_sd, (G, F))
    gamma -= (sizes / sizes.sum()) @ gamma
    lo, hi = spec.site_scale_range
    delta = np.exp(prng.uniform(np.log(lo), np.log(hi), (G, F)))
    beta = np.column_stack(
        [
            _per_feature(spec.age_linear, F, "age_linear"),
            _per_feature(spec.age_quadratic, F, "age_quadratic"),
            _per_feature(spec.sex_effect, F, "sex_effect"),
        ]
    )
    loadings = prng.normal(0.0, spec.loading_sd, (F, k))
    shift = prng.normal(0.0, spec.site_latent_shift_sd, (G, k))
    llo, lhi = spec.site_latent_scale_range
    lscale = np.exp(prng.uniform(np.log(llo), np.log(lhi), G))
    w = _per_feature(spec.causal_weight, F, "causal_weight")
    w_y = np.full(k, spec.outcome_latent_weight) if spec.latent_affects_y else np.zeros(k)
    manufacturer = [MANUFACTURERS[int(prng.integers(len(MANUFACTURERS)))] for _ in range(G)]
    field_strength = [FIELD_STRENGTHS[int(prng.integers(len(FIELD_STRENGTHS)))] for _ in range(G)]

    parts: dict[str, list[np.ndarray]] = {
        key: [] for key in ("sid", "grp", "age", "sex", "z", "clean", "y", "mf", "mfs", "icv", "out")
    }
    for i in range(G):
        rng = np.random.default_rng(derive_seed(spec.seed, f"group:{i}"))
        n = int(sizes[i])
        a_lo, a_hi = spec.age_windows[i] if spec.age_windows is not None else spec.age_range
        age = rng.uniform(a_lo, a_hi, n)
        male = rng.random(n) < 0.5
        z = shift[i] + lscale[i] * rng.standard_normal((n, k))
        eps = rng.normal(0.0, spec.noise_sd, (n, F))
        t = (age - spec.age_center) / 10.0
        kmat = np.column_stack([t, t**2, male.astype(float)])
        signal = alpha + kmat @ beta.T + z @ loadings.T
        clean = signal + eps
        y = signal + gamma[i] + delta[i] * eps
        out = clean @ w + z @ w_y + rng.normal(0.0, spec.outcome_noise_sd, n)
        icv = np.clip(rng.normal(1.5e6, 1.5e5, n), 1.0e6, None)
        parts["sid"].append(np.array([f"{names[i]}-{j:05d}" for j in range(n)], dtype=object))
        parts["grp"].append(np.array([names[i]] * n, dtype=object))
        parts["age"].append(age)
        parts["sex"].append(np.where(male, "M", "F").astype(object))
        parts["z"].append(z)
        parts["clean"].append(clean)
        parts["y"].append(y)
        parts["mf"].append(np.array([manufacturer[i]] * n, dtype=object))
        parts["mfs"].append(np.array([field_strength[i]] * n, dtype=object))
        parts["icv"].append(icv)
        parts["out"].append(out)

    cat = {key: np.concatenate(v) for key, v in parts.items()}
    values = cat["y"]
    covariates: dict[str, np.ndarray] = {
        "age": cat["age"],
        "sex": cat["sex"],
        "manufacturer": cat["mf"],
        "field_strength": cat["mfs"],
    }
    if spec.icv_scaling:
        covariates["icv"] = cat["icv"]
        emitted = values * cat["icv"][:, None]
    else:
        emitted = values
    if spec.outcome:
        covariates["outcome"] = cat["out"]
    width = max(2, len(str(F - 1)))
    table = FeatureTable(
        cat["sid"], cat["grp"], emitted, tuple(f"f{j:0{width}d}" for j in range(F)), covariates
    )
    truth = GroundTruth(
        alpha=alpha,
        gamma_true=gamma,
        delta_true=delta,
        beta_true=beta,
        latent_scores=cat["z"],
        latent_loadings=loadings,
        w_true=w,
        regime=spec.regime,
        clean_values=cat["clean"],
        unscaled_values=values,
        w_y=w_y,
    )
    return table, truth


def pooled_study_spec(scale: float = 0.1, **overrides: Any) -> GenerativeSpec:
    """17 groups with the relative sizes of the pooled studies, scaled by ``scale``."""
    names = tuple(POOLED_STUDY_SIZES)
    sizes = tuple(max(2, int(round(POOLED_STUDY_SIZES[n] * scale))) for n in names)
    return GenerativeSpec(n_groups=len(names), subjects_per_group=sizes, group_names=names, **overrides)


# --------------------------------------------------------------------------
# Causal pairs
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CausalTruth:
    regime: str
    w_true: np.ndarray  # p
    W_true: np.ndarray  # k x p (zeros in the causal regime)
    w_y: np.ndarray  # k
    latent_scores: np.ndarray  # N x k

    @property
    def joint_loading(self) -> np.ndarray:
        """Loading matrix of [X, Y] on the latent factors, shape (p + 1) x k."""
        return np.hstack([self.W_true, self.w_y[:, None]]).T


def generate_causal_pair(
    N: int,
    p: int,
    k: int = 1,
    regime: str = "causal",
    seed: int = 0,
    weight_scale: float = 1.0,
    noise_sd: float = 1.0,
    equal_column_variance: bool = False,
):
    """Draw an (X, Y) problem from a pure causal or pure confounded model.

    causal:      X ~ N(0, I), Y = X w + noise
    confounded:  Z ~ N(0, I_k), X = Z W + noise, Y = Z w_y + noise

    With ``equal_column_variance`` the confounded loadings are rescaled so
    every column of W (and w_y) has norm ``weight_scale``. All observed
    columns then share one variance, so per-column standardization keeps the
    noise isotropic and the data stay inside the confounded model class.

    Returns ``(CausalProblem, CausalTruth)``.
    """
    from .causal import CausalProblem

    if regime not in ("causal", "confounded"):
        raise ConfigError(f"regime must be 'causal' or 'confounded', got {regime!r}")
    if N < 2 or p < 1 or k < 1:
        raise ConfigError("need N >= 2, p >= 1, k >= 1")
    rng = np.random.default_rng(derive_seed(seed, f"causal-pair:{regime}"))
    if regime == "causal":
        X = rng.standard_normal((N, p))
        w = rng.normal(0.0, weight_scale, p)
        Y = X @ w + rng.normal(0.0, noise_sd, N)
        truth = CausalTruth(regime, w, np.zeros((k, p)), np.zeros(k), np.zeros((N, 0)))
    else:
        Z = rng.standard_normal((N, k))
        W = rng.normal(0.0, weight_scale, (k, p))
        w_y = rng.normal(0.0, weight_scale, k)
        if equal_column_variance:
            W *= weight_scale / np.linalg.norm(W, axis=0)
            w_y *= weight_scale / np.linalg.norm(w_y)
        X = Z @ W + rng.normal(0.0, noise_sd, (N, p))
        Y = Z @ w_y + rng.normal(0.0, noise_sd, N)
        truth = CausalTruth(regime, np.zeros(p), W, w_y, Z)
    return CausalProblem(X, Y, k=k), truth
