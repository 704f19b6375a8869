import numpy as np
import pytest
from scipy import linalg

from debias import stats
from debias.core import ConfigError
from debias.harmonize import fit_zscore
from debias.synth import GenerativeSpec, generate, generate_causal_pair, pooled_study_spec


def test_null_model_is_iid():
    spec = GenerativeSpec(n_groups=4, subjects_per_group=500, n_features=3, site_location_sd=0.0,
                          site_scale_range=(1.0, 1.0), seed=1)
    table, truth = generate(spec)
    means = fit_zscore(table).mean
    assert np.allclose(means, truth.alpha, atol=0.2)
    assert np.allclose(table.values.std(axis=0), 1.0, atol=0.05)


def test_same_seed_bit_identical():
    a, _ = generate(GenerativeSpec(n_features=4, subjects_per_group=20, seed=9))
    b, _ = generate(GenerativeSpec(n_features=4, subjects_per_group=20, seed=9))
    c, _ = generate(GenerativeSpec(n_features=4, subjects_per_group=20, seed=10))
    assert np.array_equal(a.values, b.values) and not np.array_equal(a.values, c.values)


def test_sample_scale_matches_delta():
    # no covariate or latent signal: within-group sd is delta * noise_sd
    spec = GenerativeSpec(n_groups=6, subjects_per_group=200, n_features=10, noise_sd=0.7, seed=2)
    table, truth = generate(spec)
    for i, g in enumerate(table.group_levels()):
        sd = table.values[table.group == g].std(axis=0, ddof=1)
        ratio = sd / (truth.delta_true[i] * spec.noise_sd)
        assert np.all((ratio > 0.8) & (ratio < 1.25))


def test_gamma_centred_and_shapes():
    spec = pooled_study_spec(0.05, n_features=7, latent_dims=2)
    table, truth = generate(spec)
    sizes = np.array(spec.sizes)
    assert truth.gamma_true.shape == truth.delta_true.shape == (17, 7)
    assert np.allclose(sizes @ truth.gamma_true, 0.0, atol=1e-9)
    assert truth.latent_scores.shape == (table.n_subjects, 2)
    assert table.drop_report is None


def test_age_windows():
    spec = GenerativeSpec(n_groups=2, subjects_per_group=50, n_features=1, age_windows=((20, 30), (60, 70)))
    table, _ = generate(spec)
    age = table.covariates["age"]
    assert age[table.group == "site00"].max() <= 30 and age[table.group == "site01"].min() >= 60


def test_regime_flags():
    with pytest.raises(ConfigError):
        GenerativeSpec(regime="confounded", causal_weight=0.5)
    with pytest.raises(ConfigError):
        GenerativeSpec(regime="causal", latent_dims=1, latent_affects_y=True)
    with pytest.raises(ConfigError):
        GenerativeSpec(site_scale_range=(0.0, 1.0))
    with pytest.raises(ConfigError):
        GenerativeSpec.from_mapping({"n_groups": 2, "bogus": 1})


def test_confounded_outcome_has_spurious_association():
    spec = GenerativeSpec(n_groups=3, subjects_per_group=300, n_features=5, latent_dims=1,
                          latent_affects_y=True, outcome=True, regime="confounded", site_location_sd=0.0,
                          site_scale_range=(1.0, 1.0), seed=3)
    table, truth = generate(spec)
    assert np.all(truth.w_true == 0)
    X = np.column_stack([np.ones(table.n_subjects), table.values])
    y = table.covariates["outcome"]
    coef, _ = stats.ols_fit(X, y)
    assert np.corrcoef(X @ coef, y)[0, 1] > 0.3


def test_causal_pair_ols_recovery():
    problem, truth = generate_causal_pair(1000, 3, regime="causal", seed=4)
    coef, res = stats.ols_fit(problem.X, problem.Y)
    se = np.sqrt(np.diag(np.linalg.inv(problem.X.T @ problem.X)) * res.var(ddof=3))
    # standardization rescales w by one common factor (sd of Y); X columns are
    # N(0, 1) already, so each coefficient must match c * w within 3 SE
    c = coef @ truth.w_true / (truth.w_true @ truth.w_true)
    assert np.all(np.abs(coef - c * truth.w_true) <= 3 * se)


def test_causal_pair_confounded_loading_direction():
    problem, truth = generate_causal_pair(2000, 4, 1, "confounded", seed=5, equal_column_variance=True)
    fit = stats.ppca_fit(problem.joint, 1)
    assert linalg.subspace_angles(fit.W, truth.joint_loading)[0] < 0.1


def test_independent_pair():
    problem, _ = generate_causal_pair(1000, 1, regime="causal", seed=6, weight_scale=0.0)
    assert abs(np.corrcoef(problem.X[:, 0], problem.Y)[0, 1]) < 0.1


def test_equal_column_variance():
    problem, truth = generate_causal_pair(50, 5, 2, "confounded", seed=1, equal_column_variance=True)
    assert np.allclose(np.linalg.norm(truth.W_true, axis=0), 1.0)
    assert np.linalg.norm(truth.w_y) == pytest.approx(1.0)
