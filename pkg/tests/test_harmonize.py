import dataclasses
import hashlib

import numpy as np
import pytest

from debias import harmonize as hz
from debias.core import CovariateSpec, DataError, FeatureTable
from debias.synth import GenerativeSpec, generate

AGE = CovariateSpec(("age",))


def two_group_table(n=500, seed=0):
    """Y = 1 + 2 [group b] + 0.5 age + eps, one feature."""
    rng = np.random.default_rng(seed)
    group = np.repeat(["a", "b"], n // 2)
    age = rng.uniform(20, 80, n)
    y = 1 + 2.0 * (group == "b") + 0.5 * age + rng.normal(size=n)
    return FeatureTable([f"s{i}" for i in range(n)], group, y[:, None], ("f",), {"age": age})


def site_table(n=200, groups=4, features=8, scale=(0.5, 2.0), seed=0, age_linear=0.3):
    spec = GenerativeSpec(n_groups=groups, subjects_per_group=n, n_features=features, site_location_sd=1.0,
                          site_scale_range=scale, age_linear=age_linear, seed=seed)
    return generate(spec)


class TestZScore:
    def test_small_example(self):
        t = FeatureTable(["a", "b", "c"], ["g"] * 3, [[1.0], [2.0], [3.0]], ("f",))
        out = hz.apply(hz.fit_zscore(t), t)
        assert out.values[:, 0] == pytest.approx([-1.0, 0.0, 1.0])

    def test_single_subject_group(self):
        t = FeatureTable(["a", "b", "c"], ["g", "g", "h"], [[1.0], [2.0], [3.0]], ("f",))
        with pytest.raises(DataError):
            hz.fit_zscore(t)


class TestLinear:
    def test_planted_site_effect(self):
        t = two_group_table()
        m = hz.fit_linear(t, spec=AGE)
        assert m.gamma[0, 0] == 0.0
        assert abs(m.gamma[1, 0] - 2.0) <= 3 * np.sqrt(1 / 250 + 1 / 250)
        assert m.beta[0, 0] == pytest.approx(0.5, abs=0.01)
        out = hz.apply(m, t).values[:, 0] - 0.5 * t.covariates["age"]
        a, b = out[t.group == "a"], out[t.group == "b"]
        assert abs(a.mean() - b.mean()) < 4 * np.sqrt(a.var() / len(a) + b.var() / len(b))

    def test_empty_spec_is_mean_subtraction(self):
        table, _ = site_table(n=30, seed=1)
        lin = hz.fit_linear(table)
        z = hz.fit_zscore(table)
        assert np.allclose(lin.gamma, z.mean - z.mean[0], atol=1e-10)

    def test_remove_constant_within_group_is_error(self):
        table, _ = site_table(n=20, groups=3, seed=2)
        mf = {"site00": "GE", "site01": "Siemens", "site02": "GE"}
        t = table.with_covariates(manufacturer=np.array([mf[g] for g in table.group]))
        with pytest.raises(DataError, match="manufacturer"):
            hz.fit_linear(t, spec=CovariateSpec((), ("manufacturer",)))

    def test_update_keeps_keep_effects(self):
        # Y = 10 and gamma = 3 give 7 whatever the age
        n = 6
        t = FeatureTable([str(i) for i in range(n)], ["a"] * 3 + ["b"] * 3, np.full((n, 1), 10.0), ("f",),
                         {"age": np.array([20.0, 40, 60, 25, 45, 70])})
        m = hz.fit_linear(two_group_table(), spec=AGE)
        m = dataclasses.replace(m, gamma=np.array([[0.0], [3.0]]))
        assert hz.apply(m, t).values[3:, 0] == pytest.approx([7.0, 7.0, 7.0])


class TestCombat:
    def test_variances_equalize(self):
        # site effects only, so the retained age term does not add sampling noise
        table, truth = site_table(scale=(0.5, 2.0), seed=3, age_linear=0.0)
        assert truth.delta_true.max() / truth.delta_true.min() > 2
        out = hz.apply(hz.fit_combat(table, spec=AGE), table)
        for f in range(table.n_features):
            v = [out.values[out.group == g, f].var(ddof=1) for g in table.group_levels()]
            assert max(v) / min(v) <= 1.2

    def test_single_group_identity(self):
        table, _ = site_table(n=50, groups=1, seed=4)
        out = hz.apply(hz.fit_combat(table, spec=AGE), table)
        assert np.max(np.abs(out.values - table.values)) <= 1e-8

    def test_shrinkage_stronger_for_small_groups(self):
        gaps = []
        for n in (5, 500):
            table, _ = site_table(n=n, features=20, scale=(1.0, 1.0), seed=5)
            m = hz.fit_combat(table)
            gaps.append(np.abs(m.gamma_star - m.gamma_hat).mean())
            assert m.iterations >= 1
        assert gaps[0] > gaps[1]

    def test_shrinkage_weights_grow_with_n(self):
        small = hz.fit_combat(site_table(n=5, features=20, seed=6)[0])
        large = hz.fit_combat(site_table(n=500, features=20, seed=6)[0])
        assert small.shrinkage_weights.mean() < large.shrinkage_weights.mean()
        assert np.all((large.shrinkage_weights > 0) & (large.shrinkage_weights <= 1))

    def test_update_algebra(self):
        # Y = 10, alpha = 4, beta'k = 1, gamma* = 2, delta* = 2 -> 6.5
        table = two_group_table(n=10)
        m = hz.fit_combat(table, spec=AGE, eb=False)
        K, _ = m.designs(table)
        m = dataclasses.replace(
            m, alpha=np.array([4.0]), beta=np.array([[1.0 / K[0, 0]]]), scale=np.array([1.0]),
            gamma_star=np.array([[2.0], [2.0]]), delta_star=np.array([[2.0], [2.0]]),
        )
        t = table.with_values(np.full((10, 1), 10.0))
        assert hz.apply(m, t).values[0, 0] == pytest.approx(6.5, abs=1e-12)

    def test_no_eb_no_scale_nests_linear(self):
        table, _ = site_table(n=40, seed=7)
        com = hz.fit_combat(table, spec=AGE, eb=False, adjust_scale=False)
        lin = hz.fit_linear(table, spec=AGE)
        diff = hz.apply(com, table).values - hz.apply(lin, table).values
        # the difference is the per-feature re-centering alpha_combat - alpha_reference
        assert np.allclose(diff, com.alpha - lin.alpha, atol=1e-8)

    def test_no_eb_equalizes_exactly(self):
        table, _ = site_table(n=30, seed=8)
        m = hz.fit_combat(table, eb=False)
        out = hz.apply(m, table)
        sds = np.array([out.values[out.group == g].std(axis=0, ddof=1) for g in table.group_levels()])
        assert np.allclose(sds, sds[0], rtol=1e-10)
        means = np.array([out.values[out.group == g].mean(axis=0) for g in table.group_levels()])
        assert np.allclose(means, means[0], atol=1e-10)

    def test_group_means_agree(self):
        table, _ = site_table(seed=9)
        out = hz.apply(hz.fit_combat(table, spec=AGE), table)
        a = out.values[out.group == "site00"]
        b = out.values[out.group == "site01"]
        t = (a.mean(0) - b.mean(0)) / np.sqrt(a.var(0, ddof=1) / len(a) + b.var(0, ddof=1) / len(b))
        assert np.all(np.abs(t) < 4)

    def test_near_idempotent(self):
        # the posterior-mode scale is biased by O(1/n), hence the large groups
        table, _ = site_table(n=10_000, groups=2, features=6, seed=10)
        once = hz.apply(hz.fit_combat(table, spec=AGE), table)
        twice = hz.apply(hz.fit_combat(once, spec=AGE), once)
        sd = once.values.std(axis=0)
        assert np.max(np.abs(twice.values - once.values) / sd) < 1e-3

    def test_shape_and_covariates_preserved(self):
        table, _ = site_table(n=20, seed=11)
        out = hz.apply(hz.fit_combat(table, spec=AGE), table)
        assert out.values.shape == table.values.shape
        assert all(np.array_equal(out.covariates[k], table.covariates[k]) for k in table.covariates)
        assert np.array_equal(out.subject_id, table.subject_id)


class TestCombatPP:
    def test_zero_pcs_is_combat(self):
        table, _ = site_table(n=30, seed=12)
        a = hz.apply(hz.fit_combatpp(table, spec=AGE, n_pcs=0), table)
        b = hz.apply(hz.fit_combat(table, spec=AGE), table)
        assert np.max(np.abs(a.values - b.values)) <= 1e-10

    def test_pc_scores_subtracted(self):
        table, _ = site_table(n=60, seed=13)
        m = hz.fit_combatpp(table, spec=AGE, n_pcs=2)
        assert m.zeta.shape == (2, table.n_features)
        basis = hz.substitute_confounders(table, 2)
        assert np.allclose(m.pca_basis.transform(table.values), basis.transform(table.values))

    def test_precomputed_basis_reused(self):
        table, _ = site_table(n=60, seed=14)
        basis = hz.substitute_confounders(table, 1)
        half = table.take(np.arange(0, table.n_subjects, 2))
        m = hz.fit_combatpp(half, n_pcs=1, pca_basis=basis)
        assert m.pca_basis is basis

    def test_too_many_pcs(self):
        table, _ = site_table(n=20, features=3, seed=15)
        with pytest.raises(DataError):
            hz.fit_combatpp(table, n_pcs=5)


class TestApplyAndPersistence:
    @pytest.mark.parametrize("family", hz.FAMILIES)
    def test_apply_deterministic(self, family):
        table, _ = site_table(n=25, seed=16)
        h = hz.Harmonizer(family, AGE if family != "zscore" else CovariateSpec())
        m = h.fit(table)
        assert np.array_equal(hz.apply(m, table).values, hz.apply(m, table).values)

    @pytest.mark.parametrize("family", hz.FAMILIES)
    def test_round_trip_and_hash(self, tmp_path, family):
        table, _ = site_table(n=25, seed=17)
        m = hz.Harmonizer(family, AGE if family != "zscore" else CovariateSpec()).fit(table)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        hz.save_model(m, p1)
        hz.save_model(m, p2)
        assert hashlib.sha256(p1.read_bytes()).digest() == hashlib.sha256(p2.read_bytes()).digest()
        back = hz.load_model(p1)
        assert np.max(np.abs(hz.apply(back, table).values - hz.apply(m, table).values)) <= 1e-12

    def test_wrong_family(self, tmp_path):
        table, _ = site_table(n=10, seed=18)
        hz.save_model(hz.fit_zscore(table), tmp_path / "z.json")
        with pytest.raises(hz.ModelFormatError):
            hz.load_model(tmp_path / "z.json", family="combat")

    def test_corrupted_file(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(hz.ModelFormatError):
            hz.load_model(p)

    def test_unseen_group_policy(self):
        table, _ = site_table(n=20, groups=3, seed=19)
        train = table.take(np.flatnonzero(table.group != "site02"))
        m = hz.fit_combat(train)
        with pytest.raises(DataError, match="site02"):
            hz.apply(m, table)
        out = hz.apply(m, table, unseen="passthrough")
        rows = table.group == "site02"
        assert np.array_equal(out.values[rows], table.values[rows])
