import numpy as np
import pytest

from debias import classify
from debias.core import CovariateSpec, DataError, FeatureTable
from debias.harmonize import Harmonizer
from debias.synth import GenerativeSpec, generate


def gaussian_groups(n_per, shifts, features=5, seed=0):
    rng = np.random.default_rng(seed)
    vals, groups = [], []
    for i, s in enumerate(shifts):
        vals.append(rng.normal(s, 1.0, (n_per, features)))
        groups += [f"g{i}"] * n_per
    n = n_per * len(shifts)
    return FeatureTable([f"s{j}" for j in range(n)], groups, np.vstack(vals), tuple(f"f{j}" for j in range(features)))


def test_separable_groups():
    table = gaussian_groups(100, [-5.0, 5.0])
    r = classify.name_that_dataset(table, n_trees=50, seed=1)
    assert r.accuracy >= 0.99


def test_shuffled_labels_at_chance():
    table = gaussian_groups(150, [-1.0, 0.0, 1.0, 2.0], seed=2)
    accs = [classify.name_that_dataset(table, n_trees=50, seed=s, shuffle_labels=True).accuracy for s in range(5)]
    assert abs(np.mean(accs) - 0.25) <= 0.05


def test_same_seed_same_predictions():
    table = gaussian_groups(50, [0.0, 0.5], seed=3)
    a = classify.fit_classifier(table, n_trees=30, seed=7).predict(table)
    b = classify.fit_classifier(table, n_trees=30, seed=7).predict(table)
    assert np.array_equal(a, b)


def test_confusion_rows_match_test_counts():
    table = gaussian_groups(40, [0.0, 1.0, 2.0], seed=4)
    r = classify.name_that_dataset(table, n_trees=20, fraction=0.5)
    assert r.confusion.counts.sum(axis=1).tolist() == [20, 20, 20]
    assert r.accuracy == np.trace(r.confusion.counts) / r.confusion.counts.sum()


def test_duplicated_feature_keeps_training_fit():
    table = gaussian_groups(60, [0.0, 0.7], features=3, seed=5)
    dup = FeatureTable(table.subject_id, table.group, np.column_stack([table.values, table.values[:, 0]]),
                       ("f0", "f1", "f2", "f0b"))
    base = np.mean(classify.fit_classifier(table, n_trees=200).predict(table) == table.group)
    more = np.mean(classify.fit_classifier(dup, n_trees=200).predict(dup) == dup.group)
    assert more >= base


def test_single_class():
    table = gaussian_groups(20, [0.0])
    with pytest.raises(DataError):
        classify.fit_classifier(table)
    with pytest.raises(DataError):
        classify.name_that_dataset(table)


def test_chance_levels():
    chance, weighted = classify.chance_levels(np.repeat(np.arange(17), 10))
    assert chance == pytest.approx(1 / 17) and round(100 * chance, 1) == 5.9
    assert weighted == pytest.approx(1 / 17)
    _, w = classify.chance_levels(np.array(["a"] * 3 + ["b"]))
    assert w == pytest.approx(0.75**2 + 0.25**2)


def test_regressor_learns_sum():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1000, 2))
    y = x.sum(axis=1)
    t = FeatureTable([f"s{i}" for i in range(1000)], ["g"] * 1000, x, ("a", "b"), {"y": y})
    train, test = t.take(np.arange(800)), t.take(np.arange(800, 1000))
    forest = classify.fit_regressor(train, "y", n_trees=200, seed=0)
    assert classify.mae(forest.predict(test), test.covariates["y"]) <= 0.1 * y.std()


def test_regressor_constant_target():
    t = gaussian_groups(10, [0.0]).with_covariates(y=np.full(10, 4.0))
    forest = classify.fit_regressor(t, "y", n_trees=5)
    assert classify.mae(forest.predict(t), t.covariates["y"]) == 0.0


def test_mae():
    assert classify.mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert classify.mae([0.0, 4.0], [1.0, 2.0]) == 1.5


def test_logo_shapes_and_noop_path():
    spec = GenerativeSpec(n_groups=5, subjects_per_group=40, n_features=4, age_linear=1.0, seed=8)
    table, _ = generate(spec)
    raw = classify.leave_one_group_out(table, n_trees=30)
    again = classify.leave_one_group_out(table, n_trees=30, harmonizer=None)
    assert len(raw.mae) == 5 and raw.groups == table.group_levels()
    assert raw.mae == again.mae
    combat = classify.leave_one_group_out(
        table, n_trees=30, harmonizer=Harmonizer("combat", CovariateSpec("age, sex"))
    )
    assert 0 < classify.compare_logo(raw, combat).pvalue <= 1


def test_logo_needs_three_groups():
    table, _ = generate(GenerativeSpec(n_groups=2, subjects_per_group=20, n_features=2))
    with pytest.raises(DataError):
        classify.leave_one_group_out(table, n_trees=5)
