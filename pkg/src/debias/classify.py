"""Random-forest fingerprinting ("name that dataset") and brain-age regression.

The forests are scikit-learn's, configured like the classic randomForest
defaults: bootstrap samples, unlimited depth, min leaf size 1, Gini or
squared-error splits and ``mtry`` features tried per split. Classification
uses a hard majority vote over trees; ties go to the lexicographically
smallest class.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor

from . import harmonize, stats
from .core import ConfigError, DataError, FeatureTable, Split, derive_seed, stratified_split

log = logging.getLogger(__name__)

DEFAULT_TREES = 500


@dataclass(frozen=True, eq=False)
class TreeEnsemble:
    estimator: RandomForestClassifier | RandomForestRegressor
    mode: str  # "classify" or "regress"
    n_trees: int
    mtry: int
    seed: int
    feature_names: tuple[str, ...]
    class_levels: tuple[str, ...] = ()
    constant: float | None = None  # regression on a constant target

    @property
    def trees(self) -> list:
        return list(self.estimator.estimators_)

    def _matrix(self, data: FeatureTable | np.ndarray) -> np.ndarray:
        if isinstance(data, FeatureTable):
            return data.select_features(self.feature_names).values
        X = np.asarray(data, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise DataError(f"expected {len(self.feature_names)} columns, got shape {X.shape}")
        return X

    def votes(self, data: FeatureTable | np.ndarray) -> np.ndarray:
        """Per-class tree vote counts, N x G (classification only)."""
        if self.mode != "classify":
            raise ConfigError("votes are only defined for classifiers")
        X = self._matrix(data)
        counts = np.zeros((X.shape[0], len(self.class_levels)), dtype=np.int64)
        rows = np.arange(X.shape[0])
        for tree in self.estimator.estimators_:
            pred = np.argmax(tree.predict_proba(X), axis=1)
            np.add.at(counts, (rows, pred), 1)
        return counts

    def predict(self, data: FeatureTable | np.ndarray) -> np.ndarray:
        if self.mode == "classify":
            # argmax returns the first maximum; classes are sorted, so ties
            # resolve to the lexicographically smallest label
            idx = np.argmax(self.votes(data), axis=1)
            return np.asarray(self.class_levels, dtype=object)[idx]
        X = self._matrix(data)
        if self.constant is not None:
            return np.full(X.shape[0], self.constant)
        return self.estimator.predict(X)


def _features(table: FeatureTable, predictors: Sequence[str] | None) -> tuple[str, ...]:
    names = tuple(predictors) if predictors is not None else table.feature_names
    if not names:
        raise DataError("no predictor features")
    return names


def _target(table: FeatureTable, target: str | None) -> np.ndarray:
    if target is None or target == "group":
        return np.asarray(table.group)
    if target not in table.covariates:
        raise DataError(f"unknown target column {target!r}")
    return np.asarray(table.covariates[target])


def fit_classifier(
    train: FeatureTable,
    target: str | None = None,
    n_trees: int = DEFAULT_TREES,
    mtry: int | None = None,
    seed: int = 0,
    predictors: Sequence[str] | None = None,
    labels: np.ndarray | None = None,
    n_jobs: int | None = None,
) -> TreeEnsemble:
    """Random-forest classifier of ``target`` (default: the group column).

    ``labels`` overrides the target column (used by the shuffled control).
    """
    names = _features(train, predictors)
    y = np.asarray(labels if labels is not None else _target(train, target)).astype(str)
    classes = tuple(sorted(set(y.tolist())))
    if len(classes) < 2:
        raise DataError("classifier target has a single class")
    mtry = mtry if mtry is not None else max(1, math.isqrt(len(names)))
    est = RandomForestClassifier(
        n_estimators=n_trees,
        criterion="gini",
        max_features=mtry,
        min_samples_leaf=1,
        bootstrap=True,
        random_state=derive_seed(seed, "forest") % 2**31,
        n_jobs=n_jobs,
    )
    est.fit(train.select_features(names).values, y)
    if tuple(est.classes_.tolist()) != classes:
        raise DataError("class order mismatch")  # sklearn sorts classes; guard the vote mapping
    return TreeEnsemble(est, "classify", n_trees, mtry, seed, names, classes)


def fit_regressor(
    train: FeatureTable,
    target: str,
    n_trees: int = DEFAULT_TREES,
    mtry: int | None = None,
    seed: int = 0,
    predictors: Sequence[str] | None = None,
    n_jobs: int | None = None,
) -> TreeEnsemble:
    """Random-forest regression; mtry defaults to max(1, F // 3)."""
    names = _features(train, predictors)
    if train.is_categorical(target):
        raise DataError(f"regression target {target!r} is categorical")
    y = np.asarray(train.covariates[target], dtype=float)
    mtry = mtry if mtry is not None else max(1, len(names) // 3)
    est = RandomForestRegressor(
        n_estimators=n_trees,
        criterion="squared_error",
        max_features=mtry,
        min_samples_leaf=1,
        bootstrap=True,
        random_state=derive_seed(seed, "forest") % 2**31,
        n_jobs=n_jobs,
    )
    constant = None
    if np.ptp(y) == 0:
        log.warning("regression target %r is constant; predicting %g", target, y[0])
        constant = float(y[0])
    est.fit(train.select_features(names).values, y)
    return TreeEnsemble(est, "regress", n_trees, mtry, seed, names, constant=constant)


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise DataError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true, cols = predicted
    group_levels: tuple[str, ...]

    @classmethod
    def from_predictions(cls, truth: np.ndarray, pred: np.ndarray, levels: Sequence[str]) -> ConfusionMatrix:
        levels = tuple(levels)
        pos = {g: i for i, g in enumerate(levels)}
        counts = np.zeros((len(levels), len(levels)), dtype=np.int64)
        for t, p in zip(truth, pred):
            counts[pos[t], pos[p]] += 1
        return cls(counts, levels)

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else float("nan")

    def to_dict(self) -> dict[str, Any]:
        return {"labels": list(self.group_levels), "counts": self.counts.tolist()}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\predicted", *self.group_levels])
            for g, row in zip(self.group_levels, self.counts):
                w.writerow([g, *row.tolist()])


def chance_levels(labels: np.ndarray) -> tuple[float, float]:
    """(1/G, sum of squared class frequencies)."""
    _, n = np.unique(np.asarray(labels), return_counts=True)
    f = n / n.sum()
    return 1.0 / len(n), float(np.sum(f**2))


@dataclass(frozen=True)
class NameThatDatasetResult:
    accuracy: float
    confusion: ConfusionMatrix
    chance: float
    weighted_chance: float
    pca_mode: str
    harmonizer: str | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "chance": self.chance,
            "weighted_chance": self.weighted_chance,
            "pca_mode": self.pca_mode,
            "harmonizer": self.harmonizer,
            "confusion": self.confusion.to_dict(),
        }


def _harmonize_split(
    table: FeatureTable,
    split: Split,
    harmonizer: harmonize.Harmonizer,
    pca_mode: str,
) -> tuple[FeatureTable, FeatureTable]:
    train, test = table.take(split.train_indices), table.take(split.test_indices)
    basis = None
    if harmonizer.uses_pcs and pca_mode == "whole":
        basis = harmonize.substitute_confounders(table, harmonizer.n_components)
    model = harmonizer.fit(train, pca_basis=basis)
    return model.apply(train), model.apply(test)


def name_that_dataset(
    table: FeatureTable,
    group_by: str | None = None,
    fraction: float = 0.7,
    seed: int = 0,
    harmonizer: harmonize.Harmonizer | None = None,
    pca_mode: str = "strict",
    n_trees: int = DEFAULT_TREES,
    predictors: Sequence[str] | None = None,
    shuffle_labels: bool = False,
    n_jobs: int | None = None,
) -> NameThatDatasetResult:
    """Train a forest to recognise each subject's group and score it on held-out subjects.

    Harmonization (optional) is always fitted on the training partition.
    ``pca_mode`` decides where substitute-confounder PCs come from:
    ``"strict"`` uses the training partition only, ``"whole"`` the full
    table. ``shuffle_labels`` permutes training labels as a negative control.
    """
    if pca_mode not in ("strict", "whole"):
        raise ConfigError(f"pca_mode must be 'strict' or 'whole', got {pca_mode!r}")
    labels = table.labels(group_by)
    levels = tuple(sorted(set(labels.tolist())))
    if len(levels) < 2:
        raise DataError("name-that-dataset needs at least two groups")
    split = stratified_split(table, fraction, derive_seed(seed, "split"), group_by)
    if harmonizer is not None:
        train, test = _harmonize_split(table, split, harmonizer, pca_mode)
    else:
        train, test = table.take(split.train_indices), table.take(split.test_indices)
    y_train = labels[split.train_indices]
    if shuffle_labels:
        y_train = np.random.default_rng(derive_seed(seed, "shuffle")).permutation(y_train)
    forest = fit_classifier(train, None, n_trees, seed=seed, predictors=predictors, labels=y_train, n_jobs=n_jobs)
    pred = forest.predict(test)
    cm = ConfusionMatrix.from_predictions(labels[split.test_indices], pred, levels)
    chance, weighted = chance_levels(labels)
    return NameThatDatasetResult(
        cm.accuracy, cm, chance, weighted, pca_mode, harmonizer.family if harmonizer else None
    )


@dataclass(frozen=True)
class LogoResult:
    groups: tuple[str, ...]
    mae: tuple[float, ...]
    harmonizer: str | None

    @property
    def median(self) -> float:
        return float(np.median(self.mae))

    def to_dict(self) -> dict[str, Any]:
        return {
            "harmonizer": self.harmonizer,
            "groups": list(self.groups),
            "mae": list(self.mae),
            "median_mae": self.median,
        }


def leave_one_group_out(
    table: FeatureTable,
    group_by: str | None = None,
    target: str = "age",
    harmonizer: harmonize.Harmonizer | None = None,
    seed: int = 0,
    n_trees: int = DEFAULT_TREES,
    predictors: Sequence[str] | None = None,
    n_jobs: int | None = None,
) -> LogoResult:
    """Per-group MAE of a regressor trained on all other groups.

    The harmonizer, when given, is fitted once on the whole table: a
    held-out site's location and scale cannot be estimated without its
    data. Its features and keep covariates are used, never the MAE.
    """
    labels = table.labels(group_by)
    levels = tuple(sorted(set(labels.tolist())))
    if len(levels) < 3:
        raise DataError("leave-one-group-out needs at least three groups")
    data = harmonizer.fit(table).apply(table) if harmonizer is not None else table
    truth = np.asarray(table.covariates[target], dtype=float) if target in table.covariates else None
    if truth is None:
        raise DataError(f"unknown target column {target!r}")
    maes = []
    for g in levels:
        test = labels == g
        forest = fit_regressor(
            data.take(np.flatnonzero(~test)), target, n_trees,
            seed=derive_seed(seed, f"logo:{g}"), predictors=predictors, n_jobs=n_jobs,
        )
        maes.append(mae(forest.predict(data.take(np.flatnonzero(test))), truth[test]))
    return LogoResult(levels, tuple(maes), harmonizer.family if harmonizer else None)


def compare_logo(raw: LogoResult, other: LogoResult) -> stats.WilcoxonResult:
    """Paired signed-rank test of two leave-one-group-out runs."""
    if raw.groups != other.groups:
        raise DataError("runs cover different groups")
    return stats.wilcoxon_signed_rank(np.array(raw.mae), np.array(other.mae))
