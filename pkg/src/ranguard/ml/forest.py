"""Bagged ensemble of Gini trees with per-split feature subsampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ranguard.ml.tree import DecisionTree, TreeConfig, _validate_training_data


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 15
    min_samples_split: int = 5
    min_samples_leaf: int = 1
    feature_subsample: int | None = None  # None -> ceil(sqrt(d)) at train time

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        TreeConfig(self.max_depth, self.min_samples_split, self.min_samples_leaf)
        if self.feature_subsample is not None and self.feature_subsample < 1:
            raise ValueError(f"feature_subsample must be >= 1, got {self.feature_subsample}")

    def tree_config(self) -> TreeConfig:
        return TreeConfig(self.max_depth, self.min_samples_split, self.min_samples_leaf)


class RandomForest:
    """Majority vote over bootstrap-trained trees; vote ties -> lowest class index."""

    algo_name = "random_forest"

    def __init__(self, trees: Sequence[DecisionTree], n_features: int, n_classes: int) -> None:
        if not trees:
            raise ValueError("forest needs at least one tree")
        self.trees = list(trees)
        self.n_features = n_features
        self.n_classes = n_classes

    @classmethod
    def train(
        cls,
        X: np.ndarray,
        y: np.ndarray,
        n_classes: int,
        config: ForestConfig = ForestConfig(),
        seed: int = 0,
    ) -> "RandomForest":
        X, y, _ = _validate_training_data(X, y, n_classes, None)
        n, d = X.shape
        m = config.feature_subsample if config.feature_subsample is not None else math.isqrt(d - 1) + 1
        m = min(m, d)
        tree_cfg = config.tree_config()
        trees = []
        for child in np.random.SeedSequence(seed).spawn(config.n_trees):
            rng = np.random.default_rng(child)
            boot = rng.integers(0, n, size=n)
            trees.append(
                DecisionTree.train(
                    X[boot], y[boot], n_classes, tree_cfg, feature_subsample=m, rng=rng
                )
            )
        return cls(trees, d, n_classes)

    def predict(self, x: Sequence[float]) -> int:
        votes = np.zeros(self.n_classes, dtype=np.int64)
        for tree in self.trees:
            votes[tree.predict(x)] += 1
        return int(np.argmax(votes))

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        votes = np.zeros((X.shape[0], self.n_classes), dtype=np.int64)
        rows = np.arange(X.shape[0])
        for tree in self.trees:
            votes[rows, tree.predict_batch(X)] += 1
        return np.argmax(votes, axis=1)

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RandomForest":
        trees = [DecisionTree.from_dict(t) for t in data["trees"]]
        return cls(trees, int(data["n_features"]), int(data["n_classes"]))
