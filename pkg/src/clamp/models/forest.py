"""Random forest over per-channel summary statistics.

The weaker of the two classifiers: each trial collapses to 45 numbers
(9 channels x {mean, std, min, max, last-first} over the valid region)
and a Gini-split forest votes on them. Trees serialize to JSON so models
round-trip without pickle and stay diff-able.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..features import CHANNEL_NAMES, FeatureTensor

SUMMARY_STATS = ("mean", "std", "min", "max", "delta")
SUMMARY_DIM = len(CHANNEL_NAMES) * len(SUMMARY_STATS)

_FOREST_FORMAT = "clamp-forest-v1"


def summary_feature_names() -> tuple[str, ...]:
    return tuple(
        f"{ch}_{st}" for ch in CHANNEL_NAMES for st in SUMMARY_STATS
    )


def summary_features(tensor: FeatureTensor) -> np.ndarray:
    """45 summary statistics over the valid (un-padded) region."""
    tensor.validate()
    region = tensor.channels[:, : tensor.valid_len].astype(np.float64)
    out = np.empty(SUMMARY_DIM)
    for i in range(len(CHANNEL_NAMES)):
        row = region[i]
        j = i * len(SUMMARY_STATS)
        out[j] = row.mean()
        out[j + 1] = row.std()
        out[j + 2] = row.min()
        out[j + 3] = row.max()
        out[j + 4] = row[-1] - row[0]
    return out


def summary_matrix(tensors: Sequence[FeatureTensor]) -> np.ndarray:
    return np.stack([summary_features(t) for t in tensors])


@dataclass
class _Tree:
    """Flat-array decision tree; index 0 is the root, -1 marks leaves."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    proba: list[list[float]] = field(default_factory=list)

    def add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.proba.append([])
        return len(self.feature) - 1

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        out = np.empty((x.shape[0], len(self.proba[0]) or 0))
        for i, row in enumerate(x):
            node = 0
            while self.feature[node] >= 0:
                if row[self.feature[node]] <= self.threshold[node]:
                    node = self.left[node]
                else:
                    node = self.right[node]
            out[i] = self.proba[node]
        return out


def _best_split(
    x: np.ndarray,
    y: np.ndarray,
    feature_ids: np.ndarray,
    n_classes: int,
    min_leaf: int,
) -> tuple[int, float] | None:
    """Best (feature, threshold) by Gini; None if no admissible split gains."""
    n = y.size
    onehot = np.eye(n_classes, dtype=np.float64)[y]
    parent = float((onehot.sum(axis=0) ** 2).sum()) / n
    best_score = parent + 1e-12
    best: tuple[int, float] | None = None
    for f in feature_ids:
        xs_raw = x[:, f]
        order = np.argsort(xs_raw, kind="stable")
        xs = xs_raw[order]
        cum = onehot[order].cumsum(axis=0)
        n_left = np.arange(1, n, dtype=np.float64)
        ssl = (cum[:-1] ** 2).sum(axis=1)
        ssr = ((cum[-1] - cum[:-1]) ** 2).sum(axis=1)
        score = ssl / n_left + ssr / (n - n_left)
        ok = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not ok.any():
            continue
        score = np.where(ok, score, -np.inf)
        pos = int(np.argmax(score))
        if score[pos] > best_score:
            best_score = float(score[pos])
            best = (int(f), float((xs[pos] + xs[pos + 1]) / 2.0))
    return best


def _grow(
    tree: _Tree,
    x: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    depth: int,
    n_classes: int,
    max_depth: int,
    min_leaf: int,
    max_features: int | None,
    rng: np.random.Generator,
) -> int:
    node = tree.add_node()
    counts = np.bincount(y[idx], minlength=n_classes).astype(np.float64)
    split = None
    if depth < max_depth and idx.size >= 2 * min_leaf and np.count_nonzero(counts) > 1:
        if max_features is None or max_features >= x.shape[1]:
            feats = np.arange(x.shape[1])
        else:
            feats = rng.choice(x.shape[1], size=max_features, replace=False)
        split = _best_split(x[idx], y[idx], feats, n_classes, min_leaf)
    if split is None:
        tree.proba[node] = list(counts / counts.sum())
        return node
    f, thr = split
    go_left = x[idx, f] <= thr
    tree.feature[node] = f
    tree.threshold[node] = thr
    tree.proba[node] = list(counts / counts.sum())
    tree.left[node] = _grow(
        tree, x, y, idx[go_left], depth + 1, n_classes, max_depth, min_leaf,
        max_features, rng,
    )
    tree.right[node] = _grow(
        tree, x, y, idx[~go_left], depth + 1, n_classes, max_depth, min_leaf,
        max_features, rng,
    )
    return node


@dataclass
class ForestConfig:
    n_trees: int = 50
    max_depth: int = 12
    min_samples_leaf: int = 2
    max_features: str | None = "sqrt"
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees, max_depth, min_samples_leaf must be >= 1")
        if self.max_features not in ("sqrt", None):
            raise ValueError("max_features must be 'sqrt' or None")


class RandomForest:
    def __init__(self, config: ForestConfig | None = None) -> None:
        self.config = config or ForestConfig()
        self.n_classes = 0
        self.n_features = 0
        self.trees: list[_Tree] = []

    def fit(self, x: np.ndarray, y: np.ndarray) -> "RandomForest":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError("expected (N, F) features and (N,) labels")
        if x.shape[0] < 1:
            raise ValueError("empty training set")
        cfg = self.config
        self.n_features = x.shape[1]
        self.n_classes = int(y.max()) + 1
        if cfg.max_features == "sqrt":
            mf: int | None = max(1, int(np.sqrt(self.n_features)))
        else:
            mf = None
        self.trees = []
        for t in range(cfg.n_trees):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, t)))
            if cfg.bootstrap:
                idx = rng.integers(0, x.shape[0], size=x.shape[0])
            else:
                idx = np.arange(x.shape[0])
            tree = _Tree()
            _grow(
                tree, x, y, idx, 0, self.n_classes, cfg.max_depth,
                cfg.min_samples_leaf, mf, rng,
            )
            self.trees.append(tree)
        return self

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise RuntimeError("forest is not fitted")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected (N, {self.n_features}) features")
        acc = np.zeros((x.shape[0], self.n_classes))
        for tree in self.trees:
            acc += tree.predict_proba(x)
        return acc / len(self.trees)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1)

    # JSON round-trip keeps models deterministic and inspectable.
    def to_json(self) -> str:
        doc = {
            "format": _FOREST_FORMAT,
            "config": {
                "n_trees": self.config.n_trees,
                "max_depth": self.config.max_depth,
                "min_samples_leaf": self.config.min_samples_leaf,
                "max_features": self.config.max_features,
                "bootstrap": self.config.bootstrap,
                "seed": self.config.seed,
            },
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "trees": [
                {
                    "feature": t.feature,
                    "threshold": t.threshold,
                    "left": t.left,
                    "right": t.right,
                    "proba": t.proba,
                }
                for t in self.trees
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RandomForest":
        doc = json.loads(text)
        if doc.get("format") != _FOREST_FORMAT:
            raise ValueError("not a serialized forest")
        forest = cls(ForestConfig(**doc["config"]))
        forest.n_classes = int(doc["n_classes"])
        forest.n_features = int(doc["n_features"])
        forest.trees = [
            _Tree(
                feature=[int(v) for v in t["feature"]],
                threshold=[float(v) for v in t["threshold"]],
                left=[int(v) for v in t["left"]],
                right=[int(v) for v in t["right"]],
                proba=[[float(p) for p in row] for row in t["proba"]],
            )
            for t in doc["trees"]
        ]
        return forest

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "RandomForest":
        return cls.from_json(Path(path).read_text())
