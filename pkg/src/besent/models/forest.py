"""CART decision trees with Gini splits, bagged into a random forest."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from besent.errors import DataError

# Relative slack when comparing split scores: mathematically tied splits can
# differ in the last ulp, and must still fall to the (feature, threshold)
# tie-break.
_TIE_TOL = 1e-12


def gini_impurity(class_counts) -> float:
    """1 - sum(p_c^2) over a mapping (or sequence) of class counts."""
    counts = list(class_counts.values()) if isinstance(class_counts, dict) else list(class_counts)
    if any(c < 0 for c in counts):
        raise DataError("class counts must be non-negative")
    total = sum(counts)
    if total == 0:
        raise DataError("Gini impurity of an empty node is undefined")
    return 1.0 - sum((c / total) ** 2 for c in counts)


@dataclass(frozen=True)
class Leaf:
    class_counts: dict
    prediction: int

    @property
    def n_samples(self) -> int:
        return sum(self.class_counts.values())

    @property
    def gini(self) -> float:
        return gini_impurity(self.class_counts)


@dataclass(frozen=True)
class Split:
    feature_id: int
    threshold: float
    left: "Leaf | Split"
    right: "Leaf | Split"
    gini: float
    n_samples: int
    gain: float


TreeNode = Leaf | Split


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 32
    min_samples_leaf: int = 1
    mtry: int | None = None  # None -> floor(sqrt(n_features))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValueError("max_depth must be >= 0 and min_samples_leaf >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")

    def resolve_mtry(self, n_features: int) -> int:
        mtry = self.mtry if self.mtry is not None else max(1, math.isqrt(n_features))
        if mtry > n_features:
            raise ValueError(f"mtry={mtry} exceeds the {n_features} available features")
        return mtry

    def to_dict(self) -> dict:
        return {"n_trees": self.n_trees, "max_depth": self.max_depth,
                "min_samples_leaf": self.min_samples_leaf, "mtry": self.mtry,
                "bootstrap": self.bootstrap, "seed": self.seed}


def draw_features(rng: np.random.Generator, n_features: int, mtry: int) -> np.ndarray:
    return np.sort(rng.choice(n_features, size=mtry, replace=False))


def _make_leaf(counts: np.ndarray, classes: Sequence[int]) -> Leaf:
    cc = {int(classes[k]): int(v) for k, v in enumerate(counts) if v > 0}
    # argmax returns the first maximum, i.e. the smallest class id
    return Leaf(cc, int(classes[int(np.argmax(counts))]))


def best_split(X: np.ndarray, Y: np.ndarray, features, min_samples_leaf: int = 1):
    """Best Gini split over ``features`` for the samples in ``X``.

    ``Y`` is the one-hot label matrix.  Returns ``(feature, threshold, gain)``
    or ``None`` when no candidate split has positive gain.  Samples with
    ``x[feature] <= threshold`` go left.
    """
    n = len(Y)
    total = Y.sum(axis=0)
    parent = float((total * total).sum()) / n
    tol = _TIE_TOL * max(1.0, parent)
    nl = np.arange(1, n)
    nr = n - nl
    size_ok = (nl >= min_samples_leaf) & (nr >= min_samples_leaf)
    best = None
    best_score = -np.inf
    for f in features:
        v = X[:, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        if vs[0] == vs[-1]:
            continue
        valid = (vs[:-1] < vs[1:]) & size_ok
        if not valid.any():
            continue
        left = np.cumsum(Y[order], axis=0)[:-1]
        right = total - left
        # sum_c n_c^2 / n_child, summed over both children; larger = purer
        score = (left * left).sum(axis=1) / nl + (right * right).sum(axis=1) / nr
        score = np.where(valid, score, -np.inf)
        top = score.max()
        j = int(np.flatnonzero(score >= top - tol)[0])
        if score[j] > best_score + tol:
            thr = 0.5 * (vs[j] + vs[j + 1])
            if thr >= vs[j + 1]:
                thr = vs[j]
            best, best_score = (int(f), float(thr)), float(score[j])
    if best is None:
        return None
    gain = (best_score - parent) / n
    if gain <= tol / n:
        return None
    return best[0], best[1], gain


def fit_decision_tree(X, y, params: ForestParams = ForestParams(),
                      feature_sampler: Callable | None = None,
                      rng: np.random.Generator | None = None,
                      classes: Sequence[int] | None = None) -> TreeNode:
    """Grow one CART tree; every node examines ``mtry`` freshly drawn features."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0 or X.ndim != 2 or len(X) != len(y):
        raise DataError("decision tree needs a non-empty (n, F) matrix with n labels")
    classes = sorted(set(y.tolist())) if classes is None else list(classes)
    pos = {c: k for k, c in enumerate(classes)}
    Y = np.zeros((len(y), len(classes)))
    Y[np.arange(len(y)), [pos[c] for c in y.tolist()]] = 1.0
    n_features = X.shape[1]
    mtry = params.resolve_mtry(n_features)
    rng = rng if rng is not None else np.random.default_rng(params.seed)
    sampler = feature_sampler or draw_features
    X = np.asfortranarray(X)

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        counts = Y[idx].sum(axis=0)
        n = len(idx)
        if (depth >= params.max_depth or np.count_nonzero(counts) == 1
                or n < 2 * params.min_samples_leaf):
            return _make_leaf(counts, classes)
        feats = sampler(rng, n_features, mtry)
        found = best_split(X[idx], Y[idx], feats, params.min_samples_leaf)
        if found is None:
            return _make_leaf(counts, classes)
        f, thr, gain = found
        go_left = X[idx, f] <= thr
        return Split(
            feature_id=f, threshold=thr,
            left=grow(idx[go_left], depth + 1),
            right=grow(idx[~go_left], depth + 1),
            gini=1.0 - float((counts * counts).sum()) / (n * n),
            n_samples=n, gain=gain,
        )

    return grow(np.arange(len(y)), 0)


def tree_predict(tree: TreeNode, x) -> int:
    node = tree
    while isinstance(node, Split):
        node = node.left if x[node.feature_id] <= node.threshold else node.right
    return node.prediction


def tree_depth(tree: TreeNode) -> int:
    if isinstance(tree, Leaf):
        return 0
    return 1 + max(tree_depth(tree.left), tree_depth(tree.right))


class _FlatTree:
    """Array form of a tree for vectorized batch prediction."""

    def __init__(self, tree: TreeNode):
        feature, threshold, left, right, pred = [], [], [], [], []

        def add(node):
            k = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            pred.append(-1)
            if isinstance(node, Leaf):
                pred[k] = node.prediction
            else:
                feature[k] = node.feature_id
                threshold[k] = node.threshold
                left[k] = add(node.left)
                right[k] = add(node.right)
            return k

        add(tree)
        self.feature = np.array(feature)
        self.threshold = np.array(threshold)
        self.left = np.array(left)
        self.right = np.array(right)
        self.pred = np.array(pred)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            a = rows[active]
            nd = node[a]
            go_left = X[a, self.feature[nd]] <= self.threshold[nd]
            node[a] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.pred[node]


@dataclass
class ForestModel:
    trees: list
    params: ForestParams
    classes: tuple
    n_features: int
    vocab_fingerprint: str | None = None
    _flat: list = field(default=None, repr=False, compare=False)

    def flat(self) -> list:
        if self._flat is None:
            self._flat = [_FlatTree(t) for t in self.trees]
        return self._flat


def _fit_one(X, y, params, classes, t):
    rng = np.random.default_rng([params.seed, t])
    if params.bootstrap:
        idx = rng.integers(0, len(y), size=len(y))
        Xt, yt = X[idx], y[idx]
    else:
        Xt, yt = X, y
    return fit_decision_tree(Xt, yt, params, rng=rng, classes=classes)


def fit_random_forest(X, y, params: ForestParams = ForestParams(), classes=None,
                      vocab_fingerprint: str | None = None, n_jobs: int = 1) -> ForestModel:
    """Bagged Gini trees.

    Tree ``t`` draws its bootstrap sample and feature subsets from a stream
    seeded by ``(params.seed, t)`` alone, so ``n_jobs`` never changes the
    result.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise DataError("cannot fit a forest on empty data")
    if X.ndim != 2 or len(X) != len(y):
        raise DataError("forest needs an (n, F) matrix with n labels")
    classes = tuple(sorted(set(y.tolist()))) if classes is None else tuple(sorted(classes))
    params = replace(params, mtry=params.resolve_mtry(X.shape[1]))
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(lambda t: _fit_one(X, y, params, classes, t), range(params.n_trees)))
    else:
        trees = [_fit_one(X, y, params, classes, t) for t in range(params.n_trees)]
    return ForestModel(trees, params, classes, X.shape[1], vocab_fingerprint)


def _as_dense(x, dim: int) -> np.ndarray:
    if hasattr(x, "to_dense"):
        if x.dim != dim:
            raise DataError(f"feature vector has dim {x.dim}, model expects {dim}")
        return x.to_dense()
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise DataError(f"feature vector has dim {x.shape[-1]}, model expects {dim}")
    return x


def forest_votes(model: ForestModel, X) -> np.ndarray:
    """Vote matrix of shape ``(n, len(model.classes))``."""
    X = _as_dense(X, model.n_features)
    X = np.atleast_2d(X)
    pos = {c: k for k, c in enumerate(model.classes)}
    lookup = np.zeros(max(model.classes) + 1, dtype=np.int64)
    for c, k in pos.items():
        lookup[c] = k
    votes = np.zeros((len(X), len(model.classes)), dtype=np.int64)
    rows = np.arange(len(X))
    for ft in model.flat():
        np.add.at(votes, (rows, lookup[ft.predict(X)]), 1)
    return votes


def forest_predict_batch(model: ForestModel, X) -> np.ndarray:
    votes = forest_votes(model, X)
    return np.asarray(model.classes)[np.argmax(votes, axis=1)]


def forest_predict(model: ForestModel, x):
    """Plurality vote for one vector; ties go to the smallest class id."""
    votes = forest_votes(model, x)[0]
    counts = {int(c): int(v) for c, v in zip(model.classes, votes) if v > 0}
    return int(model.classes[int(np.argmax(votes))]), counts


def export_tree(tree: TreeNode, vocab, max_depth: int = 5, fingerprint: str | None = None,
                class_names: Callable[[int], str] | None = None) -> list[str]:
    """Pre-order branch listing: ``level  side  term  threshold  gini``.

    One tab-separated line per node down to ``max_depth``.  Leaves show
    ``=> <class>`` in the term column.  ``fingerprint`` is the vocabulary
    fingerprint the tree was trained against; a mismatch is an error.
    """
    if fingerprint is not None and fingerprint != vocab.fingerprint:
        raise DataError("tree was trained against a different vocabulary")
    name = class_names or str
    lines = []

    def visit(node, level, side):
        if isinstance(node, Leaf):
            lines.append(f"{level}\t{side}\t=> {name(node.prediction)}\t-\t{node.gini:.3f}")
            return
        term = vocab.terms[node.feature_id] if node.feature_id < len(vocab.terms) else f"#{node.feature_id}"
        lines.append(f"{level}\t{side}\t{term}\t{node.threshold:.4f}\t{node.gini:.3f}")
        if level < max_depth:
            visit(node.left, level + 1, "Left")
            visit(node.right, level + 1, "Right")

    visit(tree, 0, "Root")
    return lines


# -- serialization ---------------------------------------------------------

def tree_to_dict(node: TreeNode) -> dict:
    if isinstance(node, Leaf):
        return {"class_counts": [[c, n] for c, n in sorted(node.class_counts.items())],
                "prediction": node.prediction}
    return {"feature": node.feature_id, "threshold": node.threshold, "gini": node.gini,
            "n_samples": node.n_samples, "gain": node.gain,
            "left": tree_to_dict(node.left), "right": tree_to_dict(node.right)}


def tree_from_dict(d: dict) -> TreeNode:
    if "prediction" in d:
        return Leaf({int(c): int(n) for c, n in d["class_counts"]}, int(d["prediction"]))
    return Split(int(d["feature"]), float(d["threshold"]), tree_from_dict(d["left"]),
                 tree_from_dict(d["right"]), float(d["gini"]), int(d["n_samples"]), float(d["gain"]))
