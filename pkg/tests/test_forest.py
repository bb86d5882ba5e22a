import itertools
import json
from fractions import Fraction

import numpy as np
import pytest

from besent.errors import DataError
from besent.features import build_vocabulary
from besent.models.forest import (
    ForestModel, ForestParams, Leaf, Split, best_split, export_tree, fit_decision_tree, fit_random_forest,
    forest_predict, forest_predict_batch, gini_impurity, tree_depth, tree_from_dict, tree_predict, tree_to_dict,
)
from besent.models.serialize import FORMAT_VERSION, dumps, load_model, model_from_dict, model_to_dict, save_model
from besent.errors import FormatError
from besent.preprocess import TokenizedDoc

FULL = dict(n_trees=1, bootstrap=False)


def test_gini_examples():
    assert gini_impurity({"und": 4}) == 0.0
    assert gini_impurity({"und": 2, "app": 2}) == 0.5
    assert gini_impurity({"und": 3, "app": 1}) == pytest.approx(1 - (0.75 ** 2 + 0.25 ** 2))
    assert gini_impurity({"und": 3, "app": 1}) == 0.375
    with pytest.raises(DataError):
        gini_impurity({"und": 0})


def test_pure_data_gives_single_leaf():
    tree = fit_decision_tree(np.array([[0.0], [1.0], [2.0]]), [4, 4, 4])
    assert tree == Leaf({4: 3}, 4)


def test_forced_split_at_midpoint():
    tree = fit_decision_tree(np.array([[0.0], [1.0]]), [0, 1], ForestParams(mtry=1))
    assert isinstance(tree, Split)
    assert tree.feature_id == 0 and tree.threshold == 0.5
    assert tree.left == Leaf({0: 1}, 0) and tree.right == Leaf({1: 1}, 1)


def test_leaf_tie_picks_smallest_class():
    # identical inputs, conflicting labels: no split possible
    tree = fit_decision_tree(np.array([[1.0], [1.0]]), [3, 1])
    assert tree.prediction == 1


def brute_force_root(X, y):
    """Exhaustive best split in exact arithmetic with the documented tie-break."""
    n = len(y)
    classes = sorted(set(y))

    def gini(labels):
        return 1 - sum(Fraction(labels.count(c), len(labels)) ** 2 for c in classes)

    parent = gini(list(y))
    best = None
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f].tolist()))
        for a, b in zip(vals, vals[1:]):
            thr = (a + b) / 2
            left = [y[i] for i in range(n) if X[i, f] <= thr]
            right = [y[i] for i in range(n) if X[i, f] > thr]
            gain = parent - Fraction(len(left), n) * gini(left) - Fraction(len(right), n) * gini(right)
            key = (-gain, f, thr)
            if gain > 0 and (best is None or key < best):
                best = key
    return None if best is None else (best[1], best[2], -best[0])


def toy_sets():
    rng = np.random.default_rng(7)
    out = [
        (np.array([[0.0, 1.0], [1.0, 1.0], [0.0, 0.0], [1.0, 0.0]]), [0, 1, 0, 1]),
        (np.array([[0.0, 1.0], [1.0, 1.0], [0.0, 0.0], [1.0, 0.0]]), [0, 0, 1, 1]),
        (np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]), [0, 0, 1, 1]),
        (np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]), [0, 1, 1, 0]),
    ]
    for _ in range(40):
        X = rng.integers(0, 4, size=(4, 2)).astype(float)
        y = rng.integers(0, 3, size=4).tolist()
        out.append((X, y))
    return out


@pytest.mark.parametrize("X, y", toy_sets())
def test_root_split_equals_exhaustive_enumeration(X, y):
    tree = fit_decision_tree(X, y, ForestParams(mtry=2))
    expected = brute_force_root(X, y)
    if expected is None:
        assert isinstance(tree, Leaf)
    else:
        assert isinstance(tree, Split)
        assert (tree.feature_id, tree.threshold) == (expected[0], expected[1])
        assert tree.gain == pytest.approx(float(expected[2]), abs=1e-12)


def test_best_split_returns_none_without_gain():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    Y = np.eye(2)[[0, 1, 1, 0]]
    # thresholds 0.5 and 2.5 isolate one sample each but the XOR-like layout on
    # one axis still has positive gain; an all-constant feature has none
    assert best_split(np.zeros((4, 1)), Y, [0]) is None
    assert best_split(X, Y, [0]) is not None


def test_min_samples_leaf_respected():
    X = np.arange(10, dtype=float)[:, None]
    y = [0] + [1] * 9
    tree = fit_decision_tree(X, y, ForestParams(min_samples_leaf=3))

    def leaves(node):
        return [node] if isinstance(node, Leaf) else leaves(node.left) + leaves(node.right)
    assert all(l.n_samples >= 3 for l in leaves(tree))


def test_max_depth_zero_is_leaf():
    tree = fit_decision_tree(np.array([[0.0], [1.0]]), [0, 1], ForestParams(max_depth=0))
    assert isinstance(tree, Leaf)


def test_tree_depth_bounded():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 3))
    y = rng.integers(0, 3, size=60)
    assert tree_depth(fit_decision_tree(X, y, ForestParams(max_depth=3))) <= 3


def test_degenerate_forest_equals_single_tree():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(int) + (X[:, 0] > 1)
    tree = fit_decision_tree(X, y, ForestParams(mtry=2))
    forest = fit_random_forest(X, y, ForestParams(mtry=2, **FULL))
    g = np.linspace(-3, 3, 10)
    grid = np.array(list(itertools.product(g, g)))
    assert forest_predict_batch(forest, grid).tolist() == [tree_predict(tree, x) for x in grid]


def _constant_forest(votes, classes):
    trees = [Leaf({c: 1}, c) for c in votes]
    return ForestModel(trees, ForestParams(n_trees=len(trees)), tuple(classes), 2)


def test_plurality_vote_and_tie_rule():
    assert forest_predict(_constant_forest([0, 0, 1], [0, 1]), np.zeros(2)) == (0, {0: 2, 1: 1})
    assert forest_predict(_constant_forest([2, 1], [1, 2]), np.zeros(2))[0] == 1
    assert forest_predict(_constant_forest([5], [5]), np.zeros(2)) == (5, {5: 1})


def test_forest_dimension_mismatch():
    forest = _constant_forest([0], [0])
    with pytest.raises(DataError):
        forest_predict(forest, np.zeros(3))


def test_separable_toy_training_accuracy():
    rng = np.random.default_rng(4)
    X = np.vstack([rng.normal(-2, 0.5, size=(10, 2)), rng.normal(2, 0.5, size=(10, 2))])
    y = [0] * 10 + [1] * 10
    forest = fit_random_forest(X, y)
    assert (forest_predict_batch(forest, X) == y).all()


def test_forest_deterministic_and_job_independent():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(50, 6))
    y = rng.integers(0, 3, size=50)
    p = ForestParams(n_trees=8, seed=11)
    a = dumps(model_to_dict(fit_random_forest(X, y, p)))
    b = dumps(model_to_dict(fit_random_forest(X, y, p)))
    c = dumps(model_to_dict(fit_random_forest(X, y, p, n_jobs=4)))
    assert a == b == c


def test_internal_nodes_have_positive_gain_and_valid_gini():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(80, 4))
    y = rng.integers(0, 4, size=80)
    forest = fit_random_forest(X, y, ForestParams(n_trees=5))

    def walk(node):
        if isinstance(node, Split):
            assert node.gain > 0 and 0 <= node.gini <= 1 - 1 / 4
            walk(node.left)
            walk(node.right)
        else:
            assert set(node.class_counts) <= set(forest.classes)
    for t in forest.trees:
        walk(t)


def test_mtry_validation():
    with pytest.raises(ValueError):
        fit_random_forest(np.zeros((2, 2)), [0, 1], ForestParams(mtry=3))
    assert ForestParams().resolve_mtry(10) == 3


def test_empty_data():
    with pytest.raises(DataError):
        fit_random_forest(np.zeros((0, 2)), [])
    with pytest.raises(DataError):
        fit_decision_tree(np.zeros((0, 2)), [])


# -- export -------------------------------------------------------------------

def _vocab():
    return build_vocabulary([TokenizedDoc("a", ("kasih", "baik")), TokenizedDoc("b", ("kasih",))])


def test_export_single_leaf():
    v = _vocab()
    lines = export_tree(Leaf({1: 4}, 1), v)
    assert lines == ["0\tRoot\t=> 1\t-\t0.000"]


def test_export_depth_one_and_truncation():
    v = _vocab()
    tree = Split(2, 0.25, Leaf({0: 2}, 0), Leaf({1: 2}, 1), gini=0.5, n_samples=4, gain=0.5)
    lines = export_tree(tree, v, max_depth=5, class_names=lambda c: ["und", "app"][c])
    assert lines == ["0\tRoot\tkasih\t0.2500\t0.500", "1\tLeft\t=> und\t-\t0.000",
                     "1\tRight\t=> app\t-\t0.000"]
    assert export_tree(tree, v, max_depth=0) == ["0\tRoot\tkasih\t0.2500\t0.500"]


def test_export_fingerprint_mismatch():
    with pytest.raises(DataError):
        export_tree(Leaf({0: 1}, 0), _vocab(), fingerprint="0" * 64)


# -- serialization -----------------------------------------------------------

def test_tree_dict_round_trip():
    rng = np.random.default_rng(8)
    tree = fit_decision_tree(rng.normal(size=(30, 3)), rng.integers(0, 3, size=30), ForestParams(mtry=3))
    assert tree_from_dict(json.loads(json.dumps(tree_to_dict(tree)))) == tree


def test_forest_file_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    X = rng.normal(size=(40, 5))
    y = rng.integers(0, 2, size=40)
    model = fit_random_forest(X, y, ForestParams(n_trees=4), vocab_fingerprint="ab" * 32)
    p = tmp_path / "f.json"
    save_model(model, p)
    back = load_model(p)
    assert back.trees == model.trees and back.classes == model.classes
    assert back.vocab_fingerprint == model.vocab_fingerprint
    assert dumps(model_to_dict(back)) == dumps(model_to_dict(model))
    doc = json.loads(p.read_text())
    assert doc["format_version"] == FORMAT_VERSION and doc["kind"] == "forest"


def test_wrong_format_version_fails():
    model = _constant_forest([0], [0])
    d = model_to_dict(model)
    d["format_version"] = 99
    with pytest.raises(FormatError, match="format_version"):
        model_from_dict(d)
