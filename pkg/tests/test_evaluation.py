import json

import numpy as np
import pytest
from scipy import stats

from besent.corpus import Bloom, Chat, ForumType, LabeledChat, Sentiment
from besent.errors import BESentWarning, DataError
from besent.evaluation import (
    PRESENTATION_LABELS, ConfusionMatrix, EvalReport, FoldResult, MethodResult, confusion_and_accuracy,
    emit_report, kfold_cv, kfold_indices, mean_std, paired_t_test, render_markdown, stratified_holdout,
)

RF_SENT = [85.9, 83.0, 82.9, 84.0, 84.6]
LSTM_SENT = [84.7, 82.9, 81.7, 81.9, 82.3]


def items(labels, bloom=Bloom.APPLYING):
    return [LabeledChat(Chat(f"c{i}", ForumType.MAIN, "x"), Sentiment(s), bloom) for i, s in enumerate(labels)]


def test_confusion_examples():
    gold = [0] * 58 + [1] * 42
    pred = [0] * 36 + [1] * 22 + [0] * 33 + [1] * 9
    cm, acc = confusion_and_accuracy(gold, pred)
    assert cm.counts.tolist() == [[36, 22], [33, 9]] and acc == 0.45
    cm, acc = confusion_and_accuracy([0, 1, 2, 1], [0, 1, 2, 1])
    assert acc == 1.0 and np.array_equal(cm.counts, np.diag([1, 2, 1]))


def test_confusion_errors():
    with pytest.raises(DataError):
        confusion_and_accuracy([0, 1], [0])
    with pytest.raises(DataError):
        confusion_and_accuracy([], [])


def test_confusion_projection():
    cm = ConfusionMatrix((0, 1, 6, 7), np.array([[1, 2, 0, 0], [0, 3, 4, 0], [0, 0, 5, 0], [1, 0, 0, 6]]))
    sent = cm.project(lambda j: j // 6, [0, 1, 2])
    assert sent.counts.tolist() == [[6, 4, 0], [1, 11, 0], [0, 0, 0]]
    assert sent.total == cm.total


def test_mean_std_sample_form():
    mean, sd = mean_std(RF_SENT)
    assert round(mean, 1) == 84.1
    assert sd == pytest.approx(np.std(RF_SENT, ddof=1), rel=1e-12)


def test_paired_t_test_against_scipy():
    res = paired_t_test(RF_SENT, LSTM_SENT)
    ref = stats.ttest_rel(RF_SENT, LSTM_SENT)
    assert res.t_stat == pytest.approx(ref.statistic, rel=1e-12)
    assert res.p_value == pytest.approx(ref.pvalue, rel=1e-9)
    assert res.df == 4 and res.significant


def test_paired_t_test_sign_and_antisymmetry():
    a, b = [1.5, 2.0, 3.2, 4.0], [0.5, 2.0, 3.0, 3.7]
    assert paired_t_test(a, b).t_stat > 0
    assert paired_t_test(a, b).t_stat == -paired_t_test(b, a).t_stat
    assert paired_t_test(a, b).p_value == paired_t_test(b, a).p_value


def test_paired_t_test_degenerate():
    with pytest.raises(DataError, match="degenerate"):
        paired_t_test([1, 2, 3], [1, 2, 3])
    with pytest.raises(DataError):
        paired_t_test([1, 2], [1])


def test_holdout_floor_arithmetic():
    train, val = stratified_holdout(items([0] * 10), 0.7, "sentiment", seed=1)
    assert (len(train), len(val)) == (7, 3)


def test_holdout_stratified_halves():
    data = items([0] * 10 + [1] * 10)
    train, val = stratified_holdout(data, 0.5, "sentiment", seed=4)
    assert sum(c.sentiment == 0 for c in train) == 5 and sum(c.sentiment == 1 for c in train) == 5


def test_holdout_singleton_stratum_warns():
    data = items([0] * 5 + [2])
    with pytest.warns(BESentWarning):
        train, val = stratified_holdout(data, 0.7, "sentiment", seed=0)
    assert data[-1] in train


def test_holdout_small_stratum_keeps_one():
    train, _ = stratified_holdout(items([0, 0]), 0.3, "sentiment")
    assert len(train) == 1


def test_fold_sizes_4396():
    labels = [0] * 1742 + [1] * 2332 + [2] * 322
    folds = kfold_indices(labels, 5, seed=0)
    assert sorted(len(f) for f in folds) == [879, 879, 879, 879, 880]
    allidx = np.concatenate(folds)
    assert len(allidx) == len(set(allidx.tolist())) == 4396


def test_folds_are_stratified():
    labels = [0] * 50 + [1] * 25
    for f in kfold_indices(labels, 5, seed=3):
        assert sum(labels[i] == 1 for i in f) == 5


def test_kfold_small_class_warns():
    with pytest.warns(BESentWarning):
        kfold_indices([0] * 10 + [1] * 2, 5)


def test_kfold_errors():
    with pytest.raises(ValueError):
        kfold_indices([0, 1], 1)
    with pytest.raises(DataError):
        kfold_indices([0, 1], 3)


def _majority_trainer(train, seed):
    counts = np.bincount([int(c.sentiment) for c in train], minlength=3)
    label = int(np.argmax(counts))
    return lambda val: [label] * len(val)


def test_kfold_cv_summary_and_parallel_equivalence():
    data = items([0] * 12 + [1] * 8 + [2] * 5)
    r1, (m1, s1) = kfold_cv(data, 5, _majority_trainer, seed=2)
    r4, (m4, s4) = kfold_cv(data, 5, _majority_trainer, seed=2, jobs=4)
    assert [f.to_dict() for f in r1] == [f.to_dict() for f in r4]
    assert (m1, s1) == (m4, s4)
    assert m1 == pytest.approx(np.mean([f.accuracy for f in r1]))
    for f in r1:
        assert f.accuracy == np.trace(f.confusion.counts) / f.confusion.counts.sum()


def _report():
    folds = [FoldResult(i, a / 100, ConfusionMatrix((0, 1), np.array([[3, 1], [0, 4]]))) for i, a in enumerate(RF_SENT)]
    folds2 = [FoldResult(i, a / 100, ConfusionMatrix((0, 1), np.array([[2, 2], [1, 3]]))) for i, a in enumerate(LSTM_SENT)]
    rep = EvalReport({"seed": 7, "config_digest": "d" * 64},
                     [MethodResult("rf", "sentiment", folds), MethodResult("lstm", "sentiment", folds2)])
    rep.add_significance(rep.methods[0], rep.methods[1])
    return rep


def test_report_json_round_trip_byte_identical(tmp_path):
    rep = _report()
    p = tmp_path / "r.json"
    emit_report(rep, p, "json")
    text = p.read_text()
    again = EvalReport.from_dict(json.loads(text)).to_json()
    assert again == text
    d = json.loads(text)
    assert d["report_version"] == 1 and d["metadata"]["seed"] == 7
    assert d["presentation"]["neutral"] == "netral" and d["presentation"]["applying"] == "app"
    for m in d["methods"]:
        assert m["mean"] == pytest.approx(np.mean([f["accuracy"] for f in m["folds"]]), abs=1e-9)


def test_markdown_layout(tmp_path):
    rep = EvalReport({"seed": 1}, [_report().methods[0]])
    md = render_markdown(rep)
    rows = [l for l in md.splitlines() if l.startswith("| ")]
    body = [r for r in rows if r.split("|")[1].strip() in {"1", "2", "3", "4", "5"}]
    assert len(body) == 5
    assert any(r.startswith("| Mean | 84.08") for r in rows)
    assert any(r.startswith("| Std. Dev. |") for r in rows)


def test_markdown_presentation_labels():
    rep = _report()
    assert "negatif" not in render_markdown(rep)
    md = render_markdown(rep, presentation=True)
    assert "positif" in md and "netral" in md


def test_emit_empty_report_errors(tmp_path):
    with pytest.raises(DataError):
        emit_report(EvalReport({}), tmp_path / "r.json")


def test_emit_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        emit_report(_report(), tmp_path / "missing" / "r.json")


def test_presentation_map_complete():
    assert set(PRESENTATION_LABELS) == {s.label for s in Sentiment} | {b.label for b in Bloom}
