"""Splits, cross-validation, confusion matrices, paired t-tests and reports."""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import betainc

from besent.corpus import Bloom, Sentiment
from besent.errors import BESentWarning, DataError
from besent.hierarchy import N_BLOOM, label_name, task_label
from besent.seeding import derive_seed

REPORT_VERSION = 1

# Short labels used by the course LMS front-end.
PRESENTATION_LABELS = {
    "positive": "positif", "neutral": "netral", "negative": "negatif",
    "remembering": "rem", "understanding": "und", "applying": "app",
    "analyzing": "ana", "evaluating": "eva", "creating": "cre",
}


@dataclass
class ConfusionMatrix:
    classes: tuple
    counts: np.ndarray  # rows = gold, columns = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return int(np.trace(self.counts)) / self.total

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        return cls(tuple(d["classes"]), np.asarray(d["counts"], dtype=np.int64))

    def project(self, fn: Callable, classes: Sequence) -> "ConfusionMatrix":
        """Collapse onto a coarser label space via ``fn(old_class) -> new_class``."""
        pos = {c: k for k, c in enumerate(classes)}
        out = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for i, g in enumerate(self.classes):
            for j, p in enumerate(self.classes):
                out[pos[fn(g)], pos[fn(p)]] += self.counts[i, j]
        return ConfusionMatrix(tuple(classes), out)


def confusion_and_accuracy(gold: Sequence, pred: Sequence, classes: Sequence | None = None):
    if len(gold) != len(pred):
        raise DataError(f"{len(gold)} gold labels but {len(pred)} predictions")
    if len(gold) == 0:
        raise DataError("cannot score an empty prediction list")
    gold, pred = list(gold), list(pred)
    if classes is None:
        classes = sorted(set(gold) | set(pred))
    pos = {c: k for k, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for g, p in zip(gold, pred):
        counts[pos[g], pos[p]] += 1
    cm = ConfusionMatrix(tuple(classes), counts)
    return cm, cm.accuracy


@dataclass
class FoldResult:
    fold_index: int
    accuracy: float
    confusion: ConfusionMatrix

    def to_dict(self) -> dict:
        return {"fold_index": self.fold_index, "accuracy": self.accuracy,
                "confusion": self.confusion.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        return cls(d["fold_index"], d["accuracy"], ConfusionMatrix.from_dict(d["confusion"]))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator)."""
    vals = [float(v) for v in values]
    if not vals:
        raise DataError("no values to summarize")
    mean = math.fsum(vals) / len(vals)
    if len(vals) < 2:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1))


@dataclass
class SignificanceResult:
    t_stat: float
    p_value: float
    df: int
    alpha: float
    test: str = "paired t-test, two-tailed"

    @property
    def significant(self) -> bool:
        return self.p_value < self.alpha


def paired_t_test(a: Sequence[float], b: Sequence[float], alpha: float = 0.05) -> SignificanceResult:
    if len(a) != len(b):
        raise DataError("paired samples must have equal length")
    k = len(a)
    if k < 2:
        raise DataError("paired t-test needs at least two pairs")
    d = [float(x) - float(y) for x, y in zip(a, b)]
    mean, sd = mean_std(d)
    if sd == 0.0:
        raise DataError("degenerate paired test: differences have zero variance")
    t = mean / (sd / math.sqrt(k))
    df = k - 1
    # two-tailed tail mass of Student's t via the regularized incomplete beta
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return SignificanceResult(t, min(max(p, 0.0), 1.0), df, alpha)


# -- splits ----------------------------------------------------------------------

def _strata(labels: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    labels = np.asarray(labels)
    out = []
    for c in sorted(set(labels.tolist())):
        members = np.flatnonzero(labels == c)
        out.append(members[rng.permutation(len(members))])
    return out


def stratified_holdout(data: Sequence, train_ratio: float = 0.7, facet: str = "sentiment", seed: int = 0):
    """Stratified train/validation split; both halves keep the input order."""
    if not 0.0 < train_ratio < 1.0:
        raise ValueError("train_ratio must lie strictly between 0 and 1")
    labels = [task_label(item, facet) for item in data]
    rng = np.random.default_rng(seed)
    train_idx = []
    for members in _strata(labels, rng):
        n = len(members)
        if n == 1:
            warnings.warn(f"stratum {labels[members[0]]} has one member; it goes to training",
                          BESentWarning, stacklevel=2)
            take = 1
        else:
            take = max(1, math.floor(train_ratio * n + 1e-9))
        train_idx.extend(members[:take].tolist())
    in_train = np.zeros(len(data), dtype=bool)
    in_train[train_idx] = True
    train = [item for item, t in zip(data, in_train) if t]
    val = [item for item, t in zip(data, in_train) if not t]
    return train, val


def kfold_indices(labels: Sequence[int], k: int, seed: int = 0) -> list[np.ndarray]:
    """Stratified folds whose sizes differ by at most one.

    Strata are shuffled, laid end to end and dealt round-robin, so every
    class is spread as evenly as its size allows.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(labels) < k:
        raise DataError(f"{len(labels)} items cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    strata = _strata(labels, rng)
    small = [int(np.asarray(labels)[s[0]]) for s in strata if len(s) < k]
    if small:
        warnings.warn(f"classes {small} have fewer than {k} members", BESentWarning, stacklevel=2)
    order = np.concatenate(strata)
    return [np.sort(order[i::k]) for i in range(k)]


def kfold_cv(data: Sequence, k: int, trainer: Callable, facet: str = "sentiment", seed: int = 0,
             target: str | None = None, classes: Sequence | None = None, jobs: int = 1):
    """Run ``trainer`` on each fold.

    ``trainer(train_items, fold_seed)`` returns a callable mapping a list of
    validation items to predicted class ids in the ``target`` label space
    (defaults to ``facet``, which also drives stratification).  Returns
    ``(fold_results, (mean, sample_std))``.
    """
    target = target or facet
    folds = kfold_indices([task_label(x, facet) for x in data], k, seed)

    def run(i):
        val_idx = set(folds[i].tolist())
        train = [x for j, x in enumerate(data) if j not in val_idx]
        val = [data[j] for j in folds[i]]
        predict = trainer(train, derive_seed(seed, "fold", i))
        gold = [task_label(x, target) for x in val]
        cm, acc = confusion_and_accuracy(gold, [int(p) for p in predict(val)],
                                         classes if classes is not None else label_space(target))
        return FoldResult(i, acc, cm)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(i) for i in range(k)]
    return results, mean_std([r.accuracy for r in results])


def label_space(task: str) -> tuple:
    if task == "sentiment":
        return tuple(int(s) for s in Sentiment)
    if task == "bloom":
        return tuple(int(b) for b in Bloom)
    if task in ("pair", "joint"):
        return tuple(range(len(Sentiment) * N_BLOOM))
    raise ValueError(f"unknown task {task!r}")


# -- reports -------------------------------------------------------------------

@dataclass
class MethodResult:
    name: str
    metric: str  # label space scored: sentiment | bloom | pair | joint
    folds: list

    @property
    def accuracies(self) -> list[float]:
        return [f.accuracy for f in self.folds]

    def to_dict(self) -> dict:
        mean, std = mean_std(self.accuracies)
        return {"name": self.name, "metric": self.metric, "folds": [f.to_dict() for f in self.folds],
                "mean": mean, "std": std}

    @classmethod
    def from_dict(cls, d: dict) -> "MethodResult":
        return cls(d["name"], d["metric"], [FoldResult.from_dict(f) for f in d["folds"]])


@dataclass
class EvalReport:
    metadata: dict
    methods: list = field(default_factory=list)
    significance: list = field(default_factory=list)  # dicts
    notes: list = field(default_factory=list)

    def add_significance(self, a: MethodResult, b: MethodResult, alpha: float = 0.05):
        res = paired_t_test(a.accuracies, b.accuracies, alpha)
        self.significance.append({
            "a": f"{a.name}:{a.metric}", "b": f"{b.name}:{b.metric}", "test": res.test,
            "t_stat": res.t_stat, "p_value": res.p_value, "df": res.df, "alpha": res.alpha,
            "significant": res.significant,
        })
        return res

    def to_dict(self) -> dict:
        return {"report_version": REPORT_VERSION, "metadata": self.metadata,
                "methods": [m.to_dict() for m in self.methods],
                "significance": self.significance, "notes": self.notes,
                "presentation": PRESENTATION_LABELS}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("report_version") != REPORT_VERSION:
            raise DataError(f"unsupported report_version {d.get('report_version')!r}")
        return cls(d["metadata"], [MethodResult.from_dict(m) for m in d["methods"]],
                   list(d.get("significance", [])), list(d.get("notes", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _metric_label(metric: str, cid: int, presentation: bool) -> str:
    name = label_name("joint" if metric == "pair" else metric, cid)
    if presentation:
        name = "/".join(PRESENTATION_LABELS.get(p, p) for p in name.split("/"))
    return name


def render_markdown(report: EvalReport, presentation: bool = False) -> str:
    meta = report.metadata
    lines = ["# Evaluation report", ""]
    for key in sorted(meta):
        lines.append(f"- **{key}**: {meta[key]}")
    lines.append("")

    n_rows = max(len(m.folds) for m in report.methods)
    head = ["Iteration"] + [f"{m.name} ({m.metric}) %" for m in report.methods]
    lines += ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in range(n_rows):
        cells = [str(r + 1)]
        for m in report.methods:
            cells.append(f"{100 * m.folds[r].accuracy:.2f}" if r < len(m.folds) else "")
        lines.append("| " + " | ".join(cells) + " |")
    stats = [mean_std(m.accuracies) for m in report.methods]
    lines.append("| Mean | " + " | ".join(f"{100 * mu:.2f}" for mu, _ in stats) + " |")
    lines.append("| Std. Dev. | " + " | ".join(f"{100 * sd:.2f}" for _, sd in stats) + " |")
    lines.append("")

    if report.significance:
        lines += ["## Significance", "", "| A | B | test | t | df | p | significant |",
                  "|---|---|---|---|---|---|---|"]
        for s in report.significance:
            lines.append(f"| {s['a']} | {s['b']} | {s['test']} | {s['t_stat']:.3f} | {s['df']} "
                         f"| {s['p_value']:.4f} | {'yes' if s['significant'] else 'no'} |")
        lines.append("")

    lines.append("## Confusion matrices (summed over folds; rows = gold, columns = predicted)")
    for m in report.methods:
        total = sum(f.confusion.counts for f in m.folds)
        cls = m.folds[0].confusion.classes
        used = [k for k in range(len(cls)) if total[k].sum() or total[:, k].sum()]
        names = [_metric_label(m.metric, cls[k], presentation) for k in used]
        lines += ["", f"### {m.name} ({m.metric})", "",
                  "| gold \\ pred | " + " | ".join(names) + " |", "|" + "---|" * (len(names) + 1)]
        for k, nm in zip(used, names):
            lines.append(f"| {nm} | " + " | ".join(str(int(total[k, j])) for j in used) + " |")
    if report.notes:
        lines += ["", "## Notes", ""] + [f"- {n}" for n in report.notes]
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, path, format: str = "json", presentation: bool = False) -> None:
    if not report.methods:
        raise DataError("report has no methods; nothing to emit")
    for m in report.methods:
        if not m.folds:
            raise DataError(f"method {m.name!r} has no folds")
    text = report.to_json() if format == "json" else render_markdown(report, presentation)
    if format not in ("json", "markdown"):
        raise ValueError(f"unknown report format {format!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
