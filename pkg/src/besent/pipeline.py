"""Run configuration and the train / evaluate workflows used by the CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from typing import Sequence

from besent.corpus import Bloom, LabeledChat, Sentiment
from besent.errors import DataError
from besent.evaluation import (
    EvalReport, FoldResult, MethodResult, confusion_and_accuracy, kfold_cv, label_space,
    stratified_holdout,
)
from besent.hierarchy import (
    N_BLOOM, ModelConfig, bundle_to_dict, fit_mode, predict_mode_batch, task_label,
)
from besent.models.forest import ForestParams
from besent.models.lstm import LstmHyper, random_search_epochs
from besent.preprocess import PreprocessConfig, preprocess_chat

# Output locations do not change results, so they stay out of the digest.
_NOT_DIGESTED = {"model_out", "report", "curve_out"}


@dataclass
class RunConfig:
    # paths
    data: str | None = None
    stopwords: str | None = None
    embeddings: str | None = None
    model_in: str | None = None
    model_out: str | None = None
    report: str | None = None
    curve_out: str | None = None
    # preprocessing
    lowercase: bool = True
    strip_urls: bool = True
    strip_punct: bool = True
    min_token_len: int = 2
    use_default_stopwords: bool = True
    # features
    min_df: int = 1
    max_size: int = 20000
    seq_len: int = 50
    embed_dim: int = 32
    # resampling
    resample: bool = True
    k_neighbors: int = 5
    # forest
    n_trees: int = 100
    max_depth: int = 32
    min_samples_leaf: int = 1
    mtry: int | None = None
    bootstrap: bool = True
    # lstm
    lstm_layers: int = 2
    hidden: int = 100
    epochs: int | None = None
    epochs_sentiment: int = 6
    epochs_bloom: int = 7
    batch_size: int = 32
    learning_rate: float = 0.001
    clip_norm: float | None = None
    # evaluation
    protocol: str = "cv"
    k: int = 5
    train_ratio: float = 0.7
    alpha: float = 0.05
    compare: bool = False
    # model
    mode: str = "two_step"
    stage1: str = "forest"
    stage2: str = "forest"
    seed: int = 0
    jobs: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def merged(self, overrides: dict) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in _NOT_DIGESTED}
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def model_config(self, seed: int | None = None) -> ModelConfig:
        return ModelConfig(
            preprocess=PreprocessConfig(self.lowercase, self.strip_urls, self.strip_punct,
                                        self.min_token_len, self.stopwords, self.use_default_stopwords),
            min_df=self.min_df, max_size=self.max_size, seq_len=self.seq_len,
            embeddings_path=self.embeddings,
            forest=ForestParams(self.n_trees, self.max_depth, self.min_samples_leaf, self.mtry,
                                self.bootstrap, 0),
            lstm=LstmHyper(self.lstm_layers, self.hidden, self.embed_dim, self.epochs,
                           self.batch_size, self.learning_rate, 0, self.clip_norm),
            resample=self.resample, k_neighbors=self.k_neighbors,
            seed=self.seed if seed is None else seed, n_jobs=self.jobs,
            epochs_sentiment=self.epochs_sentiment, epochs_bloom=self.epochs_bloom,
            epochs_joint=self.epochs_bloom,
        )

    def run_metadata(self) -> dict:
        return {"config_digest": self.digest(), "seed": self.seed}


STRATIFY_FACET = {"sentiment_only": "sentiment", "epistemic_only": "bloom",
                  "multilabel": "pair", "two_step": "sentiment"}
TARGET = {"sentiment_only": "sentiment", "epistemic_only": "bloom",
          "multilabel": "pair", "two_step": "pair"}


def require_labeled(items: Sequence) -> list[LabeledChat]:
    labeled = [x for x in items if isinstance(x, LabeledChat)]
    if len(labeled) != len(items):
        raise DataError(f"{len(items) - len(labeled)} chats lack gold labels")
    return labeled


def _predictor(model, mode, config: ModelConfig):
    def predict(items):
        docs = [preprocess_chat(c, config.preprocess) for c in items]
        return predict_mode_batch(model, mode, docs)
    return predict


def train_model(data: Sequence[LabeledChat], rc: RunConfig, stage1: str | None = None,
                stage2: str | None = None, seed: int | None = None):
    config = rc.model_config(seed)
    model = fit_mode(data, rc.mode, stage1 or rc.stage1, stage2 or rc.stage2, config)
    return model, config


def bundle(model, rc: RunConfig) -> dict:
    out = bundle_to_dict(model, rc.mode)
    out["run"] = {**rc.run_metadata(), "stage1": rc.stage1, "stage2": rc.stage2}
    return out


def search_epochs(data: Sequence[LabeledChat], task: str, rc: RunConfig, epoch_range, trials: int):
    """Random search over LSTM epoch counts on a stratified hold-out of ``data``."""
    from besent.hierarchy import build_space

    train, val = stratified_holdout(data, rc.train_ratio, "pair" if task == "joint" else task, rc.seed)
    config = rc.model_config()
    docs = [preprocess_chat(c, config.preprocess) for c in train]
    space = build_space(docs, config)
    vdocs = [preprocess_chat(c, config.preprocess) for c in val]
    y = [task_label(c, task) for c in train]
    vy = [task_label(c, task) for c in val]
    hyper = dataclasses.replace(config.lstm, epochs=1, seed=rc.seed)
    return random_search_epochs((space.sequences(docs), y), (space.sequences(vdocs), vy), hyper,
                                len(space.vocab), epoch_range, trials, seed=rc.seed,
                                classes=sorted(set(y)))


def _methods_from_folds(name: str, mode: str, folds: list[FoldResult]) -> list[MethodResult]:
    target = TARGET[mode]
    if target != "pair":
        return [MethodResult(name, target, folds)]
    out = [MethodResult(name, "pair", folds)]
    for facet, fn, classes in (("sentiment", lambda j: j // N_BLOOM, [int(s) for s in Sentiment]),
                               ("bloom", lambda j: j % N_BLOOM, [int(b) for b in Bloom])):
        projected = []
        for f in folds:
            cm = f.confusion.project(fn, classes)
            projected.append(FoldResult(f.fold_index, cm.accuracy, cm))
        out.append(MethodResult(name, facet, projected))
    return out


def evaluate_method(data: Sequence[LabeledChat], rc: RunConfig, stage1: str, stage2: str) -> list[MethodResult]:
    mode = rc.mode
    name = f"{mode}[{stage1}/{stage2}]" if mode == "two_step" else f"{mode}[{stage1}]"
    facet, target = STRATIFY_FACET[mode], TARGET[mode]

    def trainer(train, fold_seed):
        model, config = train_model(train, rc, stage1, stage2, fold_seed)
        return _predictor(model, mode, config)

    if rc.protocol == "cv":
        folds, _ = kfold_cv(data, rc.k, trainer, facet, rc.seed, target=target, jobs=rc.jobs)
    elif rc.protocol == "holdout":
        train, val = stratified_holdout(data, rc.train_ratio, facet, rc.seed)
        predict = trainer(train, rc.seed)
        gold = [task_label(x, target) for x in val]
        cm, acc = confusion_and_accuracy(gold, [int(p) for p in predict(val)], label_space(target))
        folds = [FoldResult(0, acc, cm)]
    else:
        raise ValueError(f"unknown protocol {rc.protocol!r}")
    return _methods_from_folds(name, mode, folds)


def evaluate_run(data: Sequence[LabeledChat], rc: RunConfig) -> EvalReport:
    """Evaluate the configured mode; with ``compare`` also the all-LSTM (or
    all-forest) counterpart, plus paired t-tests on matched folds."""
    data = require_labeled(data)
    meta = {**rc.run_metadata(), "mode": rc.mode, "protocol": rc.protocol,
            "k": rc.k if rc.protocol == "cv" else None,
            "train_ratio": rc.train_ratio if rc.protocol == "holdout" else None,
            "n_items": len(data), "stratified_by": STRATIFY_FACET[rc.mode],
            "resampling": "SMOTE (forest) / duplication (lstm), training folds only"
            if rc.resample else "off"}
    report = EvalReport({k: v for k, v in meta.items() if v is not None})
    primary = evaluate_method(data, rc, rc.stage1, rc.stage2)
    report.methods.extend(primary)
    if rc.compare:
        other = "lstm" if rc.stage1 == "forest" else "forest"
        second = evaluate_method(data, rc, other, other)
        report.methods.extend(second)
        if rc.protocol == "cv":
            for a, b in zip(primary, second):
                try:
                    report.add_significance(a, b, rc.alpha)
                except DataError as exc:
                    report.notes.append(f"no t-test for {a.metric}: {exc}")
    if rc.mode == "two_step":
        for m in [x for x in report.methods if x.metric == "sentiment"]:
            bloom = next(x for x in report.methods if x.name == m.name and x.metric == "bloom")
            avg = [0.5 * (s + b) for s, b in zip(m.accuracies, bloom.accuracies)]
            report.notes.append(
                f"{m.name}: mean of stage accuracies per fold = {[round(v, 6) for v in avg]}")
    return report


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n"

