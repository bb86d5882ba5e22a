"""Two-step sentiment -> Bloom classifier, plus the joint and single-task baselines.

Stage one predicts sentiment.  Stage two holds one Bloom classifier per
sentiment class, each trained on the chats whose *gold* sentiment is that
class, and is routed at inference time by the *predicted* sentiment.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from besent.corpus import Bloom, LabeledChat, Sentiment
from besent.errors import DataError, FormatError
from besent.features import (
    DEFAULT_SEQ_LEN, UNK, Vocabulary, build_vocabulary, encode_sequence, load_embeddings,
    tfidf_matrix,
)
from besent.models.forest import ForestModel, ForestParams, fit_random_forest, forest_votes
from besent.models.lstm import EPOCH_PRESETS, LstmHyper, LstmModel, lstm_fit, lstm_scores
from besent.models.serialize import FORMAT_VERSION, model_from_dict, model_to_dict
from besent.preprocess import PreprocessConfig, TokenizedDoc, preprocess_chat, preprocess_text
from besent.resample import ResamplePlan, random_oversample, smote
from besent.seeding import derive_seed

N_BLOOM = len(Bloom)
TASKS = ("sentiment", "bloom", "joint")
KINDS = ("forest", "lstm")


def joint_id(sentiment, bloom) -> int:
    return int(sentiment) * N_BLOOM + int(bloom)


def split_joint(jid: int) -> tuple[Sentiment, Bloom]:
    if not 0 <= jid < len(Sentiment) * N_BLOOM:
        raise ValueError(f"joint id {jid} outside 0..17")
    return Sentiment(jid // N_BLOOM), Bloom(jid % N_BLOOM)


def task_label(item: LabeledChat, task: str) -> int:
    if task == "sentiment":
        return int(item.sentiment)
    if task == "bloom":
        return int(item.bloom)
    if task in ("joint", "pair"):
        return joint_id(item.sentiment, item.bloom)
    raise ValueError(f"unknown task {task!r}")


def label_name(task: str, cid: int) -> str:
    if task == "sentiment":
        return Sentiment(cid).label
    if task == "bloom":
        return Bloom(cid).label
    s, b = split_joint(cid)
    return f"{s.label}/{b.label}"


@dataclass(frozen=True)
class ModelConfig:
    preprocess: PreprocessConfig = PreprocessConfig()
    min_df: int = 1
    max_size: int = 20000
    seq_len: int = DEFAULT_SEQ_LEN
    embeddings_path: str | None = None
    forest: ForestParams = ForestParams()
    lstm: LstmHyper = LstmHyper()
    resample: bool = True
    k_neighbors: int = 5
    seed: int = 0
    n_jobs: int = 1
    # used when lstm.epochs is None
    epochs_sentiment: int = EPOCH_PRESETS["sentiment"]
    epochs_bloom: int = EPOCH_PRESETS["bloom"]
    epochs_joint: int = EPOCH_PRESETS["bloom"]

    def lstm_for(self, task: str, seed: int) -> LstmHyper:
        epochs = self.lstm.epochs
        if epochs is None:
            epochs = {"sentiment": self.epochs_sentiment, "bloom": self.epochs_bloom}.get(
                task, self.epochs_joint)
        return replace(self.lstm, epochs=epochs, seed=seed)


@dataclass
class FeatureSpace:
    """Everything needed to turn raw text into model input."""

    preprocess: PreprocessConfig
    vocab: Vocabulary
    seq_len: int
    embedding: np.ndarray | None = None

    @property
    def fingerprint(self) -> str:
        return self.vocab.fingerprint

    def tokenize(self, text: str) -> TokenizedDoc:
        return TokenizedDoc("", preprocess_text(text, self.preprocess))

    def tfidf(self, docs: Sequence[TokenizedDoc]) -> np.ndarray:
        return tfidf_matrix(docs, self.vocab)

    def sequences(self, docs: Sequence[TokenizedDoc]) -> tuple[np.ndarray, np.ndarray]:
        # a chat whose tokens were all filtered out is read as a single UNK
        seqs = [encode_sequence(d, self.vocab, self.seq_len) for d in docs]
        ids = np.array([s.ids for s in seqs], dtype=np.int64).reshape(len(seqs), self.seq_len)
        lengths = np.array([s.true_len for s in seqs], dtype=np.int64)
        ids[lengths == 0, 0] = UNK
        return ids, np.maximum(lengths, 1)

    def to_dict(self) -> dict:
        return {"preprocess": self.preprocess.to_dict(), "vocab": self.vocab.to_dict(),
                "seq_len": self.seq_len}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpace":
        return cls(PreprocessConfig(**d["preprocess"]), Vocabulary.from_dict(d["vocab"]), d["seq_len"])


def build_space(docs: Sequence[TokenizedDoc], config: ModelConfig) -> FeatureSpace:
    vocab = build_vocabulary(docs, config.min_df, config.max_size)
    emb = None
    if config.embeddings_path:
        rng = np.random.default_rng(derive_seed(config.seed, "embeddings"))
        emb = load_embeddings(config.embeddings_path, vocab, config.lstm.embed_dim, rng).vectors
    return FeatureSpace(config.preprocess, vocab, config.seq_len, emb)


@dataclass
class ClassifierHandle:
    kind: str
    model: ForestModel | LstmModel
    task: str
    space: FeatureSpace = field(repr=False)

    @property
    def classes(self) -> tuple:
        return tuple(self.model.classes)

    def class_scores(self, docs: Sequence[TokenizedDoc]) -> np.ndarray:
        """Forest vote counts or LSTM sigmoid scores, one column per class."""
        if self.model.vocab_fingerprint != self.space.fingerprint:
            raise DataError("classifier and feature space disagree on the vocabulary")
        if not docs:
            return np.zeros((0, len(self.classes)))
        if self.kind == "forest":
            return forest_votes(self.model, self.space.tfidf(docs))
        ids, lengths = self.space.sequences(docs)
        return lstm_scores(self.model, ids, lengths)

    def predict(self, docs: Sequence[TokenizedDoc]) -> np.ndarray:
        scores = self.class_scores(docs)
        return np.asarray(self.classes, dtype=np.int64)[np.argmax(scores, axis=1)] if len(docs) \
            else np.zeros(0, dtype=np.int64)

    def explain(self, doc: TokenizedDoc) -> dict:
        scores = self.class_scores([doc])[0]
        key = "votes" if self.kind == "forest" else "scores"
        k = int(np.argmax(scores))
        return {
            "kind": self.kind,
            "prediction": label_name(self.task, self.classes[k]),
            key: {label_name(self.task, c): (int(v) if self.kind == "forest" else float(v))
                  for c, v in zip(self.classes, scores)},
        }


def _fit_handle(docs, labels, task, kind, space, config: ModelConfig, seed: int) -> ClassifierHandle:
    labels = np.asarray(labels, dtype=np.int64)
    classes = sorted(set(labels.tolist()))
    plan = ResamplePlan(config.k_neighbors, seed=derive_seed(seed, "resample"))
    if kind == "forest":
        X = space.tfidf(docs)
        if config.resample:
            X, labels = smote(X, labels, plan)
        params = replace(config.forest, seed=derive_seed(seed, "forest"))
        model = fit_random_forest(X, labels, params, classes=classes,
                                  vocab_fingerprint=space.fingerprint, n_jobs=config.n_jobs)
    elif kind == "lstm":
        ids, lengths = space.sequences(docs)
        if config.resample:
            rows, labels = random_oversample(range(len(labels)), labels.tolist(), plan)
            rows = np.asarray(rows, dtype=np.int64)
            ids, lengths, labels = ids[rows], lengths[rows], np.asarray(labels, dtype=np.int64)
        hyper = config.lstm_for(task, derive_seed(seed, "lstm"))
        model, _ = lstm_fit(((ids, lengths), labels), None, hyper, len(space.vocab), classes=classes,
                            embedding=space.embedding, vocab_fingerprint=space.fingerprint)
    else:
        raise ValueError(f"unknown classifier kind {kind!r}")
    return ClassifierHandle(kind, model, task, space)


def _prepare(train: Sequence[LabeledChat], config: ModelConfig):
    if not train:
        raise DataError("training set is empty")
    docs = [preprocess_chat(c, config.preprocess) for c in train]
    return docs, build_space(docs, config)


@dataclass
class BESentModel:
    sentiment_stage: ClassifierHandle
    epistemic_stages: dict  # Sentiment -> ClassifierHandle

    @property
    def space(self) -> FeatureSpace:
        return self.sentiment_stage.space

    def __post_init__(self):
        if set(self.epistemic_stages) != set(Sentiment):
            raise DataError("need exactly one epistemic classifier per sentiment class")
        fps = {self.sentiment_stage.model.vocab_fingerprint}
        fps |= {h.model.vocab_fingerprint for h in self.epistemic_stages.values()}
        if len(fps) != 1:
            raise DataError("stages were trained against different vocabularies")


def fit_two_step(train: Sequence[LabeledChat], stage1_kind: str = "forest",
                 stage2_kind: str = "forest", config: ModelConfig = ModelConfig()) -> BESentModel:
    docs, space = _prepare(train, config)
    sent = [int(c.sentiment) for c in train]
    stage1 = _fit_handle(docs, sent, "sentiment", stage1_kind, space, config,
                         derive_seed(config.seed, "stage1"))
    branches = {}
    for s in Sentiment:
        rows = [i for i, v in enumerate(sent) if v == s]
        if not rows:
            raise DataError(f"no training chats with sentiment {s.label!r}; cannot train its branch")
        branches[s] = _fit_handle([docs[i] for i in rows], [int(train[i].bloom) for i in rows],
                                  "bloom", stage2_kind, space, config,
                                  derive_seed(config.seed, "stage2", s.label))
    return BESentModel(stage1, branches)


def predict_two_step_batch(model: BESentModel, docs: Sequence[TokenizedDoc]):
    s = model.sentiment_stage.predict(docs)
    b = np.zeros(len(docs), dtype=np.int64)
    for label, handle in model.epistemic_stages.items():
        rows = np.flatnonzero(s == int(label))
        if len(rows):
            b[rows] = handle.predict([docs[i] for i in rows])
    return s, b


def predict_two_step(model: BESentModel, doc: TokenizedDoc) -> tuple[Sentiment, Bloom]:
    if isinstance(doc, str):
        doc = model.space.tokenize(doc)
    s = Sentiment(int(model.sentiment_stage.predict([doc])[0]))
    b = Bloom(int(model.epistemic_stages[s].predict([doc])[0]))
    return s, b


def fit_multilabel(train: Sequence[LabeledChat], kind: str = "forest",
                   config: ModelConfig = ModelConfig()) -> ClassifierHandle:
    """One classifier over the 18 joint ids ``sentiment * 6 + bloom``."""
    docs, space = _prepare(train, config)
    return _fit_handle(docs, [task_label(c, "joint") for c in train], "joint", kind, space, config,
                       derive_seed(config.seed, "joint"))


def predict_multilabel(handle: ClassifierHandle, doc: TokenizedDoc) -> tuple[Sentiment, Bloom]:
    if isinstance(doc, str):
        doc = handle.space.tokenize(doc)
    return split_joint(int(handle.predict([doc])[0]))


def fit_single(train: Sequence[LabeledChat], task: str, kind: str = "forest",
               config: ModelConfig = ModelConfig()) -> ClassifierHandle:
    if task not in ("sentiment", "bloom"):
        raise ValueError("single-task mode is 'sentiment' or 'bloom'")
    docs, space = _prepare(train, config)
    return _fit_handle(docs, [task_label(c, task) for c in train], task, kind, space, config,
                       derive_seed(config.seed, "single", task))


def predict_single(handle: ClassifierHandle, doc: TokenizedDoc):
    if isinstance(doc, str):
        doc = handle.space.tokenize(doc)
    cid = int(handle.predict([doc])[0])
    return Sentiment(cid) if handle.task == "sentiment" else Bloom(cid)


# -- bundles -----------------------------------------------------------------

MODES = ("sentiment_only", "epistemic_only", "multilabel", "two_step")


def _handle_to_dict(h: ClassifierHandle) -> dict:
    return {"kind": h.kind, "task": h.task, "model": model_to_dict(h.model)}


def _handle_from_dict(d: dict, space: FeatureSpace) -> ClassifierHandle:
    return ClassifierHandle(d["kind"], model_from_dict(d["model"]), d["task"], space)


def bundle_to_dict(obj, mode: str) -> dict:
    """JSON envelope for a trained model of any mode, including its feature space."""
    if isinstance(obj, BESentModel):
        stages = {"sentiment": _handle_to_dict(obj.sentiment_stage),
                  "bloom": {s.label: _handle_to_dict(h) for s, h in sorted(obj.epistemic_stages.items())}}
        routing = {s.label: s.label for s in Sentiment}
    else:
        stages = {"single": _handle_to_dict(obj)}
        routing = None
    return {"format_version": FORMAT_VERSION, "kind": "besent", "mode": mode,
            "space": obj.space.to_dict(), "stages": stages, "routing": routing}


def bundle_from_dict(d: dict):
    if d.get("format_version") != FORMAT_VERSION or d.get("kind") != "besent":
        raise FormatError("not a besent model bundle of a supported format_version")
    space = FeatureSpace.from_dict(d["space"])
    stages = d["stages"]
    if d["mode"] == "two_step":
        branches = {Sentiment.parse(k): _handle_from_dict(v, space) for k, v in stages["bloom"].items()}
        return BESentModel(_handle_from_dict(stages["sentiment"], space), branches), d["mode"]
    return _handle_from_dict(stages["single"], space), d["mode"]


def predict_bundle(obj, mode: str, doc: TokenizedDoc) -> dict:
    """Prediction plus per-stage votes/scores, keyed for downstream consumers."""
    out: dict = {}
    if mode == "two_step":
        s, b = predict_two_step(obj, doc)
        branch = obj.epistemic_stages[s]
        out = {"sentiment": s.label, "bloom": b.label,
               "stages": {"sentiment": obj.sentiment_stage.explain(doc),
                          "bloom": {"branch": s.label, **branch.explain(doc)}}}
    elif mode == "multilabel":
        s, b = predict_multilabel(obj, doc)
        out = {"sentiment": s.label, "bloom": b.label, "stages": {"joint": obj.explain(doc)}}
    elif mode in ("sentiment_only", "epistemic_only"):
        lab = predict_single(obj, doc)
        key = "sentiment" if mode == "sentiment_only" else "bloom"
        out = {key: lab.label, "stages": {key: obj.explain(doc)}}
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out


def fit_mode(train: Sequence[LabeledChat], mode: str, stage1_kind: str = "forest",
             stage2_kind: str = "forest", config: ModelConfig = ModelConfig()):
    if mode == "two_step":
        return fit_two_step(train, stage1_kind, stage2_kind, config)
    if mode == "multilabel":
        return fit_multilabel(train, stage1_kind, config)
    if mode == "sentiment_only":
        return fit_single(train, "sentiment", stage1_kind, config)
    if mode == "epistemic_only":
        return fit_single(train, "bloom", stage1_kind, config)
    raise ValueError(f"unknown mode {mode!r}")


def predict_mode_batch(obj, mode: str, docs: Sequence[TokenizedDoc]) -> np.ndarray:
    """Predictions in the mode's own label space (joint ids for two_step/multilabel)."""
    if mode == "two_step":
        s, b = predict_two_step_batch(obj, docs)
        return s * N_BLOOM + b
    return obj.predict(docs)


def config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    return json.loads(json.dumps(d))
