"""Stacked bidirectional LSTM classifier in plain numpy.

Embedding -> ``layers`` bidirectional LSTM layers -> per-class sigmoid head.
Gradients come from hand-written backpropagation through time; training
uses Adam on the summed per-class binary cross-entropy.

Gate blocks are stacked along the last axis in the order (f, i, o, c), so
``W`` has shape ``(input, 4*hidden)``, ``U`` ``(hidden, 4*hidden)`` and
``b`` ``(4*hidden,)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from besent.errors import DataError, TrainingError
from besent.features import PAD

log = logging.getLogger(__name__)

GATES = ("f", "i", "o", "c")
EPOCH_PRESETS = {"sentiment": 6, "bloom": 7}


def sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class LstmHyper:
    layers: int = 2
    hidden: int = 100
    embed_dim: int = 32
    epochs: int | None = None  # None -> task preset (6 sentiment, 7 bloom)
    batch_size: int = 32
    learning_rate: float = 0.001
    seed: int = 0
    clip_norm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("layers", "hidden", "embed_dim", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def for_task(self, task: str) -> "LstmHyper":
        if self.epochs is not None:
            return self
        return LstmHyper(**{**asdict(self), "epochs": EPOCH_PRESETS.get(task, 6)})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GateParams:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    def gate(self, name: str):
        """``(W_g, U_g, b_g)`` views for one gate."""
        k, H = GATES.index(name), self.hidden
        sl = slice(k * H, (k + 1) * H)
        return self.W[:, sl], self.U[:, sl], self.b[sl]

    def arrays(self):
        return [self.W, self.U, self.b]


def lstm_cell_step(p: GateParams, x_t, h_prev, c_prev):
    """One LSTM step; works on single vectors or on a batch of rows."""
    H = p.hidden
    if (x_t.shape[-1] != p.W.shape[0] or h_prev.shape[-1] != H or c_prev.shape[-1] != H
            or p.U.shape != (H, 4 * H) or p.W.shape[1] != 4 * H or p.b.shape != (4 * H,)):
        raise DataError("LSTM cell shapes are inconsistent")
    z = x_t @ p.W + h_prev @ p.U + p.b
    f = sigmoid(z[..., :H])
    i = sigmoid(z[..., H:2 * H])
    o = sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


@dataclass
class LstmModel:
    embedding: np.ndarray
    layers: list  # [layer][0 forward, 1 backward] -> GateParams
    head_W: np.ndarray
    head_b: np.ndarray
    classes: tuple
    hyper: LstmHyper
    vocab_fingerprint: str | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.embedding.dtype

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = [("embedding", self.embedding)]
        for l, pair in enumerate(self.layers):
            for d, p in zip(("fwd", "bwd"), pair):
                out += [(f"layer{l}.{d}.W", p.W), (f"layer{l}.{d}.U", p.U), (f"layer{l}.{d}.b", p.b)]
        out += [("head.W", self.head_W), ("head.b", self.head_b)]
        return out

    def astype(self, dtype) -> "LstmModel":
        cast = lambda a: np.array(a, dtype=dtype)  # noqa: E731
        return LstmModel(
            cast(self.embedding),
            [[GateParams(cast(p.W), cast(p.U), cast(p.b)) for p in pair] for pair in self.layers],
            cast(self.head_W), cast(self.head_b), self.classes, self.hyper,
            self.vocab_fingerprint, dict(self.metadata),
        )

    def copy(self) -> "LstmModel":
        return self.astype(self.dtype)


def _glorot(rng, fan_in, fan_out, size):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=size)


def init_lstm(vocab_size: int, classes: Sequence[int], hyper: LstmHyper,
              embedding: np.ndarray | None = None, rng: np.random.Generator | None = None,
              vocab_fingerprint: str | None = None) -> LstmModel:
    """Glorot-uniform gate and head weights, zero biases with forget bias 1."""
    rng = rng if rng is not None else np.random.default_rng([hyper.seed, 0])
    H, d = hyper.hidden, hyper.embed_dim
    if embedding is None:
        embedding = rng.uniform(-0.05, 0.05, size=(vocab_size, d))
    else:
        embedding = np.array(embedding, dtype=np.float64)
        if embedding.shape != (vocab_size, d):
            raise DataError(f"embedding shape {embedding.shape} != ({vocab_size}, {d})")
    embedding[PAD] = 0.0
    layers = []
    for l in range(hyper.layers):
        n_in = d if l == 0 else 2 * H
        pair = []
        for _ in range(2):
            W = np.concatenate([_glorot(rng, n_in, H, (n_in, H)) for _ in GATES], axis=1)
            U = np.concatenate([_glorot(rng, H, H, (H, H)) for _ in GATES], axis=1)
            b = np.zeros(4 * H)
            b[:H] = 1.0
            pair.append(GateParams(W, U, b))
        layers.append(pair)
    C = len(classes)
    return LstmModel(embedding, layers, _glorot(rng, 2 * H, C, (2 * H, C)), np.zeros(C),
                     tuple(int(c) for c in classes), hyper, vocab_fingerprint)


# -- forward / backward ------------------------------------------------------

def _run_direction(p: GateParams, X, M, reverse: bool):
    B, T, _ = X.shape
    H = p.hidden
    h = np.zeros((B, H), dtype=X.dtype)
    c = np.zeros((B, H), dtype=X.dtype)
    outs = np.empty((B, T, H), dtype=X.dtype)
    cache = []
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        x = X[:, t]
        z = x @ p.W + h @ p.U + p.b
        f = sigmoid(z[:, :H])
        i = sigmoid(z[:, H:2 * H])
        o = sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        m = M[:, t, None]
        cache.append((t, x, h, c, f, i, o, g, tc, m))
        # masked (PAD) steps carry the state through untouched
        c = np.where(m, c_new, c)
        h = np.where(m, o * tc, h)
        outs[:, t] = h
    return outs, h, cache


def _back_direction(p: GateParams, cache, d_outs, dh_last):
    dW, dU, db = np.zeros_like(p.W), np.zeros_like(p.U), np.zeros_like(p.b)
    B, T, _ = d_outs.shape
    dX = np.zeros((B, T, p.W.shape[0]), dtype=p.W.dtype)
    dh = dh_last.copy()
    dc = np.zeros_like(dh)
    zero = np.zeros((), dtype=dh.dtype)
    for t, x, h_prev, c_prev, f, i, o, g, tc, m in reversed(cache):
        dh = dh + d_outs[:, t]
        dh_new, dh_pass = np.where(m, dh, zero), np.where(m, zero, dh)
        dc_new, dc_pass = np.where(m, dc, zero), np.where(m, zero, dc)
        dcn = dc_new + dh_new * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dcn * c_prev * f * (1.0 - f),
            dcn * g * i * (1.0 - i),
            dh_new * tc * o * (1.0 - o),
            dcn * i * (1.0 - g * g),
        ], axis=1)
        dW += x.T @ dz
        dU += h_prev.T @ dz
        db += dz.sum(axis=0)
        dX[:, t] = dz @ p.W.T
        dh = dz @ p.U.T + dh_pass
        dc = dcn * f + dc_pass
    return dX, [dW, dU, db]


def _check_batch(ids, lengths):
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if ids.ndim != 2 or len(ids) != len(lengths):
        raise DataError("expected an (n, L) id matrix and n lengths")
    if np.any(lengths <= 0):
        raise DataError("cannot run the LSTM on an empty sequence (true_len=0)")
    T = int(lengths.max())
    return ids[:, :T], lengths, T


def _forward(model: LstmModel, ids, lengths):
    ids, lengths, T = _check_batch(ids, lengths)
    M = np.arange(T)[None, :] < lengths[:, None]
    inp = model.embedding[ids]
    caches = []
    for pair in model.layers:
        of, hf, cf = _run_direction(pair[0], inp, M, reverse=False)
        ob, hb, cb = _run_direction(pair[1], inp, M, reverse=True)
        caches.append((cf, cb))
        inp = np.concatenate([of, ob], axis=2)
    feat = np.concatenate([hf, hb], axis=1)
    z = feat @ model.head_W + model.head_b
    return z, feat, caches, ids


def _targets(model: LstmModel, labels) -> np.ndarray:
    pos = {c: k for k, c in enumerate(model.classes)}
    Yt = np.zeros((len(labels), len(model.classes)), dtype=model.dtype)
    for r, lab in enumerate(labels):
        if int(lab) in pos:
            Yt[r, pos[int(lab)]] = 1.0
    return Yt


def loss_and_grads(model: LstmModel, ids, lengths, targets):
    """Mean over the batch of the per-sample summed binary cross-entropy, and
    its gradient for every array in ``model.parameters()`` order."""
    z, feat, caches, ids = _forward(model, ids, lengths)
    B = len(z)
    loss = float((np.logaddexp(0.0, z) - targets * z).sum() / B)
    dz = (sigmoid(z) - targets) / B
    d_head_W = feat.T @ dz
    d_head_b = dz.sum(axis=0)
    dfeat = dz @ model.head_W.T
    H = model.hyper.hidden
    layer_grads = [None] * len(model.layers)
    d_next = np.zeros((B, len(caches[-1][0]), 2 * H), dtype=z.dtype)
    for l in range(len(model.layers) - 1, -1, -1):
        cf, cb = caches[l]
        top = l == len(model.layers) - 1
        zeros = np.zeros((B, H), dtype=z.dtype)
        dXf, gf = _back_direction(model.layers[l][0], cf, d_next[:, :, :H], dfeat[:, :H] if top else zeros)
        dXb, gb = _back_direction(model.layers[l][1], cb, d_next[:, :, H:], dfeat[:, H:] if top else zeros)
        layer_grads[l] = gf + gb
        d_next = dXf + dXb
    dE = np.zeros_like(model.embedding)
    np.add.at(dE, ids, d_next)
    grads = [dE]
    for g in layer_grads:
        grads += g
    grads += [d_head_W, d_head_b]
    return loss, grads


def lstm_scores(model: LstmModel, ids, lengths, chunk: int = 256) -> np.ndarray:
    """Sigmoid class scores, shape ``(n, n_classes)``."""
    ids = np.asarray(ids)
    lengths = np.asarray(lengths)
    out = [sigmoid(_forward(model, ids[s:s + chunk], lengths[s:s + chunk])[0])
           for s in range(0, len(ids), chunk)]
    if not out:
        return np.zeros((0, len(model.classes)))
    return np.concatenate(out)


def lstm_forward(model: LstmModel, seq) -> np.ndarray:
    """Class scores in (0, 1) for one TokenSequence."""
    return lstm_scores(model, np.asarray([seq.ids]), np.asarray([seq.true_len]))[0]


def lstm_predict_batch(model: LstmModel, ids, lengths) -> np.ndarray:
    scores = lstm_scores(model, ids, lengths)
    return np.asarray(model.classes)[np.argmax(scores, axis=1)]


def lstm_predict(model: LstmModel, seq) -> int:
    return int(model.classes[int(np.argmax(lstm_forward(model, seq)))])


# -- training ----------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float | None


@dataclass
class TrainingCurve:
    epochs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs], "warnings": list(self.warnings)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingCurve":
        return cls([EpochStats(**e) for e in d.get("epochs", [])], list(d.get("warnings", [])))


class _Adam:
    def __init__(self, params, hyper: LstmHyper):
        self.hyper = hyper
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        h = self.hyper
        self.t += 1
        c1 = 1.0 - h.beta1 ** self.t
        c2 = 1.0 - h.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * g * g
            p -= h.learning_rate * (m / c1) / (np.sqrt(v / c2) + h.eps)


def _unpack(data):
    seqs, labels = data
    if isinstance(seqs, tuple) and len(seqs) == 2 and hasattr(seqs[0], "shape"):
        ids, lengths = seqs
    else:
        ids = np.array([s.ids for s in seqs], dtype=np.int64)
        lengths = np.array([s.true_len for s in seqs], dtype=np.int64)
    return np.asarray(ids, dtype=np.int64), np.asarray(lengths, dtype=np.int64), np.asarray(labels)


def lstm_fit(train, val, hyper: LstmHyper, vocab_size: int, classes: Sequence[int] | None = None,
             embedding: np.ndarray | None = None, vocab_fingerprint: str | None = None):
    """Mini-batch BPTT with Adam.

    ``train`` and ``val`` are ``(sequences, labels)`` pairs where sequences
    is a list of TokenSequence or an ``(ids, lengths)`` array pair; ``val``
    may be None.  Returns
    ``(model, curve)``.  Same seed and data give bit-identical parameters.
    """
    if hyper.epochs is None:
        raise ValueError("hyper.epochs must be set (see LstmHyper.for_task)")
    ids, lengths, labels = _unpack(train)
    if len(labels) == 0:
        raise DataError("LSTM training set is empty")
    present = sorted(set(labels.tolist()))
    classes = tuple(present) if classes is None else tuple(sorted(int(c) for c in classes))
    curve = TrainingCurve()
    absent = [c for c in classes if c not in present]
    if absent:
        curve.warnings.append(f"classes absent from training data: {absent}")
    model = init_lstm(vocab_size, classes, hyper, embedding, vocab_fingerprint=vocab_fingerprint)
    if val is not None:
        v_ids, v_len, v_lab = _unpack(val)

    params = [p for _, p in model.parameters()]
    adam = _Adam(params, hyper)
    rng = np.random.default_rng([hyper.seed, 1])
    targets = _targets(model, labels)
    cls_arr = np.asarray(classes)
    n = len(labels)
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, hyper.batch_size), start=1):
            idx = order[start:start + hyper.batch_size]
            z = _forward(model, ids[idx], lengths[idx])[0]
            correct += int((cls_arr[np.argmax(z, axis=1)] == labels[idx]).sum())
            loss, grads = loss_and_grads(model, ids[idx], lengths[idx], targets[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            if hyper.clip_norm is not None:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
                if norm > hyper.clip_norm:
                    grads = [g * (hyper.clip_norm / norm) for g in grads]
            adam.step(params, grads)
            model.embedding[PAD] = 0.0
            loss_sum += loss * len(idx)
        val_acc = None
        if val is not None and len(v_lab):
            val_acc = float((lstm_predict_batch(model, v_ids, v_len) == v_lab).mean())
        curve.epochs.append(EpochStats(epoch, loss_sum / n, correct / n, val_acc))
        log.debug("epoch %d loss %.4f acc %.4f val %s", epoch, loss_sum / n, correct / n, val_acc)
    model.metadata["curve"] = curve.to_dict()
    return model, curve


def random_search_epochs(train, val, hyper: LstmHyper, vocab_size: int, epoch_range=(1, 10),
                         trials: int = 5, seed: int = 0, **fit_kwargs):
    """Train with randomly drawn epoch counts; keep the best validation accuracy.

    Returns ``(best_epochs, [(epochs, val_accuracy), ...])``; ties prefer
    fewer epochs.
    """
    lo, hi = epoch_range
    if lo < 1 or hi < lo:
        raise ValueError("epoch_range must satisfy 1 <= lo <= hi")
    rng = np.random.default_rng(seed)
    candidates = np.arange(lo, hi + 1)
    picks = sorted(rng.choice(candidates, size=min(trials, len(candidates)), replace=False).tolist())
    results = []
    for e in picks:
        h = LstmHyper(**{**asdict(hyper), "epochs": int(e)})
        _, curve = lstm_fit(train, val, h, vocab_size, **fit_kwargs)
        results.append((int(e), curve.epochs[-1].val_accuracy if curve.epochs else None))
    best = max(results, key=lambda r: (r[1] if r[1] is not None else -1.0, -r[0]))
    return best[0], results


# -- gradient checking -------------------------------------------------------

def sample_parameter_indices(model: LstmModel, seq, subset: int, seed: int = 0) -> np.ndarray:
    """Flat parameter indices for a gradient check.

    Embedding rows of tokens absent from ``seq`` have identically zero
    gradient; they are left out so the sample exercises real paths.
    """
    sizes = [p.size for _, p in model.parameters()]
    d = model.embedding.shape[1]
    used = sorted(set(int(i) for i in seq.ids[:seq.true_len]))
    candidates = [r * d + k for r in used for k in range(d)]
    candidates += list(range(sizes[0], sum(sizes)))
    rng = np.random.default_rng(seed)
    k = min(subset, len(candidates))
    return np.sort(rng.choice(np.asarray(candidates), size=k, replace=False)) if k else np.zeros(0, int)


def _flat_views(model):
    return [p.reshape(-1) for _, p in model.parameters()]


def _locate(model, flat_index):
    for v in _flat_views(model):
        if flat_index < v.size:
            return v, flat_index
        flat_index -= v.size
    raise IndexError("parameter index out of range")


def gradient_check(model: LstmModel, seq, label: int, h: float = 1e-5, subset: int = 50,
                   seed: int = 0, indices=None, gradient_fn: Callable | None = None) -> float:
    """Max relative error between BPTT gradients and central differences.

    Runs in ``np.longdouble``.  ``gradient_fn(model, ids, lengths, targets)``
    can replace :func:`loss_and_grads` (used to verify the check itself
    catches a corrupted gradient).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    wide = model.astype(np.longdouble)
    ids = np.asarray([seq.ids])
    lengths = np.asarray([seq.true_len])
    targets = _targets(wide, [label])
    if indices is None:
        indices = sample_parameter_indices(wide, seq, subset, seed)
    if len(indices) == 0:
        return 0.0
    _, grads = (gradient_fn or loss_and_grads)(wide, ids, lengths, targets)
    flat_grad = np.concatenate([np.asarray(g).reshape(-1) for g in grads])

    def loss_at():
        z = _forward(wide, ids, lengths)[0]
        return (np.logaddexp(0.0, z) - targets * z).sum()

    worst = 0.0
    for k in indices:
        view, j = _locate(wide, int(k))
        saved = view[j]
        view[j] = saved + h
        up = loss_at()
        view[j] = saved - h
        down = loss_at()
        view[j] = saved
        numeric = (up - down) / (2 * h)
        analytic = flat_grad[int(k)]
        denom = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, float(abs(analytic - numeric) / denom))
    return worst


# -- serialization -------------------------------------------------------------

def lstm_to_dict(model: LstmModel) -> dict:
    return {
        "hyper": model.hyper.to_dict(),
        "embedding": model.embedding.tolist(),
        "layers": [[{"W": p.W.tolist(), "U": p.U.tolist(), "b": p.b.tolist()} for p in pair]
                   for pair in model.layers],
        "head": {"W": model.head_W.tolist(), "b": model.head_b.tolist()},
        "metadata": model.metadata,
    }


def lstm_from_dict(d: dict, classes, vocab_fingerprint) -> LstmModel:
    arr = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    hyper = LstmHyper(**d["hyper"])
    layers = [[GateParams(arr(p["W"]), arr(p["U"]), arr(p["b"])) for p in pair] for pair in d["layers"]]
    head_W = arr(d["head"]["W"]).reshape(2 * hyper.hidden, len(classes))
    return LstmModel(arr(d["embedding"]), layers, head_W, arr(d["head"]["b"]),
                     tuple(classes), hyper, vocab_fingerprint, d.get("metadata", {}))
