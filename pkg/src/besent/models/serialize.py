"""Versioned JSON documents for forest and LSTM models."""

from __future__ import annotations

import json

from besent.errors import FormatError
from besent.models.forest import ForestModel, ForestParams, tree_from_dict, tree_to_dict
from besent.models.lstm import LstmModel, lstm_from_dict, lstm_to_dict

FORMAT_VERSION = 1


def model_to_dict(model) -> dict:
    if isinstance(model, ForestModel):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "forest",
            "classes": list(model.classes),
            "vocab_fingerprint": model.vocab_fingerprint,
            "n_features": model.n_features,
            "params": model.params.to_dict(),
            "trees": [tree_to_dict(t) for t in model.trees],
        }
    if isinstance(model, LstmModel):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "lstm",
            "classes": list(model.classes),
            "vocab_fingerprint": model.vocab_fingerprint,
            **lstm_to_dict(model),
        }
    raise TypeError(f"cannot serialize {type(model).__name__}")


def model_from_dict(d: dict):
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format_version {version!r} (expected {FORMAT_VERSION})")
    kind = d.get("kind")
    classes = tuple(int(c) for c in d["classes"])
    if kind == "forest":
        return ForestModel([tree_from_dict(t) for t in d["trees"]], ForestParams(**d["params"]),
                           classes, int(d["n_features"]), d.get("vocab_fingerprint"))
    if kind == "lstm":
        return lstm_from_dict(d, classes, d.get("vocab_fingerprint"))
    raise FormatError(f"unknown model kind {kind!r}")


def dumps(obj: dict) -> str:
    """Canonical JSON: sorted keys, shortest round-trip floats."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=None, separators=(",", ":"))


def save_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(model_to_dict(model)) + "\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
