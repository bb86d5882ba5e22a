"""Text normalization, tokenization and stopword filtering."""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass
from importlib import resources

from besent.errors import ConfigurationError

_URL_RE = re.compile(r"[A-Za-z][A-Za-z0-9+.\-]*://\S*")


@dataclass(frozen=True)
class PreprocessConfig:
    lowercase: bool = True
    strip_urls: bool = True
    strip_punct: bool = True
    min_token_len: int = 2
    # None selects the bundled Indonesian/English list unless
    # use_default_stopwords is off, in which case nothing is removed.
    stopword_path: str | None = None
    use_default_stopwords: bool = True

    def __post_init__(self):
        if self.min_token_len < 1:
            raise ValueError("min_token_len must be >= 1")

    def to_dict(self) -> dict:
        return {
            "lowercase": self.lowercase,
            "strip_urls": self.strip_urls,
            "strip_punct": self.strip_punct,
            "min_token_len": self.min_token_len,
            "stopword_path": self.stopword_path,
            "use_default_stopwords": self.use_default_stopwords,
        }


@dataclass(frozen=True)
class TokenizedDoc:
    chat_id: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))


def normalize(text: str, config: PreprocessConfig = PreprocessConfig()) -> str:
    if config.lowercase:
        text = text.lower()
    if config.strip_urls:
        text = _URL_RE.sub(" ", text)
    if config.strip_punct:
        text = "".join(ch if ch.isalnum() or ch.isspace() else " " for ch in text)
    return " ".join(text.split())


def tokenize(text: str) -> list[str]:
    return text.split()


def _parse_stopwords(lines, config: PreprocessConfig) -> frozenset:
    words = set()
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        words.update(normalize(line, config).split())
    return frozenset(words)


@functools.lru_cache(maxsize=32)
def _stopwords_cached(path: str | None, use_default: bool, config: PreprocessConfig) -> frozenset:
    if path is None:
        if not use_default:
            return frozenset()
        text = resources.files("besent").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
        return _parse_stopwords(text.splitlines(), config)
    try:
        with open(path, encoding="utf-8") as fh:
            return _parse_stopwords(fh, config)
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigurationError(f"cannot read stopword file {path}: {exc}") from exc


def load_stopwords(config: PreprocessConfig) -> frozenset:
    """Stopwords selected by ``config``, normalized with the same rules as text."""
    return _stopwords_cached(config.stopword_path, config.use_default_stopwords, config)


def filter_tokens(tokens, config: PreprocessConfig = PreprocessConfig(), stopwords=None) -> list[str]:
    """Drop short tokens and stopwords; ``stopwords`` overrides the config's list."""
    stop = load_stopwords(config) if stopwords is None else stopwords
    return [t for t in tokens if len(t) >= config.min_token_len and t not in stop]


def preprocess_text(text: str, config: PreprocessConfig = PreprocessConfig(), stopwords=None) -> list[str]:
    return filter_tokens(tokenize(normalize(text, config)), config, stopwords)


def preprocess_chat(chat, config: PreprocessConfig = PreprocessConfig(), stopwords=None) -> TokenizedDoc:
    """Accepts a Chat or LabeledChat."""
    chat = getattr(chat, "chat", chat)
    return TokenizedDoc(chat.id, preprocess_text(chat.text, config, stopwords))
