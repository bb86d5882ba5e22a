"""Forum chats, annotations, agreement and dataset statistics.

Chats come from JSONL/CSV files or from the YouTube comment-threads
endpoint (live or replayed from a stored fixture).  Gold labels are
merged from per-annotator ratings; Fleiss' kappa measures how much the
annotators agreed in the first place.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from besent.errors import ConfigurationError, DataError, FormatError, TransportError

log = logging.getLogger(__name__)

API_KEY_ENV = "BESENT_YOUTUBE_API_KEY"
YOUTUBE_API_URL = "https://www.googleapis.com/youtube/v3"

CHAT_FIELDS = ("id", "forum_type", "parent_id", "author_id", "subject_id",
               "text", "timestamp", "sentiment", "bloom")
_OPTIONAL_FIELDS = ("parent_id", "author_id", "subject_id", "timestamp")


class Sentiment(enum.IntEnum):
    POSITIVE = 0
    NEUTRAL = 1
    NEGATIVE = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "Sentiment":
        return _parse_label(cls, value)


class Bloom(enum.IntEnum):
    REMEMBERING = 0
    UNDERSTANDING = 1
    APPLYING = 2
    ANALYZING = 3
    EVALUATING = 4
    CREATING = 5

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "Bloom":
        return _parse_label(cls, value)


def _parse_label(cls, value):
    if isinstance(value, cls):
        return value
    if isinstance(value, str):
        try:
            return cls[value.strip().upper()]
        except KeyError:
            pass
    raise ValueError(f"not a {cls.__name__.lower()} label: {value!r}")


class ForumType(str, enum.Enum):
    MAIN = "main"
    REPLY = "reply"


@dataclass(frozen=True)
class Chat:
    id: str
    forum_type: ForumType
    text: str
    parent_id: str | None = None
    author_id: str | None = None
    subject_id: str | None = None
    timestamp: str | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise DataError("chat id must be a non-empty string")
        object.__setattr__(self, "forum_type", ForumType(self.forum_type))
        if self.forum_type is ForumType.REPLY and not self.parent_id:
            raise DataError(f"reply {self.id!r} has no parent_id")
        if self.forum_type is ForumType.MAIN and self.parent_id is not None:
            raise DataError(f"main chat {self.id!r} must not carry a parent_id")
        if not isinstance(self.text, str) or not self.text.strip():
            raise DataError(f"chat {self.id!r} has empty text")


@dataclass(frozen=True)
class LabeledChat:
    chat: Chat
    sentiment: Sentiment
    bloom: Bloom

    def __post_init__(self):
        object.__setattr__(self, "sentiment", _coerce(Sentiment, self.sentiment))
        object.__setattr__(self, "bloom", _coerce(Bloom, self.bloom))

    @property
    def id(self) -> str:
        return self.chat.id

    @property
    def text(self) -> str:
        return self.chat.text


def _coerce(cls, value):
    return cls(value) if isinstance(value, int) else cls.parse(value)


def _as_chat(record) -> Chat:
    return record.chat if isinstance(record, LabeledChat) else record


# --------------------------------------------------------------------------
# dataset files

def _record_to_chat(rec: dict, line: int):
    for name in ("id", "forum_type", "text"):
        value = rec.get(name)
        if value is None or value == "":
            raise FormatError("required field missing", line=line, field=name)
        if not isinstance(value, str):
            raise FormatError("expected a string", line=line, field=name)
    if rec["forum_type"] not in ("main", "reply"):
        raise FormatError(f"forum_type must be 'main' or 'reply', got {rec['forum_type']!r}",
                          line=line, field="forum_type")
    optional = {}
    for name in _OPTIONAL_FIELDS:
        value = rec.get(name)
        if value is not None and not isinstance(value, str):
            raise FormatError("expected a string", line=line, field=name)
        # CSV cannot tell "" from absent, so neither format does
        optional[name] = value or None
    if rec["forum_type"] == "reply" and not optional["parent_id"]:
        raise FormatError("reply without parent_id", line=line, field="parent_id")
    if rec["forum_type"] == "main" and optional["parent_id"] is not None:
        raise FormatError("main chat carries a parent_id", line=line, field="parent_id")
    if not rec["text"].strip():
        raise FormatError("text is blank", line=line, field="text")
    chat = Chat(id=rec["id"], forum_type=rec["forum_type"], text=rec["text"], **optional)

    sentiment, bloom = rec.get("sentiment"), rec.get("bloom")
    if sentiment is None and bloom is None:
        return chat
    if sentiment is None or bloom is None:
        missing = "sentiment" if sentiment is None else "bloom"
        raise FormatError("label pair incomplete", line=line, field=missing)
    try:
        s = Sentiment.parse(sentiment)
    except ValueError as exc:
        raise FormatError(str(exc), line=line, field="sentiment") from None
    try:
        b = Bloom.parse(bloom)
    except ValueError as exc:
        raise FormatError(str(exc), line=line, field="bloom") from None
    return LabeledChat(chat, s, b)


def _iter_jsonl(fh):
    for lineno, raw in enumerate(fh, start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", line=lineno) from None
        if not isinstance(rec, dict):
            raise FormatError("expected a JSON object", line=lineno)
        yield lineno, rec


def _iter_csv(fh):
    reader = csv.DictReader(fh)
    if reader.fieldnames is None:
        return
    unknown = set(reader.fieldnames) - set(CHAT_FIELDS)
    if unknown:
        raise FormatError(f"unknown columns {sorted(unknown)}", line=1)
    for row in reader:
        rec = {k: (v if v != "" else None) for k, v in row.items() if k is not None}
        if None in row:
            raise FormatError("row has more cells than the header", line=reader.line_num)
        yield reader.line_num, rec


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("jsonl", "csv"):
            raise ValueError(f"unsupported dataset format {fmt!r}")
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "jsonl"


def load_dataset(path, format: str | None = None) -> list:
    """Read chats from a JSONL or CSV file.

    Records carrying both ``sentiment`` and ``bloom`` become
    :class:`LabeledChat`, the rest plain :class:`Chat`.  File order is kept.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    with open(path, encoding="utf-8", newline="" if fmt == "csv" else None) as fh:
        rows = list(_iter_jsonl(fh) if fmt == "jsonl" else _iter_csv(fh))

    out, seen = [], {}
    for lineno, rec in rows:
        item = _record_to_chat(rec, lineno)
        cid = _as_chat(item).id
        if cid in seen:
            raise FormatError(f"duplicate id {cid!r} (first seen on line {seen[cid]})",
                              line=lineno, field="id")
        seen[cid] = lineno
        out.append(item)
    _check_parents(out, seen)
    return out


def _check_parents(items, lines=None):
    kinds = {_as_chat(it).id: _as_chat(it).forum_type for it in items}
    for it in items:
        chat = _as_chat(it)
        if chat.forum_type is ForumType.REPLY and kinds.get(chat.parent_id) is not ForumType.MAIN:
            line = lines.get(chat.id) if lines else None
            raise FormatError(f"parent {chat.parent_id!r} is not a main chat in this dataset",
                              line=line, field="parent_id")


def chat_to_record(item) -> dict:
    chat = _as_chat(item)
    rec = {"id": chat.id, "forum_type": chat.forum_type.value}
    for name in ("parent_id", "author_id", "subject_id"):
        if getattr(chat, name) is not None:
            rec[name] = getattr(chat, name)
    rec["text"] = chat.text
    if chat.timestamp is not None:
        rec["timestamp"] = chat.timestamp
    if isinstance(item, LabeledChat):
        rec["sentiment"] = item.sentiment.label
        rec["bloom"] = item.bloom.label
    return rec


def save_dataset(items: Iterable, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = _infer_format(path, format)
    records = [chat_to_record(it) for it in items]
    if fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CHAT_FIELDS)
            writer.writeheader()
            for rec in records:
                if any("\x00" in v for v in rec.values()):
                    raise DataError(f"chat {rec['id']!r}: CSV cannot hold NUL characters; use JSONL")
                writer.writerow({k: rec.get(k, "") for k in CHAT_FIELDS})


# --------------------------------------------------------------------------
# YouTube ingestion

def _comment_to_chat(comment: dict, parent_id: str | None):
    snip = comment.get("snippet", {})
    text = snip.get("textOriginal") or snip.get("textDisplay") or ""
    if not text.strip():
        log.warning("skipping empty comment %s", comment.get("id"))
        return None
    author = snip.get("authorChannelId")
    if isinstance(author, dict):
        author = author.get("value")
    return Chat(
        id=comment["id"],
        forum_type=ForumType.REPLY if parent_id else ForumType.MAIN,
        text=text,
        parent_id=parent_id,
        author_id=author,
        subject_id=snip.get("videoId"),
        timestamp=snip.get("publishedAt"),
    )


def threads_to_chats(pages: Sequence[dict], video_ids: Sequence[str] = ()) -> list[Chat]:
    """Flatten comment-thread response pages into main/reply chats."""
    wanted = set(video_ids)
    chats, seen = [], set()

    def add(chat):
        if chat is not None and chat.id not in seen:
            seen.add(chat.id)
            chats.append(chat)

    for page in pages:
        if not isinstance(page, dict) or not isinstance(page.get("items", []), list):
            raise FormatError("comment-threads page must be an object with an 'items' list")
        for item in page.get("items", []):
            try:
                snippet = item["snippet"]
                top = snippet["topLevelComment"]
            except (KeyError, TypeError):
                raise FormatError(f"thread {item.get('id')!r} lacks snippet.topLevelComment") from None
            video = snippet.get("videoId") or top.get("snippet", {}).get("videoId")
            if wanted and video is not None and video not in wanted:
                continue
            main = _comment_to_chat(top, None)
            add(main)
            if main is None:
                continue
            for reply in item.get("replies", {}).get("comments", []):
                add(_comment_to_chat(reply, main.id))
    return chats


def _get_json(session, url, params):
    try:
        resp = session.get(url, params=params, timeout=30)
    except Exception as exc:  # requests.RequestException and friends
        raise TransportError(f"request to {url} failed: {exc}") from exc
    if resp.status_code != 200:
        raise TransportError(f"GET {url} returned an error", status=resp.status_code)
    return resp.json()


def _fetch_live_pages(video_id: str, api_key: str, session) -> list[dict]:
    pages, token = [], None
    while True:
        params = {"part": "snippet,replies", "videoId": video_id, "maxResults": 100,
                  "textFormat": "plainText", "key": api_key}
        if token:
            params["pageToken"] = token
        page = _get_json(session, f"{YOUTUBE_API_URL}/commentThreads", params)
        for item in page.get("items", []):
            total = item.get("snippet", {}).get("totalReplyCount", 0)
            inline = item.get("replies", {}).get("comments", [])
            if total > len(inline):
                item.setdefault("replies", {})["comments"] = _fetch_replies(item["id"], api_key, session)
        pages.append(page)
        token = page.get("nextPageToken")
        if not token:
            return pages


def _fetch_replies(parent_id: str, api_key: str, session) -> list[dict]:
    out, token = [], None
    while True:
        params = {"part": "snippet", "parentId": parent_id, "maxResults": 100,
                  "textFormat": "plainText", "key": api_key}
        if token:
            params["pageToken"] = token
        page = _get_json(session, f"{YOUTUBE_API_URL}/comments", params)
        out.extend(page.get("items", []))
        token = page.get("nextPageToken")
        if not token:
            return out


def fetch_youtube_comments(video_ids: Sequence[str], source: str = "fixture",
                           fixture_path=None, session=None) -> list[Chat]:
    """Collect comments for ``video_ids`` as chats.

    ``source="fixture"`` replays a JSON array of stored comment-threads
    response bodies; ``source="live"`` pages through the API with the key
    from ``BESENT_YOUTUBE_API_KEY``.
    """
    if source == "fixture":
        if fixture_path is None:
            raise ConfigurationError("fixture mode needs fixture_path")
        try:
            with open(fixture_path, encoding="utf-8") as fh:
                pages = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"fixture is not valid JSON: {exc.msg}", line=exc.lineno) from None
        if not isinstance(pages, list):
            raise FormatError("fixture must be a JSON array of response pages")
        return threads_to_chats(pages, video_ids)
    if source != "live":
        raise ValueError(f"unknown source {source!r}")

    api_key = os.environ.get(API_KEY_ENV)
    if not api_key:
        raise ConfigurationError(f"live fetch requires the {API_KEY_ENV} environment variable")
    if session is None:
        import requests
        session = requests.Session()
    pages = []
    for vid in video_ids:
        pages.extend(_fetch_live_pages(vid, api_key, session))
    return threads_to_chats(pages, video_ids)


# --------------------------------------------------------------------------
# annotations

@dataclass(frozen=True)
class Annotation:
    chat_id: str
    annotator_id: str
    sentiment: Sentiment
    bloom: Bloom


@dataclass(frozen=True)
class AnnotationSet:
    annotations: tuple[Annotation, ...]
    annotator_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        anns = tuple(self.annotations)
        ids = tuple(self.annotator_ids)
        if not ids:
            ids = tuple(dict.fromkeys(a.annotator_id for a in anns))
        if len(set(ids)) != len(ids):
            raise DataError("annotator_ids contains duplicates")
        seen = set()
        for a in anns:
            if a.annotator_id not in ids:
                raise DataError(f"annotation by unknown annotator {a.annotator_id!r}")
            key = (a.chat_id, a.annotator_id)
            if key in seen:
                raise DataError(f"duplicate annotation for chat {a.chat_id!r} by {a.annotator_id!r}")
            seen.add(key)
        object.__setattr__(self, "annotations", anns)
        object.__setattr__(self, "annotator_ids", ids)

    def by_chat(self) -> dict[str, dict[str, Annotation]]:
        out: dict[str, dict[str, Annotation]] = {}
        for a in self.annotations:
            out.setdefault(a.chat_id, {})[a.annotator_id] = a
        return out

    def check_against(self, chats: Iterable) -> None:
        known = {_as_chat(c).id for c in chats}
        missing = sorted({a.chat_id for a in self.annotations} - known)
        if missing:
            raise DataError(f"annotations reference unknown chats: {missing[:10]}")


def load_annotations(path, format: str | None = None) -> AnnotationSet:
    """Read ``chat_id, annotator_id, sentiment, bloom`` records (JSONL or CSV)."""
    path = Path(path)
    fmt = _infer_format(path, format)
    with open(path, encoding="utf-8", newline="" if fmt == "csv" else None) as fh:
        if fmt == "jsonl":
            rows = list(_iter_jsonl(fh))
        else:
            reader = csv.DictReader(fh)
            rows = [(reader.line_num, dict(r)) for r in reader]
    anns = []
    for lineno, rec in rows:
        for name in ("chat_id", "annotator_id", "sentiment", "bloom"):
            if not isinstance(rec.get(name), str) or not rec[name]:
                raise FormatError("required string field missing", line=lineno, field=name)
        try:
            s = Sentiment.parse(rec["sentiment"])
        except ValueError as exc:
            raise FormatError(str(exc), line=lineno, field="sentiment") from None
        try:
            b = Bloom.parse(rec["bloom"])
        except ValueError as exc:
            raise FormatError(str(exc), line=lineno, field="bloom") from None
        anns.append(Annotation(rec["chat_id"], rec["annotator_id"], s, b))
    return AnnotationSet(tuple(anns))


def _facet_value(ann: Annotation, facet: str):
    if facet == "sentiment":
        return ann.sentiment
    if facet == "bloom":
        return ann.bloom
    if facet == "pair":
        return (ann.sentiment, ann.bloom)
    raise ValueError(f"unknown facet {facet!r}")


def compute_fleiss_kappa(aset: AnnotationSet, facet: str = "sentiment") -> float:
    """Fleiss' kappa over chats rated by every annotator in ``aset``."""
    raters = aset.annotator_ids
    if len(raters) < 2:
        raise DataError("Fleiss' kappa needs at least two annotators")
    per_chat = aset.by_chat()
    partial = sorted(cid for cid, got in per_chat.items() if len(got) != len(raters))
    if partial:
        raise DataError(f"chats not rated by every annotator: {partial}")
    if len(per_chat) < 2:
        raise DataError("Fleiss' kappa needs at least two rated items")

    n = len(raters)
    n_items = len(per_chat)
    totals: Counter = Counter()
    p_sum = 0.0
    for got in per_chat.values():
        counts = Counter(_facet_value(a, facet) for a in got.values())
        totals.update(counts)
        p_sum += (sum(c * c for c in counts.values()) - n) / (n * (n - 1))
    p_bar = p_sum / n_items
    p_e = sum((c / (n_items * n)) ** 2 for c in totals.values())
    if p_e == 1.0:
        return 1.0
    return (p_bar - p_e) / (1.0 - p_e)


def _resolve(votes: list):
    """Strict-majority label and whether the facet is tied (no majority).

    On a tie the first vote, i.e. the earliest annotator's, is returned.
    """
    label, count = Counter(votes).most_common(1)[0]
    if 2 * count > len(votes):
        return label, False
    return votes[0], True


def merge_gold_labels(chats: Sequence, aset: AnnotationSet, tie_policy: str = "drop"):
    """Strict-majority gold labels per facet.

    Returns ``(labeled, unresolved_ids)``.  A facet where no label wins more
    than half of the votes is a tie; ``drop`` sends the chat to the
    unresolved list, ``first_annotator`` takes the rating of the earliest
    annotator in ``aset.annotator_ids`` who rated the chat.
    """
    if tie_policy not in ("drop", "first_annotator"):
        raise ValueError(f"unknown tie policy {tie_policy!r}")
    per_chat = aset.by_chat()
    labeled, unresolved = [], []
    for item in chats:
        chat = _as_chat(item)
        got = per_chat.get(chat.id)
        if not got:
            raise DataError(f"chat {chat.id!r} has no annotations")
        ordered = [got[a] for a in aset.annotator_ids if a in got]
        s, s_tie = _resolve([a.sentiment for a in ordered])
        b, b_tie = _resolve([a.bloom for a in ordered])
        if tie_policy == "drop" and (s_tie or b_tie):
            unresolved.append(chat.id)
            continue
        labeled.append(LabeledChat(chat, s, b))
    return labeled, unresolved


# --------------------------------------------------------------------------
# statistics

@dataclass(frozen=True)
class DatasetStats:
    n_main: int
    n_reply: int
    n_chats: int
    n_words: int
    sentiment_counts: dict
    bloom_counts: dict
    n_videos: int | None = None

    @property
    def n_labeled(self) -> int:
        return sum(self.sentiment_counts.values())

    def sentiment_percentages(self) -> dict:
        return percentages(self.sentiment_counts)

    def bloom_percentages(self) -> dict:
        return percentages(self.bloom_counts)

    def to_dict(self) -> dict:
        return {
            "n_videos": self.n_videos,
            "n_main": self.n_main,
            "n_reply": self.n_reply,
            "n_chats": self.n_chats,
            "n_words": self.n_words,
            "n_labeled": self.n_labeled,
            "sentiment_counts": {k.label: v for k, v in self.sentiment_counts.items()},
            "sentiment_percentages": {k.label: v for k, v in self.sentiment_percentages().items()},
            "bloom_counts": {k.label: v for k, v in self.bloom_counts.items()},
            "bloom_percentages": {k.label: v for k, v in self.bloom_percentages().items()},
        }


def percentages(counts: dict) -> dict:
    """Share of each key in percent, rounded to 2 decimals (zeros when empty).

    Rounding is half-to-even on the exact ratio, so binary float error never
    decides a tie and six shares cannot all drift the same way.
    """
    total = sum(counts.values())
    if total == 0:
        return {k: 0.0 for k in counts}
    return {k: round(Fraction(10000 * v, total)) / 100 for k, v in counts.items()}


def dataset_stats(chats: Sequence) -> DatasetStats:
    """Table-style counts: thread structure, word totals and label distributions."""
    sentiment = {s: 0 for s in Sentiment}
    bloom = {b: 0 for b in Bloom}
    n_main = n_reply = n_words = 0
    videos = set()
    for item in chats:
        chat = _as_chat(item)
        if chat.forum_type is ForumType.MAIN:
            n_main += 1
        else:
            n_reply += 1
        n_words += len(chat.text.split())
        if chat.subject_id is not None:
            videos.add(chat.subject_id)
        if isinstance(item, LabeledChat):
            sentiment[item.sentiment] += 1
            bloom[item.bloom] += 1
    return DatasetStats(
        n_main=n_main, n_reply=n_reply, n_chats=n_main + n_reply, n_words=n_words,
        sentiment_counts=sentiment, bloom_counts=bloom,
        n_videos=len(videos) if videos else None,
    )

