import json
from fractions import Fraction
from pathlib import Path

import pytest

from besent.corpus import (
    Annotation, AnnotationSet, Bloom, Chat, ForumType, LabeledChat, Sentiment, compute_fleiss_kappa,
    dataset_stats, fetch_youtube_comments, load_annotations, load_dataset, merge_gold_labels,
    save_dataset, threads_to_chats,
)
from besent.errors import ConfigurationError, DataError, FormatError, TransportError

FIXTURES = Path(__file__).parent / "fixtures"


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def ann_set(votes, facet="sentiment", annotators=None):
    """votes: {chat_id: [label per annotator]}"""
    annotators = annotators or [f"a{i + 1}" for i in range(len(next(iter(votes.values()))))]
    anns = []
    for cid, vs in votes.items():
        for a, v in zip(annotators, vs):
            s = v if facet == "sentiment" else Sentiment.NEUTRAL
            b = v if facet == "bloom" else Bloom.UNDERSTANDING
            anns.append(Annotation(cid, a, s, b))
    return AnnotationSet(tuple(anns), tuple(annotators))


# -- loading -----------------------------------------------------------------

def test_empty_file_gives_empty_list(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert load_dataset(p) == []


def test_sample_row_loads_as_labeled_chat(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", [{"id": "c1", "forum_type": "main", "text": "Terima kasih tutornya",
                                            "sentiment": "positive", "bloom": "applying"}])
    (item,) = load_dataset(p)
    assert isinstance(item, LabeledChat)
    assert item.sentiment is Sentiment.POSITIVE and item.bloom is Bloom.APPLYING
    assert item.text == "Terima kasih tutornya"


def test_reply_without_parent_names_line(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", [
        {"id": "c1", "forum_type": "main", "text": "halo"},
        {"id": "c2", "forum_type": "reply", "text": "iya"},
    ])
    with pytest.raises(FormatError) as exc:
        load_dataset(p)
    assert exc.value.line == 2 and exc.value.field == "parent_id"


@pytest.mark.parametrize("record, field", [
    ({"forum_type": "main", "text": "x"}, "id"),
    ({"id": "c1", "forum_type": "thread", "text": "x"}, "forum_type"),
    ({"id": "c1", "forum_type": "main", "text": "   "}, "text"),
    ({"id": "c1", "forum_type": "main", "text": "x", "sentiment": "happy", "bloom": "applying"}, "sentiment"),
    ({"id": "c1", "forum_type": "main", "text": "x", "sentiment": "positive"}, "bloom"),
    ({"id": "c1", "forum_type": "main", "text": "x", "parent_id": "c0"}, "parent_id"),
])
def test_malformed_records_name_line_and_field(tmp_path, record, field):
    p = write_lines(tmp_path / "d.jsonl", [{"id": "c0", "forum_type": "main", "text": "ok"}, record])
    with pytest.raises(FormatError) as exc:
        load_dataset(p)
    assert exc.value.line == 2
    assert exc.value.field == field


def test_duplicate_id_rejected(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", [{"id": "c1", "forum_type": "main", "text": "a"},
                                           {"id": "c1", "forum_type": "main", "text": "b"}])
    with pytest.raises(FormatError, match="duplicate id"):
        load_dataset(p)


def test_reply_parent_must_be_main(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", [{"id": "c1", "forum_type": "reply", "parent_id": "zz", "text": "a"}])
    with pytest.raises(FormatError, match="not a main chat"):
        load_dataset(p)


def test_invalid_json_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"id": "c1", "forum_type": "main", "text": "a"}\n{oops\n')
    with pytest.raises(FormatError) as exc:
        load_dataset(p)
    assert exc.value.line == 2


@pytest.mark.parametrize("suffix", [".jsonl", ".csv"])
def test_round_trip_both_formats(tmp_path, suffix):
    items = [
        LabeledChat(Chat("m1", ForumType.MAIN, "Baik, dicoba \"ya\"\nbaris dua", author_id="u1",
                         subject_id="v1", timestamp="2021-03-01T10:00:00Z"), "negative", "applying"),
        Chat("r1", ForumType.REPLY, "Terima kasih tutornya 🙏", parent_id="m1"),
        LabeledChat(Chat("m2", ForumType.MAIN, "Mengerti"), Sentiment.NEUTRAL, Bloom.UNDERSTANDING),
    ]
    p = tmp_path / f"d{suffix}"
    save_dataset(items, p)
    assert load_dataset(p) == items


def test_csv_unknown_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("id,forum_type,text,mood\nc1,main,hai,ok\n")
    with pytest.raises(FormatError, match="unknown columns"):
        load_dataset(p)


# -- YouTube -------------------------------------------------------------------

def test_fixture_maps_threads_to_main_and_replies():
    chats = fetch_youtube_comments(["vid001"], source="fixture", fixture_path=FIXTURES / "youtube_threads.json")
    assert [c.forum_type for c in chats] == [ForumType.MAIN, ForumType.REPLY, ForumType.REPLY]
    assert chats[1].parent_id == chats[0].id == "UgxThread1"
    assert chats[2].parent_id == "UgxThread1"
    assert chats[1].author_id == "UCauthorB" and chats[1].subject_id == "vid001"


def test_fixture_follows_all_pages_without_filter():
    chats = fetch_youtube_comments([], source="fixture", fixture_path=FIXTURES / "youtube_threads.json")
    assert len(chats) == 4 and chats[-1].subject_id == "vid002"


def test_empty_fixture():
    assert fetch_youtube_comments(["x"], fixture_path=FIXTURES / "youtube_empty.json") == []


def test_fixture_parse_failure(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(FormatError):
        fetch_youtube_comments(["x"], fixture_path=p)


def test_live_requires_api_key(monkeypatch):
    monkeypatch.delenv("BESENT_YOUTUBE_API_KEY", raising=False)
    with pytest.raises(ConfigurationError):
        fetch_youtube_comments(["vid001"], source="live")


class FakeResponse:
    def __init__(self, status, body):
        self.status_code = status
        self._body = body

    def json(self):
        return self._body


class FakeSession:
    """Serves canned pages keyed by (endpoint, pageToken)."""

    def __init__(self, routes):
        self.routes = routes
        self.calls = []

    def get(self, url, params=None, timeout=None):
        endpoint = url.rsplit("/", 1)[-1]
        self.calls.append((endpoint, dict(params)))
        key = (endpoint, params.get("pageToken"))
        status, body = self.routes[key]
        return FakeResponse(status, body)


def _thread(tid, text, total_replies=0, inline=()):
    item = {"id": tid, "snippet": {"videoId": "v", "totalReplyCount": total_replies,
                                   "topLevelComment": {"id": tid, "snippet": {"videoId": "v", "textOriginal": text}}}}
    if inline:
        item["replies"] = {"comments": list(inline)}
    return item


def _reply(rid, text):
    return {"id": rid, "snippet": {"videoId": "v", "textOriginal": text}}


def test_live_pagination_and_reply_expansion(monkeypatch):
    monkeypatch.setenv("BESENT_YOUTUBE_API_KEY", "k")
    routes = {
        ("commentThreads", None): (200, {"items": [_thread("t1", "satu", 3, [_reply("t1.a", "a")])],
                                         "nextPageToken": "P2"}),
        ("commentThreads", "P2"): (200, {"items": [_thread("t2", "dua")]}),
        ("comments", None): (200, {"items": [_reply("t1.a", "a"), _reply("t1.b", "b")], "nextPageToken": "R2"}),
        ("comments", "R2"): (200, {"items": [_reply("t1.c", "c")]}),
    }
    session = FakeSession(routes)
    chats = fetch_youtube_comments(["v"], source="live", session=session)
    assert [c.id for c in chats] == ["t1", "t1.a", "t1.b", "t1.c", "t2"]
    assert all(c.parent_id == "t1" for c in chats[1:4])
    first = session.calls[0][1]
    assert first["part"] == "snippet,replies" and first["maxResults"] == 100 and first["key"] == "k"
    assert [c[0] for c in session.calls].count("commentThreads") == 2


def test_live_http_failure_carries_status(monkeypatch):
    monkeypatch.setenv("BESENT_YOUTUBE_API_KEY", "k")
    session = FakeSession({("commentThreads", None): (403, {"error": "quota"})})
    with pytest.raises(TransportError) as exc:
        fetch_youtube_comments(["v"], source="live", session=session)
    assert exc.value.status == 403


def test_threads_to_chats_skips_empty_comments():
    page = {"items": [_thread("t1", "   ", 0)]}
    assert threads_to_chats([page]) == []


# -- agreement -------------------------------------------------------------------

def fleiss_oracle(table):
    """Fleiss' kappa in exact rationals; table[i] is the list of ratings for item i."""
    n = len(table[0])
    cats = sorted({v for row in table for v in row})
    N = len(table)
    P = [Fraction(sum(row.count(c) ** 2 for c in cats) - n, n * (n - 1)) for row in table]
    p = [Fraction(sum(row.count(c) for row in table), N * n) for c in cats]
    pbar, pe = sum(P) / N, sum(x * x for x in p)
    return (pbar - pe) / (1 - pe)


def test_fleiss_two_annotator_four_item_table():
    P, N = Sentiment.POSITIVE, Sentiment.NEUTRAL
    votes = {"c1": [P, P], "c2": [N, N], "c3": [P, N], "c4": [N, P]}
    expected = fleiss_oracle(list(votes.values()))
    assert expected == 0
    assert compute_fleiss_kappa(ann_set(votes)) == pytest.approx(float(expected), abs=1e-15)


def test_fleiss_unanimous_is_one():
    votes = {f"c{i}": [Sentiment(i % 3)] * 3 for i in range(10)}
    assert compute_fleiss_kappa(ann_set(votes)) == 1.0
    same = {f"c{i}": [Sentiment.NEUTRAL] * 3 for i in range(10)}
    assert compute_fleiss_kappa(ann_set(same)) == 1.0


def test_fleiss_matches_oracle_on_mixed_table():
    table = [[0, 0, 1], [1, 1, 1], [2, 0, 2], [0, 0, 0], [1, 2, 2]]
    votes = {f"c{i}": [Sentiment(v) for v in row] for i, row in enumerate(table)}
    assert compute_fleiss_kappa(ann_set(votes)) == pytest.approx(float(fleiss_oracle(table)), abs=1e-12)


def test_fleiss_pair_facet_counts_combinations():
    anns = [Annotation("c1", "a", 0, 1), Annotation("c1", "b", 0, 2),
            Annotation("c2", "a", 1, 1), Annotation("c2", "b", 1, 1)]
    aset = AnnotationSet(tuple(Annotation(a.chat_id, a.annotator_id, Sentiment(a.sentiment), Bloom(a.bloom))
                               for a in anns))
    table = [[(0, 1), (0, 2)], [(1, 1), (1, 1)]]
    assert compute_fleiss_kappa(aset, "pair") == pytest.approx(float(fleiss_oracle(table)))
    assert compute_fleiss_kappa(aset, "sentiment") == 1.0


def test_fleiss_errors():
    with pytest.raises(DataError, match="two annotators"):
        compute_fleiss_kappa(ann_set({"c1": [0], "c2": [1]}))
    with pytest.raises(DataError, match="two rated items"):
        compute_fleiss_kappa(ann_set({"c1": [0, 0]}))
    partial = AnnotationSet((Annotation("c1", "a", Sentiment(0), Bloom(0)), Annotation("c1", "b", Sentiment(0), Bloom(0)),
                             Annotation("c2", "a", Sentiment(0), Bloom(0))))
    with pytest.raises(DataError, match="c2"):
        compute_fleiss_kappa(partial)


def test_duplicate_annotation_rejected():
    a = Annotation("c1", "a", Sentiment(0), Bloom(0))
    with pytest.raises(DataError):
        AnnotationSet((a, a))


def test_load_annotations_csv(tmp_path):
    p = tmp_path / "ann.csv"
    p.write_text("chat_id,annotator_id,sentiment,bloom\nc1,a1,positive,applying\nc1,a2,neutral,applying\n")
    aset = load_annotations(p)
    assert aset.annotator_ids == ("a1", "a2")
    assert aset.annotations[1].sentiment is Sentiment.NEUTRAL


def test_load_annotations_bad_label(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", [{"chat_id": "c1", "annotator_id": "a", "sentiment": "pos", "bloom": "applying"}])
    with pytest.raises(FormatError) as exc:
        load_annotations(p)
    assert exc.value.field == "sentiment" and exc.value.line == 1


# -- gold merge -----------------------------------------------------------------

def _merge(sent_votes, policy, order=("a1", "a2", "a3")):
    chat = Chat("c1", ForumType.MAIN, "x")
    anns = tuple(Annotation("c1", a, s, Bloom.APPLYING) for a, s in zip(order, sent_votes))
    return merge_gold_labels([chat], AnnotationSet(anns, order), policy)


def test_majority_wins():
    P, N = Sentiment.POSITIVE, Sentiment.NEGATIVE
    labeled, unresolved = _merge([P, P, N], "drop")
    assert labeled[0].sentiment is P and unresolved == []


def test_three_way_tie_dropped():
    labeled, unresolved = _merge([Sentiment(0), Sentiment(1), Sentiment(2)], "drop")
    assert labeled == [] and unresolved == ["c1"]


def test_three_way_tie_first_annotator():
    # a1 voted neutral
    labeled, _ = _merge([Sentiment.NEUTRAL, Sentiment.POSITIVE, Sentiment.NEGATIVE], "first_annotator")
    assert labeled[0].sentiment is Sentiment.NEUTRAL


def test_first_annotator_follows_declared_order():
    votes = [Sentiment.POSITIVE, Sentiment.NEUTRAL, Sentiment.NEGATIVE]
    labeled, _ = _merge(votes, "first_annotator", order=("a3", "a2", "a1"))
    # a3 is first in the declared order and voted votes[0]
    assert labeled[0].sentiment is Sentiment.POSITIVE


def test_plurality_without_majority_is_a_tie():
    P, U, N = Sentiment.POSITIVE, Sentiment.NEUTRAL, Sentiment.NEGATIVE
    order = ("a1", "a2", "a3", "a4")
    labeled, unresolved = _merge([U, P, P, N], "drop", order)
    assert labeled == [] and unresolved == ["c1"]
    labeled, _ = _merge([U, P, P, N], "first_annotator", order)
    assert labeled[0].sentiment is U


def test_two_annotators_split_is_a_tie():
    labeled, unresolved = _merge([Sentiment.POSITIVE, Sentiment.NEUTRAL], "drop", ("a1", "a2"))
    assert labeled == [] and unresolved == ["c1"]
    labeled, _ = _merge([Sentiment.NEUTRAL, Sentiment.NEUTRAL], "drop", ("a1", "a2"))
    assert labeled[0].sentiment is Sentiment.NEUTRAL


def test_bloom_tie_alone_drops_chat():
    chat = Chat("c1", ForumType.MAIN, "x")
    anns = tuple(Annotation("c1", a, Sentiment.POSITIVE, b) for a, b in
                 zip(("a1", "a2", "a3"), (Bloom.APPLYING, Bloom.CREATING, Bloom.REMEMBERING)))
    labeled, unresolved = merge_gold_labels([chat], AnnotationSet(anns), "drop")
    assert labeled == [] and unresolved == ["c1"]


def test_merge_without_annotations_errors():
    aset = AnnotationSet((Annotation("other", "a", Sentiment(0), Bloom(0)),))
    with pytest.raises(DataError, match="no annotations"):
        merge_gold_labels([Chat("c1", ForumType.MAIN, "x")], aset)


# -- stats --------------------------------------------------------------------

def test_stats_reference_percentages():
    counts = {Sentiment.POSITIVE: 1742, Sentiment.NEUTRAL: 2332, Sentiment.NEGATIVE: 322}
    items = []
    for s, n in counts.items():
        items += [LabeledChat(Chat(f"{s.label}{i}", ForumType.MAIN, "a b"), s, Bloom.UNDERSTANDING)
                  for i in range(n)]
    st = dataset_stats(items)
    assert st.n_labeled == 4396
    assert st.sentiment_percentages() == {Sentiment.POSITIVE: 39.63, Sentiment.NEUTRAL: 53.05,
                                          Sentiment.NEGATIVE: 7.32}
    assert st.n_words == 2 * 4396


def test_stats_empty():
    st = dataset_stats([])
    assert (st.n_chats, st.n_main, st.n_reply, st.n_words, st.n_labeled) == (0, 0, 0, 0, 0)
    assert set(st.sentiment_percentages().values()) == {0.0}


def test_stats_structure_counts():
    chats = [Chat("m1", "main", "satu dua"), Chat("m2", "main", "tiga"),
             Chat("r1", "reply", "  empat   lima enam ", parent_id="m1")]
    st = dataset_stats(chats)
    assert (st.n_chats, st.n_main, st.n_reply, st.n_words) == (3, 2, 1, 6)
    assert st.n_videos is None
