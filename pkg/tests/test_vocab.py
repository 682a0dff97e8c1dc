import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gistlm.vocab import (
    Vocab,
    VocabError,
    add_label_period,
    build_vocab,
    load_corpus,
    _word_tokens,
)


def test_byte_vocab_contains_corpus_bytes_and_punct():
    v = build_vocab(["ab."], "byte")
    ids = {s: i for s, i in v.entries}
    assert "a" in ids and "b" in ids and "." in ids
    assert v.punct_ids == {ids["."], ids["!"], ids["?"]}
    assert len(v.punct_ids) == 3


def test_word_splitter_on_hi_go():
    # run the splitter by hand on the 7-char string "Hi. Go!"
    assert _word_tokens("Hi. Go!") == ["Hi", ".", "Go", "!"]


def test_word_splitter_splits_inner_punct():
    assert _word_tokens("Dr. Smith") == ["Dr", ".", "Smith"]
    assert _word_tokens("3.14") == ["3", ".", "14"]
    assert _word_tokens("?!") == ["?", "!"]


def test_empty_corpus_errors():
    with pytest.raises(VocabError, match="empty corpus"):
        build_vocab([""], "byte")
    with pytest.raises(VocabError, match="empty corpus"):
        build_vocab([], "word")


def test_byte_encode_simple():
    v = build_vocab(["ab."], "byte")
    lookup = {s: i for s, i in v.entries}
    assert v.encode("ab.") == [lookup["a"], lookup["b"], lookup["."]]
    assert v.encode("") == []


def test_ids_dense_and_gists_on_top():
    v = build_vocab(["hello world."], "word", n_g=4)
    assert [i for _, i in v.entries] == list(range(v.size))
    assert v.gist_ids == tuple(range(v.size - 4, v.size))
    assert v.base_size == v.size - 4
    base = v.base()
    assert base.size == v.base_size and base.n_g == 0


def test_vocab_determinism():
    texts = ["one two. three!", "four five?"]
    a = build_vocab(texts, "word", n_g=2)
    b = build_vocab(texts, "word", n_g=2)
    assert a == b
    assert a.content_hash() == b.content_hash()


def test_unknown_word_maps_to_unk():
    v = build_vocab(["known words."], "word")
    ids = v.encode("unknownword")
    assert ids == [v.unk_id]


def test_json_round_trip_matches_schema():
    v = build_vocab(["Hi. Go!"], "word", n_g=2)
    obj = v.to_json()
    assert set(obj) == {"scheme", "entries", "special", "gist", "punct"}
    assert obj["gist"] == [v.gist_first, 2]
    v2 = Vocab.from_json(json.loads(json.dumps(obj)))
    assert v2 == v


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=80))
def test_byte_round_trip_identity(text):
    v = build_vocab(["seed text."], "byte")
    assert v.decode(v.encode(text)) == text


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_word_round_trip_on_canonical_text(data):
    v = build_vocab(["alpha beta gamma delta. epsilon!"], "word")
    words = [s for s, i in v.entries
             if i not in v.punct_ids and not s.startswith("<")]
    n = data.draw(st.integers(1, 12))
    parts = []
    for _ in range(n):
        w = data.draw(st.sampled_from(words))
        parts.append((" " if parts else "") + w)
        if data.draw(st.booleans()):
            parts.append(data.draw(st.sampled_from([".", "!", "?"])))
    text = "".join(parts)
    assert v.decode(v.encode(text)) == text


def test_add_label_period_paper_template():
    original = (
        "What is swap math ?\n"
        "label: 4\n"
        "When does the average teenager first have intercourse ?\n"
        "label: 5\n"
    )
    expected = (
        "What is swap math ?\n"
        "label: 4.\n"
        "When does the average teenager first have intercourse ?\n"
        "label: 5.\n"
    )
    assert add_label_period(original) == expected


def test_add_label_period_idempotent_and_noop():
    assert add_label_period("label: 4.\n") == "label: 4.\n"
    once = add_label_period("label: 4\n")
    assert add_label_period(once) == once
    assert add_label_period("no labels here") == "no labels here"


def test_add_label_period_changes_only_label_lines():
    text = "intro line\nlabel: x\nbody text.\n"
    out = add_label_period(text)
    assert out.splitlines() == ["intro line", "label: x.", "body text."]


def test_load_corpus_lexicographic_and_counts(tmp_path):
    (tmp_path / "b.txt").write_text("second doc.", encoding="utf-8")
    (tmp_path / "a.txt").write_text("first doc!", encoding="utf-8")
    v = build_vocab(["first doc! second doc."], "word")
    corpus = load_corpus(tmp_path, v)
    assert [p.endswith("a.txt") for p in corpus.paths] == [True, False]
    assert corpus.total_token_count == sum(len(d) for d in corpus.documents)
    for doc in corpus.documents:
        assert not any(v.is_gist_id(int(t)) for t in doc)


def test_corpus_missing_dir_errors(tmp_path):
    v = build_vocab(["x."], "byte")
    with pytest.raises(VocabError):
        load_corpus(tmp_path / "nope", v)
