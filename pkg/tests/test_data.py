import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enrichrec.data import (
    OOV,
    PAD,
    EnrichedNews,
    Entity,
    Impression,
    NewsRecord,
    ParseStats,
    build_news_features,
    build_index,
    build_vocabulary,
    load_entity_embeddings,
    load_word_embeddings,
    make_training_examples,
    parse_behaviors_tsv,
    parse_news_tsv,
    read_enriched_tsv,
    tokenize,
    truncate_text,
    write_behaviors_tsv,
    write_enriched_tsv,
    write_news_tsv,
)
from enrichrec.errors import InputError

# First row of MIND-small train/news.tsv, as documented by the dataset card.
MIND_ROW = (
    "N55528\tlifestyle\tlifestyleroyals\tThe Brands Queen Elizabeth, Prince Charles, and Prince Philip Swear By\t"
    "Shop the notebooks, jackets, and more that the royals can't live without.\t"
    "https://assets.msn.com/labs/mind/AAGH0ET.html\t"
    '[{"Label": "Prince Philip, Duke of Edinburgh", "Type": "P", "WikidataId": "Q80976", "Confidence": 1.0, '
    '"OccurrenceOffsets": [48], "SurfaceForms": ["Prince Philip"]}, {"Label": "Charles, Prince of Wales", '
    '"Type": "P", "WikidataId": "Q43274", "Confidence": 1.0, "OccurrenceOffsets": [28], "SurfaceForms": '
    '["Prince Charles"]}, {"Label": "Elizabeth II", "Type": "P", "WikidataId": "Q9682", "Confidence": 0.97, '
    '"OccurrenceOffsets": [11], "SurfaceForms": ["Queen Elizabeth"]}]\t[]'
)


def test_parse_mind_row(tmp_path):
    path = tmp_path / "news.tsv"
    path.write_text(MIND_ROW + "\n", encoding="utf-8")
    (rec,) = parse_news_tsv(path)
    assert rec.news_id == "N55528"
    assert rec.category == "lifestyle" and rec.subcategory == "lifestyleroyals"
    assert rec.title.startswith("The Brands Queen Elizabeth")
    assert [e.wikidata_id for e in rec.title_entities] == ["Q80976", "Q43274", "Q9682"]
    assert rec.title_entities[2] == Entity("Elizabeth II", "Q9682", 0.97)
    assert rec.abstract_entities == []


def test_parse_empty_and_malformed_entities(tmp_path):
    path = tmp_path / "news.tsv"
    rows = ["N1\ta\tb\tSome title\t\t\t[]\t[]", "N2\ta\tb\tOther title\t\t\t{not json\t[]"]
    path.write_text("\n".join(rows), encoding="utf-8")
    stats = ParseStats()
    recs = parse_news_tsv(path, stats)
    assert [r.title_entities for r in recs] == [[], []]
    assert stats.bad_entities == 1 and stats.rejected == 0


def test_parse_rejects_seven_columns(tmp_path):
    path = tmp_path / "news.tsv"
    path.write_text("N1\ta\tb\ttitle\tabs\turl\t[]\n", encoding="utf-8")
    stats = ParseStats()
    assert parse_news_tsv(path, stats) == []
    assert stats.rejected == 1


def test_unreadable_file_is_fatal(tmp_path):
    with pytest.raises(InputError):
        parse_news_tsv(tmp_path / "missing.tsv")


def test_parse_behaviors_row(tmp_path):
    path = tmp_path / "behaviors.tsv"
    path.write_text("1\tU1\t11/11/2019 9:05:58 AM\tN1 N2\tN3-1 N4-0\n2\tU2\t11/11/2019 9:06:00 AM\t\tN3-0 N4-1\n")
    first, second = parse_behaviors_tsv(path)
    assert first.history == ["N1", "N2"]
    assert first.candidates == [("N3", 1), ("N4", 0)]
    assert first.timestamp == "11/11/2019 9:05:58 AM"
    assert second.history == []


def test_parse_behaviors_bad_label(tmp_path):
    path = tmp_path / "behaviors.tsv"
    path.write_text("1\tU1\tt\tN1\tN3-2 N4-0\n")
    stats = ParseStats()
    assert parse_behaviors_tsv(path, stats) == []
    assert stats.rejected == 1


# ---------------------------------------------------------------- round trips

_text = st.text(st.characters(blacklist_categories=("Cc", "Cs", "Zl", "Zp"), blacklist_characters="\t\n\r"), max_size=20)
_ident = st.from_regex(r"[A-Z][0-9]{1,5}", fullmatch=True)
_entity = st.builds(Entity, _text, st.from_regex(r"Q[0-9]{1,6}", fullmatch=True), st.sampled_from([1.0, 0.5, 0.97]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.builds(
    NewsRecord, _ident, _text, _text, _text.filter(lambda s: s.strip()), _text, st.lists(_entity, max_size=3), _text,
    st.lists(_entity, max_size=2),
), max_size=5, unique_by=lambda r: r.news_id))
def test_news_round_trip(tmp_path_factory, records):
    path = tmp_path_factory.mktemp("rt") / "news.tsv"
    write_news_tsv(records, path)
    assert parse_news_tsv(path) == records


@settings(max_examples=50, deadline=None)
@given(st.lists(st.builds(
    Impression, _ident, _ident, st.just("11/11/2019 9:05:58 AM"), st.lists(_ident, max_size=4),
    st.lists(st.tuples(_ident, st.sampled_from([0, 1])), min_size=1, max_size=4),
), max_size=5))
def test_behaviors_round_trip(tmp_path_factory, impressions):
    path = tmp_path_factory.mktemp("rt") / "behaviors.tsv"
    write_behaviors_tsv(impressions, path)
    assert parse_behaviors_tsv(path) == impressions


def test_enriched_round_trip(tmp_path):
    items = [EnrichedNews("N1", "REFINED: a b [X]", [Entity("United States", "Q30")], "v1:hierarchical")]
    write_enriched_tsv(items, tmp_path / "e.tsv")
    back = read_enriched_tsv(tmp_path / "e.tsv")
    assert back["N1"].enriched_entities == [Entity("United States", "Q30")]
    header = (tmp_path / "e.tsv").read_text().splitlines()[0]
    assert header == "NewsID\tEnrichedTitle\tEnrichedEntities\tPromptVersion"
    assert json.loads((tmp_path / "e.tsv").read_text().splitlines()[1].split("\t")[2]) == [
        {"name": "United States", "qid": "Q30"}
    ]


# ---------------------------------------------------------------- tokenizer / vocab


def test_tokenize_rules():
    assert tokenize("US us") == ["us", "us"]
    assert tokenize("  \"Hello,\" world!  ") == ["hello", "world"]
    assert tokenize("U.S. -- don't") == ["u.s", "don't"]
    assert tokenize("a　b") == ["a", "b"]


def test_vocab_order():
    vocab = build_vocabulary(["A b", "b c"])
    assert vocab == {"<pad>": 0, "<oov>": 1, "b": 2, "a": 3, "c": 4}


def test_vocab_empty_and_case():
    assert build_vocabulary([]) == {"<pad>": 0, "<oov>": 1}
    vocab = build_vocabulary(["US us"])
    assert list(vocab) == ["<pad>", "<oov>", "us"]


def test_vocab_min_count():
    assert "c" not in build_vocabulary(["a a c", "a"], min_count=2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(max_size=30), max_size=10))
def test_vocab_is_order_independent(texts):
    assert build_vocabulary(texts) == build_vocabulary(list(reversed(texts)))


def test_truncate_counts_real_tokens():
    text = " ".join(f"w{i}" for i in range(60))
    assert len(tokenize(truncate_text(text))) == 40
    assert tokenize(truncate_text("a - b", 2)) == ["a", "b"]


# ---------------------------------------------------------------- embeddings


def test_word_embeddings(tmp_path):
    path = tmp_path / "glove.txt"
    path.write_text("the 0.5 -1.0 2.0\nfoo 1 1 1\n")
    vocab = build_vocabulary(["the cat"])
    table = load_word_embeddings(path, vocab, seed=3)
    np.testing.assert_array_equal(table.matrix[vocab["the"]], np.float32([0.5, -1.0, 2.0]))
    cat = table.matrix[vocab["cat"]]
    assert np.all(np.abs(cat) <= 0.1) and np.any(cat != 0)
    assert np.all(table.matrix[PAD] == 0) and not table.trainable_mask[PAD]
    assert table.coverage == pytest.approx(0.5)
    again = load_word_embeddings(path, vocab, seed=3)
    np.testing.assert_array_equal(table.matrix, again.matrix)


def test_word_embeddings_inconsistent_dim(tmp_path):
    path = tmp_path / "glove.txt"
    path.write_text("the 0.5 -1.0 2.0\nfoo 1 1\n")
    with pytest.raises(InputError):
        load_word_embeddings(path, build_vocabulary(["the"]))


def test_entity_embeddings(tmp_path):
    path = tmp_path / "entity_embedding.vec"
    vec = [f"{i / 100:.2f}" for i in range(100)]
    path.write_text("Q30\t" + "\t".join(vec) + "\t\n")
    index = build_index(["Q30", "Q999"])
    table = load_entity_embeddings(path, index)
    assert table.dim == 100
    np.testing.assert_allclose(table.matrix[index["Q30"]], np.float32(vec))
    new_row = table.matrix[index["Q999"]]
    assert table.trainable_mask[index["Q999"]] and np.all(np.abs(new_row) <= 0.1) and np.any(new_row != 0)
    assert np.all(table.matrix[PAD] == 0)


# ---------------------------------------------------------------- examples


def _features(n_news, titles=None):
    corpus = [NewsRecord(f"N{i}", "news", "sub", (titles or {}).get(i, f"title {i}")) for i in range(n_news)]
    vocab = build_vocabulary(r.title for r in corpus)
    return build_news_features(corpus, vocab, build_index([]), build_index(["news", "sub"]))


def _impression(n_pos, n_neg, imp_id="1"):
    cands = [(f"N{i}", 1) for i in range(n_pos)] + [(f"N{i}", 0) for i in range(n_pos, n_pos + n_neg)]
    return Impression(imp_id, "U1", "t", ["N20", "N21"], cands)


def test_one_positive_ten_negatives():
    feats = _features(25)
    (ex,) = make_training_examples([_impression(1, 10)], feats, k=4, seed=0)
    assert len(ex.candidates) == 5 and ex.target_index == 0
    assert ex.candidates[0] == feats.row_of["N0"]
    assert len(set(ex.candidates[1:].tolist())) == 4
    assert feats.row_of["N0"] not in ex.candidates[1:]


def test_few_negatives_sampled_with_replacement():
    feats = _features(25)
    (ex,) = make_training_examples([_impression(1, 2)], feats, k=4, seed=0)
    assert len(ex.candidates) == 5
    assert set(ex.candidates[1:].tolist()) <= {feats.row_of["N1"], feats.row_of["N2"]}


def test_examples_deterministic_and_shard_independent():
    feats = _features(25)
    imps = [_impression(2, 8, str(i)) for i in range(6)]
    a = [e.candidates.tolist() for e in make_training_examples(imps, feats, seed=5)]
    b = [e.candidates.tolist() for e in make_training_examples(imps, feats, seed=5)]
    shards = [e.candidates.tolist() for part in (imps[:3], imps[3:]) for e in make_training_examples(part, feats, seed=5)]
    assert a == b == shards


def test_cold_and_no_positive_skipped():
    feats = _features(25)
    cold = Impression("9", "U", "t", [], [("N0", 1), ("N1", 0)])
    nopos = Impression("8", "U", "t", ["N3"], [("N0", 0), ("N1", 0)])
    assert list(make_training_examples([cold, nopos], feats)) == []


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 12), st.integers(1, 6), st.integers(0, 1000))
def test_example_invariants(n_pos, n_neg, k, seed):
    feats = _features(25, titles={0: "!!!"})
    imp = _impression(n_pos, n_neg)
    examples = list(make_training_examples([imp], feats, k=k, seed=seed))
    assert len(examples) == n_pos
    for ex in examples:
        assert ex.target_index == 0 and len(ex.candidates) == 1 + k
        grids = ex.grids(feats)
        assert grids["candidate_tokens"].shape == (1 + k, 40)
        assert grids["history_tokens"].shape == (50, 40)
        np.testing.assert_array_equal(grids["candidate_token_mask"], grids["candidate_tokens"] != PAD)
        np.testing.assert_array_equal(ex.history_mask, ex.history != 0)
        assert grids["candidate_token_mask"].any(axis=1).all()
        if n_neg >= k:
            negs = ex.candidates[1:].tolist()
            assert len(set(negs)) == k and ex.candidates[0] not in negs


def test_empty_title_gets_oov_token():
    feats = _features(2, titles={0: "!!! ..."})
    row = feats.row_of["N0"]
    assert feats.tokens[row, 0] == OOV and feats.token_mask[row].sum() == 1


def test_history_truncated_to_most_recent():
    feats = _features(60)
    imp = Impression("1", "U", "t", [f"N{i}" for i in range(60)], [("N0", 1), ("N1", 0)])
    (ex,) = make_training_examples([imp], feats, k=1, max_history=50)
    assert ex.history[0] == feats.row_of["N10"] and ex.history[-1] == feats.row_of["N59"]
