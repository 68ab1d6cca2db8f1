import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcebad.data import (
    CLS,
    CLS_ID,
    PAD_ID,
    RESERVED,
    SEP,
    SEP_ID,
    UNK_ID,
    DataError,
    Dataset,
    Example,
    Vocab,
    batch_iter,
    build_vocab,
    decode,
    encode,
    encode_dataset,
    load_pretrained_embeddings,
    load_tsv,
    parse_embedding_header,
    read_embedding_file,
    split,
    tokenize,
)


def ex(*texts):
    return [Example(t, 0) for t in texts]


# ---------------------------------------------------------------- tokenize / vocab


def test_tokenize_two_chars():
    assert tokenize("ab") == [CLS, "a", "b", SEP]


def test_tokenize_empty():
    assert tokenize("") == [CLS, SEP]


def test_tokenize_drops_whitespace_keeps_scalars():
    assert tokenize("股 市\t涨") == [CLS, "股", "市", "涨", SEP]


def test_tokenize_length_35():
    text = "".join(chr(0x4E00 + i) for i in range(35))
    assert len(tokenize(text)) == 35 + 2


def test_vocab_frequency_order():
    v = build_vocab(ex("aa", "ab"))
    assert v.stoi["a"] == 4 and v.stoi["b"] == 5


def test_vocab_tie_broken_by_first_occurrence():
    v = build_vocab(ex("cb", "bc", "d"))
    assert v.itos[4:] == ["c", "b", "d"]


def test_vocab_min_freq_boundary():
    v = build_vocab(ex("aa", "ab"), min_freq=4)
    assert v.itos == list(RESERVED)


def test_vocab_deterministic():
    corpus = ex("今天股市大涨", "球队赢了比赛", "股市")
    assert build_vocab(corpus).itos == build_vocab(corpus).itos


def test_vocab_empty_corpus():
    with pytest.raises(DataError):
        build_vocab([])


def test_vocab_reserved_prefix_required():
    with pytest.raises(DataError):
        Vocab(["a", "b"])


# ---------------------------------------------------------------- encode


def test_encode_padding():
    v = build_vocab(ex("ab"))
    ids, mask = encode("ab", v, 32)
    assert ids.shape == (32,) and mask.sum() == 4
    assert ids[:4].tolist() == [CLS_ID, 4, 5, SEP_ID] and not ids[4:].any()


def test_encode_truncation():
    text = "".join(chr(0x4E00 + i) for i in range(40))
    v = build_vocab(ex(text))
    ids, mask = encode(text, v, 32)
    want = [CLS_ID] + [v.id(c) for c in text[:30]] + [SEP_ID]
    assert ids.tolist() == want and mask.all()


def test_encode_unknown_char():
    v = build_vocab(ex("ab"))
    ids, _ = encode("azb", v, 8)
    assert ids[2] == UNK_ID


def test_encode_degenerate():
    ids, mask = encode("", build_vocab(ex("a")), 5)
    assert ids.tolist() == [CLS_ID, SEP_ID, PAD_ID, PAD_ID, PAD_ID]
    assert mask.tolist() == [True, True, False, False, False]


def test_encode_text_size_too_small():
    with pytest.raises(ValueError):
        encode("a", build_vocab(ex("a")), 2)


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet=st.characters(blacklist_categories=("Cs", "Zs", "Cc", "Zl", "Zp")), max_size=29))
def test_encode_decode_round_trip(text):
    text = "".join(c for c in text if not c.isspace())
    v = build_vocab(ex(text or "x"))
    ids, _ = encode(text, v, 32)
    assert decode(ids, v) == text


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(alphabet="abcdefg 中文", max_size=50), min_size=1, max_size=10), st.integers(3, 40))
def test_batch_rows_well_formed(texts, text_size):
    v = build_vocab(ex(*texts))
    data = encode_dataset(ex(*texts), v, text_size)
    for ids, mask in zip(data.ids, data.mask):
        assert ids[0] == CLS_ID
        assert (ids == SEP_ID).sum() == 1
        assert np.array_equal(mask, ids != PAD_ID)


# ---------------------------------------------------------------- load_tsv


def test_load_tsv_counts(tmp_path):
    p = tmp_path / "d.tsv"
    p.write_text("股市大涨\tfinance\n\n球赛\tsports\n基金\tfinance\n", encoding="utf-8")
    examples, labels = load_tsv(p)
    assert len(examples) == 3 and labels == ["finance", "sports"]
    assert [e.label for e in examples] == [0, 1, 0]


def test_load_tsv_missing_tab(tmp_path):
    p = tmp_path / "d.tsv"
    p.write_text("ok\tx\nonly_text_no_tab\n", encoding="utf-8")
    with pytest.raises(DataError, match=":2:"):
        load_tsv(p)


def test_load_tsv_invalid_utf8(tmp_path):
    p = tmp_path / "d.tsv"
    p.write_bytes(b"ok\tx\nok\tx\n\xff\xfe\tx\n")
    with pytest.raises(DataError, match=":3:.*UTF-8"):
        load_tsv(p)


def test_load_tsv_empty_text(tmp_path):
    p = tmp_path / "d.tsv"
    p.write_text(" \tx\n", encoding="utf-8")
    with pytest.raises(DataError, match=":1:.*empty text"):
        load_tsv(p)


def test_load_tsv_missing_file(tmp_path):
    with pytest.raises(DataError, match="nope.tsv"):
        load_tsv(tmp_path / "nope.tsv")


def test_load_tsv_ten_classes(tmp_path):
    names = ["finance", "realty", "stocks", "education", "science", "society", "politics", "sports", "game", "entertainment"]
    p = tmp_path / "d.tsv"
    p.write_text("".join(f"标题{i}\t{n}\n" for i, n in enumerate(names)), encoding="utf-8")
    assert len(load_tsv(p)[1]) == 10


def test_load_tsv_fixed_inventory(tmp_path):
    p = tmp_path / "d.tsv"
    p.write_text("a\tx\nb\ty\n", encoding="utf-8")
    examples, labels = load_tsv(p, labels=["y", "x"])
    assert labels == ["y", "x"] and [e.label for e in examples] == [1, 0]
    with pytest.raises(DataError, match="unknown label"):
        load_tsv(p, labels=["x"])


# ---------------------------------------------------------------- split


def corpus(per_class, k):
    return [Example(f"{c}-{i}", c) for c in range(k) for i in range(per_class)]


def test_split_default_ratio_per_class():
    train, val, test = split(corpus(200, 10), seed=0)
    for part, want in ((train, 180), (val, 10), (test, 10)):
        assert all(n == want for n in Counter(e.label for e in part).values())


def test_split_everything_in_train():
    train, val, test = split(corpus(7, 3), ratios=(1, 0, 0))
    assert len(train) == 21 and not val and not test


@pytest.mark.parametrize("seed", range(5))
def test_split_is_partition(seed):
    rng = np.random.default_rng(seed)
    items = [Example(f"t{i}", int(rng.integers(0, 4))) for i in range(300)]
    for c in range(4):
        items.append(Example(f"extra{c}", c))
    parts = split(items, ratios=(5, 1, 1), seed=seed)
    assert Counter(e for p in parts for e in p) == Counter(items)
    a, b, c = (set(p) for p in parts)
    assert not (a & b) and not (a & c) and not (b & c)
    for k in range(4):
        n = sum(e.label == k for e in items)
        counts = [sum(e.label == k for e in p) for p in parts]
        for got, r in zip(counts, (5, 1, 1)):
            assert abs(got - n * r / 7) <= 1


def test_split_small_class_warns(caplog):
    with caplog.at_level(logging.WARNING):
        split(corpus(5, 2))
    assert "only 5 examples" in caplog.text


def test_split_empty_class():
    with pytest.raises(DataError):
        split(corpus(20, 2), num_classes=3)


def test_split_seeded():
    a = split(corpus(30, 3), seed=4)
    b = split(corpus(30, 3), seed=4)
    assert a == b


# ---------------------------------------------------------------- embeddings


def test_header_parse():
    assert parse_embedding_header("365076 300\n") == (365076, 300)


@pytest.mark.parametrize("line", ["300", "a b", "1 2 3", "5 0"])
def test_header_malformed(line):
    with pytest.raises(DataError):
        parse_embedding_header(line)


def vocab6():
    return Vocab(list(RESERVED) + list("abcdef"))


def test_embedding_coverage_and_exact_rows(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("2 3\nb 0.1 -2.5 3e-3\nf 1 2 3\n", encoding="utf-8")
    matrix, coverage = load_pretrained_embeddings(p, vocab6(), np.random.default_rng(0))
    assert coverage == pytest.approx(1 / 3)
    assert np.array_equal(matrix[5], np.array([0.1, -2.5, 3e-3]))
    assert np.array_equal(matrix[9], np.array([1.0, 2.0, 3.0]))
    assert matrix.shape == (10, 3)


def test_embedding_no_overlap(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("1 2\nzz 1 1\n", encoding="utf-8")
    matrix, coverage = load_pretrained_embeddings(p, vocab6(), np.random.default_rng(0))
    assert coverage == 0.0
    assert np.array_equal(matrix, np.random.default_rng(0).normal(0, 0.02, size=(10, 2)))


def test_embedding_reserved_never_copied(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text(f"1 2\n{CLS} 9 9\n", encoding="utf-8")
    matrix, _ = load_pretrained_embeddings(p, vocab6())
    assert not np.array_equal(matrix[CLS_ID], [9.0, 9.0])


def test_embedding_wrong_column_count(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("2 3\na 1 2 3\nb 1 2\n", encoding="utf-8")
    with pytest.raises(DataError, match=":3:"):
        read_embedding_file(p)


def test_embedding_short_file_warns(tmp_path, caplog):
    p = tmp_path / "e.txt"
    p.write_text("5 2\na 1 2\n", encoding="utf-8")
    with caplog.at_level(logging.WARNING):
        assert len(read_embedding_file(p).vectors) == 1
    assert "declares 5" in caplog.text


def test_embedding_too_many_rows(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("1 2\na 1 2\nb 1 2\n", encoding="utf-8")
    with pytest.raises(DataError, match="more rows"):
        read_embedding_file(p)


# ---------------------------------------------------------------- batching


def tiny_dataset(n):
    return Dataset(np.arange(n)[:, None], np.ones((n, 1), bool), np.arange(n))


def test_batch_sizes_keep_remainder():
    assert [len(b) for b in batch_iter(tiny_dataset(10), 4)] == [4, 4, 2]


def test_batch_corpus_order_without_shuffle():
    assert np.concatenate([b.labels for b in batch_iter(tiny_dataset(10), 3)]).tolist() == list(range(10))


def test_batch_shuffle_replay():
    a = [b.labels.tolist() for b in batch_iter(tiny_dataset(50), 8, shuffle=True, seed=3, epoch=1)]
    b = [b.labels.tolist() for b in batch_iter(tiny_dataset(50), 8, shuffle=True, seed=3, epoch=1)]
    c = [b.labels.tolist() for b in batch_iter(tiny_dataset(50), 8, shuffle=True, seed=3, epoch=2)]
    assert a == b and a != c
    assert sorted(sum(a, [])) == list(range(50))


def test_batch_size_positive():
    with pytest.raises(ValueError):
        next(batch_iter(tiny_dataset(3), 0))
