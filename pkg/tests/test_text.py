import pytest
from hypothesis import given, strategies as st

from qpr.text import Vocabulary, build_vocab, encode_ids, fnv1a_64, tokenize


@pytest.mark.parametrize("text, expected", [
    ("Where is Michael Jordan?", ["where", "is", "michael", "jordan", "?"]),
    ("a  b", ["a", "b"]),
    ("", []),
    ("   \t\n", []),
    ("What's up,doc", ["what", "'", "s", "up", ",", "doc"]),
])
def test_tokenize(text, expected):
    assert tokenize(text) == expected


def test_fnv1a_reference_vectors():
    # published FNV-1a 64-bit test vectors
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64("foobar") == 0x85944171F73967E8


def test_build_vocab_frequency_then_lexicographic():
    vocab = build_vocab(["a b", "a c"], V=2, m=4)
    assert dict(vocab.token_to_id) == {"a": 0, "b": 1}
    assert vocab.m == 4


def test_build_vocab_undersized_corpus():
    vocab = build_vocab(["a"], V=5, m=2)
    assert vocab.size == 1
    assert vocab.V == 5


def test_quora_defaults():
    vocab = build_vocab(["x"], V=50_000, m=5_000)
    assert vocab.num_ids == 55_000


def test_encode_ids_in_vocab_and_oov():
    vocab = build_vocab(["where is the cat", "the dog"], V=10, m=4)
    ids = encode_ids(tokenize("the cat"), vocab)
    assert all(i < 10 for i in ids)
    oov = encode_ids(["zyzzyva"], vocab)[0]
    assert 10 <= oov < 14
    assert oov == 10 + fnv1a_64("zyzzyva") % 4
    assert encode_ids(["zyzzyva"], vocab) == [oov]


def test_hash_bins_can_collide():
    vocab = build_vocab(["a"], V=1, m=2)
    bins = {encode_ids([f"rare{i}"], vocab)[0] for i in range(20)}
    assert bins <= {1, 2}
    assert len(bins) == 2


def test_encode_ids_truncates():
    vocab = build_vocab(["a"], V=1, m=1)
    assert len(encode_ids(["a"] * 100, vocab)) == 64


def test_vocab_file_round_trip(tmp_path):
    vocab = build_vocab(["where is jordan ?", "where was he born"], V=4, m=3)
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    raw = path.read_bytes().decode()
    assert raw.startswith("4 3\n")
    assert raw.splitlines()[1] == "where\t0"
    again = Vocabulary.load(path)
    assert again == vocab
    assert again.id_to_token() == vocab.id_to_token()


def test_vocab_rejects_sparse_ids():
    with pytest.raises(ValueError):
        Vocabulary({"a": 1}, 3, 1)


@given(st.lists(st.text(max_size=30), min_size=1, max_size=20), st.integers(1, 30), st.integers(1, 7))
def test_ids_in_range_and_round_trip(corpus, V, m):
    vocab = build_vocab(corpus, V, m)
    inverse = vocab.id_to_token()
    for q in corpus:
        toks = tokenize(q)
        ids = encode_ids(toks, vocab, max_len=None)
        assert ids == encode_ids(toks, vocab, max_len=None)
        for tok, i in zip(toks, ids):
            assert 0 <= i < V + m
            if tok in vocab.token_to_id:
                assert inverse[i] == tok
            else:
                assert i >= V
