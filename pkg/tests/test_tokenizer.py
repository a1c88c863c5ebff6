from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptlab.oracles import bpe_merges_bruteforce
from adaptlab.tokenizer import (
    EfficiencyReport,
    Tokenizer,
    compare_tokenizers,
    consistent_counts,
    count_chars_words,
    efficiency_metrics,
    escape_token,
    pretokenize,
    train_bpe,
    unescape_token,
)

CORPUS = [
    "Zażółć gęślą jaźń. Ala ma kota, a kot ma Alę!",
    "the quick brown fox jumps over the lazy dog 1234 5678",
    "abab abab abba baba 漢字 漢字 emoji 🙂🙂",
]


@pytest.fixture(scope="module")
def tok():
    return train_bpe(CORPUS, 320)


@pytest.fixture(scope="module")
def tok_isolating():
    return train_bpe(CORPUS, 300, isolate_digits=True, isolate_punctuation=True)


def surfaces(t: Tokenizer, merges=None):
    return [(t.vocab[a], t.vocab[b]) for a, b in (merges or t.merges)]


def test_only_candidate_merge():
    t = train_bpe("aaaa", 257)
    assert surfaces(t) == [(b"a", b"a")]
    assert t.vocab[256] == b"aa"


def test_abab_merges_and_tie_rule():
    t = train_bpe("abab abab", 258)
    assert surfaces(t) == [(b"a", b"b"), (b"ab", b"ab")]


def test_merges_match_bruteforce_oracle():
    pieces = [p for text in CORPUS for p in pretokenize(text)]
    words = [tuple(bytes([b]) for b in p.encode()) for p in pieces]
    t = train_bpe(CORPUS, 300)
    assert surfaces(t) == bpe_merges_bruteforce(words, len(t.merges))


@given(st.lists(st.text(alphabet="abc d", min_size=1, max_size=12), min_size=1, max_size=6), st.integers(1, 12))
def test_merges_match_oracle_random(texts, n):
    words = [tuple(bytes([b]) for b in p.encode()) for t in texts for p in pretokenize(t)]
    try:
        t = train_bpe(texts, 256 + n)
    except ValueError:
        # pairs ran out before n distinct new surfaces appeared
        assert len({a + b for a, b in bpe_merges_bruteforce(words, 10_000)}) < n
        return
    assert surfaces(t) == bpe_merges_bruteforce(words, len(t.merges))


def test_digit_isolation_blocks_cross_digit_merges():
    assert pretokenize("a1a1", isolate_digits=True) == ["a", "1", "a", "1"]
    # every pretoken of "a1a1" is a single byte, so there is nothing to merge
    with pytest.raises(ValueError, match="exhausted"):
        train_bpe("a1a1", 257, isolate_digits=True)
    t = train_bpe(["ab1ab1 cd22cd 3ab3"] * 2, 258, isolate_digits=True)
    for piece in t.vocab[256:]:
        assert not (any(48 <= b <= 57 for b in piece) and len(piece) > 1)
    t_plain = train_bpe("a1a1", 257)
    assert t_plain.vocab[256] == b"a1"


def test_pretokenize():
    assert pretokenize("") == []
    assert pretokenize("ab  cd\te") == ["ab", "  ", "cd", "\t", "e"]
    assert pretokenize("x,y!", isolate_punctuation=True) == ["x", ",", "y", "!"]
    assert pretokenize("12ab", isolate_digits=True) == ["1", "2", "ab"]
    assert pretokenize("12ab") == ["12ab"]


def test_target_below_alphabet():
    with pytest.raises(ValueError, match="below byte alphabet"):
        train_bpe("abc", 100)


def test_corpus_exhausted():
    with pytest.raises(ValueError, match="exhausted"):
        train_bpe("ab", 260)


def test_vocab_invariants(tok):
    assert len(tok.vocab) == 320
    assert len(set(tok.vocab)) == len(tok.vocab)
    for a, b in tok.merges:
        assert tok.vocab[a] + tok.vocab[b] in tok.token_to_id


def test_encode_examples():
    t = train_bpe("abab", 257)
    assert t.encode("") == []
    assert t.encode("abab") == [256, 256]
    assert len(t.encode("abab")) == 2


@given(st.text(max_size=40))
def test_roundtrip(text):
    for t in (train_bpe(CORPUS, 290), train_bpe(CORPUS, 280, isolate_digits=True, isolate_punctuation=True)):
        assert t.decode(t.encode(text)) == text


def test_encode_reproduces_training_segmentation(tok):
    # applying merges by rank gives the same pieces training produced
    for text in CORPUS:
        for piece in pretokenize(text):
            ids = tok.encode(piece)
            assert tok.decode_bytes(ids) == piece.encode()


def test_more_merges_never_more_tokens():
    small, big = train_bpe(CORPUS, 270), train_bpe(CORPUS, 330)
    assert big.merges[: len(small.merges)] == small.merges
    for text in CORPUS + ["unseen text with ąę and 999"]:
        assert len(big.encode(text)) <= len(small.encode(text))


def test_serialization_roundtrip(tok_isolating, tmp_path):
    text = tok_isolating.dumps()
    back = Tokenizer.loads(text)
    assert back.vocab == tok_isolating.vocab and back.merges == tok_isolating.merges
    assert (back.isolate_digits, back.isolate_punctuation) == (True, True)
    assert back.dumps() == text
    tok_isolating.save(tmp_path / "t.tok")
    assert (tmp_path / "t.tok").read_text() == text
    assert Tokenizer.load(tmp_path / "t.tok").encode("x, 12") == tok_isolating.encode("x, 12")


def test_loads_rejects_garbage():
    with pytest.raises(ValueError):
        Tokenizer.loads("nonsense\n")
    with pytest.raises(ValueError):
        Tokenizer.loads("adaptlab-bpe 1 300 0 0 0\n0\t\\x00\n")


@given(st.binary(max_size=8))
def test_escape_roundtrip(b):
    s = escape_token(b)
    assert "\t" not in s and "\n" not in s and " " not in s
    assert unescape_token(s) == b


def test_efficiency_hand_case():
    rep = EfficiencyReport(token_count=3, char_count=5, word_count=2)
    assert rep.cpt == Fraction(5, 3)
    assert rep.tpw == Fraction(3, 2)
    t = train_bpe(["ab ab"], 257)
    r = efficiency_metrics(t, "ab ab")
    assert (r.token_count, r.char_count, r.word_count) == (3, 5, 2)


def test_single_token_text():
    t = train_bpe(["abc"] * 3, 258)
    r = efficiency_metrics(t, "abc")
    assert r.token_count == 1 and r.cpt == 3 and r.tpw == 1


def test_one_char_text(tok):
    r = efficiency_metrics(tok, "x")
    assert r.token_count >= 1 and r.cpt <= 1


def test_efficiency_errors(tok):
    with pytest.raises(ValueError):
        efficiency_metrics(tok, "")
    with pytest.raises(ValueError):
        efficiency_metrics(tok, "   ")


def test_counts_use_nfc():
    decomposed = "é a"
    assert count_chars_words(decomposed) == (3, 2)


@given(st.text(min_size=1, max_size=40).filter(lambda s: s.split()))
def test_rational_identities(text):
    t = train_bpe(CORPUS, 280)
    r = efficiency_metrics(t, text)
    assert r.cpt * r.token_count == r.char_count
    assert r.tpw * r.word_count == r.token_count


def test_compare_rows(tok, tok_isolating):
    text = CORPUS[0]
    rows = compare_tokenizers([tok, tok_isolating], text, ["a", "b"])
    assert [r.name for r in rows] == ["a", "b"]
    assert rows[0] == efficiency_metrics(tok, text, "a")
    assert rows[1] == efficiency_metrics(tok_isolating, text, "b")
    one = compare_tokenizers([tok], text, ["a"])
    assert one == [rows[0]]
    same = compare_tokenizers([tok, tok], text, ["x", "x"])
    assert same[0] == same[1]
    with pytest.raises(ValueError):
        compare_tokenizers([], text)


def test_reported_counts_consistency():
    chars, words = consistent_counts(375, "4.78", "1.62")
    assert chars == range(1791, 1795)
    assert 1792 in chars and 1793 in chars
    assert len(words) > 0
    assert all(abs(Fraction(375, w) - Fraction("1.62")) <= Fraction(1, 200) for w in words)
