"""Byte-level BPE tokenizer and token-efficiency metrics (CpT / TpW)."""
from __future__ import annotations

import math
import unicodedata
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

FORMAT_VERSION = 1
N_BYTES = 256


def _char_class(ch: str, isolate_digits: bool, isolate_punctuation: bool) -> str:
    if ch.isspace():
        return "space"
    cat = unicodedata.category(ch)
    if isolate_digits and cat == "Nd":
        return "digit"
    if isolate_punctuation and cat[0] in "PS":
        return "punct"
    return "word"


def pretokenize(text: str, isolate_digits: bool = False, isolate_punctuation: bool = False) -> list[str]:
    """Split text into pretokens; merges never cross a pretoken boundary.

    Whitespace runs and non-whitespace runs are separate pretokens. With the
    isolation flags on, every digit (Unicode ``Nd``) or punctuation/symbol
    character (``P*``/``S*``) becomes a pretoken of its own.
    """
    pieces: list[str] = []
    start = 0
    prev = None
    for i, ch in enumerate(text):
        cls = _char_class(ch, isolate_digits, isolate_punctuation)
        if prev is not None and (cls != prev or cls in ("digit", "punct")):
            pieces.append(text[start:i])
            start = i
        prev = cls
    if text:
        pieces.append(text[start:])
    return pieces


@dataclass
class Tokenizer:
    """Trained BPE model: byte-string vocabulary plus ordered merge rules.

    ``vocab[i]`` is the surface form (bytes) of token id ``i``; ids ``0..255``
    are the single bytes, so every string is encodable. ``merges`` holds
    ``(left_id, right_id)`` in the order they were learned.
    """

    vocab: list[bytes]
    merges: list[tuple[int, int]]
    isolate_digits: bool = False
    isolate_punctuation: bool = False
    token_to_id: dict[bytes, int] = field(init=False, repr=False)
    _ranks: dict[tuple[int, int], tuple[int, int]] = field(init=False, repr=False)
    _cache: dict[str, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.vocab) < N_BYTES or any(self.vocab[i] != bytes([i]) for i in range(N_BYTES)):
            raise ValueError("vocab must start with the 256 single-byte tokens")
        self.token_to_id = {}
        for i, tok in enumerate(self.vocab):
            if tok in self.token_to_id:
                raise ValueError(f"duplicate vocab entry {tok!r}")
            self.token_to_id[tok] = i
        self._ranks = {}
        for rank, (a, b) in enumerate(self.merges):
            out = self.vocab[a] + self.vocab[b]
            if out not in self.token_to_id:
                raise ValueError(f"merge {rank} output {out!r} missing from vocab")
            self._ranks.setdefault((a, b), (rank, self.token_to_id[out]))
        self._cache = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def flags(self) -> dict[str, bool]:
        return {"isolate_digits": self.isolate_digits, "isolate_punctuation": self.isolate_punctuation}

    def encode_bytes(self, data: bytes) -> list[int]:
        """Apply merges in rank order to one chunk of bytes (no pretokenizing)."""
        ids = list(data)
        ranks = self._ranks
        while len(ids) > 1:
            best = None
            for pair in zip(ids, ids[1:]):
                r = ranks.get(pair)
                if r is not None and (best is None or r[0] < best[0]):
                    best = (r[0], pair, r[1])
            if best is None:
                break
            _, pair, new_id = best
            out, i = [], 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == pair[0] and ids[i + 1] == pair[1]:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for piece in pretokenize(text, self.isolate_digits, self.isolate_punctuation):
            ids = self._cache.get(piece)
            if ids is None:
                ids = tuple(self.encode_bytes(piece.encode("utf-8")))
                self._cache[piece] = ids
            out.extend(ids)
        return out

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        return b"".join(self.vocab[i] for i in ids)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8")

    # -- serialization ---------------------------------------------------

    def dumps(self) -> str:
        lines = [
            f"adaptlab-bpe {FORMAT_VERSION} {self.vocab_size} {len(self.merges)} "
            f"{int(self.isolate_digits)} {int(self.isolate_punctuation)}"
        ]
        lines += [f"{i}\t{escape_token(tok)}" for i, tok in enumerate(self.vocab)]
        lines += [f"{a} {b}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Tokenizer":
        lines = text.split("\n")
        head = lines[0].split()
        if len(head) != 6 or head[0] != "adaptlab-bpe":
            raise ValueError("not a tokenizer file")
        if int(head[1]) != FORMAT_VERSION:
            raise ValueError(f"unsupported tokenizer version {head[1]}")
        n_vocab, n_merges = int(head[2]), int(head[3])
        body = lines[1 : 1 + n_vocab + n_merges]
        if len(body) != n_vocab + n_merges:
            raise ValueError("truncated tokenizer file")
        vocab = []
        for expect, line in enumerate(body[:n_vocab]):
            idx, _, tok = line.partition("\t")
            if int(idx) != expect:
                raise ValueError(f"vocab ids must be dense; got {idx} at line {expect + 2}")
            vocab.append(unescape_token(tok))
        merges = [tuple(int(x) for x in line.split()) for line in body[n_vocab:]]
        return cls(vocab, merges, bool(int(head[4])), bool(int(head[5])))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="ascii")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls.loads(Path(path).read_text(encoding="ascii"))


def escape_token(tok: bytes) -> str:
    out = []
    for b in tok:
        if 0x21 <= b <= 0x7E and b != 0x5C:
            out.append(chr(b))
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def unescape_token(s: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(s):
        if s[i] == "\\":
            if s[i + 1] != "x":
                raise ValueError(f"bad escape in {s!r}")
            out.append(int(s[i + 2 : i + 4], 16))
            i += 4
        else:
            out.append(ord(s[i]))
            i += 1
    return bytes(out)


def train_bpe(
    corpus: str | Sequence[str],
    target_vocab: int,
    isolate_digits: bool = False,
    isolate_punctuation: bool = False,
) -> Tokenizer:
    """Learn merges until the vocabulary holds ``target_vocab`` tokens.

    The most frequent adjacent pair is merged at every step; ties go to the
    lexicographically smallest ``(left bytes, right bytes)``. If a merge
    produces a surface form that already exists, the rule is recorded against
    the existing id and the vocabulary does not grow on that step.
    """
    if target_vocab < N_BYTES:
        raise ValueError(f"target_vocab {target_vocab} below byte alphabet size {N_BYTES}")
    texts = [corpus] if isinstance(corpus, str) else list(corpus)
    word_freq: dict[tuple[int, ...], int] = {}
    for text in texts:
        for piece in pretokenize(text, isolate_digits, isolate_punctuation):
            key = tuple(piece.encode("utf-8"))
            word_freq[key] = word_freq.get(key, 0) + 1

    vocab = [bytes([i]) for i in range(N_BYTES)]
    token_to_id = {tok: i for i, tok in enumerate(vocab)}
    merges: list[tuple[int, int]] = []
    words = list(word_freq.items())
    while len(vocab) < target_vocab:
        counts: dict[tuple[int, int], int] = {}
        for ids, freq in words:
            for pair in zip(ids, ids[1:]):
                counts[pair] = counts.get(pair, 0) + freq
        if not counts:
            raise ValueError(
                f"corpus exhausted after {len(vocab)} tokens; cannot reach target_vocab={target_vocab}"
            )
        top = max(counts.values())
        pair = min((p for p, c in counts.items() if c == top), key=lambda p: (vocab[p[0]], vocab[p[1]]))
        surface = vocab[pair[0]] + vocab[pair[1]]
        new_id = token_to_id.get(surface)
        if new_id is None:
            new_id = len(vocab)
            vocab.append(surface)
            token_to_id[surface] = new_id
        merges.append(pair)
        words = [(_merge_pair(ids, pair, new_id), freq) for ids, freq in words]
    return Tokenizer(vocab, merges, isolate_digits, isolate_punctuation)


def _merge_pair(ids: tuple[int, ...], pair: tuple[int, int], new_id: int) -> tuple[int, ...]:
    if len(ids) < 2:
        return ids
    out, i = [], 0
    a, b = pair
    while i < len(ids):
        if i + 1 < len(ids) and ids[i] == a and ids[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return tuple(out)


@dataclass(frozen=True)
class EfficiencyReport:
    token_count: int
    char_count: int
    word_count: int
    name: str = ""

    @property
    def cpt(self) -> Fraction:
        """Characters per token, as an exact rational."""
        return Fraction(self.char_count, self.token_count)

    @property
    def tpw(self) -> Fraction:
        """Tokens per word, as an exact rational."""
        return Fraction(self.token_count, self.word_count)

    def row(self) -> dict:
        return {
            "name": self.name,
            "tokens": self.token_count,
            "chars": self.char_count,
            "words": self.word_count,
            "cpt": float(self.cpt),
            "tpw": float(self.tpw),
        }


def count_chars_words(text: str) -> tuple[int, int]:
    """Unicode scalar values after NFC (whitespace included) and non-whitespace runs."""
    norm = unicodedata.normalize("NFC", text)
    return len(norm), len(norm.split())


def efficiency_metrics(model: Tokenizer, text: str, name: str = "") -> EfficiencyReport:
    if not text:
        raise ValueError("efficiency_metrics: text must be non-empty")
    norm = unicodedata.normalize("NFC", text)
    chars, words = count_chars_words(norm)
    if words == 0:
        raise ValueError("efficiency_metrics: text contains no words (tokens per word undefined)")
    return EfficiencyReport(len(model.encode(norm)), chars, words, name)


def compare_tokenizers(models: Sequence[Tokenizer], text: str, names: Sequence[str] | None = None) -> list[EfficiencyReport]:
    if not models:
        raise ValueError("compare_tokenizers: need at least one model")
    names = list(names) if names is not None else [f"model{i}" for i in range(len(models))]
    norm = unicodedata.normalize("NFC", text)
    return [efficiency_metrics(m, norm, n) for m, n in zip(models, names)]


def consistent_counts(token_count: int, cpt: str | float, tpw: str | float, decimals: int = 2) -> tuple[range, range]:
    """Integer char/word counts compatible with metrics rounded to ``decimals``.

    Returns ``(chars, words)`` as ranges; an empty range means the reported
    numbers cannot come from any integer counts.
    """
    half = Fraction(1, 2 * 10**decimals)
    c = Fraction(str(cpt))
    w = Fraction(str(tpw))
    chars = range(math.ceil((c - half) * token_count), math.floor((c + half) * token_count) + 1)
    words = range(math.ceil(token_count / (w + half)), math.floor(token_count / (w - half)) + 1)
    return chars, words
