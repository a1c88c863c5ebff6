"""Initialise embeddings for a new vocabulary from an old model's embeddings.

Four initialisers are provided: random, FVT (mean of the constituent old
tokens), an affine map fitted through an auxiliary embedding space, and FOCUS
(sparsemax-weighted combination of overlapping tokens, weights from cosine
similarity in the auxiliary space). Rows of tokens shared by both
vocabularies are copied from the old matrix unless told otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numeric import RngStream, sparsemax
from .tokenizer import Tokenizer

EMB_MAGIC = b"adaptlab-emb"
EMB_VERSION = 1


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray  # (V, d)
    vocab: list[bytes]

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] != len(self.vocab):
            raise ValueError(f"{self.rows.shape[0]} rows for a vocabulary of {len(self.vocab)}")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("embedding entries must be finite")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class VocabAlignment:
    """``overlap[new_id] = old_id`` for shared surface forms;
    ``decomposition[new_id]`` lists the old ids that spell the new token."""

    overlap: dict[int, int]
    decomposition: dict[int, list[int]]

    def check(self, old_vocab: Sequence[bytes], new_vocab: Sequence[bytes]) -> None:
        for nid, parts in self.decomposition.items():
            if b"".join(old_vocab[i] for i in parts) != new_vocab[nid]:
                raise ValueError(f"decomposition of token {nid} does not spell {new_vocab[nid]!r}")
        for nid, oid in self.overlap.items():
            if self.decomposition.get(nid) != [oid]:
                raise ValueError(f"overlap token {nid} must decompose to itself")


@dataclass
class AuxEmbedding:
    """Vectors in a shared auxiliary space, keyed by token surface form."""

    vectors: dict[bytes, np.ndarray]

    @property
    def dim(self) -> int:
        return len(next(iter(self.vectors.values())))

    def matrix(self, tokens: Sequence[bytes]) -> np.ndarray:
        missing = [t for t in tokens if t not in self.vectors]
        if missing:
            raise ValueError(f"auxiliary embedding has no vector for {missing[0]!r}")
        return np.stack([self.vectors[t] for t in tokens]).astype(np.float64)


def build_alignment(old: Tokenizer, new: Tokenizer) -> VocabAlignment:
    overlap, decomp = {}, {}
    for nid, tok in enumerate(new.vocab):
        oid = old.token_to_id.get(tok)
        if oid is not None:
            overlap[nid] = oid
            decomp[nid] = [oid]
        else:
            decomp[nid] = old.encode_bytes(tok)
    return VocabAlignment(overlap, decomp)


def _copy_overlap(rows: np.ndarray, old: EmbeddingMatrix, align: VocabAlignment) -> None:
    for nid, oid in align.overlap.items():
        rows[nid] = old.rows[oid]


def init_random(new_vocab: Sequence[bytes], d: int, scale: float, rng: RngStream,
                old: EmbeddingMatrix | None = None, align: VocabAlignment | None = None,
                reinit_overlap: bool = False) -> EmbeddingMatrix:
    """i.i.d. N(0, scale^2) rows; shared rows are copied from ``old`` if given."""
    if scale <= 0:
        raise ValueError("scale must be > 0")
    rows = rng.normal((len(new_vocab), d), scale)
    if old is not None and align is not None and not reinit_overlap:
        _copy_overlap(rows, old, align)
    return EmbeddingMatrix(rows, list(new_vocab))


def init_fvt(old: EmbeddingMatrix, align: VocabAlignment, new_vocab: Sequence[bytes]) -> EmbeddingMatrix:
    rows = np.zeros((len(new_vocab), old.dim))
    for nid, tok in enumerate(new_vocab):
        if nid in align.overlap:
            rows[nid] = old.rows[align.overlap[nid]]
            continue
        parts = align.decomposition.get(nid)
        if not parts:
            raise ValueError(f"new token {nid} ({tok!r}) has no decomposition into old tokens")
        rows[nid] = old.rows[parts].mean(axis=0)
    return EmbeddingMatrix(rows, list(new_vocab))


def fit_affine(X: np.ndarray, Y: np.ndarray, ridge: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``Y ~ X @ M + b``, optionally with a ridge penalty on M.

    Solved through the normal equations; the bias is never penalised.
    """
    n, p = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    gram = A.T @ A
    if ridge > 0:
        gram = gram + ridge * np.diag(np.r_[np.ones(p), 0.0])
    if np.linalg.matrix_rank(gram) < p + 1:
        raise ValueError(
            "normal equations are rank-deficient (too few or collinear overlap tokens); "
            "set a positive ridge to regularise"
        )
    beta = np.linalg.solve(gram, A.T @ Y)
    return beta[:p], beta[p]


def affine_objective(X, Y, M, b, ridge: float = 0.0) -> float:
    r = X @ M + b - Y
    return float(np.sum(r * r) + ridge * np.sum(M * M))


def init_linear(old: EmbeddingMatrix, aux: AuxEmbedding, align: VocabAlignment, new_vocab: Sequence[bytes],
                ridge: float = 0.0) -> EmbeddingMatrix:
    """Fit ``aux -> old`` on the overlap and map every new token through it."""
    pairs = sorted(align.overlap.items())
    if len(pairs) < aux.dim + 1:
        raise ValueError(f"need at least {aux.dim + 1} overlap tokens for the affine fit, have {len(pairs)}")
    X = aux.matrix([new_vocab[nid] for nid, _ in pairs])
    Y = old.rows[[oid for _, oid in pairs]]
    M, b = fit_affine(X, Y, ridge)
    rows = aux.matrix(list(new_vocab)) @ M + b
    _copy_overlap(rows, old, align)
    return EmbeddingMatrix(rows, list(new_vocab))


def _cosine_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(A, axis=1, keepdims=True)
    nb = np.linalg.norm(B, axis=1, keepdims=True)
    A = np.divide(A, na, out=np.zeros_like(A), where=na > 0)
    B = np.divide(B, nb, out=np.zeros_like(B), where=nb > 0)
    return A @ B.T


def focus_weights(aux: AuxEmbedding, align: VocabAlignment, new_vocab: Sequence[bytes]):
    """Sparsemax weights over overlap tokens for every non-shared new token.

    Returns ``(overlap_new_ids, {new_id: weight_vector})``.
    """
    if not align.overlap:
        raise ValueError("FOCUS needs at least one overlapping token")
    ov = sorted(align.overlap)
    fresh = [nid for nid in range(len(new_vocab)) if nid not in align.overlap]
    if not fresh:
        return ov, {}
    sims = _cosine_rows(aux.matrix([new_vocab[i] for i in fresh]), aux.matrix([new_vocab[i] for i in ov]))
    W = sparsemax(sims, axis=1)
    return ov, {nid: W[j] for j, nid in enumerate(fresh)}


def init_focus(old: EmbeddingMatrix, aux: AuxEmbedding, align: VocabAlignment,
               new_vocab: Sequence[bytes]) -> EmbeddingMatrix:
    ov, weights = focus_weights(aux, align, new_vocab)
    src = old.rows[[align.overlap[nid] for nid in ov]]
    rows = np.zeros((len(new_vocab), old.dim))
    for nid, w in weights.items():
        rows[nid] = w @ src
    _copy_overlap(rows, old, align)
    return EmbeddingMatrix(rows, list(new_vocab))


def transfer(method: str, old: EmbeddingMatrix, align: VocabAlignment, new_vocab: Sequence[bytes],
             aux: AuxEmbedding | None = None, rng: RngStream | None = None,
             scale: float = 0.02, ridge: float = 0.0) -> EmbeddingMatrix:
    if method == "random":
        return init_random(new_vocab, old.dim, scale, rng, old, align)
    if method == "fvt":
        return init_fvt(old, align, new_vocab)
    if method == "linear":
        return init_linear(old, aux, align, new_vocab, ridge)
    if method == "focus":
        return init_focus(old, aux, align, new_vocab)
    raise ValueError(f"unknown transfer method {method!r}")


# -- auxiliary space (plumbing) ------------------------------------------


def _token_spans(tok: Tokenizer, text: str):
    ids = tok.encode(text)
    pos = 0
    for i in ids:
        n = len(tok.vocab[i])
        yield i, pos, pos + n
        pos += n


def train_aux_embeddings(tokenizers: Sequence[Tokenizer], corpus: Sequence[str], dim: int,
                         window: int = 2) -> AuxEmbedding:
    """Co-occurrence embeddings covering every token of every tokenizer.

    Features are the token's own bytes plus the bytes within ``window`` of
    each occurrence in ``corpus``. The token-by-feature count matrix is turned
    into positive PMI and factorised with a truncated SVD.
    """
    surfaces = sorted({t for tok in tokenizers for t in tok.vocab}, key=lambda t: (len(t), t))
    index = {t: i for i, t in enumerate(surfaces)}
    C = np.zeros((len(surfaces), 512))
    for t, i in index.items():
        for byte in t:
            C[i, byte] += 1.0
    for tok in tokenizers:
        for text in corpus:
            data = text.encode("utf-8")
            for tid, s, e in _token_spans(tok, text):
                row = index[tok.vocab[tid]]
                for byte in data[max(0, s - window):s] + data[e:e + window]:
                    C[row, 256 + byte] += 1.0
    total = C.sum()
    pr = C.sum(axis=1, keepdims=True) / total
    pc = C.sum(axis=0, keepdims=True) / total
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log((C / total) / (pr * pc))
    ppmi = np.where(C > 0, np.maximum(pmi, 0.0), 0.0)
    U, S, _ = np.linalg.svd(ppmi, full_matrices=False)
    k = min(dim, len(S))
    vec = U[:, :k] * np.sqrt(S[:k])
    # fix the SVD sign ambiguity: largest-magnitude entry of each column positive
    flip = np.sign(vec[np.argmax(np.abs(vec), axis=0), np.arange(k)])
    vec = vec * np.where(flip == 0, 1.0, flip)
    return AuxEmbedding({t: vec[i].copy() for t, i in index.items()})


# -- serialization -------------------------------------------------------


def dumps_embedding(rows: np.ndarray) -> bytes:
    rows = np.asarray(rows, dtype=np.float64)
    header = b"%s %d %d %d\n" % (EMB_MAGIC, EMB_VERSION, rows.shape[0], rows.shape[1])
    return header + np.ascontiguousarray(rows, dtype="<f8").tobytes()


def loads_embedding(data: bytes) -> np.ndarray:
    nl = data.index(b"\n")
    parts = data[:nl].split()
    if len(parts) != 4 or parts[0] != EMB_MAGIC:
        raise ValueError("not an embedding file")
    version, V, d = (int(x) for x in parts[1:])
    if version != EMB_VERSION:
        raise ValueError(f"unsupported embedding version {version}")
    body = data[nl + 1:]
    if len(body) != 8 * V * d:
        raise ValueError(f"embedding body has {len(body)} bytes, expected {8 * V * d} for {V}x{d}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(V, d)


def save_embedding(rows: np.ndarray, path) -> None:
    Path(path).write_bytes(dumps_embedding(rows))


def load_embedding(path) -> np.ndarray:
    return loads_embedding(Path(path).read_bytes())
