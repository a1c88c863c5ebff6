"""A tiny causal language model with exact hand-written gradients.

Each block mixes context by a running (prefix) mean instead of attention, then
applies a pre-normalised SwiGLU MLP with a residual connection::

    m_t = mean(h_0..h_t)
    h_t <- h_t + W2^T swiglu(split(rmsnorm(m_t, g) W1 + b1)) + b2

Logits are ``h_L U``. Position ``t`` predicts token ``t + 1``; it only ever
sees tokens ``<= t``.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numeric import DEFAULT_RMS_EPS, RngStream, sigmoid

CKPT_MAGIC = b"ADAPTLAB-CKPT"
CKPT_VERSION = 1
SEPARATOR_ID = 0


@dataclass
class Block:
    w1: np.ndarray  # (d, 2f): gate columns [:f], value columns [f:]
    b1: np.ndarray  # (2f,)
    w2: np.ndarray  # (f, d)
    b2: np.ndarray  # (d,)
    gain: np.ndarray  # (d,)

    FIELDS = ("w1", "b1", "w2", "b2", "gain")

    def copy(self) -> "Block":
        return Block(*(getattr(self, k).copy() for k in self.FIELDS))


@dataclass
class ModelParams:
    embed: np.ndarray  # (V, d)
    blocks: list[Block]
    head: np.ndarray  # (d, V)
    eps: float = DEFAULT_RMS_EPS

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def d_model(self) -> int:
        return self.embed.shape[1]

    @property
    def d_ff(self) -> int:
        return self.blocks[0].w2.shape[0] if self.blocks else 0

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameter arrays in their declared (checkpoint) order."""
        yield "embed", self.embed
        for i, blk in enumerate(self.blocks):
            for k in Block.FIELDS:
                yield f"blocks.{i}.{k}", getattr(blk, k)
        yield "head", self.head

    def names(self) -> list[str]:
        return [n for n, _ in self.named_arrays()]

    def get(self, name: str) -> np.ndarray:
        if name in ("embed", "head"):
            return getattr(self, name)
        _, i, k = name.split(".")
        return getattr(self.blocks[int(i)], k)

    def copy(self) -> "ModelParams":
        return ModelParams(self.embed.copy(), [b.copy() for b in self.blocks], self.head.copy(), self.eps)

    def n_params(self) -> int:
        return sum(a.size for _, a in self.named_arrays())

    def layer_param_count(self) -> int:
        return sum(getattr(self.blocks[0], k).size for k in Block.FIELDS) if self.blocks else 0

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def group_checksums(self) -> dict[str, str]:
        out = {}
        for name, arr in self.named_arrays():
            h = out.setdefault(param_group(name), hashlib.sha256())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return {k: v.hexdigest() for k, v in out.items()}


def param_group(name: str) -> str:
    """Freeze-mask group of a parameter: ``embed``, ``layer.<i>`` or ``head``."""
    if name.startswith("blocks."):
        return "layer." + name.split(".")[1]
    return name


def init_params(vocab_size: int, d_model: int, d_ff: int, n_layers: int, rng: RngStream,
                scale: float = 0.02, eps: float = DEFAULT_RMS_EPS) -> ModelParams:
    d, f = d_model, d_ff
    embed = rng.normal((vocab_size, d), scale)
    blocks = [
        Block(
            w1=rng.normal((d, 2 * f), 1.0 / np.sqrt(d)),
            b1=np.zeros(2 * f),
            w2=rng.normal((f, d), scale),
            b2=np.zeros(d),
            gain=np.ones(d),
        )
        for _ in range(n_layers)
    ]
    head = rng.normal((d, vocab_size), scale)
    return ModelParams(embed, blocks, head, eps)


# -- forward / backward --------------------------------------------------


@dataclass
class _Cache:
    tokens: np.ndarray
    counts: np.ndarray
    layers: list = field(default_factory=list)
    h_final: np.ndarray | None = None
    logp: np.ndarray | None = None


def _check_tokens(params: ModelParams, tokens) -> np.ndarray:
    x = np.asarray(tokens, dtype=np.int64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("sequence must be a non-empty 1-D token list")
    if x.min() < 0 or x.max() >= params.vocab_size:
        bad = int(x[(x < 0) | (x >= params.vocab_size)][0])
        raise ValueError(f"token id {bad} outside vocabulary of size {params.vocab_size}")
    return x


def forward_cached(params: ModelParams, tokens) -> tuple[np.ndarray, _Cache]:
    x = _check_tokens(params, tokens)
    T = x.size
    f = params.d_ff
    counts = np.arange(1, T + 1, dtype=np.float64)[:, None]
    cache = _Cache(x, counts)
    h = params.embed[x]
    for blk in params.blocks:
        m = np.cumsum(h, axis=0) / counts
        rms = np.sqrt(np.mean(m * m, axis=1, keepdims=True) + params.eps)
        u = m / rms
        n = u * blk.gain
        z = n @ blk.w1 + blk.b1
        a, b = z[:, :f], z[:, f:]
        sig = sigmoid(a)
        s = a * sig * b
        cache.layers.append((m, rms, u, n, a, b, sig, s))
        h = h + s @ blk.w2 + blk.b2
    logits = h @ params.head
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    cache.h_final = h
    cache.logp = logp
    return logp, cache


def forward(params: ModelParams, tokens) -> np.ndarray:
    """Per-position next-token log-probabilities, shape ``(T, V)``."""
    return forward_cached(params, tokens)[0]


def backward(params: ModelParams, cache: _Cache, dlogp: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dlogp * logp)`` w.r.t. every parameter array."""
    f = params.d_ff
    d = params.d_model
    p = np.exp(cache.logp)
    dlogits = dlogp - p * dlogp.sum(axis=1, keepdims=True)
    grads: dict[str, np.ndarray] = {"head": cache.h_final.T @ dlogits}
    dh = dlogits @ params.head.T
    for i in range(params.depth - 1, -1, -1):
        blk = params.blocks[i]
        m, rms, u, n, a, b, sig, s = cache.layers[i]
        grads[f"blocks.{i}.b2"] = dh.sum(axis=0)
        grads[f"blocks.{i}.w2"] = s.T @ dh
        ds = dh @ blk.w2.T
        da = ds * b * sig * (1.0 + a * (1.0 - sig))
        db = ds * a * sig
        dz = np.concatenate([da, db], axis=1)
        grads[f"blocks.{i}.w1"] = n.T @ dz
        grads[f"blocks.{i}.b1"] = dz.sum(axis=0)
        dn = dz @ blk.w1.T
        grads[f"blocks.{i}.gain"] = (dn * u).sum(axis=0)
        du = dn * blk.gain
        dm = du / rms - m * (du * m).sum(axis=1, keepdims=True) / (d * rms**3)
        # prefix-mean transpose: dh_u += sum_{t >= u} dm_t / (t + 1)
        dh = dh + np.cumsum((dm / cache.counts)[::-1], axis=0)[::-1]
    dE = np.zeros_like(params.embed)
    np.add.at(dE, cache.tokens, dh)
    grads["embed"] = dE
    return {name: grads[name] for name in params.names()}


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.named_arrays()}


def add_grads(acc: dict[str, np.ndarray], g: dict[str, np.ndarray], scale: float = 1.0) -> None:
    for k in acc:
        acc[k] += scale * g[k]


def target_logprobs(logp: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """``out[t] = log p(tokens[t] | tokens[:t])`` for ``t >= 1``; ``out[0] = 0``."""
    out = np.zeros(tokens.size)
    out[1:] = logp[np.arange(tokens.size - 1), tokens[1:]]
    return out


def weighted_logprob_grad(params: ModelParams, tokens, weights) -> tuple[float, dict[str, np.ndarray]]:
    """Value and gradient of ``sum_t weights[t] * log p(tokens[t] | tokens[:t])``."""
    logp, cache = forward_cached(params, tokens)
    x = cache.tokens
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ValueError("weights must match sequence length")
    value = float(np.dot(w, target_logprobs(logp, x)))
    dlogp = np.zeros_like(logp)
    dlogp[np.arange(x.size - 1), x[1:]] = w[1:]
    return value, backward(params, cache, dlogp)


def _response_weights(n_prompt: int, n_response: int, coef: float = 1.0) -> np.ndarray:
    w = np.zeros(n_prompt + n_response)
    w[n_prompt:] = coef
    return w


def seq_logprob(params: ModelParams, prompt: Sequence[int], response: Sequence[int]) -> float:
    """log pi(response | prompt): sum of next-token log-probs over the response."""
    if len(response) == 0:
        raise ValueError("response must be non-empty")
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty (the first token has no context)")
    tokens = np.asarray(list(prompt) + list(response))
    logp = forward(params, tokens)
    return float(target_logprobs(logp, tokens)[len(prompt):].sum())


def seq_logprob_grad(params: ModelParams, prompt, response, coef: float = 1.0):
    """``coef * log pi(response | prompt)`` and its gradient."""
    if len(response) == 0:
        raise ValueError("response must be non-empty")
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty (the first token has no context)")
    tokens = list(prompt) + list(response)
    return weighted_logprob_grad(params, tokens, _response_weights(len(prompt), len(response), coef))


def sample(params: ModelParams, prompt: Sequence[int], max_new_tokens: int, rng: RngStream,
           stop_token: int | None = SEPARATOR_ID, temperature: float = 1.0) -> list[int]:
    """Ancestral sampling; stops after emitting ``stop_token``."""
    tokens = list(prompt)
    out = []
    for _ in range(max_new_tokens):
        logp = forward(params, tokens)[-1]
        probs = np.exp((logp - logp.max()) / temperature)
        tok = rng.choice_index(probs / probs.sum())
        out.append(tok)
        tokens.append(tok)
        if stop_token is not None and tok == stop_token:
            break
    return out


# -- masked SFT loss -----------------------------------------------------


@dataclass
class Batch:
    """Token sequences with per-position loss masks.

    ``loss_mask[i][t]`` is true when token ``t`` of sequence ``i`` is a
    prediction target. Position 0 can never be a target.
    """

    sequences: list[list[int]]
    loss_mask: list[list[bool]]

    def __post_init__(self):
        if len(self.sequences) != len(self.loss_mask):
            raise ValueError("one mask per sequence required")
        for s, m in zip(self.sequences, self.loss_mask):
            if len(s) != len(m):
                raise ValueError(f"mask length {len(m)} != sequence length {len(s)}")
            if m and m[0]:
                raise ValueError("position 0 has no context and cannot carry loss")

    def n_loss_tokens(self) -> int:
        return sum(sum(1 for v in m if v) for m in self.loss_mask)

    @classmethod
    def from_prompt_response(cls, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> "Batch":
        seqs, masks = [], []
        for prompt, response in pairs:
            if not prompt:
                raise ValueError("prompt must be non-empty")
            seqs.append(list(prompt) + list(response))
            masks.append([False] * len(prompt) + [True] * len(response))
        return cls(seqs, masks)


def masked_nll(params: ModelParams, batch: Batch, with_grad: bool = True):
    """Mean NLL over unmasked positions, and its gradient.

    Returns ``(loss, grads)``; ``grads`` is ``None`` when ``with_grad`` is
    false. With no loss-bearing positions the loss is 0 and all gradients 0.
    """
    n = batch.n_loss_tokens()
    grads = zero_grads(params) if with_grad else None
    if n == 0:
        return 0.0, grads
    total = 0.0
    for seq, mask in zip(batch.sequences, batch.loss_mask):
        if not any(mask):
            continue
        w = -np.asarray(mask, dtype=np.float64) / n
        if with_grad:
            v, g = weighted_logprob_grad(params, seq, w)
            add_grads(grads, g)
        else:
            x = np.asarray(seq)
            v = float(np.dot(w, target_logprobs(forward(params, x), x)))
        total += v
    return total, grads


def pack_samples(samples: Sequence[Sequence[int]], max_len: int,
                 masks: Sequence[Sequence[bool]] | None = None,
                 separator: int = SEPARATOR_ID) -> list[Batch]:
    """First-fit packing of samples into rows of at most ``max_len`` tokens.

    Samples keep their relative order inside a row and are joined by one
    ``separator`` token. Separators and the first token of every sample are
    never loss targets, so no loss term reaches across a sample boundary.
    """
    if masks is None:
        masks = [[False] + [True] * (len(s) - 1) for s in samples]
    rows: list[tuple[list[int], list[bool]]] = []
    for s, m in zip(samples, masks):
        if len(s) > max_len:
            raise ValueError(f"sample of length {len(s)} exceeds max_len={max_len}")
        if len(s) == 0:
            continue
        m = [False] + list(m[1:])
        for toks, msk in rows:
            if len(toks) + 1 + len(s) <= max_len:
                toks.append(separator)
                msk.append(False)
                toks.extend(s)
                msk.extend(m)
                break
        else:
            rows.append((list(s), list(m)))
    return [Batch([t], [m]) for t, m in rows]


# -- optimisation --------------------------------------------------------


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamWState, lr: float,
               trainable=None) -> tuple[ModelParams, AdamWState]:
    """One decoupled-weight-decay Adam update, in place.

    ``trainable`` is an optional predicate on parameter names; arrays it
    rejects are left untouched (no decay, no moment update).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.named_arrays():
        if trainable is not None and not trainable(name):
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    Returns the (possibly scaled) gradients and the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# -- checkpoints ---------------------------------------------------------


def dumps_checkpoint(params: ModelParams) -> bytes:
    V, d, f, L = params.vocab_size, params.d_model, params.d_ff, params.depth
    header = b"%s %d %d %d %d %d\n" % (CKPT_MAGIC, CKPT_VERSION, V, d, f, L)
    body = [struct.pack("<d", params.eps)]
    body += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in params.named_arrays()]
    return header + b"".join(body)


def loads_checkpoint(data: bytes) -> ModelParams:
    nl = data.index(b"\n")
    parts = data[:nl].split()
    if len(parts) != 6 or parts[0] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, V, d, f, L = (int(x) for x in parts[1:])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    shapes = [(V, d)] + [(d, 2 * f), (2 * f,), (f, d), (d,), (d,)] * L + [(d, V)]
    need = 8 * (1 + sum(int(np.prod(s)) for s in shapes))
    body = data[nl + 1:]
    if len(body) != need:
        raise ValueError(f"checkpoint body has {len(body)} bytes, expected {need}")
    (eps,) = struct.unpack("<d", body[:8])
    off = 8
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape))
        off += 8 * n
    blocks = [Block(*arrays[1 + 5 * i: 6 + 5 * i]) for i in range(L)]
    return ModelParams(arrays[0], blocks, arrays[-1], eps)


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(dumps_checkpoint(params))


def load_checkpoint(path) -> ModelParams:
    return loads_checkpoint(Path(path).read_bytes())
