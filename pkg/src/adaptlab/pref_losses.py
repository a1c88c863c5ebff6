"""Preference-optimisation losses (DPO, DPO-P, ORPO, SimPO) and their gradients.

The scalar losses take sequence log-probabilities. Each one has a ``*_grad``
companion giving the partial derivatives with respect to the policy's
log-probabilities; :func:`pref_gradients` chains those through the toy LM.

Two of them differ from the widely used variants of the same names:

* DPO-P subtracts ``lambda * max(0, ref_w - lp_w)`` outside the ``beta`` factor.
* ORPO adds ``+lambda * (lp_w - lp_l)`` (a probability ratio, not an odds
  ratio) to the NLL.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numeric import log_sigmoid, sigmoid
from .toy_lm import ModelParams, add_grads, backward, forward_cached, seq_logprob, target_logprobs, zero_grads

METHODS = ("dpo", "dpop", "orpo", "simpo")


@dataclass(frozen=True)
class PreferenceExample:
    prompt: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(self.prompt))
        object.__setattr__(self, "chosen", tuple(self.chosen))
        object.__setattr__(self, "rejected", tuple(self.rejected))
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not self.chosen or not self.rejected:
            raise ValueError("chosen and rejected responses must be non-empty")
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected responses must differ")


@dataclass(frozen=True)
class PrefLossConfig:
    beta: float = 0.1
    lambda_penalty: float = 2.5
    gamma_margin: float = 0.5

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.lambda_penalty < 0 or self.gamma_margin < 0:
            raise ValueError("lambda_penalty and gamma_margin must be >= 0")


def _dpo_margin(lp_w, lp_l, ref_w, ref_l, beta):
    return beta * ((lp_w - ref_w) - (lp_l - ref_l))


def dpo_loss(lp_w: float, lp_l: float, ref_w: float, ref_l: float, cfg: PrefLossConfig) -> float:
    return -log_sigmoid(_dpo_margin(lp_w, lp_l, ref_w, ref_l, cfg.beta))


def dpo_grad(lp_w, lp_l, ref_w, ref_l, cfg: PrefLossConfig) -> tuple[float, float]:
    """(dL/dlp_w, dL/dlp_l)."""
    z = _dpo_margin(lp_w, lp_l, ref_w, ref_l, cfg.beta)
    dz = sigmoid(z) - 1.0
    return cfg.beta * dz, -cfg.beta * dz


def _dpop_arg(lp_w, lp_l, ref_w, ref_l, cfg):
    return _dpo_margin(lp_w, lp_l, ref_w, ref_l, cfg.beta) - cfg.lambda_penalty * max(0.0, ref_w - lp_w)


def dpop_loss(lp_w: float, lp_l: float, ref_w: float, ref_l: float, cfg: PrefLossConfig) -> float:
    return -log_sigmoid(_dpop_arg(lp_w, lp_l, ref_w, ref_l, cfg))


def dpop_grad(lp_w, lp_l, ref_w, ref_l, cfg: PrefLossConfig) -> tuple[float, float]:
    z = _dpop_arg(lp_w, lp_l, ref_w, ref_l, cfg)
    dz = sigmoid(z) - 1.0
    # subgradient of max(0, .) at the kink is taken as 0
    active = 1.0 if ref_w - lp_w > 0 else 0.0
    return (cfg.beta + cfg.lambda_penalty * active) * dz, -cfg.beta * dz


def orpo_loss(nll: float, lp_w: float, lp_l: float, cfg: PrefLossConfig) -> float:
    return nll + cfg.lambda_penalty * (lp_w - lp_l)


def orpo_grad(cfg: PrefLossConfig) -> tuple[float, float, float]:
    """(dL/dnll, dL/dlp_w, dL/dlp_l); the loss is linear in all three."""
    return 1.0, cfg.lambda_penalty, -cfg.lambda_penalty


def _simpo_arg(lp_w, lp_l, len_w, len_l, cfg):
    if len_w < 1 or len_l < 1:
        raise ValueError("response lengths must be >= 1")
    return cfg.beta * (lp_w / len_w - lp_l / len_l - cfg.gamma_margin)


def simpo_loss(lp_w: float, lp_l: float, len_w: int, len_l: int, cfg: PrefLossConfig) -> float:
    return -log_sigmoid(_simpo_arg(lp_w, lp_l, len_w, len_l, cfg))


def simpo_grad(lp_w, lp_l, len_w, len_l, cfg: PrefLossConfig) -> tuple[float, float]:
    dz = sigmoid(_simpo_arg(lp_w, lp_l, len_w, len_l, cfg)) - 1.0
    return cfg.beta * dz / len_w, -cfg.beta * dz / len_l


def _response_logprob(params: ModelParams, prompt, response):
    tokens = np.asarray(prompt + response)
    logp, cache = forward_cached(params, tokens)
    lp = float(target_logprobs(logp, tokens)[len(prompt):].sum())
    return lp, cache


def _response_backward(params, cache, n_prompt: int, coef: float):
    x = cache.tokens
    dlogp = np.zeros_like(cache.logp)
    pos = np.arange(n_prompt, x.size)
    dlogp[pos - 1, x[pos]] = coef
    return backward(params, cache, dlogp)


def ref_logprobs(ref_params: ModelParams, ex: PreferenceExample) -> tuple[float, float]:
    return seq_logprob(ref_params, ex.prompt, ex.chosen), seq_logprob(ref_params, ex.prompt, ex.rejected)


def example_loss(params, ex: PreferenceExample, method: str, cfg: PrefLossConfig, refs=None,
                 with_grad: bool = True):
    """Loss of a single example and (optionally) its parameter gradient."""
    if method not in METHODS:
        raise ValueError(f"unknown preference method {method!r}; expected one of {METHODS}")
    p, yw, yl = list(ex.prompt), list(ex.chosen), list(ex.rejected)
    lp_w, cache_w = _response_logprob(params, p, yw)
    lp_l, cache_l = _response_logprob(params, p, yl)
    if method in ("dpo", "dpop"):
        ref_w, ref_l = refs
        fn, gfn = (dpo_loss, dpo_grad) if method == "dpo" else (dpop_loss, dpop_grad)
        loss = fn(lp_w, lp_l, ref_w, ref_l, cfg)
        cw, cl = gfn(lp_w, lp_l, ref_w, ref_l, cfg) if with_grad else (0.0, 0.0)
    elif method == "orpo":
        # NLL term: mean token NLL of the chosen response
        nll = -lp_w / len(yw)
        loss = orpo_loss(nll, lp_w, lp_l, cfg)
        dnll, cw, cl = orpo_grad(cfg)
        cw += dnll * (-1.0 / len(yw))
    else:
        loss = simpo_loss(lp_w, lp_l, len(yw), len(yl), cfg)
        cw, cl = simpo_grad(lp_w, lp_l, len(yw), len(yl), cfg) if with_grad else (0.0, 0.0)
    if not with_grad:
        return loss, None
    g = _response_backward(params, cache_w, len(p), cw)
    add_grads(g, _response_backward(params, cache_l, len(p), cl))
    return loss, g


def pref_loss(examples: Sequence[PreferenceExample], params: ModelParams, ref_params: ModelParams | None,
              method: str, cfg: PrefLossConfig, refs=None) -> float:
    return pref_gradients(examples, params, ref_params, method, cfg, refs=refs, with_grad=False)[0]


def pref_gradients(examples: Sequence[PreferenceExample], params: ModelParams, ref_params: ModelParams | None,
                   method: str, cfg: PrefLossConfig, refs=None, with_grad: bool = True):
    """Batch-mean preference loss and its exact gradient.

    Reference log-probabilities are constants; pass them precomputed via
    ``refs`` (one ``(ref_w, ref_l)`` per example) or give ``ref_params``.
    Returns ``(loss, grads)``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown preference method {method!r}; expected one of {METHODS}")
    if not examples:
        raise ValueError("empty preference batch")
    needs_ref = method in ("dpo", "dpop")
    if needs_ref and refs is None:
        if ref_params is None:
            raise ValueError(f"{method} needs a reference model or precomputed reference log-probs")
        refs = [ref_logprobs(ref_params, ex) for ex in examples]
    n = len(examples)
    total = 0.0
    grads = zero_grads(params) if with_grad else None
    for i, ex in enumerate(examples):
        loss, g = example_loss(params, ex, method, cfg, refs[i] if needs_ref else None, with_grad)
        total += loss
        if with_grad:
            add_grads(grads, g, 1.0 / n)
    return total / n, grads
