"""Finite-difference checks of every analytic gradient in the package.

Each ``check_*`` function builds a random toy configuration from an
:class:`RngStream`, evaluates the analytic gradient, and compares it with
central differences over every parameter entry. The return value is the
relative error ``||g - g_fd|| / max(||g||, ||g_fd||)``.
"""
from __future__ import annotations

import numpy as np

from .grpo import GRPOConfig, RolloutGroup, group_advantages, total_objective, total_objective_and_grad
from .numeric import RngStream
from .oracles import central_difference, relative_error
from .pref_losses import PreferenceExample, PrefLossConfig, pref_gradients, ref_logprobs
from .toy_lm import Batch, ModelParams, init_params, masked_nll, seq_logprob

FD_STEP = 1e-5
TOLERANCE = 1e-6


def random_model(rng: RngStream, vocab_size=None, d_model=None, d_ff=None, n_layers=None) -> ModelParams:
    V = vocab_size or int(rng.integers(5, 12))
    d = d_model or int(rng.integers(3, 9))
    f = d_ff or int(rng.integers(2, 6))
    L = n_layers or int(rng.integers(1, 3))
    params = init_params(V, d, f, L, rng.spawn("init"), scale=0.5)
    for blk in params.blocks:
        blk.b1 += rng.normal(blk.b1.shape, 0.3)
        blk.b2 += rng.normal(blk.b2.shape, 0.3)
        blk.gain += rng.normal(blk.gain.shape, 0.3)
    return params


def perturbed(params: ModelParams, rng: RngStream, scale: float) -> ModelParams:
    out = params.copy()
    for _, arr in out.named_arrays():
        arr += rng.normal(arr.shape, scale)
    return out


def _tokens(rng: RngStream, V: int, lo: int, hi: int) -> list[int]:
    return [int(t) for t in rng.integers(0, V, int(rng.integers(lo, hi + 1)))]


def _compare(params: ModelParams, analytic: dict, f, corrupt: bool = False) -> float:
    arrays = [a for _, a in params.named_arrays()]
    numeric = central_difference(f, arrays, FD_STEP)
    ana = [analytic[n].copy() for n in params.names()]
    if corrupt:
        ana[0].flat[0] += 1e-3 + abs(ana[0].flat[0])
    return relative_error(ana, numeric)


def check_masked_nll(rng: RngStream, corrupt: bool = False, **dims) -> float:
    params = random_model(rng, **dims)
    V = params.vocab_size
    seqs, masks = [], []
    for _ in range(int(rng.integers(1, 4))):
        s = _tokens(rng, V, 3, 8)
        m = [False] + [bool(b) for b in rng.integers(0, 2, len(s) - 1)]
        m[-1] = True
        seqs.append(s)
        masks.append(m)
    batch = Batch(seqs, masks)
    _, g = masked_nll(params, batch)
    return _compare(params, g, lambda: masked_nll(params, batch, with_grad=False)[0], corrupt)


def random_pref_batch(rng: RngStream, V: int, n: int | None = None) -> list[PreferenceExample]:
    out = []
    for _ in range(n or int(rng.integers(1, 4))):
        prompt = _tokens(rng, V, 1, 4)
        while True:
            yw, yl = _tokens(rng, V, 1, 4), _tokens(rng, V, 1, 4)
            if yw != yl:
                break
        out.append(PreferenceExample(prompt, yw, yl))
    return out


def check_pref(method: str, rng: RngStream, corrupt: bool = False, **dims) -> float:
    params = random_model(rng, **dims)
    ref = perturbed(params, rng.spawn("ref"), 0.3)
    examples = random_pref_batch(rng, params.vocab_size)
    cfg = PrefLossConfig(beta=float(0.05 + rng.uniform()), lambda_penalty=float(2.0 * rng.uniform()),
                         gamma_margin=float(rng.uniform()))
    refs = [ref_logprobs(ref, ex) for ex in examples]
    _, g = pref_gradients(examples, params, None, method, cfg, refs=refs)
    f = lambda: pref_gradients(examples, params, None, method, cfg, refs=refs, with_grad=False)[0]
    return _compare(params, g, f, corrupt)


def random_groups(params: ModelParams, old: ModelParams, ref: ModelParams, rng: RngStream,
                  cfg: GRPOConfig, n_groups: int = 2) -> list[RolloutGroup]:
    V = params.vocab_size
    groups = []
    for _ in range(n_groups):
        prompt = _tokens(rng, V, 1, 3)
        responses = [_tokens(rng, V, 1, 3) for _ in range(cfg.group_size)]
        rewards = rng.integers(0, 3, cfg.group_size).astype(float)
        lp_old = np.array([seq_logprob(old, prompt, r) for r in responses])
        lp_ref = np.array([seq_logprob(ref, prompt, r) for r in responses])
        g = RolloutGroup(prompt, responses, rewards, lp_old, lp_ref)
        g.advantages = group_advantages(rewards, cfg.sigma_tolerance)
        groups.append(g)
    return groups


def check_grpo(rng: RngStream, corrupt: bool = False, **dims) -> float:
    params = random_model(rng, **dims)
    old = perturbed(params, rng.spawn("old"), 0.05)
    ref = perturbed(params, rng.spawn("ref"), 0.2)
    cfg = GRPOConfig(group_size=int(rng.integers(2, 5)), epsilon_clip=0.2, kl_coeff=float(0.5 * rng.uniform()))
    groups = random_groups(params, old, ref, rng, cfg)
    _, g, _ = total_objective_and_grad(params, groups, cfg)

    def f():
        for grp in groups:
            grp.lp_current = np.array([seq_logprob(params, grp.prompt, r) for r in grp.responses])
        return float(np.mean([total_objective(grp, cfg) for grp in groups]))

    return _compare(params, g, f, corrupt)


CHECKS = {
    "masked_nll": check_masked_nll,
    "dpo": lambda rng, corrupt=False, **kw: check_pref("dpo", rng, corrupt, **kw),
    "dpop": lambda rng, corrupt=False, **kw: check_pref("dpop", rng, corrupt, **kw),
    "orpo": lambda rng, corrupt=False, **kw: check_pref("orpo", rng, corrupt, **kw),
    "simpo": lambda rng, corrupt=False, **kw: check_pref("simpo", rng, corrupt, **kw),
    "grpo_total": check_grpo,
}
