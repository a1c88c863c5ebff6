"""Group Relative Policy Optimization on the toy LM.

For each prompt a group of ``G`` responses is sampled from the old policy and
scored. Advantages are the rewards standardised within the group (population
standard deviation), the policy objective is the clipped-ratio surrogate, and
a k3 KL estimate against a frozen reference policy is subtracted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numeric import RngStream
from .toy_lm import (
    SEPARATOR_ID,
    AdamWState,
    ModelParams,
    adamw_step,
    add_grads,
    backward,
    clip_grad_norm,
    forward_cached,
    sample,
    seq_logprob,
    target_logprobs,
    zero_grads,
)

# -- arithmetic toy task -------------------------------------------------

ARITH_EOS = SEPARATOR_ID
ARITH_DIGIT0 = 1
ARITH_PLUS = 11
ARITH_EQ = 12
ARITH_VOCAB = 13
_ARITH_CHARS = {str(i): ARITH_DIGIT0 + i for i in range(10)} | {"+": ARITH_PLUS, "=": ARITH_EQ}


def arith_encode(text: str) -> list[int]:
    try:
        return [_ARITH_CHARS[c] for c in text]
    except KeyError as exc:
        raise ValueError(f"character {exc.args[0]!r} not in the arithmetic vocabulary") from None


def arith_decode(tokens: Sequence[int]) -> str:
    inv = {v: k for k, v in _ARITH_CHARS.items()}
    return "".join(inv.get(t, "<eos>" if t == ARITH_EOS else "?") for t in tokens)


def arith_prompt(a: int, b: int) -> list[int]:
    return arith_encode(f"{a}+{b}=")


def arith_answer(a: int, b: int) -> list[int]:
    return arith_encode(str(a + b)) + [ARITH_EOS]


def _parse_prompt(prompt) -> tuple[int, int]:
    toks = arith_encode(prompt) if isinstance(prompt, str) else list(prompt)
    if toks and toks[-1] == ARITH_EQ:
        toks = toks[:-1]
    digit = range(ARITH_DIGIT0, ARITH_DIGIT0 + 10)
    if len(toks) != 3 or toks[1] != ARITH_PLUS or toks[0] not in digit or toks[2] not in digit:
        raise ValueError(f"malformed addition prompt: {arith_decode(toks)!r}")
    return toks[0] - ARITH_DIGIT0, toks[2] - ARITH_DIGIT0


def arithmetic_reward(prompt, response) -> float:
    """1.0 if the response spells the sum of the prompt's two digits, else 0.0.

    Token input stops at the first end-of-sequence token; string input is
    compared directly.
    """
    a, b = _parse_prompt(prompt)
    if isinstance(response, str):
        return 1.0 if response == str(a + b) else 0.0
    resp = list(response)
    if ARITH_EOS in resp:
        resp = resp[: resp.index(ARITH_EOS)]
    return 1.0 if resp == arith_encode(str(a + b)) else 0.0


def answer_reward(answer: Sequence[int]) -> Callable:
    """Exact-match reward against a stored answer (task-file records)."""
    want = list(answer)
    if want and want[-1] == ARITH_EOS:
        want = want[:-1]

    def reward(prompt, response) -> float:
        resp = list(response)
        if ARITH_EOS in resp:
            resp = resp[: resp.index(ARITH_EOS)]
        return 1.0 if resp == want else 0.0

    return reward


# -- group statistics and the surrogate ----------------------------------


@dataclass(frozen=True)
class GRPOConfig:
    group_size: int = 8
    epsilon_clip: float = 0.2
    kl_coeff: float = 0.001
    lr: float = 1e-6
    sigma_tolerance: float = 1e-8
    max_new_tokens: int = 3
    updates_per_batch: int = 1
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.epsilon_clip < 1:
            raise ValueError("epsilon_clip must lie in (0, 1)")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff must be >= 0")
        if self.updates_per_batch < 1:
            raise ValueError("updates_per_batch must be >= 1")


@dataclass(frozen=True)
class GroupStats:
    mu: float
    sigma: float


def group_stats(rewards: Sequence[float]) -> GroupStats:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least 2 rewards")
    mu = float(r.mean())
    return GroupStats(mu, float(np.sqrt(np.mean((r - mu) ** 2))))


def group_advantages(rewards: Sequence[float], tol: float = 1e-8) -> np.ndarray:
    """(R_i - mu) / sigma with population sigma; all zeros when sigma < tol."""
    st = group_stats(rewards)
    r = np.asarray(rewards, dtype=np.float64)
    if st.sigma < tol:
        return np.zeros_like(r)
    return (r - st.mu) / st.sigma


def clipped_term(ratio: float, advantage: float, eps: float) -> float:
    if ratio <= 0:
        raise ValueError(f"probability ratio must be positive, got {ratio}")
    clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
    return min(ratio * advantage, clipped * advantage)


def _clip_active(ratio: float, advantage: float, eps: float) -> bool:
    clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
    return clipped * advantage < ratio * advantage


def clipped_term_grad(ratio: float, advantage: float, eps: float) -> float:
    """d clipped_term / d log(ratio): ``ratio * A`` unless the clipped branch wins."""
    return 0.0 if _clip_active(ratio, advantage, eps) else ratio * advantage


@dataclass
class RolloutGroup:
    prompt: list[int]
    responses: list[list[int]]
    rewards: np.ndarray
    lp_old: np.ndarray
    lp_ref: np.ndarray
    lp_current: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __post_init__(self):
        G = len(self.responses)
        for name in ("rewards", "lp_old", "lp_ref"):
            if len(getattr(self, name)) != G:
                raise ValueError(f"{name} must have one entry per response")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        if self.lp_current is None:
            self.lp_current = np.array(self.lp_old, dtype=np.float64)

    def ratios(self) -> np.ndarray:
        return np.exp(np.asarray(self.lp_current) - np.asarray(self.lp_old))


def grpo_objective(group: RolloutGroup, cfg: GRPOConfig) -> float:
    """Group mean of ``min(r A, clip(r) A)``.

    Group-normalised advantages sum to zero, so subtracting ``A`` from every
    term leaves the mean unchanged. Evaluating ``min((r-1) A, (clip(r)-1) A)``
    instead makes the objective exactly 0 at ``r = 1`` rather than the
    rounding residue of ``sum(A)``.
    """
    adv = group.advantages if group.advantages is not None else group_advantages(group.rewards, cfg.sigma_tolerance)
    adv = np.asarray(adv, dtype=np.float64)
    if abs(adv.sum()) > 1e-9 * max(1.0, float(np.abs(adv).sum())):
        raise ValueError("advantages must sum to zero within a group")
    eps = cfg.epsilon_clip
    excess = np.expm1(np.asarray(group.lp_current) - np.asarray(group.lp_old))
    return float(np.mean(np.minimum(excess * adv, np.clip(excess, -eps, eps) * adv)))


def kl_penalty_k3(lp_current, lp_ref) -> float:
    """Group mean of exp(d) - d - 1 with d = lp_ref - lp_current (always >= 0)."""
    d = np.asarray(lp_ref, dtype=np.float64) - np.asarray(lp_current, dtype=np.float64)
    return float(np.mean(np.expm1(d) - d))


def total_objective(group: RolloutGroup, cfg: GRPOConfig) -> float:
    return grpo_objective(group, cfg) - cfg.kl_coeff * kl_penalty_k3(group.lp_current, group.lp_ref)


# -- rollouts and gradient -------------------------------------------------


def rollout(old_params: ModelParams, ref_params: ModelParams, prompt: Sequence[int], reward_fn: Callable,
            cfg: GRPOConfig, rng: RngStream) -> RolloutGroup:
    responses = [sample(old_params, prompt, cfg.max_new_tokens, rng) for _ in range(cfg.group_size)]
    rewards = np.array([float(reward_fn(list(prompt), r)) for r in responses])
    lp_old = np.array([seq_logprob(old_params, prompt, r) for r in responses])
    lp_ref = np.array([seq_logprob(ref_params, prompt, r) for r in responses])
    g = RolloutGroup(list(prompt), responses, rewards, lp_old, lp_ref)
    g.advantages = group_advantages(rewards, cfg.sigma_tolerance)
    return g


def total_objective_and_grad(params: ModelParams, groups: Sequence[RolloutGroup], cfg: GRPOConfig):
    """Mean over groups of ``L - beta*KL`` at ``params``, and its gradient.

    Responses, old/ref log-probs and advantages are held fixed. Updates each
    group's ``lp_current`` in place. Returns ``(value, grads, info)``.
    """
    grads = zero_grads(params)
    value = obj_sum = kl_sum = 0.0
    n_clipped = n_resp = 0
    for g in groups:
        G = len(g.responses)
        adv = g.advantages if g.advantages is not None else group_advantages(g.rewards, cfg.sigma_tolerance)
        caches, lps = [], []
        for resp in g.responses:
            tokens = np.asarray(list(g.prompt) + list(resp))
            logp, cache = forward_cached(params, tokens)
            lps.append(float(target_logprobs(logp, tokens)[len(g.prompt):].sum()))
            caches.append(cache)
        g.lp_current = np.array(lps)
        obj = grpo_objective(g, cfg)
        kl = kl_penalty_k3(g.lp_current, g.lp_ref)
        obj_sum += obj
        kl_sum += kl
        value += (obj - cfg.kl_coeff * kl) / len(groups)
        ratios = g.ratios()
        for i, cache in enumerate(caches):
            clipped = _clip_active(ratios[i], adv[i], cfg.epsilon_clip)
            n_clipped += int(clipped)
            n_resp += 1
            d = g.lp_ref[i] - g.lp_current[i]
            coef = clipped_term_grad(ratios[i], adv[i], cfg.epsilon_clip) - cfg.kl_coeff * (-math.expm1(d))
            coef /= G * len(groups)
            if coef == 0.0:
                continue
            x = cache.tokens
            dlogp = np.zeros_like(cache.logp)
            pos = np.arange(len(g.prompt), x.size)
            dlogp[pos - 1, x[pos]] = coef
            add_grads(grads, backward(params, cache, dlogp))
    info = {
        "objective": obj_sum / len(groups),
        "kl": kl_sum / len(groups),
        "clip_fraction": n_clipped / max(n_resp, 1),
    }
    return value, grads, info


@dataclass
class StepMetrics:
    mean_reward: float
    objective: float
    kl: float
    clip_fraction: float
    lr: float
    extra: dict = field(default_factory=dict)


def grpo_step(params: ModelParams, ref_params: ModelParams, old_params: ModelParams,
              prompts: Sequence[Sequence[int]], reward_fn, cfg: GRPOConfig, rng: RngStream,
              opt_state: AdamWState | None = None, lr: float | None = None,
              trainable=None) -> tuple[ModelParams, StepMetrics]:
    """Sample, score, and take ``cfg.updates_per_batch`` AdamW steps on ``-L_total``.

    ``reward_fn`` is either one callable for every prompt or a sequence of
    callables aligned with ``prompts``. Each prompt draws from its own named
    sub-stream of ``rng``, so rollouts do not depend on evaluation order.
    """
    lr = cfg.lr if lr is None else lr
    opt_state = opt_state if opt_state is not None else AdamWState(weight_decay=0.0)
    fns = list(reward_fn) if isinstance(reward_fn, (list, tuple)) else [reward_fn] * len(prompts)
    groups = [
        rollout(old_params, ref_params, p, fn, cfg, rng.spawn(f"prompt/{j}"))
        for j, (p, fn) in enumerate(zip(prompts, fns))
    ]
    objs, kls, clips = [], [], []
    for _ in range(cfg.updates_per_batch):
        _, grads, info = total_objective_and_grad(params, groups, cfg)
        neg = {k: -v for k, v in grads.items()}
        if cfg.max_grad_norm and cfg.max_grad_norm > 0:
            neg, _ = clip_grad_norm(neg, cfg.max_grad_norm)
        adamw_step(params, neg, opt_state, lr, trainable)
        objs.append(info["objective"])
        kls.append(info["kl"])
        clips.append(info["clip_fraction"])
    mean_reward = float(np.mean([g.rewards.mean() for g in groups]))
    return params, StepMetrics(mean_reward, float(np.mean(objs)), float(np.mean(kls)), float(np.mean(clips)), lr)
