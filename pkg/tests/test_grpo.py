import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptlab.gradcheck import check_grpo, random_model
from adaptlab.grpo import (
    GRPOConfig,
    RolloutGroup,
    answer_reward,
    arith_answer,
    arith_decode,
    arith_encode,
    arith_prompt,
    arithmetic_reward,
    clipped_term,
    group_advantages,
    group_stats,
    grpo_objective,
    grpo_step,
    kl_penalty_k3,
    rollout,
    total_objective_and_grad,
)
from adaptlab.numeric import RngStream
from adaptlab.toy_lm import add_grads, seq_logprob_grad, zero_grads

rewards = st.lists(st.floats(-10, 10), min_size=2, max_size=12)


def make_group(lp_old, lp_current, adv, lp_ref=None):
    G = len(lp_old)
    return RolloutGroup([1], [[2]] * G, np.zeros(G), np.array(lp_old, float),
                        np.array(lp_ref if lp_ref is not None else lp_old, float),
                        np.array(lp_current, float), np.array(adv, float))


def test_advantage_examples():
    assert group_stats([1, 0, 1, 0]) == group_stats([0.0, 1.0, 0.0, 1.0])
    assert (group_stats([1, 0, 1, 0]).mu, group_stats([1, 0, 1, 0]).sigma) == (0.5, 0.5)
    assert group_advantages([1, 0, 1, 0]).tolist() == [1.0, -1.0, 1.0, -1.0]
    assert group_advantages([3.0, 3.0, 3.0]).tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        group_advantages([1.0])


@given(rewards)
def test_advantages_standardised(r):
    a = group_advantages(r)
    assert abs(a.mean()) <= 1e-9
    if group_stats(r).sigma >= 1e-8:
        assert abs(a.std() - 1.0) <= 1e-9
    else:
        assert np.all(a == 0)


def test_clipped_term_examples():
    assert clipped_term(1.0, 0.37, 0.2) == 0.37
    assert clipped_term(1.3, 1.0, 0.2) == 1.2
    assert clipped_term(0.5, -1.0, 0.2) == -0.8
    with pytest.raises(ValueError):
        clipped_term(0.0, 1.0, 0.2)


@given(st.floats(1e-3, 10), st.floats(-5, 5), st.floats(0.01, 0.99))
def test_clipped_term_min_law(r, a, eps):
    assert clipped_term(r, a, eps) <= r * a


def test_objective_example():
    g = make_group([0.0, 0.0], [math.log(1.3), math.log(0.5)], [1.0, -1.0])
    assert grpo_objective(g, GRPOConfig(group_size=2, epsilon_clip=0.2)) == pytest.approx(0.2, abs=1e-12)


@given(st.lists(st.floats(-20, 0), min_size=2, max_size=8), st.integers(0, 2**32))
def test_objective_zero_on_policy(lp, seed):
    adv = group_advantages(RngStream(seed).normal(len(lp)))
    assert grpo_objective(make_group(lp, lp, adv), GRPOConfig()) == 0.0


def test_objective_rejects_unbalanced_advantages():
    with pytest.raises(ValueError, match="sum to zero"):
        grpo_objective(make_group([0.0, 0.0], [0.0, 0.0], [1.0, 1.0]), GRPOConfig())


@given(st.lists(st.floats(-2, 2), min_size=2, max_size=6), st.integers(0, 2**32))
def test_clipping_a_ratio_never_increases_objective(shift, seed):
    cfg = GRPOConfig(epsilon_clip=0.2)
    adv = group_advantages(RngStream(seed).normal(len(shift)))
    old = np.zeros(len(shift))
    g = make_group(old, shift, adv)
    clipped = make_group(old, np.log(np.clip(np.exp(shift), 0.8, 1.2)), adv)
    assert grpo_objective(clipped, cfg) >= grpo_objective(g, cfg) - 1e-12


def test_kl_examples():
    assert kl_penalty_k3([-1.0, -2.0], [-1.0, -2.0]) == 0.0
    assert kl_penalty_k3([-2.0], [-1.0]) == pytest.approx(0.7182818284590451, abs=1e-15)


@given(st.lists(st.tuples(st.floats(-30, 0), st.floats(-30, 0)), min_size=1, max_size=8))
def test_kl_nonnegative(pairs):
    cur, ref = zip(*pairs)
    assert kl_penalty_k3(cur, ref) >= 0.0


def test_arithmetic_reward():
    assert arithmetic_reward("2+3", "5") == 1.0
    assert arithmetic_reward("2+3", "6") == 0.0
    assert arithmetic_reward(arith_prompt(7, 8), arith_answer(7, 8)) == 1.0
    assert arithmetic_reward(arith_prompt(7, 8), arith_encode("15") + [0, 3]) == 1.0
    assert arithmetic_reward(arith_prompt(7, 8), arith_encode("1")) == 0.0
    with pytest.raises(ValueError, match="vocabulary"):
        arithmetic_reward("2*3", "6")
    with pytest.raises(ValueError, match="malformed"):
        arithmetic_reward("2+", "6")
    with pytest.raises(ValueError):
        arithmetic_reward("12+3", "15")
    assert arith_decode(arith_answer(4, 5)) == "9<eos>"
    r = answer_reward(arith_answer(4, 5))
    assert r(arith_prompt(4, 5), arith_encode("9")) == 1.0 and r([1], arith_encode("8")) == 0.0


def test_policy_gradient_oracle():
    model = random_model(RngStream(21), 13, 6, 4, 2)
    cfg = GRPOConfig(group_size=4, kl_coeff=0.0)
    prompt = arith_prompt(2, 3)
    g = rollout(model, model, prompt, arithmetic_reward, cfg, RngStream(22))
    g.rewards = np.array([1.0, 0.0, 2.0, 0.5])
    g.advantages = group_advantages(g.rewards)
    _, grads, _ = total_objective_and_grad(model, [g], cfg)
    want = zero_grads(model)
    for a, resp in zip(g.advantages, g.responses):
        add_grads(want, seq_logprob_grad(model, prompt, resp, coef=a / 4)[1])
    for k in want:
        np.testing.assert_allclose(grads[k], want[k], rtol=1e-12, atol=1e-15)


def test_full_gradient_fd():
    assert check_grpo(RngStream(23), vocab_size=9, d_model=6, n_layers=2) < 1e-6


def test_equal_rewards_without_kl_leave_params_unchanged():
    model = random_model(RngStream(24), 13, 6, 4, 1)
    before = model.checksum()
    cfg = GRPOConfig(group_size=4, kl_coeff=0.0)
    grpo_step(model, model.copy(), model.copy(), [arith_prompt(1, 1)], lambda p, r: 1.0, cfg, RngStream(25), lr=0.1)
    assert model.checksum() == before


def test_step_deterministic():
    base = random_model(RngStream(26), 13, 6, 4, 1)
    cfg = GRPOConfig(group_size=4, kl_coeff=0.01, max_new_tokens=2)
    prompts = [arith_prompt(1, 2), arith_prompt(3, 4)]
    out = []
    for _ in range(2):
        p = base.copy()
        _, m = grpo_step(p, base, base.copy(), prompts, [arithmetic_reward] * 2, cfg, RngStream(27), lr=1e-2)
        out.append((p.checksum(), m.mean_reward, m.objective, m.kl, m.clip_fraction))
    assert out[0] == out[1]


def test_config_validation():
    for bad in ({"group_size": 1}, {"epsilon_clip": 1.0}, {"kl_coeff": -1.0}, {"updates_per_batch": 0}):
        with pytest.raises(ValueError):
            GRPOConfig(**bad)
    with pytest.raises(ValueError):
        RolloutGroup([1], [[2], [3]], np.array([1.0]), np.zeros(2), np.zeros(2))
