import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptlab.gradcheck import random_model
from adaptlab.numeric import RngStream, log_softmax, rmsnorm, swiglu
from adaptlab.toy_lm import Block, forward
from adaptlab.upscale import (
    LayerPlan,
    adaptation_freeze_mask,
    all_groups,
    apply_plan,
    dus_plan,
    outermost_duplicate,
    outermost_positions,
    unfrozen_mask,
)


def block_apply(params, blk, h):
    f = params.d_ff
    means = np.cumsum(h, axis=0) / np.arange(1, len(h) + 1)[:, None]
    out = np.empty_like(h)
    for t in range(len(h)):
        z = rmsnorm(means[t], blk.gain, params.eps) @ blk.w1 + blk.b1
        out[t] = h[t] + swiglu(z[:f], z[f:]) @ blk.w2 + blk.b2
    return out


def test_plan_examples():
    assert dus_plan(2, 1).source_indices == (0, 1)
    assert dus_plan(3, 0).source_indices == (0, 1, 2, 0, 1, 2)
    assert dus_plan(4, 1).source_indices == (0, 1, 2, 1, 2, 3)
    assert outermost_duplicate(LayerPlan((0, 1), 2), 1).source_indices == (0, 0, 1, 1)
    with pytest.raises(ValueError):
        dus_plan(2, 2)
    with pytest.raises(ValueError):
        dus_plan(3, -1)


def test_reference_depths():
    # 32 layers with 8 removed from each copy gives 48; outermost duplication adds 2k
    assert dus_plan(32, 8).s == 48
    assert outermost_duplicate(dus_plan(32, 8), 2).s == 52


@given(st.integers(1, 40), st.data())
def test_dus_length_and_contents(n, data):
    m = data.draw(st.integers(0, n - 1))
    p = dus_plan(n, m)
    assert p.s == 2 * (n - m)
    assert p.source_indices == tuple(range(n - m)) + tuple(range(m, n))
    if 2 * m <= n:
        assert set(p.source_indices) == set(range(n))
    assert p.source_indices[0] == 0 and p.source_indices[-1] == n - 1


@given(st.integers(1, 20), st.data())
def test_outermost_duplicate_law(n, data):
    m = data.draw(st.integers(0, n - 1))
    k = data.draw(st.integers(0, 4))
    base = dus_plan(n, m)
    p = outermost_duplicate(base, k)
    assert p.s == base.s + 2 * k
    assert p.source_indices[:k] == (0,) * k
    assert p.source_indices[p.s - k:] == (n - 1,) * k
    assert p.source_indices[k:p.s - k] == base.source_indices
    assert len(outermost_positions(p)) == min(2 * k, p.s)


def test_k_zero_is_identity():
    p = dus_plan(5, 2)
    assert outermost_duplicate(p, 0) == p
    assert outermost_positions(p) == set()
    with pytest.raises(ValueError):
        outermost_duplicate(p, -1)


def test_plan_roundtrip_and_validation():
    p = outermost_duplicate(dus_plan(3, 1), 1)
    assert p.dumps() == "3 1 1: 0,0,1,1,2,2"
    assert LayerPlan.loads(p.dumps()) == p
    with pytest.raises(ValueError, match="outside"):
        LayerPlan((0, 3), 3)


def test_apply_plan_deep_copies():
    model = random_model(RngStream(5), 7, 4, 3, 2)
    big = apply_plan(model, LayerPlan((0, 1, 0), 2))
    assert big.depth == 3
    assert np.array_equal(big.blocks[0].w1, big.blocks[2].w1)
    big.blocks[0].w1[0, 0] += 1.0
    assert big.blocks[2].w1[0, 0] != big.blocks[0].w1[0, 0]
    assert model.blocks[0].w1[0, 0] != big.blocks[0].w1[0, 0]
    big.embed[0, 0] += 1.0
    assert model.embed[0, 0] != big.embed[0, 0]
    with pytest.raises(ValueError):
        apply_plan(model, LayerPlan((0,), 3))


def test_parameter_count_formula():
    model = random_model(RngStream(6), 9, 4, 3, 3)
    per_layer = sum(getattr(model.blocks[0], k).size for k in Block.FIELDS)
    base = model.n_params() - 3 * per_layer
    p = outermost_duplicate(dus_plan(3, 1), 2)
    assert apply_plan(model, p).n_params() == base + p.s * per_layer


def test_repeated_layer_composes():
    model = random_model(RngStream(8), 7, 4, 3, 1)
    toks = [1, 2, 3, 4, 5]
    h = model.embed[toks]
    h = block_apply(model, model.blocks[0], block_apply(model, model.blocks[0], h))
    want = log_softmax(h @ model.head, axis=-1)
    got = forward(apply_plan(model, LayerPlan((0, 0), 1)), toks)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_identity_plan_preserves_function():
    model = random_model(RngStream(9), 7, 4, 3, 3)
    same = apply_plan(model, LayerPlan((0, 1, 2), 3))
    assert same.checksum() == model.checksum()


def test_freeze_masks():
    p = outermost_duplicate(dus_plan(3, 1), 1)
    mask = adaptation_freeze_mask(p, outermost_positions(p))
    assert mask.trainable() == ["embed", "layer.0", "layer.5"]
    assert "head" in mask.frozen()
    assert mask("blocks.0.w1") and mask("embed") and not mask("head") and not mask("blocks.2.b2")
    assert unfrozen_mask(6).frozen() == []
    assert all_groups(2) == ["embed", "layer.0", "layer.1", "head"]
    with pytest.raises(ValueError):
        adaptation_freeze_mask(p, {6})
