"""Self-check suite behind ``adaptlab verify``.

Every check is a zero-argument-ish function returning ``(ok, detail)``; the
registry order is the report order and each name appears once.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .embed_transfer import AuxEmbedding, EmbeddingMatrix, VocabAlignment, init_focus, init_fvt, init_linear
from .gradcheck import CHECKS as GRAD_CHECKS
from .gradcheck import TOLERANCE, random_model
from .grpo import GRPOConfig, RolloutGroup, group_advantages, grpo_objective, kl_penalty_k3
from .merge import linear_merge
from .numeric import RngStream, rmsnorm, rope_rotate, softmax, sparsemax
from .oracles import simplex_projection_bruteforce_batch
from .pref_losses import PrefLossConfig, dpo_loss, dpop_loss, orpo_loss, simpo_loss
from .schedules import ALRConfig, alr
from .tokenizer import EfficiencyReport, consistent_counts, train_bpe
from .toy_lm import AdamWState, Batch, adamw_step, masked_nll
from .upscale import adaptation_freeze_mask, apply_plan, dus_plan, outermost_duplicate, outermost_positions

GRID = (-1.0, -0.5, 0.0, 0.5, 1.0, 2.0)


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def sparsemax_grid(max_len: int = 6) -> float:
    worst = 0.0
    for n in range(1, max_len + 1):
        Z = np.array(list(itertools.product(GRID, repeat=n)))
        worst = max(worst, float(np.max(np.abs(sparsemax(Z, axis=1) - simplex_projection_bruteforce_batch(Z)))))
    return worst


def _softmax_shift():
    rng = RngStream(1).spawn("softmax")
    z = rng.normal((200, 7), 5.0)
    err = float(np.max(np.abs(softmax(z) - softmax(z + 123.25))))
    return err <= 1e-12, f"max shift error {err:.2e}"


def _sparsemax():
    err = sparsemax_grid()
    return err <= 1e-12, f"max deviation from brute-force projection {err:.2e}"


def _rope_norm():
    rng = RngStream(2).spawn("rope")
    worst = 0.0
    for _ in range(500):
        pair = rng.normal(2)
        out = rope_rotate(pair, int(rng.integers(0, 4096)), 1e6, int(rng.integers(0, 8)), 16)
        worst = max(worst, abs(np.linalg.norm(out) - np.linalg.norm(pair)))
    return worst <= 1e-12, f"max norm change {worst:.2e}"


def _rmsnorm():
    x = RngStream(3).spawn("rms").normal((100, 9), 3.0)
    y = rmsnorm(x, np.ones(9), eps=0.0)
    err = float(np.max(np.abs(np.sqrt(np.mean(y * y, axis=1)) - 1.0)))
    return err <= 1e-9, f"max |rms - 1| {err:.2e}"


def _tokenizer_roundtrip():
    tok = train_bpe(["zażółć gęślą jaźń 123 abab abab", "the quick brown fox"], 290, isolate_digits=True)
    rng = RngStream(4).spawn("strings")
    alphabet = "ab ząę\n\t1.😀́" + "".join(chr(int(c)) for c in rng.integers(32, 0x3000, 40))
    bad = 0
    for _ in range(500):
        s = "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), int(rng.integers(0, 20))))
        bad += tok.decode(tok.encode(s)) != s
    return bad == 0, f"{bad} round-trip failures in 500 strings"


def _efficiency_identities():
    rep = EfficiencyReport(token_count=3, char_count=5, word_count=2)
    ok = rep.cpt == Fraction(5, 3) and rep.tpw == Fraction(3, 2)
    ok &= rep.cpt * rep.token_count == rep.char_count and rep.tpw * rep.word_count == rep.token_count
    return ok, f"cpt={rep.cpt} tpw={rep.tpw}"


def _reported_counts():
    chars, _ = consistent_counts(375, "4.78", "1.62")
    implied = Fraction(375) * Fraction("4.78")
    ok = len(chars) > 0 and all(abs(c - implied) <= Fraction(5, 1000) * 375 for c in chars)
    return ok, f"char counts {chars.start}..{chars.stop - 1} for implied {float(implied)}"


def _dus():
    p = dus_plan(36, 8)
    q = outermost_duplicate(p, 2)
    return p.s == 56 and q.s == 60, f"dus_plan(36, 8).s={p.s}, outermost_duplicate(., 2).s={q.s}"


def _alr():
    a = alr(ALRConfig(7e-6, 512), 512)
    b = alr(ALRConfig(7e-6, 512), 2048)
    return a == 7e-6 and b == 1.4e-5, f"T=BS -> {a!r}, T=4BS -> {b!r}"


def _loss_closed_forms():
    cfg = PrefLossConfig()
    rng = RngStream(5).spawn("losses")
    problems = []
    if abs(dpo_loss(-3.0, -4.0, -3.0, -4.0, cfg) - math.log(2)) > 1e-9:
        problems.append("dpo at theta=ref")
    for _ in range(200):
        lp_l, ref_w, ref_l = rng.normal(3, 3.0)
        lp_w = ref_w + abs(float(rng.normal(1)[0]))
        if dpop_loss(lp_w, lp_l, ref_w, ref_l, cfg) != dpo_loss(lp_w, lp_l, ref_w, ref_l, cfg):
            problems.append("dpop reduction")
            break
    for _ in range(200):
        lp_w, lp_l = (float(x) / 1024 for x in rng.integers(-40_000, 1, 2))
        n_w, n_l, c = (int(x) for x in rng.integers(1, 6, 3))
        if simpo_loss(c * lp_w, c * lp_l, c * n_w, c * n_l, cfg) != simpo_loss(lp_w, lp_l, n_w, n_l, cfg):
            problems.append("simpo length invariance")
            break
    if orpo_loss(1.25, -2.0, -2.0, cfg) != 1.25:
        problems.append("orpo at lp_w=lp_l")
    return not problems, "; ".join(problems) or "dpo=ln2, dpop=dpo, simpo scale-invariant, orpo=nll"


def _grad_check(name, corrupt, n_configs):
    def run():
        rng = RngStream(11).spawn(f"grad/{name}")
        errs = [GRAD_CHECKS[name](rng.spawn(str(i)), corrupt=corrupt) for i in range(n_configs)]
        worst = max(errs)
        return worst < TOLERANCE, f"worst relative error {worst:.2e} over {n_configs} configs"
    return run


def _grpo_math():
    adv = group_advantages([1, 0, 1, 0])
    problems = [] if list(adv) == [1.0, -1.0, 1.0, -1.0] else [f"advantages {adv}"]
    rng = RngStream(6).spawn("grpo")
    for _ in range(200):
        a = group_advantages(rng.normal(8, 3.0))
        if abs(a.mean()) > 1e-9 or abs(a.std() - 1.0) > 1e-9:
            problems.append("normalisation")
            break
    lp = rng.normal(4)
    g = RolloutGroup([1], [[2], [3], [4], [5]], np.array([1.0, 0, 0, 1]), lp, rng.normal(4), lp_current=lp.copy())
    if grpo_objective(g, GRPOConfig(group_size=4)) != 0.0:
        problems.append("objective at current=old")
    d = rng.normal(10_000, 5.0)
    if min(kl_penalty_k3([x], [0.0]) for x in d) < 0:
        problems.append("negative k3")
    return not problems, "; ".join(problems) or "advantages, normalisation, zero objective, k3 >= 0"


def _fvt():
    rng = RngStream(7).spawn("fvt")
    old_vocab = [b"a", b"b", b"c", b"ab"]
    old = EmbeddingMatrix(rng.normal((4, 3)), old_vocab)
    new_vocab = [b"a", b"abc", b"cab", b"bb"]
    align = VocabAlignment({0: 0}, {0: [0], 1: [3, 2], 2: [2, 3], 3: [1, 1]})
    out = init_fvt(old, align, new_vocab).rows
    want = np.stack([old.rows[0], (old.rows[3] + old.rows[2]) / 2, (old.rows[2] + old.rows[3]) / 2, old.rows[1]])
    return bool(np.array_equal(out, want)), "rows equal constituent means"


def _focus():
    old = EmbeddingMatrix(np.array([[1.0, 2.0], [3.0, -1.0], [-5.0, 7.0]]), [b"x", b"y", b"z"])
    new_vocab = [b"x", b"y", b"z", b"p", b"q"]
    align = VocabAlignment({0: 0, 1: 1, 2: 2}, {0: [0], 1: [1], 2: [2], 3: [0], 4: [0]})
    aux = AuxEmbedding({b"x": np.array([1.0, 0.0, 0.0]), b"y": np.array([0.0, 1.0, 0.0]),
                        b"z": np.array([0.0, 0.0, 1.0]), b"p": np.array([1.0, 0.0, 0.0]),
                        b"q": np.array([1.0, 1.0, -3.0])})
    rows = init_focus(old, aux, align, new_vocab).rows
    saturated = np.array_equal(rows[3], old.rows[0])
    midpoint = np.allclose(rows[4], (old.rows[0] + old.rows[1]) / 2, rtol=0, atol=1e-12)
    return bool(saturated and midpoint), f"saturation={saturated} symmetry={midpoint}"


def _linear():
    rng = RngStream(8).spawn("linear")
    M, b = rng.normal((3, 4)), rng.normal(4)
    vocab = [bytes([97 + i]) for i in range(8)]
    X = rng.normal((8, 3))
    aux = AuxEmbedding({t: X[i] for i, t in enumerate(vocab)})
    overlap = {i: i for i in range(6)}
    old = EmbeddingMatrix(X[:6] @ M + b, vocab[:6])
    align = VocabAlignment(overlap, {i: [i] for i in range(6)} | {6: [0], 7: [1]})
    rows = init_linear(old, aux, align, vocab).rows
    err = float(np.max(np.abs(rows - (X @ M + b))))
    return err <= 1e-10, f"max residual {err:.2e}"


def _merge():
    rng = RngStream(9)
    a, b, c = (random_model(rng.spawn(n), 7, 4, 3, 2) for n in "abc")
    same = linear_merge([a, a], [0.5, 0.5])
    bit = all(np.array_equal(x, y) for (_, x), (_, y) in zip(same.named_arrays(), a.named_arrays()))
    w = [0.2, 0.3, 0.5]
    m1 = linear_merge([a, b, c], w)
    m2 = linear_merge([c, a, b], [w[2], w[0], w[1]])
    err = max(float(np.max(np.abs(x - y))) for (_, x), (_, y) in zip(m1.named_arrays(), m2.named_arrays()))
    return bit and err <= 1e-12, f"idempotent={bit} permutation error {err:.2e}"


def _freeze():
    rng = RngStream(10)
    base = random_model(rng.spawn("model"), 9, 4, 3, 3)
    plan = outermost_duplicate(dus_plan(3, 1), 1)
    params = apply_plan(base, plan)
    mask = adaptation_freeze_mask(plan, outermost_positions(plan))
    before = params.group_checksums()
    batch = Batch([[1, 2, 3, 4, 5, 6]], [[False, True, True, True, True, True]])
    _, grads = masked_nll(params, batch)
    adamw_step(params, grads, AdamWState(), 1e-2, mask)
    after = params.group_checksums()
    frozen_same = all(before[g] == after[g] for g in mask.frozen())
    trained_moved = all(before[g] != after[g] for g in mask.trainable())
    return frozen_same and trained_moved, f"frozen={mask.frozen()} trainable={mask.trainable()}"


def registry(corrupt_gradient: bool = False, n_configs: int = 20) -> dict:
    checks = {
        "softmax_shift_invariance": _softmax_shift,
        "sparsemax_bruteforce_grid": _sparsemax,
        "rope_norm_preservation": _rope_norm,
        "rmsnorm_unit_rms": _rmsnorm,
        "tokenizer_roundtrip": _tokenizer_roundtrip,
        "efficiency_identities": _efficiency_identities,
        "reported_counts_consistency": _reported_counts,
        "dus_goldens": _dus,
        "alr_identity": _alr,
        "loss_closed_forms": _loss_closed_forms,
    }
    for name in GRAD_CHECKS:
        checks[f"grad_{name}"] = _grad_check(name, corrupt_gradient, n_configs)
    checks.update({
        "grpo_math": _grpo_math,
        "fvt_oracle": _fvt,
        "focus_cases": _focus,
        "linear_affine_fit": _linear,
        "merge_laws": _merge,
        "freeze_protocol": _freeze,
    })
    return checks


def run_checks(corrupt_gradient: bool = False, n_configs: int = 20) -> list[CheckResult]:
    out = []
    for name, fn in registry(corrupt_gradient, n_configs).items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail))
    return out
