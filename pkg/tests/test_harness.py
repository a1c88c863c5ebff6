import json
import math

import numpy as np
import pytest

from adaptlab import config as config_mod
from adaptlab.embed_transfer import build_alignment
from adaptlab.harness import RunReport, cmd_adapt, cmd_train, run_sft, schedule_for, transfer_params
from adaptlab.numeric import RngStream
from adaptlab.tokenizer import Tokenizer
from adaptlab.toy_lm import Batch, init_params, load_checkpoint
from adaptlab.upscale import apply_plan, dus_plan, outermost_duplicate
from test_acceptance import _adapt_fixture


def small(section: str, **over) -> dict:
    doc = {"version": 1, "seed": 4, section: over}
    return config_mod.resolve(doc)


def test_sft_deterministic():
    cfg = small("sft", steps=5, synthetic_samples=12, schedule={"peak_lr": 1e-2, "final_lr": 1e-3})
    a, ra = cmd_train("sft", cfg)
    b, rb = cmd_train("sft", cfg)
    assert a.checksum() == b.checksum() and ra.metrics_csv() == rb.metrics_csv()
    assert ra.summary() == rb.summary()
    assert [r["step"] for r in ra.rows] == list(range(5))


def test_seed_changes_run():
    cfg = small("sft", steps=2, synthetic_samples=12)
    other = dict(cfg, seed=5)
    assert cmd_train("sft", cfg)[0].checksum() != cmd_train("sft", other)[0].checksum()


def test_all_masked_sft_loss_is_zero():
    cfg = small("sft", weight_decay=0.0, schedule={"peak_lr": 1e-2, "final_lr": 1e-3, "warmup_steps": 0})
    params = init_params(13, 8, 8, 1, RngStream(0))
    before = params.checksum()
    rows = [Batch([[1, 2, 3]], [[False, False, False]])] * 4
    out = run_sft(params, rows, cfg, cfg["sft"], 3, RngStream(1), use_alr=False)
    assert [r["loss"] for r in out] == [0.0, 0.0, 0.0]
    assert params.checksum() == before


def test_alr_scales_sft_lr():
    cfg = small("sft", steps=2, synthetic_samples=12, batch_size=2,
                schedule={"peak_lr": 1e-2, "final_lr": 1e-2, "warmup_steps": 0, "shape": "constant"},
                alr={"enabled": True, "ref_batch_tokens": 16})
    _, rep = cmd_train("sft", cfg)
    for r in rep.rows:
        assert r["lr"] == pytest.approx(1e-2 * math.sqrt(r["tokens"] / 16), rel=1e-15)


def test_dpo_first_loss_is_ln2():
    cfg = small("pref", method="dpo", steps=2, synthetic_samples=8)
    _, rep = cmd_train("dpo", cfg)
    assert rep.rows[0]["loss"] == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("kind", ["dpop", "orpo", "simpo"])
def test_pref_trainers_run(kind):
    cfg = small("pref", steps=2, synthetic_samples=8)
    _, rep = cmd_train(kind, cfg)
    assert rep.command == f"train {kind}" and len(rep.rows) == 2
    assert all(np.isfinite(r["loss"]) for r in rep.rows)


def test_grpo_trainer_runs():
    cfg = small("grpo", steps=2, prompts_per_step=2, group_size=3)
    _, rep = cmd_train("grpo", cfg)
    assert rep.columns == ["step", "mean_reward", "objective", "kl", "clip_fraction", "lr"]
    assert all(0.0 <= r["mean_reward"] <= 1.0 for r in rep.rows)


def test_unknown_trainer():
    with pytest.raises(ValueError, match="unknown trainer"):
        cmd_train("ppo", small("sft"))


def test_vocab_mismatch_rejected(tmp_path):
    data = tmp_path / "d.jsonl"
    data.write_text('{"prompt": [1], "response": [99]}\n')
    with pytest.raises(ValueError, match="99"):
        cmd_train("sft", small("sft", data=str(data)))


def test_warmup_clamped_to_steps():
    s = schedule_for({"schedule": {"peak_lr": 1.0, "final_lr": 0.0, "warmup_steps": 50, "shape": "cosine"}}, 10)
    assert s.warmup_steps == 10 and s.total_steps == 10


def test_adapt_zero_steps_is_initialised_upscale(tmp_path):
    cfg = _adapt_fixture(tmp_path, 0, 0)
    params, rep = cmd_adapt(cfg)
    a = cfg["adapt"]
    old_tok, new_tok = Tokenizer.load(a["old_tokenizer"]), Tokenizer.load(a["new_tokenizer"])
    corpus = [ln for ln in (tmp_path / "corpus.txt").read_text().splitlines() if ln.strip()]
    swapped = transfer_params(load_checkpoint(a["old_checkpoint"]), old_tok, new_tok, corpus, a["transfer"],
                              RngStream(cfg["seed"]).spawn("transfer"))
    want = apply_plan(swapped, outermost_duplicate(dus_plan(3, 1), 1))
    assert params.checksum() == want.checksum()
    assert rep.rows == [] and rep.extra["plan"] == "3 1 1: 0,0,1,1,2,2"


def test_transfer_keeps_overlapping_rows(tmp_path):
    cfg = _adapt_fixture(tmp_path, 0, 0)
    a = cfg["adapt"]
    old_tok, new_tok = Tokenizer.load(a["old_tokenizer"]), Tokenizer.load(a["new_tokenizer"])
    old = load_checkpoint(a["old_checkpoint"])
    new = transfer_params(old, old_tok, new_tok, [], dict(a["transfer"], method="fvt"), RngStream(0))
    align = build_alignment(old_tok, new_tok)
    for j, i in align.overlap.items():
        assert np.array_equal(new.embed[j], old.embed[i])
        assert np.array_equal(new.head[:, j], old.head[:, i])


def test_adapt_missing_inputs(tmp_path):
    cfg = _adapt_fixture(tmp_path, 0, 0)
    cfg["adapt"]["corpus"] = None
    with pytest.raises(config_mod.ConfigError, match="adapt/corpus"):
        cmd_adapt(cfg)
    cfg["adapt"]["corpus"] = str(tmp_path / "nope.txt")
    with pytest.raises(FileNotFoundError):
        cmd_adapt(cfg)


def test_report_files(tmp_path):
    rep = RunReport("train x", ["step", "loss"], [{"step": 0, "loss": 0.1}, {"step": 1, "loss": 1 / 3}],
                    {"version": 1}, "abc")
    assert rep.metrics_csv() == "step,loss\n0,0.1\n1,0.3333333333333333\n"
    params = init_params(5, 4, 4, 1, RngStream(0))
    rep.write(tmp_path / "o", params)
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["steps"] == 2 and summary["final"] == {"step": 1, "loss": 1 / 3}
    assert summary["checksum"] == "abc" and set(summary["versions"]) == {"adaptlab", "numpy", "python"}
    assert load_checkpoint(tmp_path / "o" / "checkpoint.ckpt").checksum() == params.checksum()
