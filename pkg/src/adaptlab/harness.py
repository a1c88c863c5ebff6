"""Experiment orchestration: the trainers behind ``adaptlab train`` and ``adaptlab adapt``.

Every source of randomness is a named sub-stream of one root
:class:`RngStream` built from ``cfg["seed"]``, so a run is fully determined by
its config.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from .data import (
    arithmetic_tasks,
    check_vocab,
    read_preferences,
    read_sft,
    read_tasks,
    synthetic_preferences,
    synthetic_sft,
)
from .embed_transfer import EmbeddingMatrix, build_alignment, train_aux_embeddings, transfer
from .grpo import GRPOConfig, answer_reward, grpo_step
from .numeric import RngStream
from .pref_losses import PrefLossConfig, pref_gradients, ref_logprobs
from .schedules import ALRConfig, ScheduleConfig, effective_lr, schedule_lr
from .tokenizer import Tokenizer
from .toy_lm import (
    AdamWState,
    Batch,
    ModelParams,
    adamw_step,
    clip_grad_norm,
    global_norm,
    init_params,
    load_checkpoint,
    masked_nll,
    pack_samples,
    save_checkpoint,
)
from .upscale import adaptation_freeze_mask, apply_plan, dus_plan, outermost_duplicate, outermost_positions

log = logging.getLogger(__name__)

TRAIN_KINDS = ("sft", "dpo", "dpop", "orpo", "simpo", "grpo")


@dataclass
class RunReport:
    command: str
    columns: list[str]
    rows: list[dict]
    config: dict
    checksum: str = ""
    extra: dict = field(default_factory=dict)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "command": self.command,
            "checksum": self.checksum,
            "metrics_sha256": hashlib.sha256(self.metrics_csv().encode()).hexdigest(),
            "steps": len(self.rows),
            "final": self.rows[-1] if self.rows else {},
            "config": self.config,
            "versions": {"adaptlab": __version__, "numpy": np.__version__, "python": platform.python_version()},
            **self.extra,
        }

    def write(self, outdir, params: ModelParams | None = None) -> Path:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        if params is not None:
            save_checkpoint(params, outdir / "checkpoint.ckpt")
        (outdir / "metrics.csv").write_text(self.metrics_csv())
        (outdir / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return outdir


def schedule_for(section: dict, steps: int) -> ScheduleConfig:
    s = section["schedule"]
    return ScheduleConfig(s["peak_lr"], s["final_lr"], min(s["warmup_steps"], steps), steps, s["shape"])


def optimizer_for(cfg: dict, weight_decay: float) -> AdamWState:
    o = cfg["optim"]
    return AdamWState(beta1=o["beta1"], beta2=o["beta2"], weight_decay=weight_decay, eps=o["eps"])


def _clip(grads, cfg):
    max_norm = cfg["optim"]["max_grad_norm"]
    if max_norm > 0:
        return clip_grad_norm(grads, max_norm)
    return grads, global_norm(grads)


def initial_params(cfg: dict, rng: RngStream) -> ModelParams:
    if cfg["init_checkpoint"]:
        return load_checkpoint(cfg["init_checkpoint"])
    m = cfg["model"]
    return init_params(m["vocab_size"], m["d_model"], m["d_ff"], m["n_layers"], rng.spawn("init"),
                       m["init_scale"], m["rms_eps"])


def reference_params(cfg: dict, init: ModelParams) -> ModelParams:
    return load_checkpoint(cfg["ref_checkpoint"]) if cfg["ref_checkpoint"] else init.copy()


# -- SFT -------------------------------------------------------------------


def sft_rows(pairs, section: dict) -> list[Batch]:
    if section.get("pack"):
        seqs = [list(p) + list(r) for p, r in pairs]
        masks = [[False] * len(p) + [True] * len(r) for p, r in pairs]
        return pack_samples(seqs, section["max_len"], masks)
    return [Batch.from_prompt_response([pr]) for pr in pairs]


def concat_batches(rows: list[Batch]) -> Batch:
    return Batch([s for b in rows for s in b.sequences], [m for b in rows for m in b.loss_mask])


def run_sft(params: ModelParams, rows: list[Batch], cfg: dict, section: dict, steps: int, rng: RngStream,
            trainable=None, phase: str = "sft", use_alr: bool | None = None) -> list[dict]:
    """Masked-token SFT with AdamW, warmup schedule and (optionally) adaptive LR."""
    sched = schedule_for(section, steps)
    alr_section = section.get("alr", {"enabled": False})
    use_alr = alr_section["enabled"] if use_alr is None else use_alr
    alr_cfg = ALRConfig(sched.peak_lr, alr_section["ref_batch_tokens"]) if use_alr and sched.peak_lr > 0 else None
    opt = optimizer_for(cfg, section["weight_decay"])
    bs = min(section["batch_size"], len(rows))
    order: list[int] = []
    out = []
    for step in range(steps):
        if len(order) < bs:
            order.extend(int(i) for i in rng.spawn(f"epoch/{step}").gen.permutation(len(rows)))
        pick, order = order[:bs], order[bs:]
        batch = concat_batches([rows[i] for i in pick])
        loss, grads = masked_nll(params, batch)
        tokens = batch.n_loss_tokens()
        lr = effective_lr(sched, alr_cfg, step + 1, tokens)
        grads, norm = _clip(grads, cfg)
        adamw_step(params, grads, opt, lr, trainable)
        out.append({"phase": phase, "step": step, "loss": loss, "lr": lr, "grad_norm": norm, "tokens": tokens})
    return out


def cmd_train_sft(cfg: dict) -> tuple[ModelParams, RunReport]:
    rng = RngStream(cfg["seed"])
    params = initial_params(cfg, rng)
    sec = cfg["sft"]
    pairs = read_sft(sec["data"]) if sec["data"] else synthetic_sft(sec["synthetic_samples"], rng.spawn("data"))
    check_vocab(max(max(p + r) for p, r in pairs), params.vocab_size, "SFT data")
    rows = sft_rows(pairs, sec)
    everything = concat_batches(rows)
    initial = masked_nll(params, everything, with_grad=False)[0]
    metrics = run_sft(params, rows, cfg, sec, sec["steps"], rng.spawn("sft"))
    final = masked_nll(params, everything, with_grad=False)[0]
    cols = ["phase", "step", "loss", "lr", "grad_norm", "tokens"]
    rep = RunReport("train sft", cols, metrics, cfg, params.checksum(),
                    {"initial_corpus_loss": initial, "final_corpus_loss": final})
    return params, rep


# -- preference training ----------------------------------------------------


def cmd_train_pref(cfg: dict, method: str) -> tuple[ModelParams, RunReport]:
    rng = RngStream(cfg["seed"])
    params = initial_params(cfg, rng)
    ref = reference_params(cfg, params)
    sec = cfg["pref"]
    examples = (read_preferences(sec["data"]) if sec["data"]
                else synthetic_preferences(sec["synthetic_samples"], rng.spawn("data")))
    check_vocab(max(max(e.prompt + e.chosen + e.rejected) for e in examples), params.vocab_size, "preference data")
    loss_cfg = PrefLossConfig(sec["beta"], sec["lambda_penalty"], sec["gamma_margin"])
    refs = [ref_logprobs(ref, ex) for ex in examples]
    sched = schedule_for(sec, sec["steps"])
    opt = optimizer_for(cfg, sec["weight_decay"])
    bs = min(sec["batch_size"], len(examples))
    srng = rng.spawn("pref")
    rows = []
    for step in range(sec["steps"]):
        idx = [int(i) for i in srng.spawn(f"step/{step}").gen.choice(len(examples), bs, replace=False)]
        loss, grads = pref_gradients([examples[i] for i in idx], params, None, method, loss_cfg,
                                     refs=[refs[i] for i in idx])
        lr = schedule_lr(sched, step + 1)
        grads, norm = _clip(grads, cfg)
        adamw_step(params, grads, opt, lr)
        rows.append({"step": step, "loss": loss, "lr": lr, "grad_norm": norm})
    return params, RunReport(f"train {method}", ["step", "loss", "lr", "grad_norm"], rows, cfg, params.checksum())


# -- GRPO --------------------------------------------------------------------


def grpo_config(cfg: dict) -> GRPOConfig:
    g = cfg["grpo"]
    return GRPOConfig(group_size=g["group_size"], epsilon_clip=g["epsilon_clip"], kl_coeff=g["kl_coeff"],
                      lr=g["schedule"]["peak_lr"], sigma_tolerance=g["sigma_tolerance"],
                      max_new_tokens=g["max_new_tokens"], updates_per_batch=g["updates_per_batch"],
                      max_grad_norm=cfg["optim"]["max_grad_norm"])


def cmd_train_grpo(cfg: dict) -> tuple[ModelParams, RunReport]:
    rng = RngStream(cfg["seed"])
    params = initial_params(cfg, rng)
    ref = reference_params(cfg, params)
    sec = cfg["grpo"]
    tasks = read_tasks(sec["tasks"]) if sec["tasks"] else arithmetic_tasks()
    check_vocab(max(max(p + a) for p, a in tasks), params.vocab_size, "GRPO tasks")
    gcfg = grpo_config(cfg)
    sched = schedule_for(sec, sec["steps"])
    opt = optimizer_for(cfg, sec["weight_decay"])
    k = min(sec["prompts_per_step"], len(tasks))
    srng = rng.spawn("grpo")
    rows = []
    for step in range(sec["steps"]):
        step_rng = srng.spawn(f"step/{step}")
        idx = [int(i) for i in step_rng.spawn("prompts").gen.choice(len(tasks), k, replace=False)]
        old = params.copy()
        _, m = grpo_step(params, ref, old, [tasks[i][0] for i in idx], [answer_reward(tasks[i][1]) for i in idx],
                         gcfg, step_rng.spawn("rollout"), opt, lr=schedule_lr(sched, step + 1))
        rows.append({"step": step, "mean_reward": m.mean_reward, "objective": m.objective, "kl": m.kl,
                     "clip_fraction": m.clip_fraction, "lr": m.lr})
    cols = ["step", "mean_reward", "objective", "kl", "clip_fraction", "lr"]
    return params, RunReport("train grpo", cols, rows, cfg, params.checksum())


def cmd_train(kind: str, cfg: dict) -> tuple[ModelParams, RunReport]:
    if kind == "sft":
        return cmd_train_sft(cfg)
    if kind == "grpo":
        return cmd_train_grpo(cfg)
    if kind in ("dpo", "dpop", "orpo", "simpo"):
        return cmd_train_pref(cfg, kind)
    raise ValueError(f"unknown trainer {kind!r}; expected one of {TRAIN_KINDS}")


# -- tokenizer replacement + depth up-scaling ---------------------------------


def _read_corpus(path) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def transfer_params(old_params: ModelParams, old_tok: Tokenizer, new_tok: Tokenizer, corpus: list[str],
                    tcfg: dict, rng: RngStream) -> ModelParams:
    """Swap the vocabulary: new input embeddings and output head, same blocks.

    The head's columns are treated as a second embedding table and go
    through the same initialiser as the input embeddings.
    """
    if old_params.vocab_size != old_tok.vocab_size:
        raise ValueError(f"old checkpoint vocabulary {old_params.vocab_size} != old tokenizer {old_tok.vocab_size}")
    align = build_alignment(old_tok, new_tok)
    aux = None
    if tcfg["method"] in ("linear", "focus"):
        aux = train_aux_embeddings([old_tok, new_tok], corpus, tcfg["aux_dim"], tcfg["aux_window"])
    tables = []
    for name, rows in (("embed", old_params.embed), ("head", old_params.head.T)):
        old = EmbeddingMatrix(rows, old_tok.vocab)
        new = transfer(tcfg["method"], old, align, new_tok.vocab, aux=aux, rng=rng.spawn(name),
                       scale=tcfg["scale"], ridge=tcfg["ridge"])
        tables.append(new.rows)
    return ModelParams(tables[0], [b.copy() for b in old_params.blocks], np.ascontiguousarray(tables[1].T),
                       old_params.eps)


def cmd_adapt(cfg: dict) -> tuple[ModelParams, RunReport]:
    """Transfer embeddings, up-scale depth, train frozen, then train everything."""
    a = cfg["adapt"]
    for key in ("old_checkpoint", "old_tokenizer", "new_tokenizer", "corpus"):
        if not a[key]:
            raise config_mod.ConfigError(f"config error at adapt/{key}: required for adapt")
        if not Path(a[key]).exists():
            raise FileNotFoundError(f"adapt/{key}: {a[key]} does not exist")
    rng = RngStream(cfg["seed"])
    old_params = load_checkpoint(a["old_checkpoint"])
    old_tok, new_tok = Tokenizer.load(a["old_tokenizer"]), Tokenizer.load(a["new_tokenizer"])
    corpus = _read_corpus(a["corpus"])

    swapped = transfer_params(old_params, old_tok, new_tok, corpus, a["transfer"], rng.spawn("transfer"))
    plan = outermost_duplicate(dus_plan(old_params.depth, a["upscale"]["m"]), a["upscale"]["k"])
    params = apply_plan(swapped, plan)
    mask = adaptation_freeze_mask(plan, outermost_positions(plan))
    init_sums = params.group_checksums()

    samples = []
    for text in corpus:
        ids = new_tok.encode(text)
        for i in range(0, len(ids), a["max_len"]):
            chunk = ids[i:i + a["max_len"]]
            if len(chunk) >= 2:
                samples.append(chunk)
    rows = pack_samples(samples, a["max_len"])
    metrics = run_sft(params, rows, cfg, a, a["phase1_steps"], rng.spawn("phase1"), trainable=mask,
                      phase="frozen", use_alr=False)
    phase1_sums = params.group_checksums()
    metrics += run_sft(params, rows, cfg, a, a["phase2_steps"], rng.spawn("phase2"), phase="unfrozen",
                       use_alr=False)
    cols = ["phase", "step", "loss", "lr", "grad_norm", "tokens"]
    extra = {
        "plan": plan.dumps(),
        "trainable_groups_phase1": mask.trainable(),
        "group_checksums_initial": init_sums,
        "group_checksums_after_phase1": phase1_sums,
    }
    return params, RunReport("adapt", cols, metrics, cfg, params.checksum(), extra)
