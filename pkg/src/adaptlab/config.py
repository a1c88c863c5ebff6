"""Experiment configuration: defaults, JSON schema, loading and validation.

A config file is one JSON object. Anything it leaves out is taken from
:data:`DEFAULTS`; unknown keys are rejected. Defaults carry the reference
hyperparameters (AdamW 0.9/0.95, SFT cosine 7e-6 -> 6e-7 with 50 warmup
steps, DPO-P beta 0.1 / lambda 2.5 at a fixed 5e-7, GRPO lr 1e-6 with KL
coefficient 0.001); desk-scale runs override step counts and learning rates.
"""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import jsonschema

CONFIG_VERSION = 1
OUTPUT_DIR_ENV = "ADAPTLAB_OUTPUT_DIR"

DEFAULTS: dict = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "output_dir": "runs/default",
    "model": {"vocab_size": 13, "d_model": 16, "d_ff": 32, "n_layers": 2, "init_scale": 0.02, "rms_eps": 1e-6},
    "init_checkpoint": None,
    "ref_checkpoint": None,
    "optim": {"beta1": 0.9, "beta2": 0.95, "eps": 1e-8, "max_grad_norm": 1.0},
    "sft": {
        "data": None,
        "synthetic_samples": 200,
        "steps": 300,
        "batch_size": 8,
        "pack": False,
        "max_len": 64,
        "weight_decay": 0.05,
        "schedule": {"shape": "cosine", "peak_lr": 7e-6, "final_lr": 6e-7, "warmup_steps": 50},
        "alr": {"enabled": True, "ref_batch_tokens": 16},
    },
    "pref": {
        "method": "dpop",
        "data": None,
        "synthetic_samples": 64,
        "steps": 1800,
        "batch_size": 4,
        "beta": 0.1,
        "lambda_penalty": 2.5,
        "gamma_margin": 0.5,
        "weight_decay": 0.0,
        "schedule": {"shape": "constant", "peak_lr": 5e-7, "final_lr": 5e-7, "warmup_steps": 50},
    },
    "grpo": {
        "tasks": None,
        "steps": 200,
        "prompts_per_step": 4,
        "group_size": 8,
        "epsilon_clip": 0.2,
        "kl_coeff": 0.001,
        "sigma_tolerance": 1e-8,
        "max_new_tokens": 3,
        "updates_per_batch": 1,
        "weight_decay": 0.0,
        "schedule": {"shape": "constant", "peak_lr": 1e-6, "final_lr": 1e-6, "warmup_steps": 0},
    },
    "adapt": {
        "old_checkpoint": None,
        "old_tokenizer": None,
        "new_tokenizer": None,
        "corpus": None,
        "transfer": {"method": "focus", "scale": 0.02, "ridge": 0.0, "aux_dim": 8, "aux_window": 2},
        "upscale": {"m": 0, "k": 1},
        "phase1_steps": 10,
        "phase2_steps": 10,
        "batch_size": 4,
        "max_len": 64,
        "weight_decay": 0.05,
        "schedule": {"shape": "cosine", "peak_lr": 7e-6, "final_lr": 6e-7, "warmup_steps": 50},
    },
}


def _obj(props: dict, required=None) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required if required is not None else props)}


_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int0 = {"type": "integer", "minimum": 0}
_int1 = {"type": "integer", "minimum": 1}
_path = {"type": ["string", "null"]}
_schedule = _obj({"shape": {"enum": ["cosine", "constant"]}, "peak_lr": _nonneg, "final_lr": _nonneg,
                  "warmup_steps": _int0})

SCHEMA: dict = _obj({
    "version": {"const": CONFIG_VERSION},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    "output_dir": {"type": "string"},
    "model": _obj({"vocab_size": _int1, "d_model": _int1, "d_ff": _int1, "n_layers": _int1,
                   "init_scale": _pos, "rms_eps": _pos}),
    "init_checkpoint": _path,
    "ref_checkpoint": _path,
    "optim": _obj({"beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                   "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                   "eps": _pos, "max_grad_norm": _nonneg}),
    "sft": _obj({"data": _path, "synthetic_samples": _int1, "steps": _int0, "batch_size": _int1,
                 "pack": {"type": "boolean"}, "max_len": _int1, "weight_decay": _nonneg,
                 "schedule": _schedule,
                 "alr": _obj({"enabled": {"type": "boolean"}, "ref_batch_tokens": _int1})}),
    "pref": _obj({"method": {"enum": ["dpo", "dpop", "orpo", "simpo"]}, "data": _path,
                  "synthetic_samples": _int1, "steps": _int0, "batch_size": _int1, "beta": _pos,
                  "lambda_penalty": _nonneg, "gamma_margin": _nonneg, "weight_decay": _nonneg,
                  "schedule": _schedule}),
    "grpo": _obj({"tasks": _path, "steps": _int0, "prompts_per_step": _int1,
                  "group_size": {"type": "integer", "minimum": 2},
                  "epsilon_clip": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                  "kl_coeff": _nonneg, "sigma_tolerance": _nonneg, "max_new_tokens": _int1,
                  "updates_per_batch": _int1, "weight_decay": _nonneg, "schedule": _schedule}),
    "adapt": _obj({"old_checkpoint": _path, "old_tokenizer": _path, "new_tokenizer": _path, "corpus": _path,
                   "transfer": _obj({"method": {"enum": ["random", "fvt", "linear", "focus"]},
                                     "scale": _pos, "ridge": _nonneg, "aux_dim": _int1, "aux_window": _int0}),
                   "upscale": _obj({"m": _int0, "k": _int0}),
                   "phase1_steps": _int0, "phase2_steps": _int0, "batch_size": _int1, "max_len": _int1,
                   "weight_decay": _nonneg, "schedule": _schedule}),
}, required=["version"])


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    for sec in ("sft", "pref", "grpo", "adapt"):
        s = doc[sec]["schedule"]
        if s["final_lr"] > s["peak_lr"]:
            raise ConfigError(f"config error at {sec}/schedule: final_lr exceeds peak_lr")


def resolve(doc: dict) -> dict:
    """Validate a (possibly partial) config and fill in defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    # check the user's own keys first so typos are reported against their file
    partial = copy.deepcopy(SCHEMA)
    _strip_required(partial)
    partial["required"] = ["version"]
    try:
        jsonschema.validate(doc, partial)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    full = _merge(DEFAULTS, doc)
    validate(full)
    return full


def _strip_required(schema: dict) -> None:
    if schema.get("type") == "object":
        schema["required"] = []
        for sub in schema.get("properties", {}).values():
            _strip_required(sub)


def loads(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return resolve(doc)


def load(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = loads(path.read_text())
    base = path.parent
    for sec, key in (("", "init_checkpoint"), ("", "ref_checkpoint"), ("sft", "data"), ("pref", "data"),
                     ("grpo", "tasks"), ("adapt", "old_checkpoint"), ("adapt", "old_tokenizer"),
                     ("adapt", "new_tokenizer"), ("adapt", "corpus")):
        holder = cfg[sec] if sec else cfg
        if holder[key] is not None and not Path(holder[key]).is_absolute():
            holder[key] = str(base / holder[key])
    return cfg


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def output_dir(cfg: dict) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg["output_dir"])
