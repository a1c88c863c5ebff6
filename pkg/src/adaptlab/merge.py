"""Linear (weighted-average) merging of same-shape checkpoints."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .toy_lm import ModelParams, load_checkpoint


def linear_merge(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Every parameter becomes ``sum_i w_i * p_i``, summed in input order."""
    if not models:
        raise ValueError("need at least one model to merge")
    if len(weights) != len(models):
        raise ValueError(f"{len(weights)} weights for {len(models)} models")
    wsum = float(np.sum(np.asarray(weights, dtype=np.float64)))
    if abs(wsum - 1.0) > 1e-12:
        raise ValueError(f"merge weights must sum to 1, got {wsum!r}")
    ref = models[0]
    for j, m in enumerate(models[1:], start=1):
        if m.eps != ref.eps:
            raise ValueError(f"model {j} uses rmsnorm eps {m.eps}, model 0 uses {ref.eps}")
        if m.depth != ref.depth:
            raise ValueError(f"model {j} has depth {m.depth}, model 0 has {ref.depth}")
        for (name, a), (_, b) in zip(ref.named_arrays(), m.named_arrays()):
            if a.shape != b.shape:
                raise ValueError(f"shape mismatch in {name}: model 0 {a.shape} vs model {j} {b.shape}")
    out = ref.copy()
    for name, dst in out.named_arrays():
        acc = weights[0] * models[0].get(name)
        for w, m in zip(weights[1:], models[1:]):
            acc = acc + w * m.get(name)
        dst[...] = acc
    return out


def load_merge_spec(path) -> tuple[list[Path], list[float]]:
    """Read ``{"models": [{"path": ..., "weight": ...}, ...]}``.

    Relative checkpoint paths resolve against the spec file's directory.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = doc.get("models")
    if not isinstance(entries, list) or not entries:
        raise ValueError("merge spec needs a non-empty 'models' list")
    paths, weights = [], []
    for e in entries:
        if set(e) != {"path", "weight"}:
            raise ValueError(f"merge spec entry must have exactly 'path' and 'weight': {e}")
        p = Path(e["path"])
        paths.append(p if p.is_absolute() else path.parent / p)
        weights.append(float(e["weight"]))
    return paths, weights


def merge_from_spec(path) -> ModelParams:
    paths, weights = load_merge_spec(path)
    return linear_merge([load_checkpoint(p) for p in paths], weights)
