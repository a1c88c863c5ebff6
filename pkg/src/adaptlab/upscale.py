"""Depth up-scaling plans, outermost-layer duplication, and freeze masks."""
from __future__ import annotations

from dataclasses import dataclass

from .toy_lm import ModelParams, param_group


@dataclass(frozen=True)
class LayerPlan:
    """Which source layer feeds each position of the up-scaled stack."""

    source_indices: tuple[int, ...]
    n: int
    m: int = 0
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "source_indices", tuple(int(i) for i in self.source_indices))
        bad = [i for i in self.source_indices if not 0 <= i < self.n]
        if bad:
            raise ValueError(f"plan index {bad[0]} outside [0, {self.n})")

    @property
    def s(self) -> int:
        return len(self.source_indices)

    def dumps(self) -> str:
        return f"{self.n} {self.m} {self.k}: " + ",".join(map(str, self.source_indices))

    @classmethod
    def loads(cls, line: str) -> "LayerPlan":
        head, _, body = line.strip().partition(":")
        n, m, k = (int(x) for x in head.split())
        idx = [int(x) for x in body.split(",")] if body.strip() else []
        return cls(tuple(idx), n, m, k)


def dus_plan(n: int, m: int) -> LayerPlan:
    """Two copies of an n-layer stack, dropping the last m of the first copy
    and the first m of the second: ``[0..n-m-1] ++ [m..n-1]``."""
    if not 0 <= m < n:
        raise ValueError(f"depth up-scaling needs 0 <= m < n, got n={n}, m={m}")
    return LayerPlan(tuple(range(n - m)) + tuple(range(m, n)), n, m)


def outermost_duplicate(plan: LayerPlan, k: int) -> LayerPlan:
    """Prepend k copies of the first layer and append k copies of the last."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if plan.s == 0:
        raise ValueError("cannot duplicate the outermost layers of an empty plan")
    idx = plan.source_indices
    return LayerPlan((idx[0],) * k + idx + (idx[-1],) * k, plan.n, plan.m, plan.k + k)


def outermost_positions(plan: LayerPlan) -> set[int]:
    """Positions inserted by :func:`outermost_duplicate`."""
    return set(range(plan.k)) | set(range(plan.s - plan.k, plan.s))


def apply_plan(params: ModelParams, plan: LayerPlan) -> ModelParams:
    """Build a new model whose layer ``l`` is a deep copy of ``plan[l]``."""
    if plan.n != params.depth:
        raise ValueError(f"plan expects {plan.n} source layers, model has {params.depth}")
    for i in plan.source_indices:
        if not 0 <= i < params.depth:
            raise ValueError(f"plan index {i} outside model depth {params.depth}")
    return ModelParams(
        params.embed.copy(),
        [params.blocks[i].copy() for i in plan.source_indices],
        params.head.copy(),
        params.eps,
    )


@dataclass(frozen=True)
class FreezeMask:
    """Trainable flag for each parameter group (``embed``, ``layer.<i>``, ``head``)."""

    trainable_groups: dict[str, bool]

    def __call__(self, name: str) -> bool:
        return self.trainable_groups[param_group(name)]

    def trainable(self) -> list[str]:
        return [g for g, t in self.trainable_groups.items() if t]

    def frozen(self) -> list[str]:
        return [g for g, t in self.trainable_groups.items() if not t]


def all_groups(depth: int) -> list[str]:
    return ["embed"] + [f"layer.{i}" for i in range(depth)] + ["head"]


def adaptation_freeze_mask(plan: LayerPlan, duplicated_positions) -> FreezeMask:
    """Embeddings and the given layer positions train; everything else is frozen."""
    dup = set(duplicated_positions)
    bad = [p for p in dup if not 0 <= p < plan.s]
    if bad:
        raise ValueError(f"duplicated position {bad[0]} outside [0, {plan.s})")
    groups = {g: False for g in all_groups(plan.s)}
    groups["embed"] = True
    for p in dup:
        groups[f"layer.{p}"] = True
    return FreezeMask(groups)


def unfrozen_mask(depth: int) -> FreezeMask:
    return FreezeMask({g: True for g in all_groups(depth)})
