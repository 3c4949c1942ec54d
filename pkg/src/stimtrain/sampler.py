"""Ordered residual sampling with inter-stage sampling rules.

A rule gives, per stage, the number of depth choices counted down from the
full stage depth. On a [3, 4, 6, 3] network the rule [1, 2, 4, 1] allows
stage depths {3} x {3, 4} x {3, 4, 5, 6} x {3}, i.e. 8 subnetworks, each
keeping at least three blocks per stage.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EnumerationError, RuleError
from .nncore import DepthMask, NetworkSpec

DEFAULT_ENUMERATION_CAP = 4096


@dataclass(frozen=True)
class SamplingRule:
    choices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(int(c) for c in self.choices))

    def check(self, spec: NetworkSpec) -> None:
        if len(self.choices) != spec.num_stages:
            raise RuleError(
                f"rule has {len(self.choices)} entries but the network has {spec.num_stages} stages"
            )
        for i, (s, n) in enumerate(zip(self.choices, spec.stage_blocks)):
            if not 1 <= s <= n:
                raise RuleError(f"stage {i}: choices={s} outside [1, {n}]")

    @classmethod
    def full(cls, spec: NetworkSpec) -> "SamplingRule":
        """Every prefix depth of every stage (plain ordered residual sampling)."""
        return cls(spec.stage_blocks)


def induced_depths(spec: NetworkSpec, rule: SamplingRule) -> list[range]:
    rule.check(spec)
    return [range(n - s + 1, n + 1) for n, s in zip(spec.stage_blocks, rule.choices)]


def min_depths(spec: NetworkSpec, rule: SamplingRule) -> tuple[int, ...]:
    return tuple(r.start for r in induced_depths(spec, rule))


def space_cardinality(spec: NetworkSpec, rule: SamplingRule) -> int:
    """Size of the ordered sampling space, the product of per-stage choices.

    Compare ``raw_space_cardinality``: an unordered selection of blocks would
    give 2**n_i options per stage instead of s_i.
    """
    rule.check(spec)
    return math.prod(rule.choices)


def raw_space_cardinality(spec: NetworkSpec) -> int:
    return math.prod(2**n for n in spec.stage_blocks)


def sample_subnet(spec: NetworkSpec, rule: SamplingRule, rng: np.random.Generator) -> DepthMask:
    depths = induced_depths(spec, rule)
    return DepthMask(tuple(int(r[rng.integers(len(r))]) for r in depths))


def enumerate_space(
    spec: NetworkSpec, rule: SamplingRule, cap: int = DEFAULT_ENUMERATION_CAP
) -> list[DepthMask]:
    """All masks of the space in lexicographic order."""
    size = space_cardinality(spec, rule)
    if size > cap:
        raise EnumerationError(
            f"space has {size} subnetworks, above the enumeration cap of {cap}; "
            "use sample_subnet to draw from it instead"
        )
    return [DepthMask(k) for k in itertools.product(*induced_depths(spec, rule))]


# reference enumerators; comparison only, never used for training -----------


def enumerate_stochastic_space(stage_blocks: Sequence[int]) -> list[tuple[tuple[int, ...], ...]]:
    """Block subsets that keep each stage's first block but may skip any others.

    Each entry lists the kept block indices per stage.
    """
    per_stage = []
    for n in stage_blocks:
        opts = []
        for bits in itertools.product((0, 1), repeat=n - 1):
            opts.append((0,) + tuple(j + 1 for j, b in enumerate(bits) if b))
        per_stage.append(opts)
    return list(itertools.product(*per_stage))


def enumerate_raw_space(stage_blocks: Sequence[int]) -> list[tuple[tuple[int, ...], ...]]:
    """Every subset of blocks in every stage, 2**n per stage."""
    per_stage = []
    for n in stage_blocks:
        per_stage.append(
            [tuple(j for j, b in enumerate(bits) if b) for bits in itertools.product((0, 1), repeat=n)]
        )
    return list(itertools.product(*per_stage))
