"""Coarse-to-fine masking and the gradual node-recovery schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .hierarchy import Assignment, Hierarchy

log = logging.getLogger(__name__)

MASK_MODES = ("cofi", "per-level-random")


@dataclass
class RecoverySchedule:
    """How many masked coarse nodes are handed back to the encoder at epoch ``t``.

    ``R(t) = floor(n_masked * r_re * max((1 - t / t_e) ** gamma, 0))``, so the
    warm-up fades out and stays at zero from ``t_e`` on.
    """

    r_re: float = 0.5
    t_e: int = 1
    gamma: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.r_re <= 1.0:
            raise ValueError(f"r_re must be in [0, 1], got {self.r_re}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.t_e < 1:
            raise ValueError(f"t_e must be >= 1, got {self.t_e}")

    @staticmethod
    def default_end_epoch(total_epochs: int) -> int:
        return max(1, math.ceil(total_epochs / 4))

    def factor(self, t: int) -> float:
        base = 1.0 - t / self.t_e
        if not self.enabled or base <= 0.0:
            return 0.0
        return base**self.gamma


def recovery_count(n_masked: int, schedule: RecoverySchedule, t: int) -> int:
    if t < 0:
        raise ValueError("epoch must be >= 0")
    # rounding to 9 places keeps decimal ratios like 0.3 * 10 from flooring to 2
    return math.floor(round(n_masked * schedule.r_re * schedule.factor(t), 9))


def masked_count(n: int, ratio: float) -> int:
    """Round-half-up ``ratio * n``, clamped so at least one node stays visible."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    count = math.floor(round(ratio * n, 9) + 0.5)
    return max(0, min(count, n - 1))


def sample_coarse_mask(n: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Binary vector of length ``n`` with ``masked_count(n, ratio)`` ones at uniform positions."""
    mask = np.zeros(n, dtype=np.int8)
    k = masked_count(n, ratio)
    if k:
        mask[rng.choice(n, size=k, replace=False)] = 1
    return mask


def backproject_mask(assignment: Assignment, coarse: np.ndarray) -> np.ndarray:
    """Unpool a coarse mask: a node is masked iff its cluster is."""
    coarse = np.asarray(coarse)
    if coarse.shape != (assignment.n_prime,):
        raise DimensionError(f"mask of length {coarse.shape} for {assignment.n_prime} clusters")
    return coarse[assignment.cluster_of]


@dataclass
class MaskPlan:
    """Per-scale masks, ``masks[0]`` at scale 1 (1 = masked)."""

    masks: list[np.ndarray]
    epoch: int = 0
    seed: int = 0
    recovered: int = 0
    sampled: int = 0
    mode: str = "cofi"
    fine_counts: list[int] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.masks)

    def visible(self, scale_index: int) -> np.ndarray:
        return np.flatnonzero(self.masks[scale_index] == 0)

    def hidden(self, scale_index: int) -> np.ndarray:
        return np.flatnonzero(self.masks[scale_index] == 1)

    def is_consistent(self, hierarchy: Hierarchy) -> bool:
        for lv, fine, coarse in zip(hierarchy.levels, self.masks, self.masks[1:]):
            if not np.array_equal(fine, backproject_mask(lv.assignment, coarse)):
                return False
        return True


def build_mask_plan(
    hierarchy: Hierarchy,
    ratio: float,
    schedule: RecoverySchedule | None,
    epoch: int,
    seed: int,
) -> MaskPlan:
    """Mask the coarsest scale, unmask ``R(epoch)`` of those nodes, then back-project.

    The generator is seeded from ``(seed, epoch)`` so a plan is a pure function
    of its inputs.
    """
    rng = np.random.default_rng([seed, epoch])
    top = sample_coarse_mask(hierarchy.levels[-1].n, ratio, rng)
    sampled = int(top.sum())
    recovered = 0
    if schedule is not None:
        recovered = recovery_count(sampled, schedule, epoch)
    if recovered:
        top[rng.choice(np.flatnonzero(top), size=recovered, replace=False)] = 0
    masks = [top]
    for lv in reversed(hierarchy.levels[:-1]):
        masks.append(backproject_mask(lv.assignment, masks[-1]))
    masks.reverse()
    counts = [int(m.sum()) for m in masks]
    log.debug("mask plan epoch %d: sampled %d, recovered %d, per-scale %s", epoch, sampled, recovered, counts)
    return MaskPlan(masks, epoch, seed, recovered, sampled, "cofi", counts)


def random_per_level_mask(hierarchy: Hierarchy, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Independent uniform masks at each scale (the no-CoFi ablation)."""
    masks = [sample_coarse_mask(lv.n, ratio, rng) for lv in hierarchy.levels]
    counts = [int(m.sum()) for m in masks]
    return MaskPlan(masks, sampled=counts[-1], mode="per-level-random", fine_counts=counts)


def make_plan(mode: str, hierarchy: Hierarchy, ratio: float, schedule, epoch: int, seed: int) -> MaskPlan:
    if mode == "cofi":
        return build_mask_plan(hierarchy, ratio, schedule, epoch, seed)
    if mode == "per-level-random":
        plan = random_per_level_mask(hierarchy, ratio, np.random.default_rng([seed, epoch]))
        plan.epoch, plan.seed = epoch, seed
        return plan
    raise ValueError(f"unknown mask mode {mode!r}; expected one of {MASK_MODES}")


def empty_plan(hierarchy: Hierarchy) -> MaskPlan:
    return MaskPlan([np.zeros(lv.n, dtype=np.int8) for lv in hierarchy.levels], mode="none",
                    fine_counts=[0] * hierarchy.depth)


def schedule_table(n_masked: int, schedule: RecoverySchedule, epochs: int) -> list[tuple[int, int]]:
    """``(t, R(t))`` for ``t = 0..epochs`` inclusive."""
    return [(t, recovery_count(n_masked, schedule, t)) for t in range(epochs + 1)]
