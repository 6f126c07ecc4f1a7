"""Survival schedules, gate sampling and the exhaustive ensemble oracle."""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np

from .resnet import ResNet, TrainGated
from .tensor import RngStream

RULES = ("uniform", "linear_decay")


@dataclass(frozen=True)
class SurvivalSchedule:
    """Per-block survival probabilities.

    ``uniform`` gives every block ``p_L``; ``linear_decay`` falls linearly
    from 1 at the (always active) input to ``p_L`` at block ``L``.
    """

    rule: str
    p_L: float
    L: int

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; expected one of {RULES}")
        if not 0 < self.p_L <= 1:
            raise ValueError(f"p_L must lie in (0, 1], got {self.p_L}")
        if self.L < 1:
            raise ValueError(f"L must be positive, got {self.L}")

    def survival_prob(self, layer: int) -> float:
        if not 1 <= layer <= self.L:
            raise ValueError(f"block index {layer} outside 1..{self.L}")
        if self.rule == "uniform":
            return self.p_L
        # written so that block L yields p_L exactly
        return self.p_L + (1.0 - layer / self.L) * (1.0 - self.p_L)

    @functools.cached_property
    def _probs(self) -> np.ndarray:
        p = np.array([self.survival_prob(i) for i in range(1, self.L + 1)])
        p.flags.writeable = False
        return p

    def probs(self) -> np.ndarray:
        return self._probs

    def to_dict(self) -> dict:
        return {"rule": self.rule, "p_L": self.p_L, "L": self.L}

    @classmethod
    def from_dict(cls, d: dict) -> "SurvivalSchedule":
        return cls(rule=d["rule"], p_L=float(d["p_L"]), L=int(d["L"]))


@dataclass(frozen=True)
class GateVector:
    bits: tuple[int, ...]
    minibatch_index: int = 0

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def active(self) -> int:
        return sum(self.bits)

    def mode(self, train: bool = True) -> TrainGated:
        return TrainGated(self.bits, train)


def survival_prob(schedule: SurvivalSchedule, layer: int) -> float:
    return schedule.survival_prob(layer)


def sample_gates(schedule: SurvivalSchedule, rng: RngStream, minibatch_index: int = 0) -> GateVector:
    """One Bernoulli draw per block, in block order, from ``rng`` only."""
    bits = rng.bernoulli(schedule.probs())
    return GateVector(tuple(int(b) for b in bits), minibatch_index)


def expected_depth(schedule: SurvivalSchedule) -> float:
    """Expected number of active blocks, ``sum_l p_l``, in closed form."""
    L, p = schedule.L, schedule.p_L
    if schedule.rule == "uniform":
        return L * p
    return L - (1.0 - p) * (L + 1) / 2.0


def savings_estimate(schedule: SurvivalSchedule) -> float:
    """Expected fraction of block computations skipped."""
    return 1.0 - expected_depth(schedule) / schedule.L


def enumeration_weights(probs) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """All ``2^L`` gate configurations with their probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    configs = list(itertools.product((0, 1), repeat=len(probs)))
    bits = np.array(configs, dtype=np.float64).reshape(len(configs), len(probs))
    weights = np.prod(np.where(bits == 1, probs, 1.0 - probs), axis=1)
    return configs, weights


def ensemble_oracle(net: ResNet, x: np.ndarray, schedule: SurvivalSchedule, max_L: int = 16) -> np.ndarray:
    """Probability-weighted mean of the outputs of every gated sub-network.

    Batch-norm runs in eval mode, so each member is a deterministic function
    of ``x``. Cost grows as ``2^L``.
    """
    if net.L != schedule.L:
        raise ValueError(f"schedule covers {schedule.L} blocks, network has {net.L}")
    if net.L > max_L:
        raise ValueError(f"L={net.L} too large to enumerate (max {max_L})")
    configs, weights = enumeration_weights(schedule.probs())
    total = None
    for g, w in zip(configs, weights):
        out, _ = net.forward(x, TrainGated(g, train=False))
        total = w * out if total is None else total + w * out
    return total
