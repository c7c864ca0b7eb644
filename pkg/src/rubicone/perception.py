"""Local lane-change safety judgement as a noisy view of ground truth.

Each node is right with probability ``p_node`` whatever the truth is
(symmetric error model), independently of every other node.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Mapping


@dataclass(frozen=True)
class GroundTruth:
    safe: bool


@dataclass(frozen=True)
class PerceptionConfig:
    p_node: float = 0.8
    overrides: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for p in (self.p_node, *self.overrides.values()):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"p_node out of range: {p}")

    def accuracy(self, node: int) -> float:
        return self.overrides.get(node, self.p_node)


def observe(truth: GroundTruth, p: float, rng: random.Random) -> bool:
    """The node's verdict; uses exactly one draw from ``rng``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p out of range: {p}")
    correct = rng.random() < p
    return truth.safe if correct else not truth.safe


def local_safety_check(sv: int, truth: GroundTruth, cfg: PerceptionConfig, rng: random.Random) -> bool:
    """The requester's own check; only a pass lets it propose."""
    return observe(truth, cfg.accuracy(sv), rng)
