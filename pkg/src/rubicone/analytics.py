"""Closed-form reliability and robustness models plus empirical estimators."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping


@dataclass(frozen=True)
class ReliabilityResult:
    n: int
    p_node: float
    p_sys: float


@dataclass(frozen=True)
class RobustnessParams:
    kappa: float = 1.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")


@dataclass(frozen=True)
class EmpiricalEstimate:
    trials: int
    successes: int
    estimate: float
    ci_halfwidth: float


def _check_p(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability out of range: {p}")


def system_reliability(n: int, p: float) -> float:
    """Probability that a majority of ``n`` independent voters is correct.

    An exact even split counts as half a success. Terms are exact integer
    binomials times float powers, summed with ``math.fsum``.
    """
    if n < 1:
        raise ValueError("empty voter set")
    _check_p(p)
    q = 1.0 - p
    terms = [math.comb(n, k) * p**k * q ** (n - k) for k in range(n // 2 + 1, n + 1)]
    if n % 2 == 0:
        h = n // 2
        terms.append(0.5 * math.comb(n, h) * p**h * q**h)
    return min(1.0, max(0.0, math.fsum(terms)))


def reliability(n: int, p: float) -> ReliabilityResult:
    return ReliabilityResult(n=n, p_node=p, p_sys=system_reliability(n, p))


def system_reliability_oracle(n: int, p: float) -> float:
    """Brute-force enumeration of all ``2**n`` vote patterns.

    Only meant as an independent check on :func:`system_reliability`.
    Pattern probabilities are accumulated as exact fractions.
    """
    if n < 1:
        raise ValueError("empty voter set")
    if n > 20:
        raise ValueError("oracle scale exceeded")
    _check_p(p)
    pf = Fraction(p)
    qf = 1 - pf
    total = Fraction(0)
    for pattern in itertools.product((False, True), repeat=n):
        correct = sum(pattern)
        weight = pf**correct * qf ** (n - correct)
        if 2 * correct > n:
            total += weight
        elif 2 * correct == n:
            total += weight / 2
    return float(total)


def tie_resolved_reliability(n: int, p: float, tie_correct: float) -> float:
    """Majority reliability when an even split is decided by a fixed rule.

    ``tie_correct`` is the probability the deterministic tie rule lands on
    the right answer (1 or 0 for a known ground truth).
    """
    if n < 1:
        raise ValueError("empty voter set")
    _check_p(p)
    q = 1.0 - p
    terms = [math.comb(n, k) * p**k * q ** (n - k) for k in range(n // 2 + 1, n + 1)]
    if n % 2 == 0:
        h = n // 2
        terms.append(tie_correct * math.comb(n, h) * p**h * q**h)
    return math.fsum(terms)


def robustness(p_current: float, p_baseline: float, params: RobustnessParams | None = None) -> float:
    # Not clamped: a current value above baseline yields a result above 1.
    if p_baseline == 0:
        raise ValueError("undefined baseline")
    kappa = (params or RobustnessParams()).kappa
    return math.exp(-kappa * (1.0 - p_current / p_baseline))


def binomial_estimate(successes: int, trials: int) -> EmpiricalEstimate:
    if trials <= 0:
        raise ValueError("no trials")
    est = successes / trials
    ci = 3.0 * math.sqrt(est * (1.0 - est) / trials)
    return EmpiricalEstimate(trials=trials, successes=successes, estimate=est, ci_halfwidth=ci)


def empirical_reliability(records: Iterable) -> EmpiricalEstimate:
    """Fraction of correct decisions among trials that reached consensus.

    Trials ended by a failed local safety check never reached the cluster
    and are skipped.
    """
    trials = successes = 0
    for rec in records:
        if rec.local_check_failed:
            continue
        trials += 1
        successes += bool(rec.correct)
    if trials == 0:
        raise ValueError("no completed trials to estimate from")
    return binomial_estimate(successes, trials)


def effective_cluster_size(nodes: Mapping[int, object], at: float) -> int:
    """Leader plus every neighbor in its table that is not stale at ``at``.

    ``nodes`` maps node id to a node state snapshot. When several nodes
    believe they lead, the one with the highest term is taken.
    """
    leaders = [s for s in nodes.values() if s.role.name == "LEADER"]
    if not leaders:
        raise ValueError("no established leader")
    leader = max(leaders, key=lambda s: (s.current_term, -s.id))
    live = leader.neighbor_table.live_peers(at, leader.params.heartbeat_interval)
    return 1 + len(live)
