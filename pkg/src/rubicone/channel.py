"""Stochastic wireless medium between vehicle nodes.

The medium is abstracted to three effects: an SNR-dependent packet error
rate, an additive penalty per extra simultaneous transmitter standing in
for CSMA/CA contention, and a base-plus-uniform-jitter delivery latency.
Fading and Doppler are not sampled; the PER curve and jitter absorb them.

Random draws happen in a fixed order so runs replay exactly: receivers in
ascending id, and for each receiver the loss draw, then the jitter draw,
then (only when corruption is enabled and the message is signed) the
corruption draw.
"""

from __future__ import annotations

import bisect
import math
import random
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

LOGISTIC = "logistic"
TABLE = "table"

CHANNEL = "channel"
COLLISION = "collision"


@dataclass(frozen=True)
class PerCurve:
    """SNR to packet-error-rate map, non-increasing in SNR."""

    model: str = LOGISTIC
    midpoint_snr: float = 9.0
    steepness: float = math.log(0.7 / 0.3) / 5.0
    points: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.model == LOGISTIC:
            if self.steepness <= 0:
                raise ValueError("logistic steepness must be positive")
        elif self.model == TABLE:
            if not self.points:
                raise ValueError("table curve needs at least one anchor")
            snrs = [s for s, _ in self.points]
            pers = [p for _, p in self.points]
            if snrs != sorted(snrs) or len(set(snrs)) != len(snrs):
                raise ValueError("table anchors must have strictly increasing SNR")
            if any(b > a for a, b in zip(pers, pers[1:])):
                raise ValueError("table PER must be non-increasing in SNR")
            if any(not 0 <= p <= 1 for p in pers):
                raise ValueError("table PER values must lie in [0, 1]")
        else:
            raise ValueError(f"unknown PER model {self.model!r}")

    @classmethod
    def logistic_through(
        cls, low: tuple[float, float] = (4.0, 0.70), high: tuple[float, float] = (14.0, 0.30)
    ) -> PerCurve:
        """Logistic curve passing exactly through two (snr, per) anchors."""
        (s1, p1), (s2, p2) = low, high
        if not (s1 < s2 and 1 > p1 > p2 > 0):
            raise ValueError("anchors must have rising SNR and falling PER inside (0, 1)")
        # per = 1 / (1 + exp(k (snr - m)))  =>  log(1/per - 1) = k (snr - m)
        l1 = math.log(1 / p1 - 1)
        l2 = math.log(1 / p2 - 1)
        k = (l2 - l1) / (s2 - s1)
        return cls(model=LOGISTIC, midpoint_snr=s1 - l1 / k, steepness=k)

    @classmethod
    def table(cls, points: Iterable[tuple[float, float]]) -> PerCurve:
        return cls(model=TABLE, points=tuple((float(s), float(p)) for s, p in points))

    @classmethod
    def constant(cls, per: float) -> PerCurve:
        return cls.table([(0.0, per)])


DEFAULT_PER_CURVE = PerCurve.logistic_through()


@lru_cache(maxsize=4096)
def per_from_snr(curve: PerCurve, snr: float) -> float:
    if math.isnan(snr):
        raise ValueError("SNR must not be NaN")
    if curve.model == LOGISTIC:
        x = curve.steepness * (snr - curve.midpoint_snr)
        if x > 700:
            return 0.0
        return 1.0 / (1.0 + math.exp(x))
    pts = curve.points
    if snr <= pts[0][0]:
        return pts[0][1]
    if snr >= pts[-1][0]:
        return pts[-1][1]
    i = bisect.bisect_right([s for s, _ in pts], snr)
    (s0, p0), (s1, p1) = pts[i - 1], pts[i]
    return p0 + (p1 - p0) * (snr - s0) / (s1 - s0)


@dataclass(frozen=True)
class ChannelConfig:
    default_snr: float = 14.0  # dB, every link not listed in link_snr
    link_snr: Mapping[tuple[int, int], float] = field(default_factory=dict)
    symmetric: bool = True
    per_curve: PerCurve = DEFAULT_PER_CURVE
    latency_base: float = 2.0  # ms
    latency_jitter: float = 3.0  # ms, uniform [0, jitter)
    collision_factor: float = 0.05
    airtime: float = 1.0  # ms a frame occupies the medium
    retry_limit: int = 7  # link-layer retransmissions of a lost unicast frame
    corruption_prob: float = 0.0
    # (time, link or None for every link, snr), time-ordered
    schedule: tuple[tuple[float, tuple[int, int] | None, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.latency_base <= 0:
            raise ValueError("latency base must be positive")
        if self.latency_jitter < 0:
            raise ValueError("latency jitter must be non-negative")
        if not 0 <= self.collision_factor < 1:
            raise ValueError("collision_factor must lie in [0, 1)")
        if not 0 <= self.corruption_prob <= 1:
            raise ValueError("corruption_prob must lie in [0, 1]")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be non-negative")
        snrs = [self.default_snr, *self.link_snr.values(), *(g for _, _, g in self.schedule)]
        if not all(math.isfinite(g) for g in snrs):
            raise ValueError("link SNRs must be finite")

    def _static_snr(self, a: int, b: int) -> float:
        g = self.link_snr.get((a, b))
        if g is None and self.symmetric:
            g = self.link_snr.get((b, a))
        return self.default_snr if g is None else g

    def snr_at(self, a: int, b: int, t: float) -> float:
        """SNR of the a->b link in effect at time ``t``."""
        if self.schedule:
            hi = bisect.bisect_right(self.schedule, t, key=lambda e: e[0])
            for i in range(hi - 1, -1, -1):
                _, link, g = self.schedule[i]
                if link is None or link == (a, b) or (self.symmetric and link == (b, a)):
                    return g
        return self._static_snr(a, b)


def set_link_snr(
    cfg: ChannelConfig, schedule: Sequence[tuple[float, tuple[int, int] | None, float]]
) -> ChannelConfig:
    """Attach a piecewise-constant SNR schedule to a channel config."""
    entries = []
    seen: dict[tuple[float, object], float] = {}
    last = -math.inf
    for time, link, snr in schedule:
        if time < last:
            raise ValueError("schedule times must be non-decreasing")
        last = time
        if link is not None:
            link = (int(link[0]), int(link[1]))
            if cfg.symmetric:
                link = (min(link), max(link))
        key = (float(time), link)
        if key in seen and seen[key] != snr:
            raise ValueError(f"conflicting schedule entries for link {link} at t={time}")
        seen[key] = snr
        entries.append((float(time), link, float(snr)))
    return replace(cfg, schedule=tuple(entries))


@dataclass(frozen=True, slots=True)
class Delivery:
    receiver: int
    arrival: float
    dropped: bool
    drop_cause: str | None = None
    snr: float = 0.0
    corrupted: bool = False


def drop_probability(cfg: ChannelConfig, snr: float, concurrent_tx: int) -> float:
    return min(1.0, per_from_snr(cfg.per_curve, snr) + cfg.collision_factor * (concurrent_tx - 1))


def transmit(
    cfg: ChannelConfig,
    sender: int,
    msg,
    t: float,
    concurrent_tx: int,
    rng: random.Random,
    receivers: Iterable[int],
) -> list[Delivery]:
    """One frame from ``sender`` heard (or not) by each receiver."""
    if concurrent_tx < 1:
        raise ValueError("concurrent_tx must be at least 1")
    signed = cfg.corruption_prob > 0 and hasattr(msg, "integrity_token")
    extra = cfg.collision_factor * (concurrent_tx - 1)
    curve = cfg.per_curve
    out = []
    for r in sorted(receivers):
        if r == sender:
            continue
        snr = cfg.snr_at(sender, r, t)
        per = per_from_snr(curve, snr)
        u = rng.random()
        jitter = rng.random() * cfg.latency_jitter
        corrupted = signed and rng.random() < cfg.corruption_prob
        if u < min(1.0, per + extra):
            cause = CHANNEL if u < per else COLLISION
            out.append(Delivery(r, t + cfg.latency_base + jitter, True, cause, snr))
        else:
            out.append(Delivery(r, t + cfg.latency_base + jitter, False, None, snr, corrupted))
    return out
