"""Link-quality bookkeeping and the signal-aware protocol formulas.

Covers the neighbor table with its rolling RSSI window, the adaptive
election timeout, candidate ranking, request priority and the SNR-derived
vote weights used for deterministic tie-breaking.

All SNR values are in dB.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

NOISE_FLOOR_DBM = -95.0


@dataclass(frozen=True)
class ElectionParams:
    t_base: float = 100.0  # ms
    alpha: float = 1.0
    t_max: float = 1000.0  # ms

    def __post_init__(self):
        if self.t_base <= 0:
            raise ValueError("t_base must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.t_max < self.t_base:
            raise ValueError("t_max must be >= t_base")


@dataclass(frozen=True)
class VotingParams:
    epsilon: float = 1e-3

    def __post_init__(self):
        if not 0 < self.epsilon <= 1e-3:
            raise ValueError("epsilon must lie in (0, 1e-3]")


@dataclass(frozen=True)
class PriorityParams:
    # lambda is a Python keyword
    lam: float = 1.0
    d_min: float = 1.0  # m

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.d_min <= 0:
            raise ValueError("d_min must be positive")


@dataclass(frozen=True)
class LaneChangeRequest:
    sv_id: int
    delta_v: float  # m/s, magnitude of relative speed
    distance: float  # m, gap distance
    snr: float  # dB
    timestamp: float  # ms

    def __post_init__(self):
        if self.delta_v < 0:
            raise ValueError("delta_v must be non-negative")


@dataclass(frozen=True)
class LinkMetrics:
    peer: int
    rssi_window: tuple[float, ...] = ()
    snr: float = 0.0
    cbr: float = 0.0
    last_heard: float = 0.0
    # mean link SNR the peer advertises about itself in its heartbeats
    reported_snr: float | None = None

    @property
    def avg_rssi(self) -> float:
        if not self.rssi_window:
            return NOISE_FLOOR_DBM
        return sum(self.rssi_window) / len(self.rssi_window)


@dataclass(frozen=True)
class NeighborTable:
    """The dynamic neighbor set of one node.

    Treated as immutable: every update returns a new table.
    """

    owner: int
    entries: Mapping[int, LinkMetrics] = field(default_factory=dict)
    window: int = 10
    staleness_limit: int = 3

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, peer: int) -> bool:
        return peer in self.entries

    def get(self, peer: int) -> LinkMetrics | None:
        return self.entries.get(peer)

    def snr_sum(self) -> float:
        return sum(m.snr for m in self.entries.values())

    def mean_snr(self) -> float:
        if not self.entries:
            return 0.0
        return self.snr_sum() / len(self.entries)

    def mean_rssi(self) -> float:
        if not self.entries:
            return NOISE_FLOOR_DBM
        return sum(m.avg_rssi for m in self.entries.values()) / len(self.entries)

    def is_stale(self, peer: int, now: float, heartbeat_interval: float) -> bool:
        m = self.entries.get(peer)
        if m is None:
            return True
        return now - m.last_heard > self.staleness_limit * heartbeat_interval

    def live_peers(self, now: float, heartbeat_interval: float) -> list[int]:
        limit = self.staleness_limit * heartbeat_interval
        return sorted(p for p, m in self.entries.items() if now - m.last_heard <= limit)

    def evict_stale(self, now: float, heartbeat_interval: float) -> NeighborTable:
        limit = self.staleness_limit * heartbeat_interval
        kept = {p: m for p, m in self.entries.items() if now - m.last_heard <= limit}
        if len(kept) == len(self.entries):
            return self
        return replace(self, entries=kept)


def update_neighbor(
    table: NeighborTable,
    hb,
    now: float,
    rx_snr: float | None = None,
    cbr: float = 0.0,
) -> NeighborTable:
    """Upsert the sender's link metrics from a received heartbeat.

    ``rx_snr`` is the SNR measured on the received frame; when omitted the
    sender's advertised SNR stands in for it.
    """
    if hb.sender == table.owner:
        raise ValueError("heartbeat from table owner")
    snr = hb.snr if rx_snr is None else rx_snr
    rssi = NOISE_FLOOR_DBM + snr
    old = table.entries.get(hb.sender)
    window = (old.rssi_window if old else ()) + (rssi,)
    if len(window) > table.window:
        window = window[-table.window:]
    entries = dict(table.entries)
    entries[hb.sender] = LinkMetrics(
        peer=hb.sender,
        rssi_window=window,
        snr=snr,
        cbr=min(1.0, max(0.0, cbr)),
        last_heard=now,
        reported_snr=hb.snr,
    )
    return replace(table, entries=entries)


def election_timeout(params: ElectionParams, table: NeighborTable) -> float:
    """Adaptive election timeout in ms, clamped to ``[t_base, t_max]``.

    Better aggregate link quality shortens the timeout towards ``t_base``;
    an empty or zero-quality neighborhood yields ``t_max``.
    """
    total = table.snr_sum()
    if total <= 0:
        return params.t_max
    value = (1.0 + params.alpha / total) * params.t_base
    return min(max(value, params.t_base), params.t_max)


def candidate_score(
    table: NeighborTable,
    candidates: Mapping[int, float | None] | Iterable[tuple[int, float | None]],
) -> list[int]:
    """Rank candidate ids by link quality, best first.

    Each candidate carries its reported mean link SNR; a missing report
    falls back to the SNR this node observes on its link to the candidate.
    Ties go to the lower id.
    """
    items = candidates.items() if isinstance(candidates, Mapping) else candidates
    scored = []
    for node, reported in items:
        if reported is None:
            m = table.get(node)
            reported = m.snr if m is not None else -math.inf
        scored.append((-reported, node))
    if not scored:
        raise ValueError("no candidates to score")
    scored.sort()
    return [node for _, node in scored]


def request_priority(req: LaneChangeRequest, params: PriorityParams) -> float:
    if req.snr <= 0:
        raise ValueError("nonpositive SNR in priority")
    return abs(req.delta_v) / max(req.distance, params.d_min) + params.lam / req.snr


def vote_weights(batch_snrs: Sequence[float], params: VotingParams) -> list[float]:
    """Per-voter weights in ``[1, 1 + epsilon]``, normalized over the batch."""
    if not batch_snrs:
        raise ValueError("empty vote batch")
    lo = min(batch_snrs)
    spread = max(batch_snrs) - lo
    if spread == 0:
        return [1.0] * len(batch_snrs)
    eps = params.epsilon
    return [1.0 + eps * (g - lo) / spread for g in batch_snrs]
