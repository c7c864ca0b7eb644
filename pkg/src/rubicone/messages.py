"""Wire messages exchanged between vehicle nodes.

``to`` is the addressee for unicast messages and ``None`` for broadcasts.
Every message exposes ``sender`` regardless of how its own field is named.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from rubicone.signal_metrics import LaneChangeRequest

INTEGRITY_FAILURE = "integrity_failure"
STALE_TERM = "stale_term"
STALE_LOG = "stale_log"
ALREADY_VOTED = "already_voted"


@dataclass(frozen=True, slots=True)
class IntegrityToken:
    """Stand-in for the leader request signature."""

    valid: bool = True
    corrupted_by: str | None = None

    def corrupted(self, source: str) -> IntegrityToken:
        return IntegrityToken(valid=False, corrupted_by=source)


@dataclass(frozen=True, slots=True)
class Heartbeat:
    sender: int
    position: float  # m
    velocity: float  # m/s
    avg_rssi: float  # dBm
    snr: float  # dB
    timestamp: float  # ms
    to: int | None = field(default=None, kw_only=True)


@dataclass(frozen=True, slots=True)
class LeaderRequest:
    sender: int
    term: int
    last_log_index: int
    integrity_token: IntegrityToken = IntegrityToken()
    to: int | None = field(default=None, kw_only=True)


@dataclass(frozen=True, slots=True)
class LeaderAck:
    sender: int
    term: int
    to: int | None = field(default=None, kw_only=True)


@dataclass(frozen=True, slots=True)
class LeaderNack:
    sender: int
    term: int
    reason: str
    to: int | None = field(default=None, kw_only=True)


@dataclass(frozen=True, slots=True)
class LeaderConfirm:
    sender: int
    term: int
    to: int | None = field(default=None, kw_only=True)


@dataclass(frozen=True, slots=True)
class Proposal:
    sv_id: int
    request: LaneChangeRequest
    to: int | None = field(default=None, kw_only=True)

    @property
    def sender(self) -> int:
        return self.sv_id


@dataclass(frozen=True, slots=True)
class AppendEntries:
    leader: int
    term: int
    entry: object  # consensus.LogEntry
    to: int | None = field(default=None, kw_only=True)

    @property
    def sender(self) -> int:
        return self.leader


@dataclass(frozen=True, slots=True)
class VoteResponse:
    voter: int
    entry_index: int
    approve: bool
    snr: float
    to: int | None = field(default=None, kw_only=True)

    @property
    def sender(self) -> int:
        return self.voter


@dataclass(frozen=True, slots=True)
class CommitNotify:
    entry_index: int
    decision: bool
    leader: int
    term: int
    to: int | None = field(default=None, kw_only=True)

    @property
    def sender(self) -> int:
        return self.leader


@dataclass(frozen=True, slots=True)
class ClientResponse:
    sv_id: int
    granted: bool
    leader: int
    request_ts: float  # timestamp of the request this answers
    to: int | None = field(default=None, kw_only=True)

    @property
    def sender(self) -> int:
        return self.leader


Message = (
    Heartbeat
    | LeaderRequest
    | LeaderAck
    | LeaderNack
    | LeaderConfirm
    | Proposal
    | AppendEntries
    | VoteResponse
    | CommitNotify
    | ClientResponse
)
