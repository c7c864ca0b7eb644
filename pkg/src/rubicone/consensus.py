"""Per-node protocol state machine.

Every public operation is a pure function: it takes a :class:`NodeState`
and returns a fresh state plus the outbound messages. Inputs are never
mutated; containers inside a state are replaced rather than edited.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from rubicone.messages import (
    ALREADY_VOTED,
    INTEGRITY_FAILURE,
    STALE_LOG,
    STALE_TERM,
    AppendEntries,
    ClientResponse,
    CommitNotify,
    Heartbeat,
    IntegrityToken,
    LeaderAck,
    LeaderConfirm,
    LeaderNack,
    LeaderRequest,
    Proposal,
    VoteResponse,
)
from rubicone.signal_metrics import (
    ElectionParams,
    LaneChangeRequest,
    NeighborTable,
    PriorityParams,
    VotingParams,
    candidate_score,
    election_timeout,
    request_priority,
    update_neighbor,
    vote_weights,
)

_logger = logging.getLogger(__name__)

NO_QUORUM = "no_quorum"
ABORTED = "aborted"

# Called as perceive(node_id, request); returns the node's safety verdict,
# or None when it cannot judge and abstains.
Perceive = Callable[[int, LaneChangeRequest], "bool | None"]


class Role(enum.Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"


class EntryStatus(enum.Enum):
    PROPOSED = "proposed"
    COMMITTED = "committed"
    REJECTED = "rejected"


class Establishment(enum.Enum):
    CONFIRMED = "confirmed"
    REVERTED = "reverted"


@dataclass(frozen=True, slots=True)
class LogEntry:
    term: int
    index: int
    payload: LaneChangeRequest
    status: EntryStatus = EntryStatus.PROPOSED
    reason: str | None = None

    @property
    def key(self) -> tuple[int, int]:
        return (self.term, self.index)

    @property
    def decided(self) -> bool:
        return self.status is not EntryStatus.PROPOSED


@dataclass(frozen=True)
class ProtocolParams:
    members: tuple[int, ...]
    heartbeat_interval: float = 20.0  # ms
    vote_timeout: float = 40.0  # ms
    announce_timeout: float = 40.0  # ms
    proposal_retry: float = 30.0  # ms
    election: ElectionParams = ElectionParams()
    voting: VotingParams = VotingParams()
    priority: PriorityParams = PriorityParams()
    rssi_window: int = 10
    staleness_limit: int = 3
    # whether the requesting vehicle also votes on its own proposal
    sv_votes: bool = False

    @property
    def cluster_size(self) -> int:
        return len(self.members)

    def voters_for(self, sv_id: int) -> frozenset[int]:
        if self.sv_votes:
            return frozenset(self.members)
        return frozenset(m for m in self.members if m != sv_id)


@dataclass(frozen=True)
class Decision:
    granted: bool
    weighted_yes: float
    weighted_no: float
    reason: str | None = None

    @property
    def abstain(self) -> bool:
        return self.reason == NO_QUORUM


@dataclass(frozen=True)
class Ack:
    pass


@dataclass(frozen=True)
class Nack:
    reason: str


@dataclass(frozen=True)
class ClientRequest:
    """Requester-side bookkeeping for an outstanding lane-change request."""

    request: LaneChangeRequest
    sent_at: float
    next_retry: float
    granted: bool | None = None
    decided_at: float | None = None


@dataclass
class NodeState:
    id: int
    params: ProtocolParams
    neighbor_table: NeighborTable
    role: Role = Role.CANDIDATE
    current_term: int = 0
    log: tuple[LogEntry, ...] = ()
    election_deadline: float = 0.0
    voted_in_term: int | None = None
    pending_ballots: Mapping[int, tuple[VoteResponse, ...]] = field(default_factory=dict)
    leader_id: int | None = None
    acks: frozenset[int] = frozenset()
    announce_deadline: float | None = None
    ballot_deadline: float | None = None
    queue: tuple[LaneChangeRequest, ...] = ()
    client: ClientRequest | None = None
    next_heartbeat: float = 0.0
    position: float = 0.0
    velocity: float = 0.0
    last_tick: float = 0.0
    diagnostics: Mapping[str, int] = field(default_factory=dict)
    # highest index ever held; indices are not monotone along the (term, index) order
    high_index: int = 0

    def __post_init__(self):
        self.high_index = max(self.high_index, max((e.index for e in self.log), default=0))

    @property
    def last_log_index(self) -> int:
        return self.high_index

    def next_wakeup(self) -> float:
        t = self.next_heartbeat
        if self.role is not Role.LEADER and self.announce_deadline is None:
            t = min(t, self.election_deadline)
        if self.announce_deadline is not None:
            t = min(t, self.announce_deadline)
        if self.ballot_deadline is not None:
            t = min(t, self.ballot_deadline)
        if self.client is not None and self.client.granted is None:
            t = min(t, self.client.next_retry)
        return t


def _clone(state: NodeState) -> NodeState:
    new = object.__new__(NodeState)
    new.__dict__.update(state.__dict__)
    return new


def _count(s: NodeState, key: str) -> None:
    diag = dict(s.diagnostics)
    diag[key] = diag.get(key, 0) + 1
    s.diagnostics = diag


def init_node(
    node_id: int,
    params: ProtocolParams,
    now: float = 0.0,
    heartbeat_phase: float = 0.0,
    position: float = 0.0,
    velocity: float = 0.0,
) -> NodeState:
    """A fresh node in the broadcast phase.

    Nodes start as candidates and collect heartbeats for one base timeout
    before the first collection-phase decision.
    """
    if node_id not in params.members:
        raise ValueError(f"node {node_id} is not a cluster member")
    table = NeighborTable(owner=node_id, window=params.rssi_window, staleness_limit=params.staleness_limit)
    return NodeState(
        id=node_id,
        params=params,
        neighbor_table=table,
        election_deadline=now + params.election.t_base,
        next_heartbeat=now + heartbeat_phase,
        position=position,
        velocity=velocity,
        last_tick=now,
    )


# -- pure decision helpers -------------------------------------------------


def verify_leader_request(state: NodeState, req: LeaderRequest) -> Ack | Nack:
    if not req.integrity_token.valid:
        return Nack(INTEGRITY_FAILURE)
    if req.term < state.current_term:
        return Nack(STALE_TERM)
    if req.last_log_index < state.last_log_index:
        return Nack(STALE_LOG)
    if (
        req.term == state.current_term
        and state.voted_in_term is not None
        and state.voted_in_term != req.sender
    ):
        return Nack(ALREADY_VOTED)
    return Ack()


def has_quorum(ack_count: int, cluster_size: int) -> bool:
    # self counts toward the majority
    return ack_count + 1 > cluster_size / 2


def establish_leadership(
    state: NodeState, acks: Iterable[int], cluster_size: int, now: float
) -> tuple[Establishment, NodeState, list]:
    """Settle an announcement: lead with a strict majority, else step back."""
    if state.role is not Role.CANDIDATE:
        raise ValueError("only a candidate can establish leadership")
    acks = frozenset(a for a in acks if a != state.id)
    s = _clone(state)
    s.acks = frozenset()
    s.announce_deadline = None
    if has_quorum(len(acks), cluster_size):
        s.role = Role.LEADER
        s.leader_id = s.id
        s.election_deadline = math.inf
        _logger.debug("node %d leads term %d", s.id, s.current_term)
        return Establishment.CONFIRMED, s, [LeaderConfirm(s.id, s.current_term)]
    s.role = Role.FOLLOWER
    s.election_deadline = now + election_timeout(s.params.election, s.neighbor_table)
    return Establishment.REVERTED, s, []


def tally_votes(votes: Sequence[VoteResponse], params: VotingParams) -> Decision:
    """Weighted commit rule: grant only if weighted approval wins outright.

    Weights only separate equal counts; an empty batch denies.
    """
    if not votes:
        return Decision(False, 0.0, 0.0, NO_QUORUM)
    if len({v.entry_index for v in votes}) != 1:
        raise ValueError("votes reference different entries")
    weights = vote_weights([v.snr for v in votes], params)
    yes = math.fsum(w for v, w in zip(votes, weights) if v.approve)
    no = math.fsum(w for v, w in zip(votes, weights) if not v.approve)
    return Decision(yes > no, yes, no)


def schedule_proposals(
    pending: Iterable[LaneChangeRequest], params: PriorityParams
) -> list[LaneChangeRequest]:
    """Most urgent first; equal scores go to the lower vehicle id."""
    return sorted(pending, key=lambda r: (-request_priority(r, params), r.sv_id, r.timestamp))


# -- state transitions -----------------------------------------------------


def _reset_deadline(s: NodeState, now: float) -> None:
    s.election_deadline = now + election_timeout(s.params.election, s.neighbor_table)


def _adopt_term(s: NodeState, term: int, now: float) -> None:
    if term <= s.current_term:
        return
    was_leader = s.role is Role.LEADER
    s.current_term = term
    s.role = Role.FOLLOWER
    s.voted_in_term = None
    s.leader_id = None
    s.acks = frozenset()
    s.announce_deadline = None
    if s.pending_ballots:
        # a deposed leader abandons its ballot; the requester will retry
        for index in s.pending_ballots:
            s.log = tuple(
                LogEntry(e.term, e.index, e.payload, EntryStatus.REJECTED, ABORTED)
                if e.index == index and not e.decided and e.term < term
                else e
                for e in s.log
            )
        s.pending_ballots = {}
        s.ballot_deadline = None
    s.queue = ()
    if was_leader:
        _reset_deadline(s, now)


def _insert_entry(s: NodeState, entry: LogEntry) -> None:
    log = s.log
    s.high_index = max(s.high_index, entry.index)
    if not log or log[-1].key < entry.key:
        s.log = log + (entry,)
        return
    for pos in range(len(log) - 1, -1, -1):
        cur = log[pos]
        if cur.key == entry.key:
            if not cur.decided and entry.decided:
                s.log = log[:pos] + (entry,) + log[pos + 1:]
            return
        if cur.key < entry.key:
            s.log = log[: pos + 1] + (entry,) + log[pos + 1:]
            return
    s.log = (entry,) + log


def _finalize_entry(s: NodeState, term: int, index: int, granted: bool, reason: str | None = None) -> None:
    log = s.log
    for pos in range(len(log) - 1, -1, -1):
        e = log[pos]
        if e.term == term and e.index == index:
            if not e.decided:
                status = EntryStatus.COMMITTED if granted else EntryStatus.REJECTED
                s.log = log[:pos] + (LogEntry(term, index, e.payload, status, reason),) + log[pos + 1:]
            return


def _find_request(s: NodeState, req: LaneChangeRequest) -> LogEntry | None:
    for e in reversed(s.log):
        p = e.payload
        if p.timestamp < req.timestamp:
            break
        if p.sv_id == req.sv_id and p.timestamp == req.timestamp:
            return e
    return None


def _own_vote(s: NodeState, req: LaneChangeRequest, index: int, perceive: Perceive | None, to: int | None):
    if perceive is None:
        return None
    verdict = perceive(s.id, req)
    if verdict is None:
        return None
    if to is not None:
        link = s.neighbor_table.get(to)
        snr = link.snr if link is not None else s.neighbor_table.mean_snr()
    else:
        snr = s.neighbor_table.mean_snr()
    return VoteResponse(s.id, index, bool(verdict), snr, to=to)


def _open_next_ballot(s: NodeState, now: float, perceive: Perceive | None, out: list) -> None:
    if s.pending_ballots or not s.queue:
        return
    ordered = schedule_proposals(s.queue, s.params.priority)
    req, s.queue = ordered[0], tuple(ordered[1:])
    entry = LogEntry(s.current_term, s.last_log_index + 1, req)
    s.log = s.log + (entry,)
    s.high_index = entry.index
    s.pending_ballots = {entry.index: ()}
    s.ballot_deadline = now + s.params.vote_timeout
    for m in s.params.members:
        if m != s.id:
            out.append(AppendEntries(s.id, s.current_term, entry, to=m))
    if s.id in s.params.voters_for(req.sv_id):
        vote = _own_vote(s, req, entry.index, perceive, None)
        if vote is not None:
            s.pending_ballots = {entry.index: (vote,)}
    _maybe_close_ballot(s, now, perceive, out, timed_out=False)


def _maybe_close_ballot(s: NodeState, now: float, perceive: Perceive | None, out: list, timed_out: bool) -> None:
    if not s.pending_ballots:
        return
    (index, votes), = s.pending_ballots.items()
    entry = next(e for e in reversed(s.log) if e.index == index and e.term == s.current_term)
    expected = s.params.voters_for(entry.payload.sv_id)
    if not timed_out and len(votes) < len(expected):
        return
    decision = tally_votes(votes, s.params.voting)
    _finalize_entry(s, entry.term, index, decision.granted, decision.reason)
    s.pending_ballots = {}
    s.ballot_deadline = None
    out.append(CommitNotify(index, decision.granted, s.id, s.current_term))
    _respond(s, entry.payload, decision.granted, now, out)
    _open_next_ballot(s, now, perceive, out)


def _respond(s: NodeState, req: LaneChangeRequest, granted: bool, now: float, out: list) -> None:
    if req.sv_id == s.id:
        _client_result(s, req.timestamp, granted, now)
    else:
        out.append(ClientResponse(req.sv_id, granted, s.id, req.timestamp, to=req.sv_id))


def _client_result(s: NodeState, request_ts: float, granted: bool, now: float) -> None:
    c = s.client
    if c is None or c.granted is not None or c.request.timestamp != request_ts:
        return
    s.client = ClientRequest(c.request, c.sent_at, c.next_retry, granted, now)


def _accept_request(s: NodeState, req: LaneChangeRequest, now: float, perceive: Perceive | None, out: list) -> None:
    """Leader-side intake of a lane-change request, idempotent on retries."""
    prior = _find_request(s, req)
    if prior is not None:
        if prior.decided:
            _respond(s, req, prior.status is EntryStatus.COMMITTED, now, out)
            return
        if prior.term == s.current_term:
            return
    if any(q.sv_id == req.sv_id and q.timestamp == req.timestamp for q in s.queue):
        return
    s.queue = s.queue + (req,)
    _open_next_ballot(s, now, perceive, out)


def _start_election(s: NodeState, now: float, out: list) -> None:
    s.current_term += 1
    s.role = Role.CANDIDATE
    s.voted_in_term = s.id
    s.leader_id = None
    s.acks = frozenset()
    s.announce_deadline = now + s.params.announce_timeout
    _reset_deadline(s, now)
    out.append(LeaderRequest(s.id, s.current_term, s.last_log_index, IntegrityToken()))


def _confirm_if_quorum(s: NodeState, now: float, out: list) -> NodeState:
    if s.role is Role.CANDIDATE and has_quorum(len(s.acks), s.params.cluster_size):
        _, s, msgs = establish_leadership(s, s.acks, s.params.cluster_size, now)
        out.extend(msgs)
    return s


def handle_message(
    state: NodeState,
    msg,
    now: float,
    *,
    rx_snr: float | None = None,
    cbr: float = 0.0,
    perceive: Perceive | None = None,
) -> tuple[NodeState, list]:
    """Process one received message.

    ``rx_snr`` is the SNR measured on the received frame and ``perceive``
    supplies the local safety judgement when a ballot asks for a vote.
    """
    p = state.params
    sender = msg.sender
    if sender == state.id or sender not in p.members:
        s = _clone(state)
        _count(s, "unknown_sender")
        return s, []
    if msg.to is not None and msg.to != state.id:
        return state, []

    s = _clone(state)
    out: list = []

    if type(msg) is Heartbeat:
        s.neighbor_table = update_neighbor(s.neighbor_table, msg, now, rx_snr=rx_snr, cbr=cbr)
        if sender == s.leader_id and s.role is Role.FOLLOWER:
            _reset_deadline(s, now)

    elif type(msg) is LeaderConfirm:
        _adopt_term(s, msg.term, now)
        if msg.term == s.current_term and s.role is not Role.LEADER:
            s.role = Role.FOLLOWER
            s.leader_id = sender
            s.acks = frozenset()
            s.announce_deadline = None
            _reset_deadline(s, now)

    elif type(msg) is LeaderRequest:
        if not msg.integrity_token.valid:
            # unverified requests never move the term
            _count(s, f"nack:{INTEGRITY_FAILURE}")
            out.append(LeaderNack(s.id, s.current_term, INTEGRITY_FAILURE, to=sender))
            return s, out
        _adopt_term(s, msg.term, now)
        verdict = verify_leader_request(s, msg)
        if isinstance(verdict, Ack):
            s.voted_in_term = sender
            _reset_deadline(s, now)
            out.append(LeaderAck(s.id, s.current_term, to=sender))
        else:
            _count(s, f"nack:{verdict.reason}")
            out.append(LeaderNack(s.id, s.current_term, verdict.reason, to=sender))

    elif type(msg) is LeaderAck:
        _adopt_term(s, msg.term, now)
        if s.role is Role.CANDIDATE and msg.term == s.current_term and s.announce_deadline is not None:
            s.acks = s.acks | {sender}
            s = _confirm_if_quorum(s, now, out)

    elif type(msg) is LeaderNack:
        _adopt_term(s, msg.term, now)
        _count(s, f"rejected:{msg.reason}")

    elif type(msg) is AppendEntries:
        if msg.term < s.current_term:
            _count(s, "stale_append")
            return s, out
        _adopt_term(s, msg.term, now)
        s.role = Role.FOLLOWER
        s.leader_id = sender
        s.acks = frozenset()
        s.announce_deadline = None
        _reset_deadline(s, now)
        _insert_entry(s, msg.entry)
        if s.id in p.voters_for(msg.entry.payload.sv_id):
            vote = _own_vote(s, msg.entry.payload, msg.entry.index, perceive, sender)
            if vote is not None:
                out.append(vote)

    elif type(msg) is VoteResponse:
        votes = s.pending_ballots.get(msg.entry_index) if s.role is Role.LEADER else None
        if votes is not None and all(v.voter != msg.voter for v in votes):
            s.pending_ballots = {msg.entry_index: votes + (msg,)}
            _maybe_close_ballot(s, now, perceive, out, timed_out=False)

    elif type(msg) is CommitNotify:
        _adopt_term(s, msg.term, now)
        _finalize_entry(s, msg.term, msg.entry_index, msg.decision)

    elif type(msg) is Proposal:
        if s.role is Role.LEADER:
            _accept_request(s, msg.request, now, perceive, out)
        else:
            _count(s, "proposal_not_leader")

    elif type(msg) is ClientResponse:
        _client_result(s, msg.request_ts, msg.granted, now)

    else:
        raise TypeError(f"unknown message type {type(msg).__name__}")

    return s, out


def submit_request(
    state: NodeState, request: LaneChangeRequest, now: float, *, perceive: Perceive | None = None
) -> tuple[NodeState, list]:
    """Requester side: send a lane-change proposal to the known leader."""
    if request.sv_id != state.id:
        raise ValueError("a node can only submit its own requests")
    s = _clone(state)
    s.client = ClientRequest(request, now, now + s.params.proposal_retry)
    out: list = []
    _send_proposal(s, now, perceive, out)
    return s, out


def _send_proposal(s: NodeState, now: float, perceive: Perceive | None, out: list) -> None:
    req = s.client.request
    if s.role is Role.LEADER:
        _accept_request(s, req, now, perceive, out)
    elif s.leader_id is not None:
        out.append(Proposal(s.id, req, to=s.leader_id))


def tick(state: NodeState, now: float, *, perceive: Perceive | None = None) -> tuple[NodeState, list]:
    """Advance timers: heartbeats, ballot and announcement timeouts,
    election deadline and requester retries."""
    if now < state.last_tick:
        raise ValueError("time went backwards")
    p = state.params
    s = _clone(state)
    s.last_tick = now
    out: list = []
    hb_every = p.heartbeat_interval

    s.neighbor_table = s.neighbor_table.evict_stale(now, hb_every)

    if now >= s.next_heartbeat:
        table = s.neighbor_table
        out.append(Heartbeat(s.id, s.position, s.velocity, table.mean_rssi(), table.mean_snr(), now))
        if s.role is Role.LEADER:
            out.append(LeaderConfirm(s.id, s.current_term))
        missed = math.floor((now - s.next_heartbeat) / hb_every) + 1
        s.next_heartbeat += missed * hb_every

    if s.role is Role.LEADER:
        if s.ballot_deadline is not None and now >= s.ballot_deadline:
            _maybe_close_ballot(s, now, perceive, out, timed_out=True)
    elif s.role is Role.CANDIDATE and s.announce_deadline is not None:
        if now >= s.announce_deadline:
            _, s, msgs = establish_leadership(s, s.acks, p.cluster_size, now)
            out.extend(msgs)
    elif now >= s.election_deadline:
        live = s.neighbor_table.entries
        candidates = {s.id: s.neighbor_table.mean_snr()}
        for peer, metrics in live.items():
            candidates[peer] = metrics.reported_snr
        if candidate_score(s.neighbor_table, candidates)[0] == s.id:
            _start_election(s, now, out)
            s = _confirm_if_quorum(s, now, out)
        else:
            _reset_deadline(s, now)

    c = s.client
    if c is not None and c.granted is None and now >= c.next_retry:
        s.client = ClientRequest(c.request, c.sent_at, now + p.proposal_retry)
        _send_proposal(s, now, perceive, out)

    return s, out
