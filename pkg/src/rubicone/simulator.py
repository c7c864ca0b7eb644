"""Discrete-event engine that runs node state machines over the channel.

One :class:`Cluster` is one simulated vehicle group on a single timeline.
Events are node timer wake-ups and message deliveries, ordered by
``(time, insertion sequence)``. Broadcast frames get one transmission;
a lost unicast frame is retried by the link layer up to ``retry_limit``
times, each retry being a fresh transmission that contends for the medium.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable

from rubicone import consensus
from rubicone.analytics import effective_cluster_size
from rubicone.channel import transmit
from rubicone.config import RANDOM_TRUTH, ScenarioConfig
from rubicone.consensus import EntryStatus, NodeState, Role
from rubicone.messages import ClientResponse
from rubicone.perception import GroundTruth, local_safety_check, observe
from rubicone.seeding import derive_seed
from rubicone.signal_metrics import LaneChangeRequest

_logger = logging.getLogger(__name__)

TICK = 0
DELIVER = 1
RETRY = 2

# spacing between consecutive negotiations sharing one cluster, ms
INTER_TRIAL_GAP = 1.0


class SafetyViolation(AssertionError):
    pass


class EventQueue:
    """Min-heap of pending events; equal times pop in insertion order."""

    def __init__(self):
        self._heap: list = []
        self._seq = 0

    def push(self, time: float, kind: int, node: int, payload=None) -> int:
        self._seq += 1
        heapq.heappush(self._heap, (time, self._seq, kind, node, payload))
        return self._seq

    def pop(self):
        return heapq.heappop(self._heap)

    def peek_time(self) -> float:
        return self._heap[0][0]

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class TrialRecord:
    trial_id: int
    n_nodes: int
    snr_db: float
    p_node: float
    decision: bool
    ground_truth: bool
    correct: bool
    decision_latency_ms: float
    leader_id: int
    final_term: int
    messages_sent: int
    messages_dropped: int
    effective_cluster: int
    local_check_failed: bool
    # not part of the emitted columns
    timed_out: bool = field(default=False, compare=False)


@dataclass
class TrafficStats:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    attempts: int = 0


class SafetyMonitor:
    """Online checks of the protocol invariants over a whole run."""

    def __init__(self):
        self.leaders_by_term: dict[int, set[int]] = {}
        self.decisions: dict[tuple[int, int], bool] = {}
        self.violations: list[str] = []

    def _fail(self, text: str) -> None:
        self.violations.append(text)

    def observe(self, old: NodeState, new: NodeState, out: list, now: float) -> None:
        if new.current_term < old.current_term:
            self._fail(f"t={now}: node {new.id} term went {old.current_term} -> {new.current_term}")
        if new.role is Role.LEADER:
            holders = self.leaders_by_term.setdefault(new.current_term, set())
            holders.add(new.id)
            if len(holders) > 1:
                self._fail(f"t={now}: term {new.current_term} has leaders {sorted(holders)}")
        if new.log is not old.log:
            before = {e.key: e for e in old.log}
            for e in new.log:
                prev = before.get(e.key)
                if prev is not None and prev.decided and prev.status is not e.status:
                    self._fail(f"t={now}: node {new.id} entry {e.key} changed {prev.status} -> {e.status}")
                if e.decided and e.reason != consensus.ABORTED:
                    granted = e.status is EntryStatus.COMMITTED
                    seen = self.decisions.setdefault(e.key, granted)
                    if seen != granted:
                        self._fail(f"t={now}: entry {e.key} decided both ways")
                if e.reason in (consensus.NO_QUORUM, consensus.ABORTED) and e.status is EntryStatus.COMMITTED:
                    self._fail(f"t={now}: aborted entry {e.key} granted")
        for msg in out:
            if type(msg) is ClientResponse and msg.granted:
                match = [e for e in new.log if e.payload.timestamp == msg.request_ts
                         and e.payload.sv_id == msg.sv_id and e.status is EntryStatus.COMMITTED]
                if not match:
                    self._fail(f"t={now}: grant sent without a committed entry")

    def check(self) -> None:
        if self.violations:
            raise SafetyViolation("; ".join(self.violations[:5]))


class Cluster:
    """A simulated vehicle group sharing one timeline and one medium."""

    def __init__(self, cfg: ScenarioConfig, seed: int, *, trace: bool = False, monitor: bool = False):
        self.cfg = cfg
        self.params = cfg.protocol()
        self.channel = cfg.channel_config()
        self.seed = seed
        self.sv = cfg.requester
        self.perception = cfg.perception()
        self.queue = EventQueue()
        self.now = 0.0
        self.stats = TrafficStats()
        self.channel_rng = random.Random(derive_seed(seed, "channel"))
        self._recent_tx: deque = deque()
        self._busy: deque = deque()
        self._wake: dict[int, tuple[float, int]] = {}
        self._hash = hashlib.sha256() if trace else None
        self.trace: list[str] | None = [] if trace else None
        self.monitor = SafetyMonitor() if monitor else None
        self._trial: tuple | None = None  # (request timestamp, truth, verdicts, world seed)

        phase_rng = random.Random(derive_seed(seed, "phase"))
        hb = self.params.heartbeat_interval
        self.nodes: dict[int, NodeState] = {}
        for i in self.params.members:
            self.nodes[i] = consensus.init_node(
                i, self.params, 0.0, heartbeat_phase=phase_rng.random() * hb,
                position=i * cfg.spacing, velocity=cfg.velocity,
            )
            self._schedule_wake(i)

    # -- bookkeeping -------------------------------------------------------

    def _record(self, line: str) -> None:
        self._hash.update(line.encode())
        self._hash.update(b"\n")
        self.trace.append(line)

    @property
    def trace_hash(self) -> str:
        if self._hash is None:
            raise RuntimeError("cluster was created without tracing")
        return self._hash.hexdigest()

    def dump_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.trace or ():
                fh.write(line + "\n")

    def _schedule_wake(self, node: int) -> None:
        t = max(self.nodes[node].next_wakeup(), self.now)
        cur = self._wake.get(node)
        if cur is not None and cur[0] == t:
            return
        seq = self.queue.push(t, TICK, node)
        self._wake[node] = (t, seq)

    def _concurrency(self, sender: int, t: float) -> int:
        window = self.channel.airtime
        recent = self._recent_tx
        while recent and recent[0][0] <= t - window:
            recent.popleft()
        others = {s for _, s in recent if s != sender}
        recent.append((t, sender))
        busy = self._busy
        while busy and busy[0] <= t - self.params.heartbeat_interval:
            busy.popleft()
        busy.append(t)
        return 1 + len(others)

    def channel_busy_ratio(self) -> float:
        return min(1.0, len(self._busy) * self.channel.airtime / self.params.heartbeat_interval)

    def _send(self, sender: int, msg, attempt: int = 0) -> None:
        t = self.now
        conc = self._concurrency(sender, t)
        ch = self.channel
        stats = self.stats
        stats.attempts += 1
        if msg.to is None:
            receivers = [m for m in self.params.members if m != sender]
        else:
            receivers = (msg.to,)
        for d in transmit(ch, sender, msg, t, conc, self.channel_rng, receivers):
            if d.dropped and msg.to is not None and attempt < ch.retry_limit:
                # the retry occupies the medium again, after an ack timeout
                self.queue.push(t + ch.airtime + ch.latency_base, RETRY, sender, (msg, attempt + 1))
                continue
            stats.sent += 1
            if d.dropped:
                stats.dropped += 1
                if self.trace is not None:
                    self._record(f"{t!r} drop {sender}->{d.receiver} {d.drop_cause} {msg!r}")
                continue
            stats.delivered += 1
            payload = msg
            if d.corrupted:
                payload = replace(msg, integrity_token=msg.integrity_token.corrupted("channel"))
            self.queue.push(d.arrival, DELIVER, d.receiver, (payload, d.snr))

    def _apply(self, node: int, new: NodeState, out: list) -> None:
        if self.monitor is not None:
            self.monitor.observe(self.nodes[node], new, out, self.now)
        self.nodes[node] = new
        for msg in out:
            if self.trace is not None:
                self._record(f"{self.now!r} send {node} {msg!r}")
            self._send(node, msg)
        self._schedule_wake(node)

    # -- perception --------------------------------------------------------

    def _perceive(self, node: int, request: LaneChangeRequest):
        trial = self._trial
        if trial is None or request.timestamp != trial[0] or request.sv_id != self.sv:
            return None  # a request from an earlier negotiation
        _, truth, verdicts, world = trial
        if node not in verdicts:
            rng = random.Random(derive_seed(world, "perception", node))
            verdicts[node] = observe(truth, self.perception.accuracy(node), rng)
        return verdicts[node]

    # -- running -----------------------------------------------------------

    def step(self) -> bool:
        """Process one event. Returns False if the queue is empty."""
        if not self.queue:
            return False
        time, seq, kind, node, payload = self.queue.pop()
        if kind == RETRY:
            self.now = time
            msg, attempt = payload
            if self.trace is not None:
                self._record(f"{time!r} retry {node} {attempt} {msg!r}")
            self._send(node, msg, attempt)
            return True
        if kind == TICK:
            cur = self._wake.get(node)
            if cur is None or cur[1] != seq:
                return True
            del self._wake[node]
            self.now = time
            if self.trace is not None:
                self._record(f"{time!r} tick {node}")
            new, out = consensus.tick(self.nodes[node], time, perceive=self._perceive)
        else:
            self.now = time
            msg, snr = payload
            if self.trace is not None:
                self._record(f"{time!r} recv {node} {msg!r}")
            new, out = consensus.handle_message(
                self.nodes[node], msg, time, rx_snr=snr,
                cbr=self.channel_busy_ratio(), perceive=self._perceive,
            )
        self._apply(node, new, out)
        return True

    def run_until(self, t_end: float, stop: Callable[[], bool] | None = None) -> bool:
        """Advance to ``t_end``; returns True if ``stop`` fired first."""
        q = self.queue
        while q and q.peek_time() <= t_end:
            self.step()
            if stop is not None and stop():
                return True
        self.now = max(self.now, t_end)
        return False

    def leader(self) -> NodeState | None:
        leaders = [s for s in self.nodes.values() if s.role is Role.LEADER]
        if not leaders:
            return None
        return max(leaders, key=lambda s: (s.current_term, -s.id))

    def _ready(self) -> bool:
        lead = self.leader()
        return lead is not None and (lead.id == self.sv or self.nodes[self.sv].leader_id == lead.id)

    def bootstrap(self) -> bool:
        """Run until a leader is established and known to the requester."""
        if self._ready():
            return True
        return self.run_until(self.now + self.cfg.bootstrap_limit, self._ready)

    def effective_cluster(self) -> int:
        try:
            return effective_cluster_size(self.nodes, self.now)
        except ValueError:
            return 0

    def negotiate(self, trial_id: int, trial_seed: int, world_seed: int | None = None) -> TrialRecord:
        """One lane-change negotiation on the current cluster state.

        ``trial_seed`` drives the channel; ``world_seed`` (default: the same)
        drives ground truth and every node's perception, so two scenarios
        given the same world seed see the same traffic situation.
        """
        cfg = self.cfg
        sv = self.sv
        world = trial_seed if world_seed is None else world_seed
        if self._trial is not None:
            # keeps request timestamps distinct, as the leader dedups on them
            self.run_until(self.now + INTER_TRIAL_GAP)
        self.channel_rng.seed(derive_seed(trial_seed, "channel"))
        truth_rng = random.Random(derive_seed(world, "truth"))
        if cfg.ground_truth_safe == RANDOM_TRUTH:
            truth = GroundTruth(truth_rng.random() < 0.5)
        else:
            truth = GroundTruth(bool(cfg.ground_truth_safe))
        t0 = self.now
        verdicts: dict[int, bool] = {}
        self._trial = (t0, truth, verdicts, world)
        sent0, dropped0 = self.stats.sent, self.stats.dropped

        sv_rng = random.Random(derive_seed(world, "perception", sv))
        passed = local_safety_check(sv, truth, self.perception, sv_rng)
        verdicts[sv] = passed
        if not passed:
            lead = self.leader()
            return TrialRecord(
                trial_id, cfg.n_nodes, cfg.snr_db, cfg.p_node_label, False, truth.safe,
                not truth.safe, 0.0, lead.id if lead else -1,
                max(s.current_term for s in self.nodes.values()), 0, 0,
                self.effective_cluster(), True,
            )

        sv_state = self.nodes[sv]
        link = sv_state.neighbor_table.get(sv_state.leader_id) if sv_state.leader_id is not None else None
        snr = link.snr if link is not None else cfg.snr_db
        request = LaneChangeRequest(sv, cfg.delta_v, cfg.distance, snr, t0)
        if self.trace is not None:
            self._record(f"{t0!r} submit {sv} truth={truth.safe}")
        new, out = consensus.submit_request(sv_state, request, t0, perceive=self._perceive)
        self._apply(sv, new, out)

        def decided() -> bool:
            c = self.nodes[sv].client
            return c is not None and c.granted is not None

        if not decided():
            self.run_until(t0 + cfg.duration_limit, decided)
        client = self.nodes[sv].client
        timed_out = client.granted is None
        granted = bool(client.granted)
        latency = (client.decided_at - t0) if not timed_out else self.now - t0
        lead = self.leader()
        return TrialRecord(
            trial_id, cfg.n_nodes, cfg.snr_db, cfg.p_node_label, granted, truth.safe,
            granted == truth.safe, latency, lead.id if lead else -1,
            max(s.current_term for s in self.nodes.values()),
            self.stats.sent - sent0, self.stats.dropped - dropped0,
            self.effective_cluster(), False, timed_out,
        )


def run_trial(cfg: ScenarioConfig, trial_seed: int, *, trial_id: int = 0, trace: bool = False,
              monitor: bool = False) -> tuple[TrialRecord, Cluster]:
    """Fresh cluster, full election, one negotiation.

    Returns the record and the cluster (for its trace hash and monitor).
    """
    cluster = Cluster(cfg, trial_seed, trace=trace, monitor=monitor)
    cluster.bootstrap()
    record = cluster.negotiate(trial_id, trial_seed)
    return record, cluster


def sample_cluster_size(cfg: ScenarioConfig, seed: int, warmup: float, window: float,
                        every: float | None = None) -> list[int]:
    """Effective cluster size sampled periodically after a warm-up.

    Samples taken while no leader exists are recorded as 1: no node is
    coordinating anyone.
    """
    cluster = Cluster(cfg, seed)
    every = every or cfg.heartbeat_interval
    cluster.run_until(warmup)
    samples = []
    t = warmup
    while t < warmup + window:
        t += every
        cluster.run_until(t)
        samples.append(cluster.effective_cluster() or 1)
    return samples
