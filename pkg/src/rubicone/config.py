"""Scenario configuration and its strict JSON schema.

A scenario file is a JSON object. Unknown keys anywhere are rejected so a
typo in a sweep spec fails loudly instead of silently using a default.

Top-level keys (all optional)::

    n_nodes, sv_id, ground_truth_safe (true | false | "random"),
    p_node (number, or {"<node id>": number}), snr_db, heartbeat_interval,
    vote_timeout, announce_timeout, proposal_retry, trials, seed,
    duration_limit, bootstrap_limit, staleness_limit, rssi_window,
    sv_votes, election_benchmark,
    election {t_base, alpha, t_max}, voting {epsilon},
    priority {lambda, d_min}, request {delta_v, distance},
    mobility {spacing, velocity},
    channel {link_snr: [[a, b, snr], ...], symmetric, per_curve,
             latency_base, latency_jitter, collision_factor, airtime,
             retry_limit, corruption_prob, schedule: [[t, [a, b] | null, snr], ...]}

``per_curve`` is one of ``{"model": "logistic", "anchors": [[4, 0.7], [14, 0.3]]}``,
``{"model": "logistic", "midpoint_snr": m, "steepness": k}``,
``{"model": "table", "points": [[snr, per], ...]}`` or
``{"model": "constant", "per": x}``.

Times are milliseconds, distances metres, SNRs dB.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from rubicone.channel import ChannelConfig, PerCurve, set_link_snr
from rubicone.consensus import ProtocolParams
from rubicone.perception import PerceptionConfig
from rubicone.signal_metrics import ElectionParams, PriorityParams, VotingParams

RANDOM_TRUTH = "random"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    n_nodes: int = 6
    sv_id: int | None = None  # defaults to the highest node id
    ground_truth_safe: bool | str = RANDOM_TRUTH
    p_node: float | Mapping[int, float] = 0.8
    snr_db: float = 14.0
    channel: ChannelConfig = ChannelConfig()
    election: ElectionParams = ElectionParams()
    voting: VotingParams = VotingParams()
    priority: PriorityParams = PriorityParams()
    heartbeat_interval: float = 20.0
    vote_timeout: float = 40.0
    announce_timeout: float = 40.0
    proposal_retry: float = 30.0
    trials: int = 1
    seed: int = 0
    duration_limit: float = 100.0
    bootstrap_limit: float = 2000.0
    staleness_limit: int = 3
    rssi_window: int = 10
    sv_votes: bool = False
    election_benchmark: bool = False
    delta_v: float = 5.0
    distance: float = 20.0
    spacing: float = 10.0
    velocity: float = 25.0

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ConfigError("n_nodes must be >= 1")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not 0 <= self.requester < self.n_nodes:
            raise ConfigError(f"sv_id {self.sv_id} outside cluster of {self.n_nodes}")
        if not (self.ground_truth_safe == RANDOM_TRUTH or isinstance(self.ground_truth_safe, bool)):
            raise ConfigError('ground_truth_safe must be true, false or "random"')
        if isinstance(self.p_node, Mapping):
            bad = [k for k in self.p_node if not 0 <= int(k) < self.n_nodes]
            if bad:
                raise ConfigError(f"p_node overrides for unknown nodes {bad}")
        for name in ("heartbeat_interval", "vote_timeout", "announce_timeout", "proposal_retry",
                     "duration_limit", "bootstrap_limit"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.staleness_limit < 1 or self.rssi_window < 1:
            raise ConfigError("staleness_limit and rssi_window must be >= 1")
        if not math.isfinite(self.snr_db) or self.snr_db <= 0:
            # request priority divides by the requester's link SNR
            raise ConfigError("snr_db must be positive and finite")
        for (a, b), g in self.channel.link_snr.items():
            if not (0 <= a < self.n_nodes and 0 <= b < self.n_nodes):
                raise ConfigError(f"link ({a}, {b}) references unknown node")
            if g <= 0:
                raise ConfigError(f"link ({a}, {b}) SNR must be positive")
        if self.delta_v < 0 or self.distance <= 0:
            raise ConfigError("delta_v must be >= 0 and distance > 0")
        try:
            self.perception()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def requester(self) -> int:
        return self.n_nodes - 1 if self.sv_id is None else self.sv_id

    @property
    def p_node_label(self) -> float:
        if isinstance(self.p_node, Mapping):
            vals = list(self.p_node.values())
            return sum(vals) / len(vals)
        return float(self.p_node)

    def perception(self) -> PerceptionConfig:
        if isinstance(self.p_node, Mapping):
            over = {int(k): float(v) for k, v in self.p_node.items()}
            return PerceptionConfig(p_node=self.p_node_label, overrides=over)
        return PerceptionConfig(p_node=float(self.p_node))

    def channel_config(self) -> ChannelConfig:
        return replace(self.channel, default_snr=self.snr_db, seed=self.seed)

    def protocol(self) -> ProtocolParams:
        return ProtocolParams(
            members=tuple(range(self.n_nodes)),
            heartbeat_interval=self.heartbeat_interval,
            vote_timeout=self.vote_timeout,
            announce_timeout=self.announce_timeout,
            proposal_retry=self.proposal_retry,
            election=self.election,
            voting=self.voting,
            priority=self.priority,
            rssi_window=self.rssi_window,
            staleness_limit=self.staleness_limit,
            sv_votes=self.sv_votes,
        )

    def to_dict(self) -> dict[str, Any]:
        return config_to_dict(self)


def perfect_channel(cfg: ChannelConfig | None = None) -> ChannelConfig:
    """Lossless, collision-free medium (latency still applies)."""
    return replace(cfg or ChannelConfig(), per_curve=PerCurve.constant(0.0), collision_factor=0.0)


# -- strict (de)serialization ----------------------------------------------

_TOP_SIMPLE = {
    "n_nodes": int, "sv_id": int, "snr_db": float, "heartbeat_interval": float,
    "vote_timeout": float, "announce_timeout": float, "proposal_retry": float,
    "trials": int, "seed": int, "duration_limit": float, "bootstrap_limit": float,
    "staleness_limit": int, "rssi_window": int, "sv_votes": bool, "election_benchmark": bool,
}
_SECTIONS = {
    "election": {"t_base", "alpha", "t_max"},
    "voting": {"epsilon"},
    "priority": {"lambda", "d_min"},
    "request": {"delta_v", "distance"},
    "mobility": {"spacing", "velocity"},
    "channel": {"link_snr", "symmetric", "per_curve", "latency_base", "latency_jitter",
                "collision_factor", "airtime", "retry_limit", "corruption_prob", "schedule"},
}


def _check_keys(data: Mapping, allowed: set[str], where: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _num(value, kind, where):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number")
    if kind is int:
        if int(value) != value:
            raise ConfigError(f"{where}: expected an integer")
        return int(value)
    return float(value)


def _per_curve(data: Mapping) -> PerCurve:
    model = data.get("model", "logistic")
    try:
        if model == "logistic":
            if "anchors" in data:
                _check_keys(data, {"model", "anchors"}, "channel.per_curve")
                (lo, hi) = data["anchors"]
                return PerCurve.logistic_through(tuple(lo), tuple(hi))
            _check_keys(data, {"model", "midpoint_snr", "steepness"}, "channel.per_curve")
            return PerCurve(midpoint_snr=float(data.get("midpoint_snr", 9.0)),
                            steepness=float(data.get("steepness", PerCurve().steepness)))
        if model == "table":
            _check_keys(data, {"model", "points"}, "channel.per_curve")
            return PerCurve.table(data["points"])
        if model == "constant":
            _check_keys(data, {"model", "per"}, "channel.per_curve")
            return PerCurve.constant(float(data["per"]))
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"channel.per_curve: {exc}") from None
    raise ConfigError(f"channel.per_curve: unknown model {model!r}")


def _channel(data: Mapping) -> ChannelConfig:
    _check_keys(data, _SECTIONS["channel"], "channel")
    kwargs: dict[str, Any] = {}
    for key, kind in (("latency_base", float), ("latency_jitter", float), ("collision_factor", float),
                      ("airtime", float), ("retry_limit", int), ("corruption_prob", float),
                      ("symmetric", bool)):
        if key in data:
            kwargs[key] = _num(data[key], kind, f"channel.{key}")
    if "per_curve" in data:
        kwargs["per_curve"] = _per_curve(data["per_curve"])
    if "link_snr" in data:
        links = {}
        for item in data["link_snr"]:
            a, b, g = item
            links[(int(a), int(b))] = _num(g, float, "channel.link_snr")
        kwargs["link_snr"] = links
    try:
        cfg = ChannelConfig(**kwargs)
        if "schedule" in data:
            sched = [(float(t), None if link is None else tuple(link), float(g)) for t, link, g in data["schedule"]]
            cfg = set_link_snr(cfg, sched)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"channel: {exc}") from None
    return cfg


def config_from_dict(data: Mapping[str, Any]) -> ScenarioConfig:
    try:
        return _build_config(data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        # malformed shapes, e.g. a link entry with two fields
        raise ConfigError(f"malformed scenario: {exc}") from None


def _build_config(data: Mapping[str, Any]) -> ScenarioConfig:
    _check_keys(data, set(_TOP_SIMPLE) | set(_SECTIONS) | {"ground_truth_safe", "p_node"}, "scenario")
    kwargs: dict[str, Any] = {}
    for key, kind in _TOP_SIMPLE.items():
        if key in data:
            kwargs[key] = _num(data[key], kind, key)
    if "ground_truth_safe" in data:
        kwargs["ground_truth_safe"] = data["ground_truth_safe"]
    if "p_node" in data:
        p = data["p_node"]
        if isinstance(p, Mapping):
            kwargs["p_node"] = {int(k): _num(v, float, f"p_node.{k}") for k, v in p.items()}
        else:
            kwargs["p_node"] = _num(p, float, "p_node")
    try:
        if "election" in data:
            sec = data["election"]
            _check_keys(sec, _SECTIONS["election"], "election")
            kwargs["election"] = ElectionParams(**{k: _num(v, float, f"election.{k}") for k, v in sec.items()})
        if "voting" in data:
            sec = data["voting"]
            _check_keys(sec, _SECTIONS["voting"], "voting")
            kwargs["voting"] = VotingParams(**{k: _num(v, float, f"voting.{k}") for k, v in sec.items()})
        if "priority" in data:
            sec = data["priority"]
            _check_keys(sec, _SECTIONS["priority"], "priority")
            kwargs["priority"] = PriorityParams(
                lam=_num(sec.get("lambda", 1.0), float, "priority.lambda"),
                d_min=_num(sec.get("d_min", 1.0), float, "priority.d_min"),
            )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for section, names in (("request", ("delta_v", "distance")), ("mobility", ("spacing", "velocity"))):
        if section in data:
            sec = data[section]
            _check_keys(sec, _SECTIONS[section], section)
            for name in names:
                if name in sec:
                    kwargs[name] = _num(sec[name], float, f"{section}.{name}")
    if "channel" in data:
        kwargs["channel"] = _channel(data["channel"])
    return ScenarioConfig(**kwargs)


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def config_to_dict(cfg: ScenarioConfig) -> dict[str, Any]:
    """Inverse of :func:`config_from_dict`."""
    out: dict[str, Any] = {k: getattr(cfg, k) for k in _TOP_SIMPLE if getattr(cfg, k) is not None}
    out["ground_truth_safe"] = cfg.ground_truth_safe
    out["p_node"] = ({str(k): v for k, v in cfg.p_node.items()} if isinstance(cfg.p_node, Mapping)
                     else cfg.p_node)
    out["election"] = {f.name: getattr(cfg.election, f.name) for f in fields(cfg.election)}
    out["voting"] = {"epsilon": cfg.voting.epsilon}
    out["priority"] = {"lambda": cfg.priority.lam, "d_min": cfg.priority.d_min}
    out["request"] = {"delta_v": cfg.delta_v, "distance": cfg.distance}
    out["mobility"] = {"spacing": cfg.spacing, "velocity": cfg.velocity}
    ch = cfg.channel
    curve = ch.per_curve
    if curve.model == "logistic":
        per = {"model": "logistic", "midpoint_snr": curve.midpoint_snr, "steepness": curve.steepness}
    else:
        per = {"model": "table", "points": [list(p) for p in curve.points]}
    out["channel"] = {
        "link_snr": [[a, b, g] for (a, b), g in sorted(ch.link_snr.items())],
        "symmetric": ch.symmetric,
        "per_curve": per,
        "latency_base": ch.latency_base,
        "latency_jitter": ch.latency_jitter,
        "collision_factor": ch.collision_factor,
        "airtime": ch.airtime,
        "retry_limit": ch.retry_limit,
        "corruption_prob": ch.corruption_prob,
        "schedule": [[t, None if link is None else list(link), g] for t, link, g in ch.schedule],
    }
    return out
