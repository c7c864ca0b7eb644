"""Wireless-aware RAFT consensus for cooperative lane-change negotiation."""

from rubicone.analytics import robustness, system_reliability
from rubicone.config import ScenarioConfig, load_config
from rubicone.simulator import Cluster, TrialRecord, run_trial

__all__ = [
    "Cluster",
    "ScenarioConfig",
    "TrialRecord",
    "load_config",
    "robustness",
    "run_trial",
    "system_reliability",
]

__version__ = "0.1.0"
