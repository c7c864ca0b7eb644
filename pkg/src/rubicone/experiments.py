"""Parameter sweeps, result files and the built-in figure experiments."""

from __future__ import annotations

import csv
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from rubicone.analytics import (
    empirical_reliability,
    system_reliability,
    tie_resolved_reliability,
)
from rubicone.config import ConfigError, ScenarioConfig, config_from_dict, config_to_dict, perfect_channel
from rubicone.seeding import derive_seed
from rubicone.simulator import Cluster, TrialRecord, run_trial, sample_cluster_size

PARALLEL_ENV = "RUBICONE_PARALLEL"

RECORD_COLUMNS = tuple(f.name for f in fields(TrialRecord) if f.name != "timed_out")
POINT_COLUMNS = (
    "point", "n_nodes", "voters", "snr_db", "p_node", "mode", "trials", "completed",
    "timeouts", "reliability", "ci", "theory", "tie_resolved_theory",
    "mean_latency_ms", "effective_cluster", "messages_sent", "messages_dropped",
)
FIGURE_COLUMNS = ("x", "series", "y", "ci")

_PROB_FIELDS = {"p_node", "reliability", "ci", "theory", "tie_resolved_theory", "y"}
_TIME_FIELDS = {"decision_latency_ms", "mean_latency_ms"}


def default_parallelism() -> int:
    raw = os.environ.get(PARALLEL_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"{PARALLEL_ENV} must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


@dataclass(frozen=True)
class SweepSpec:
    """Cartesian sweep over cluster size, link SNR and node accuracy.

    With ``count_voters`` the ``n_nodes`` values count voting vehicles and
    each simulated cluster has one extra node, the requester.
    """

    base: ScenarioConfig
    n_nodes: tuple[int, ...]
    snr_db: tuple[float, ...]
    p_node: tuple[float, ...]
    trials: int
    seed: int = 0
    count_voters: bool = False

    def points(self) -> list[ScenarioConfig]:
        """Every sweep point as a validated scenario; raises before any run."""
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not (self.n_nodes and self.snr_db and self.p_node):
            raise ConfigError("every sweep axis needs at least one value")
        out = []
        for n in self.n_nodes:
            size = n + 1 if self.count_voters else n
            for snr in self.snr_db:
                for p in self.p_node:
                    try:
                        out.append(replace(
                            self.base, n_nodes=size, sv_id=None, snr_db=snr, p_node=p,
                            trials=self.trials, seed=self.seed,
                        ))
                    except (ConfigError, ValueError) as exc:
                        raise ConfigError(f"invalid sweep point n={n} snr={snr} p={p}: {exc}") from None
        return out


def trial_seeds(base_seed: int, point: int, trial: int) -> tuple[int, int]:
    """(channel seed, world seed) of one trial.

    The world seed ignores the point index so that every point of a sweep
    faces the same ground truths and perception draws.
    """
    return derive_seed(base_seed, point, trial), derive_seed(base_seed, "world", trial)


def voters_of(cfg: ScenarioConfig) -> int:
    return cfg.n_nodes if cfg.sv_votes else cfg.n_nodes - 1


def run_point(cfg: ScenarioConfig, point: int, base_seed: int, trace_path: str | None = None) -> list[TrialRecord]:
    """All trials of one sweep point."""
    records = []
    if cfg.election_benchmark:
        for i in range(cfg.trials):
            seed, world = trial_seeds(base_seed, point, i)
            cluster = Cluster(cfg, seed)
            cluster.bootstrap()
            records.append(cluster.negotiate(i, seed, world))
        return records
    cluster = Cluster(cfg, derive_seed(base_seed, point, "cluster"), trace=trace_path is not None)
    for i in range(cfg.trials):
        seed, world = trial_seeds(base_seed, point, i)
        cluster.bootstrap()
        records.append(cluster.negotiate(i, seed, world))
    if trace_path is not None:
        cluster.dump_trace(trace_path)
    return records


def summarize(point: int, cfg: ScenarioConfig, records: Sequence[TrialRecord]) -> dict[str, Any]:
    completed = [r for r in records if not r.local_check_failed]
    voters = voters_of(cfg)
    p = cfg.p_node_label
    if completed:
        est = empirical_reliability(completed)
        rel, ci = est.estimate, est.ci_halfwidth
        latency = statistics.fmean(r.decision_latency_ms for r in completed)
    else:
        rel = ci = latency = float("nan")
    theory = system_reliability(voters, p) if voters >= 1 else 0.0
    # a weight tie is denied, which is right only when the lane was unsafe;
    # given the requester's own check passed that happens with prob 1 - p
    tie = tie_resolved_reliability(voters, p, 1.0 - p) if voters >= 1 else 0.0
    return {
        "point": point,
        "n_nodes": cfg.n_nodes,
        "voters": voters,
        "snr_db": cfg.snr_db,
        "p_node": p,
        "mode": "election_benchmark" if cfg.election_benchmark else "reuse",
        "trials": len(records),
        "completed": len(completed),
        "timeouts": sum(r.timed_out for r in records),
        "reliability": rel,
        "ci": ci,
        "theory": theory,
        "tie_resolved_theory": tie,
        "mean_latency_ms": latency,
        "effective_cluster": statistics.median(r.effective_cluster for r in records),
        "messages_sent": sum(r.messages_sent for r in records),
        "messages_dropped": sum(r.messages_dropped for r in records),
    }


@dataclass
class ExperimentResult:
    points: list[dict[str, Any]]
    records: list[tuple[int, TrialRecord]]  # (point index, record), sorted


def _run_point_job(args):
    cfg, point, seed = args
    return point, run_point(cfg, point, seed)


def run_experiment(spec: SweepSpec, parallel: int | None = None) -> ExperimentResult:
    configs = spec.points()
    jobs = [(cfg, i, spec.seed) for i, cfg in enumerate(configs)]
    workers = min(parallel or default_parallelism(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point_job, jobs))
    else:
        results = [_run_point_job(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    points = [summarize(i, configs[i], recs) for i, recs in results]
    records = [(i, r) for i, recs in results for r in sorted(recs, key=lambda r: r.trial_id)]
    return ExperimentResult(points, records)


# -- result files ------------------------------------------------------------


def _format(key: str, value: Any) -> Any:
    if isinstance(value, bool):
        if key == "decision":
            return "granted" if value else "denied"
        return value
    if isinstance(value, float):
        if key in _PROB_FIELDS:
            return round(value, 6)
        if key in _TIME_FIELDS:
            return round(value, 3)
    return value


def _as_row(row: Any) -> dict[str, Any]:
    if isinstance(row, TrialRecord):
        return {k: getattr(row, k) for k in RECORD_COLUMNS}
    return dict(row)


def _csv_cell(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_results(rows: Iterable[Any], fmt: str, path: str | os.PathLike, columns: Sequence[str] = RECORD_COLUMNS) -> Path:
    """Write rows (TrialRecords or dicts) as CSV or a JSON array."""
    rows = [_as_row(r) for r in rows]
    if not rows:
        raise ValueError("no rows to emit")
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    formatted = [{k: _format(k, row[k]) for k in columns} for row in rows]
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if fmt == "json":
                json.dump(formatted, fh, indent=1)
                fh.write("\n")
            else:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(columns)
                for row in formatted:
                    writer.writerow([_csv_cell(row[k]) for k in columns])
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write results to {path}: {exc.strerror}") from exc
    return path


def _parse_cell(key: str, text: str) -> Any:
    if text in ("true", "false"):
        return text == "true"
    if key == "decision":
        return text == "granted"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_results(path: str | os.PathLike) -> list[dict[str, Any]]:
    """Rows from a file written by :func:`emit_results`, as typed dicts."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read results from {path}: {exc.strerror}") from exc
    if text.lstrip().startswith("["):
        rows = json.loads(text)
        for row in rows:
            if "decision" in row and isinstance(row["decision"], str):
                row["decision"] = row["decision"] == "granted"
        return rows
    reader = csv.DictReader(text.splitlines())
    return [{k: _parse_cell(k, v) for k, v in row.items()} for row in reader]


def records_from_rows(rows: Iterable[dict[str, Any]]) -> list[TrialRecord]:
    return [TrialRecord(**{k: row[k] for k in RECORD_COLUMNS}) for row in rows]


def load_sweep(path: str | os.PathLike) -> SweepSpec:
    """Sweep file: ``{"base": {...scenario...}, "n_nodes": [...], "snr_db": [...],
    "p_node": [...], "trials": n, "seed": s, "count_voters": bool}``."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read sweep spec {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"sweep spec {path} is not valid JSON: {exc}") from None
    return sweep_from_dict(raw)


def sweep_from_dict(raw: dict[str, Any]) -> SweepSpec:
    if not isinstance(raw, dict):
        raise ConfigError("sweep spec must be a JSON object")
    allowed = {"base", "n_nodes", "snr_db", "p_node", "trials", "seed", "count_voters"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
    base = config_from_dict(raw.get("base", {}))

    def axis(name, cast, default):
        vals = raw.get(name, default)
        if not isinstance(vals, list):
            vals = [vals]
        try:
            return tuple(cast(v) for v in vals)
        except (TypeError, ValueError):
            raise ConfigError(f"sweep axis {name} has a bad value") from None

    return SweepSpec(
        base=base,
        n_nodes=axis("n_nodes", int, [base.n_nodes]),
        snr_db=axis("snr_db", float, [base.snr_db]),
        p_node=axis("p_node", float, [base.p_node_label]),
        trials=int(raw.get("trials", base.trials)),
        seed=int(raw.get("seed", base.seed)),
        count_voters=bool(raw.get("count_voters", False)),
    )


def sweep_to_dict(spec: SweepSpec) -> dict[str, Any]:
    return {
        "base": config_to_dict(spec.base),
        "n_nodes": list(spec.n_nodes),
        "snr_db": list(spec.snr_db),
        "p_node": list(spec.p_node),
        "trials": spec.trials,
        "seed": spec.seed,
        "count_voters": spec.count_voters,
    }


# -- built-in figures --------------------------------------------------------

FIG3_SNRS = tuple(float(s) for s in range(20, 0, -2))
FIG4_SIZES = (1, 3, 5, 7, 9, 11)
FIG4_PS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
FIG56_SIZES = (1, 3, 6)
FIG56_PS = (0.70, 0.75, 0.80, 0.85, 0.90)
FIG_SNR = {5: 14.0, 6: 4.0}


def cluster_size_curve(n_nodes: int, snrs: Sequence[float], seed: int, warmup: float = 1000.0,
                       window: float = 20000.0) -> list[tuple[float, float, float]]:
    """(snr, median size, semi-interquartile range) per SNR level."""
    out = []
    for snr in snrs:
        cfg = ScenarioConfig(n_nodes=n_nodes, snr_db=snr)
        samples = sample_cluster_size(cfg, derive_seed(seed, n_nodes, "size"), warmup, window)
        q1, _, q3 = statistics.quantiles(samples, n=4)
        out.append((snr, float(statistics.median(samples)), (q3 - q1) / 2))
    return out


def _figure_rows(which: int, trials: int, seed: int, parallel: int | None) -> list[dict[str, Any]]:
    rows: list[dict[str, Any]] = []
    if which == 3:
        for n in (4, 6):
            for snr, size, spread in cluster_size_curve(n, FIG3_SNRS, seed):
                rows.append({"x": snr, "series": f"N={n}", "y": size, "ci": spread})
        return rows
    if which == 4:
        for n in FIG4_SIZES:
            for p in FIG4_PS:
                rows.append({"x": p, "series": f"N={n} theory", "y": system_reliability(n, p), "ci": 0.0})
        return rows
    spec = SweepSpec(
        base=ScenarioConfig(), n_nodes=FIG56_SIZES, snr_db=(FIG_SNR[which],), p_node=FIG56_PS,
        trials=trials, seed=seed, count_voters=True,
    )
    result = run_experiment(spec, parallel)
    for pt in result.points:
        rows.append({"x": pt["p_node"], "series": f"N={pt['voters']} measured",
                     "y": pt["reliability"], "ci": pt["ci"]})
    for n in FIG56_SIZES:
        for p in FIG56_PS:
            rows.append({"x": p, "series": f"N={n} theory", "y": system_reliability(n, p), "ci": 0.0})
    return rows


def reproduce_figure(which: int, out_dir: str | os.PathLike, *, trials: int = 2000, seed: int = 2024,
                     parallel: int | None = None) -> Path:
    """Run a built-in experiment and write ``figure<which>.csv`` (x, series, y, ci)."""
    if which not in (3, 4, 5, 6):
        raise ConfigError(f"no built-in experiment for figure {which}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = _figure_rows(which, trials, seed, parallel)
    return emit_results(rows, "csv", out / f"figure{which}.csv", FIGURE_COLUMNS)


def perfect_channel_sweep(n_voters: Sequence[int], ps: Sequence[float], trials: int, seed: int) -> SweepSpec:
    base = ScenarioConfig(channel=perfect_channel())
    return SweepSpec(base=base, n_nodes=tuple(n_voters), snr_db=(base.snr_db,), p_node=tuple(ps),
                     trials=trials, seed=seed, count_voters=True)


__all__ = [
    "ExperimentResult", "SweepSpec", "emit_results", "load_sweep", "read_results",
    "records_from_rows", "reproduce_figure", "run_experiment", "run_point", "run_trial",
    "summarize", "sweep_from_dict", "trial_seeds",
]
