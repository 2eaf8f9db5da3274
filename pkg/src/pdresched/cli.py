"""Command-line entry point: run, sweep, compare, gen-trace."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ScenarioConfig, load_config, to_dict
from .core import iter_time
from .metrics import MetricsReport
from .predictor import prediction_overhead
from .simengine import SimulationError, run
from .workload import (PRESETS, ArrivalProcess, LengthDistribution, TraceError, generate_trace,
                       load_trace, preset_trace, save_trace, trace_hash)

AXES = ("rps", "theta", "bandwidth", "k")
SWEEP_COLUMNS = ("policy", "seed", "n_requests", "throughput_rps", "goodput_rps", "tpot_p50_ms",
                 "tpot_p99_ms", "time_avg_load_variance", "migration_count", "oom_count",
                 "prediction_overhead_fraction", "transfer_fraction_mean")


def scenario_trace(cfg: ScenarioConfig) -> list:
    """The request trace a scenario replays; independent of the policy."""
    wl = cfg.workload
    if wl.trace is not None:
        return load_trace(wl.trace)
    return preset_trace(wl.preset, wl.rps, cfg.duration, cfg.seed, wl.arrival)


def run_scenario(cfg: ScenarioConfig, out_dir=None) -> MetricsReport:
    trace = scenario_trace(cfg)
    report = run(cfg, trace, trace_hash(trace))
    if out_dir is not None:
        report.write(out_dir, to_dict(cfg))
    return report


def apply_axis(cfg: ScenarioConfig, axis: str, value: float) -> ScenarioConfig:
    """Set one sweep axis. ``bandwidth`` is in Gbps, ``k`` is the refresh interval."""
    rep = dataclasses.replace
    if axis == "rps":
        return rep(cfg, workload=rep(cfg.workload, rps=float(value)))
    if axis == "theta":
        return rep(cfg, scheduler=rep(cfg.scheduler, theta=float(value)))
    if axis == "bandwidth":
        return rep(cfg, cost=rep(cfg.cost, bandwidth=float(value) * 1e9))
    if axis == "k":
        if float(value) != int(value):
            raise ConfigError(f"k must be an integer, got {value!r}")
        return rep(cfg, predictor=rep(cfg.predictor, refresh_interval=int(value)))
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {AXES}")


def analytic_overhead(cfg: ScenarioConfig) -> float:
    """Overhead estimate at half memory occupancy with the quoted predictor latency."""
    t_iter = iter_time(cfg.cost, 0.5 * cfg.mem_capacity)
    return prediction_overhead(cfg.cost.predict_reference_ms, t_iter, cfg.predictor.refresh_interval)


def _sweep_one(args) -> dict:
    cfg, axis, value, out_dir = args
    report = run_scenario(cfg, out_dir)
    row = {axis: value}
    row.update({c: report.summary[c] for c in SWEEP_COLUMNS})
    row["overhead_formula"] = analytic_overhead(cfg)
    return row


def sweep(cfg: ScenarioConfig, axis: str, values: Sequence[float], out_dir=None,
          jobs: int = 1) -> list:
    """One run per value on the same base seed; returns rows in ``values`` order."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    tasks = []
    for v in values:
        sub = None if out_dir is None else Path(out_dir) / f"{axis}={v:g}"
        tasks.append((apply_axis(cfg, axis, v), axis, v, sub))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, tasks))
    else:
        rows = [_sweep_one(t) for t in tasks]
    if out_dir is not None:
        write_rows(rows, Path(out_dir) / "sweep.csv")
    return rows


def write_rows(rows: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: "" if v is None else v for k, v in row.items()})


# ---------- compare ----------

POLICY_ORDER = ("ours-oracle", "ours", "rescheduling", "baseline")


def _ratio(a, b):
    if a is None or b is None:
        return None
    if b == 0:
        return 1.0 if a == 0 else None
    return a / b


def compare(summaries: Sequence[dict]) -> dict:
    """Ratios of every report against the first, plus policy-ordering verdicts."""
    if len(summaries) < 2:
        raise ValueError("compare needs at least two reports")
    hashes = {s["trace_hash"] for s in summaries}
    if len(hashes) != 1:
        raise ValueError("reports were produced from different traces; refusing to compare")
    ref = summaries[0]
    rows = []
    for s in summaries:
        rows.append({
            "policy": s["policy"],
            "goodput_ratio": _ratio(s["goodput_rps"], ref["goodput_rps"]),
            "p99_ratio": _ratio(s["tpot_p99_ms"], ref["tpot_p99_ms"]),
            "variance_ratio": _ratio(s["time_avg_load_variance"], ref["time_avg_load_variance"]),
        })
    by_policy = {s["policy"]: s["time_avg_load_variance"] for s in summaries}
    present = [p for p in POLICY_ORDER if p in by_policy]
    verdicts = {f"{a} <= {b}": by_policy[a] <= by_policy[b] for a, b in zip(present, present[1:])}
    return {"reference": ref["policy"], "rows": rows, "variance_order": verdicts,
            "ordered": all(verdicts.values())}


def _read_summary(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a summary file: {exc.msg}") from None


# ---------- gen-trace ----------

def _gen_trace(args) -> list:
    spec = args.source
    if spec in PRESETS:
        return preset_trace(spec, args.rps, args.duration, args.seed, args.arrival)
    # otherwise a JSON object of distribution parameters
    try:
        params = json.loads(Path(spec).read_text() if Path(spec).is_file() else spec)
    except json.JSONDecodeError:
        raise ConfigError(f"{spec!r} is neither a preset {sorted(PRESETS)} nor JSON parameters") from None
    try:
        inp = LengthDistribution(**_tuples(params.get("input", {})))
        out = LengthDistribution(**_tuples(params.get("output", {})))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"trace parameters: {exc}") from None
    return generate_trace(inp, out, ArrivalProcess(args.arrival, args.rps, args.duration, args.seed))


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# ---------- argument parsing ----------

def _values(text: str) -> list:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdresched", description="Decode rescheduling simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_flags(sp):
        sp.add_argument("config", help="scenario config (TOML or JSON)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--policy", choices=("baseline", "rescheduling", "ours", "ours-oracle"),
                        help="override the config policy")
        sp.add_argument("--out-dir", default="out", help="output directory (default: out)")
        sp.add_argument("--event-log", action="store_true", help="also write events.jsonl")

    r = sub.add_parser("run", help="run one scenario")
    scenario_flags(r)

    s = sub.add_parser("sweep", help="run a scenario across values of one axis")
    scenario_flags(s)
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--values", required=True, type=_values, help="e.g. 0.13,0.15,0.17")
    s.add_argument("--jobs", type=int, default=1, help="parallel runs")

    c = sub.add_parser("compare", help="compare run directories over the same trace")
    c.add_argument("dirs", nargs="+")

    g = sub.add_parser("gen-trace", help="write a synthetic trace")
    g.add_argument("source", help="preset name or JSON length-distribution parameters")
    g.add_argument("-o", "--output", required=True, help="output file (.jsonl or .csv)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--rps", type=float, default=0.1)
    g.add_argument("--duration", type=float, default=2000.0, help="seconds")
    g.add_argument("--arrival", choices=("poisson", "fixed-interval"), default="poisson")
    return p


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.policy is not None:
        changes["policy"] = args.policy
    if args.event_log:
        changes["event_log"] = True
    return dataclasses.replace(cfg, **changes) if changes else cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            report = run_scenario(_load(args), args.out_dir)
            s = report.summary
            print(f"{s['policy']}: {s['n_requests']} requests, variance "
                  f"{s['time_avg_load_variance']:.4g}, goodput {s['goodput_rps']:.4g} rps, "
                  f"{s['migration_count']} migrations, {s['oom_count']} OOM -> {args.out_dir}")
        elif args.command == "sweep":
            rows = sweep(_load(args), args.axis, args.values, args.out_dir, args.jobs)
            w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        elif args.command == "compare":
            result = compare([_read_summary(d) for d in args.dirs])
            print(json.dumps(result, indent=1, sort_keys=True))
        elif args.command == "gen-trace":
            trace = _gen_trace(args)
            save_trace(trace, args.output)
            print(f"{len(trace)} requests -> {args.output} (sha256 {trace_hash(trace)[:12]})")
    except (ConfigError, TraceError, SimulationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
