"""Run records, derived metrics and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SCHEMA_VERSION = 1


@dataclass
class RunRecord:
    """Raw per-request and per-instance outputs of one simulation."""

    ids: np.ndarray
    prompt: np.ndarray
    output: np.ndarray
    arrival_ms: np.ndarray
    first_token_ms: np.ndarray
    last_token_ms: np.ndarray
    finish_ms: np.ndarray
    max_gap_ms: np.ndarray
    migrations: np.ndarray
    preemptions: np.ndarray
    samples: np.ndarray  # (sample, instance) resident token load
    sample_interval: float
    oom_count: int
    migration_log: list
    preempt_gaps: list
    busy_ms: float
    predict_ms: float
    events: Optional[list] = None
    timestamps: Optional[list] = None

    def tpot(self) -> np.ndarray:
        """Mean time per output token per request; NaN for single-token requests."""
        n = self.output.astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 1, (self.last_token_ms - self.first_token_ms) / (n - 1), np.nan)

    def variance_series(self) -> np.ndarray:
        if self.samples.size == 0:
            return np.zeros(0)
        return self.samples.var(axis=1)

    def time_avg_variance(self, until_ms: Optional[float] = None) -> float:
        var = self.variance_series()
        if until_ms is not None:
            var = var[: int(math.ceil(until_ms / self.sample_interval - 1e-12))]
        return float(var.mean()) if len(var) else 0.0


def _num(x):
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) else x


def _percentile(values: np.ndarray, q: float) -> Optional[float]:
    values = values[~np.isnan(values)]
    return float(np.percentile(values, q)) if len(values) else None


@dataclass
class MetricsReport:
    summary: dict
    record: RunRecord = field(repr=False)

    def __getitem__(self, key):
        return self.summary[key]

    def summary_json(self) -> str:
        return json.dumps(self.summary, sort_keys=True, indent=1, allow_nan=False) + "\n"

    def events_jsonl(self) -> str:
        events = self.record.events or []
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in events)

    def write_timeseries(self, path, stride: int = 1) -> None:
        samples = self.record.samples
        dt = self.record.sample_interval
        var = self.record.variance_series()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_ms", "instance", "metric", "value"])
            for k in range(0, len(samples), stride):
                t = repr(k * dt)
                for i, v in enumerate(samples[k].tolist()):
                    w.writerow([t, i, "token_load", repr(v)])
                w.writerow([t, "", "load_variance", repr(float(var[k]))])

    def write(self, out_dir, config: Optional[dict] = None, stride: int = 1) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(self.summary_json())
        self.write_timeseries(out / "timeseries.csv", stride)
        if self.record.events is not None:
            (out / "events.jsonl").write_text(self.events_jsonl())
        if config is not None:
            (out / "config.json").write_text(json.dumps(config, sort_keys=True, indent=1) + "\n")
        return out


def build_report(cfg, rec: RunRecord, trace_hash: str = "") -> MetricsReport:
    tpot = rec.tpot()
    n = len(rec.ids)
    makespan_ms = float(np.nanmax(rec.finish_ms)) if n else 0.0
    span_s = makespan_ms / 1000.0
    if cfg.goodput_mode == "p99" and rec.timestamps is not None:
        stat = np.array([np.percentile(np.diff(ts), 99) if len(ts) > 1 else np.nan
                         for ts in rec.timestamps])
    else:
        stat = tpot
    # single-token requests have no inter-token gap and always meet the SLO
    good = int(np.sum(np.isnan(stat) | (stat <= cfg.slo_tpot)))
    throughput = n / span_s if span_s > 0 else 0.0
    goodput = good / span_s if span_s > 0 else 0.0
    max_tpot = np.where(rec.output > 1, rec.max_gap_ms, np.nan)
    migs = rec.migration_log
    fractions = [m["transfer_fraction"] for m in migs if m["transfer_fraction"] is not None]
    summary = {
        "schema_version": SCHEMA_VERSION,
        "policy": cfg.policy,
        "seed": cfg.seed,
        "trace_hash": trace_hash,
        "n_requests": n,
        "n_decode": cfg.n_decode,
        "n_prefill": cfg.n_prefill,
        "duration_s": cfg.duration,
        "makespan_s": span_s,
        "throughput_rps": throughput,
        "goodput_rps": goodput,
        "goodput_mode": cfg.goodput_mode,
        "slo_tpot_ms": cfg.slo_tpot,
        "slo_met": good,
        "tpot_p50_ms": _percentile(tpot, 50),
        "tpot_p99_ms": _percentile(tpot, 99),
        "tpot_mean_ms": _num(np.nanmean(tpot)) if np.any(~np.isnan(tpot)) else None,
        "time_avg_load_variance": rec.time_avg_variance(cfg.duration * 1000.0),
        "time_avg_load_variance_full": rec.time_avg_variance(),
        "sample_interval_ms": rec.sample_interval,
        "migration_count": len(migs),
        "oom_count": rec.oom_count,
        "prediction_overhead_fraction": rec.predict_ms / rec.busy_ms if rec.busy_ms > 0 else 0.0,
        "migration_transfer_ms": [m["transfer_ms"] for m in migs],
        "transfer_fraction_mean": float(np.mean(fractions)) if fractions else None,
        "migrations": migs,
        "preemption_gaps": rec.preempt_gaps,
        "requests": {
            "id": rec.ids.tolist(),
            "tpot_mean_ms": [_num(x) for x in tpot],
            "tpot_max_ms": [_num(x) for x in max_tpot],
            "migrations": rec.migrations.tolist(),
            "preemptions": rec.preemptions.tolist(),
        },
    }
    return MetricsReport(summary, rec)
