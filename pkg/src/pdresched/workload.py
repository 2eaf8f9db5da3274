"""Request traces: synthetic length distributions, arrival processes, file I/O."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .core import RequestSpec

MAX_LEN = 32768
TRACE_FIELDS = ("id", "arrival_s", "prompt_tokens", "output_tokens")


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class LengthDistribution:
    """Token-length distribution: a capped lognormal mixture or an empirical sample.

    For ``empirical`` the ``values`` are resampled with replacement.
    """

    kind: str = "lognormal-mix"
    weights: tuple = (1.0,)
    log_means: tuple = (5.0,)
    log_sigmas: tuple = (1.0,)
    max_len: int = MAX_LEN
    values: tuple = ()

    def __post_init__(self):
        if self.kind == "lognormal-mix":
            if not (len(self.weights) == len(self.log_means) == len(self.log_sigmas) >= 1):
                raise ValueError("mixture parameter lists must have equal, non-zero length")
            if abs(sum(self.weights) - 1.0) > 1e-9 or min(self.weights) < 0:
                raise ValueError("mixture weights must be non-negative and sum to 1")
            if min(self.log_sigmas) <= 0:
                raise ValueError("log_sigmas must be > 0")
        elif self.kind == "empirical":
            if not self.values or min(self.values) < 1:
                raise ValueError("empirical distribution needs positive values")
        else:
            raise ValueError(f"unknown length distribution kind {self.kind!r}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "empirical":
            x = rng.choice(np.asarray(self.values, dtype=float), size=size)
        else:
            comp = rng.choice(len(self.weights), size=size, p=np.asarray(self.weights))
            mu = np.asarray(self.log_means)[comp]
            sigma = np.asarray(self.log_sigmas)[comp]
            x = np.exp(mu + sigma * rng.standard_normal(size))
        return np.clip(np.rint(x), 1, self.max_len).astype(np.int64)

    def cdf(self, x: float) -> float:
        """Uncapped mixture CDF (lognormal-mix only)."""
        return float(sum(w * stats.norm.cdf((math.log(x) - m) / s)
                         for w, m, s in zip(self.weights, self.log_means, self.log_sigmas)))


def fit_lognormal_mix(quantiles: Sequence[tuple], mean: float, std: float,
                      starts: Sequence[Sequence[float]], cap: float = MAX_LEN) -> LengthDistribution:
    """Least-squares fit of a two-component capped lognormal mixture to
    CDF targets ``[(x, F(x)), ...]`` plus the capped mean and std."""

    def unpack(p):
        w = 1.0 / (1.0 + math.exp(-p[0]))
        return (w, 1.0 - w), (p[1], p[3]), (math.exp(p[2]), math.exp(p[4]))

    def capped_moments(w, mu, sig):
        lc = math.log(cap)
        e1 = e2 = 0.0
        for wi, m, s in zip(w, mu, sig):
            tail = stats.norm.sf((lc - m) / s)
            e1 += wi * (math.exp(m + s * s / 2) * stats.norm.cdf((lc - m - s * s) / s) + cap * tail)
            e2 += wi * (math.exp(2 * m + 2 * s * s) * stats.norm.cdf((lc - m - 2 * s * s) / s)
                        + cap * cap * tail)
        return e1, math.sqrt(max(e2 - e1 * e1, 1e-12))

    def residuals(p):
        w, mu, sig = unpack(p)
        try:
            e1, sd = capped_moments(w, mu, sig)
        except OverflowError:
            return np.full(len(quantiles) + 2, 1e6)
        res = [(sum(wi * stats.norm.cdf((math.log(x) - m) / s) for wi, m, s in zip(w, mu, sig)) - q) / 0.01
               for x, q in quantiles]
        res += [(e1 - mean) / mean / 0.02, (sd - std) / std / 0.02]
        return np.array(res)

    best = min((optimize.least_squares(residuals, x0) for x0 in starts), key=lambda r: r.cost)
    w, mu, sig = unpack(best.x)
    return LengthDistribution(weights=w, log_means=mu, log_sigmas=sig, max_len=int(cap))


# Frozen fits (see fit_lognormal_mix). ShareGPT output targets: P(<1000)=0.292,
# P50=1536, P(>30000)=0.173, mean 7542, std 12008. Input targets: P50=36,
# P90=920, P95=1609, mean 305, std 1053.
SHAREGPT_OUTPUT = LengthDistribution(
    weights=(0.7260321138902083, 0.2739678861097917),
    log_means=(7.105160254595648, 11.379542079655968),
    log_sigmas=(0.6025877536241627, 3.198378579710257),
)
SHAREGPT_INPUT = LengthDistribution(
    weights=(0.8409157339824441, 0.1590842660175559),
    log_means=(3.525826381509764, 6.9955899374970105),
    log_sigmas=(0.2409012104047912, 0.966586589120292),
)
# Alpaca output is under-determined below P50: fitted to P50=987, mean 8596,
# std 13354 and an assumed 15% mass above 32000 (P90 sits at the cap).
ALPACA_OUTPUT = LengthDistribution(
    weights=(0.7503193907890848, 0.2496806092109152),
    log_means=(6.644032080402134, 10.394877110413194),
    log_sigmas=(0.5829508927835179, 0.08375660620327023),
)
ALPACA_INPUT = LengthDistribution(weights=(1.0,), log_means=(2.29,), log_sigmas=(0.27,))

PRESETS = {
    "sharegpt": (SHAREGPT_INPUT, SHAREGPT_OUTPUT),
    "alpaca": (ALPACA_INPUT, ALPACA_OUTPUT),
}


@dataclass(frozen=True)
class ArrivalProcess:
    kind: str = "poisson"
    rate: float = 0.1  # requests/s
    duration: float = 2000.0  # s
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("poisson", "fixed-interval"):
            raise ValueError(f"arrival kind must be poisson or fixed-interval, got {self.kind!r}")
        if not self.rate > 0:
            raise ValueError("arrival rate must be > 0")
        if not self.duration > 0:
            raise ValueError("arrival duration must be > 0")

    def times(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "fixed-interval":
            return np.arange(0.0, self.duration, 1.0 / self.rate)
        out = []
        t = rng.exponential(1.0 / self.rate)
        while t < self.duration:
            out.append(t)
            t += rng.exponential(1.0 / self.rate)
        return np.asarray(out)


def generate_trace(input_dist: LengthDistribution, output_dist: LengthDistribution,
                   arrivals: ArrivalProcess, max_total: int = MAX_LEN) -> list:
    """Seeded synthetic trace; ``prompt + output`` never exceeds ``max_total``."""
    rng = np.random.default_rng(arrivals.seed)
    times = arrivals.times(rng)
    n = len(times)
    prompts = np.minimum(input_dist.sample(rng, n), max_total - 1)
    outputs = np.clip(output_dist.sample(rng, n), 1, max_total - prompts)
    return [RequestSpec(i, float(t), int(p), int(o))
            for i, (t, p, o) in enumerate(zip(times, prompts, outputs))]


def preset_trace(name: str, rate: float, duration: float, seed: int, kind: str = "poisson") -> list:
    try:
        input_dist, output_dist = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown workload preset {name!r}; choose from {sorted(PRESETS)}") from None
    return generate_trace(input_dist, output_dist, ArrivalProcess(kind, rate, duration, seed))


def scale_rps(base_rps: float, base_instances: int, instances: int) -> float:
    if base_instances < 1 or instances < 1:
        raise ValueError("instance counts must be >= 1")
    return base_rps * instances / base_instances


# ---------- trace files ----------

def _spec_from_record(rec: dict, where: str) -> RequestSpec:
    missing = [f for f in TRACE_FIELDS if f not in rec or rec[f] in (None, "")]
    if missing:
        raise TraceError(f"{where}: missing field {missing[0]!r}")
    values = {}
    for name, conv in (("id", int), ("arrival_s", float), ("prompt_tokens", int), ("output_tokens", int)):
        try:
            values[name] = conv(rec[name])
        except (TypeError, ValueError):
            raise TraceError(f"{where}: field {name!r} is not a valid {conv.__name__}: {rec[name]!r}") from None
    for name in ("prompt_tokens", "output_tokens"):
        if values[name] < 1:
            raise TraceError(f"{where}: field {name!r} must be >= 1, got {values[name]}")
    if not values["arrival_s"] >= 0:
        raise TraceError(f"{where}: field 'arrival_s' must be >= 0")
    return RequestSpec(values["id"], values["arrival_s"], values["prompt_tokens"], values["output_tokens"])


def load_trace(path) -> list:
    """Read a JSONL or CSV trace; the result is sorted by arrival time."""
    path = Path(path)
    text = path.read_text()
    specs = []
    if path.suffix.lower() == ".csv":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or set(TRACE_FIELDS) - set(reader.fieldnames):
            raise TraceError(f"{path}: CSV header must contain {', '.join(TRACE_FIELDS)}")
        for lineno, rec in enumerate(reader, start=2):
            specs.append(_spec_from_record(rec, f"{path}:{lineno}"))
    else:
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"{path}:{lineno}: parse error: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise TraceError(f"{path}:{lineno}: expected a JSON object")
            specs.append(_spec_from_record(rec, f"{path}:{lineno}"))
    seen = set()
    for s in specs:
        if s.id in seen:
            raise TraceError(f"{path}: duplicate request id {s.id}")
        seen.add(s.id)
    return sorted(specs, key=lambda s: (s.arrival_time, s.id))


def _records(trace: Sequence[RequestSpec]):
    for s in trace:
        yield {"id": s.id, "arrival_s": s.arrival_time, "prompt_tokens": s.prompt_len,
               "output_tokens": s.true_output_len}


def save_trace(trace: Sequence[RequestSpec], path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            writer.writeheader()
            writer.writerows(_records(trace))
    else:
        with path.open("w") as fh:
            for rec in _records(trace):
                fh.write(json.dumps(rec) + "\n")


def trace_hash(trace: Sequence[RequestSpec]) -> str:
    h = hashlib.sha256()
    for rec in _records(trace):
        h.update(json.dumps(rec, sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()
