"""Deterministic discrete-event simulator of a prefill/decode cluster.

Decode instances do not schedule one event per iteration. Between two
*boundaries* (a completion, a join, a migration pause, a possible OOM) every
running request gains one token per iteration, so the iteration end times of
the whole stretch are planned at once with a cumulative sum and a single
wake-up event is queued for the last one. Anything that changes the batch
from outside (a join, a migration decision) cuts the plan back to the
iteration in progress. Reads in between (ticks, dispatch, metric samples) use
the number of planned iterations already finished.

Noisy predictions are drawn from a counter-based generator keyed by
``(seed, request, generated-at-refresh)`` so they depend only on when a
refresh happened, not on when the simulator looks at it.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .config import ScenarioConfig
from .core import RequestSpec, migration_time, prefill_time
from .metrics import MetricsReport, RunRecord, build_report
from .predictor import correlated_uniform, predict_array
from .scheduler import ClusterSnapshot, reschedule_tick

# longest stretch planned in one go (iterations)
CHUNK = 2048

ARRIVAL, PREFILL_DONE, DECODE_BOUNDARY, TICK, MIGRATION_DONE, FORCED_MIGRATION = range(6)
KIND_NAMES = ("arrival", "prefill_complete", "decode_iteration", "reschedule_tick",
              "migration_complete", "forced_migration")

_QUEUED, _PREFILLING, _DECODING, _MIGRATING, _PREEMPTED, _FINISHED = range(6)


class SimulationError(RuntimeError):
    pass


class Event(NamedTuple):
    """Queue entry; ``(time, sequence)`` is unique so ties never reach ``kind``."""

    time: float
    sequence: int
    kind: int
    request: int = -1
    instance: int = -1


@dataclass
class _Segment:
    t0: float
    ends: np.ndarray
    latency: np.ndarray
    n: int


@dataclass
class DecodeInstance:
    id: int
    capacity: int
    # resident tokens at the start of the current segment plus later external changes
    res: int = 0
    reserved: int = 0
    running: list = field(default_factory=list)
    pending: list = field(default_factory=list)
    paused: set = field(default_factory=set)
    seg: Optional[_Segment] = None
    version: int = 0
    next_sample: int = 0
    busy_ms: float = 0.0
    predict_ms: float = 0.0

    def committed(self, t: float) -> int:
        if self.seg is None:
            return 0
        return int(np.searchsorted(self.seg.ends, t, side="right"))

    def load(self, t: float) -> int:
        """Resident tokens at ``t`` (paused and pending requests included)."""
        if self.seg is None:
            return self.res
        return self.res + self.seg.n * self.committed(t)


class Simulator:
    def __init__(self, cfg: ScenarioConfig, trace: Sequence[RequestSpec]):
        self.cfg = cfg
        self.cm = cfg.cost
        self.sched = cfg.effective_scheduler
        self.pred = cfg.effective_predictor
        # scenario seed and predictor seed both select the noise stream
        self.noise_seed = (cfg.seed << 32) ^ self.pred.rng_seed
        self.k = self.pred.refresh_interval
        # the oracle is hypothetical and costs nothing to run
        self.charge_prediction = cfg.uses_prediction and self.pred.kind != "oracle"
        self._validate(trace)

        self.specs = list(trace)
        self.ids = np.array([s.id for s in trace], dtype=np.int64)
        self.prompt = np.array([s.prompt_len for s in trace], dtype=np.int64)
        self.out = np.array([s.true_output_len for s in trace], dtype=np.int64)
        self.arrival_ms = np.array([s.arrival_time * 1000.0 for s in trace], dtype=float)
        self.index = {s.id: i for i, s in enumerate(trace)}
        r = len(trace)
        self.gen = np.zeros(r, dtype=np.int64)
        self.anchor = np.zeros(r, dtype=np.int64)
        self.where = np.full(r, -1, dtype=np.int64)
        self.phase = np.zeros(r, dtype=np.int8)
        self.leaving = np.zeros(r, dtype=bool)
        self.first_t = np.full(r, np.nan)
        self.last_t = np.full(r, np.nan)
        self.max_gap = np.zeros(r)
        self.finish_t = np.full(r, np.nan)
        self.migrated_at = np.full(r, -np.inf)
        self.migrations = np.zeros(r, dtype=np.int64)
        self.preemptions = np.zeros(r, dtype=np.int64)
        self.record_tokens = cfg.record_tokens or cfg.goodput_mode == "p99"
        self.timestamps = [[] for _ in range(r)] if self.record_tokens else None
        # request -> (kind, stall ms) for the next token gap
        self.resume: dict = {}
        # request -> (target position, reserved tokens)
        self.reservations: dict = {}

        self.decode = [DecodeInstance(i, cfg.mem_capacity) for i in range(cfg.n_decode)]
        self.prefill_free = [0.0] * cfg.n_prefill
        self.waiting: deque = deque()
        self.queue: list = []
        self.seq = 0
        self.now = 0.0
        self.unfinished = r

        self.events: Optional[list] = [] if cfg.event_log else None
        self.oom_count = 0
        self.migration_log: list = []  # dicts per completed migration
        self.preempt_gaps: list = []
        self.dt = cfg.sample_interval
        self.samples = np.zeros((1024, cfg.n_decode))

    # ---------- setup ----------

    def _validate(self, trace):
        prev = -math.inf
        for s in trace:
            if s.arrival_time < prev:
                raise ValueError("trace must be sorted by arrival_time")
            prev = s.arrival_time
            if s.prompt_len + s.true_output_len + 1 > self.cfg.mem_capacity:
                raise ValueError(
                    f"request {s.id} needs {s.prompt_len + s.true_output_len} tokens, "
                    f"more than mem_capacity {self.cfg.mem_capacity}")
        if len({s.id for s in trace}) != len(trace):
            raise ValueError("trace has duplicate request ids")

    def push(self, time: float, kind: int, request: int = -1, instance: int = -1) -> None:
        heapq.heappush(self.queue, Event(time, self.seq, kind, request, instance))
        self.seq += 1

    def log(self, kind: str, request: int = -1, instance: int = -1) -> None:
        if self.events is not None:
            self.events.append({"time": self.now, "kind": kind,
                                "request": None if request < 0 else int(self.ids[request]),
                                "instance": None if instance < 0 else int(instance)})

    def force_migration(self, at_ms: float, request_id: int, target: int) -> None:
        """Queue a migration decision independent of the policy (test fixtures)."""
        self.push(at_ms, FORCED_MIGRATION, self.index[request_id], target)

    # ---------- main loop ----------

    def run(self) -> RunRecord:
        for i in range(len(self.specs)):
            self.push(self.arrival_ms[i], ARRIVAL, i)
        if len(self.specs):
            self.push(self.sched.reschedule_interval, TICK)
        handlers = (self._on_arrival, self._on_prefill_done, self._on_boundary, self._on_tick,
                    self._on_migration_done, self._on_forced)
        while self.queue:
            ev = heapq.heappop(self.queue)
            if ev.time < self.now:
                raise SimulationError("event scheduled in the past")
            self.now = ev.time
            handlers[ev.kind](ev)
            if self.cfg.debug_checks:
                self._check()
        if self.unfinished:
            raise SimulationError(f"{self.unfinished} requests never finished")
        if int(self.gen.sum()) != int(self.out.sum()):
            raise SimulationError("token conservation violated")
        end = max(self.now, self.cfg.duration * 1000.0)
        for inst in self.decode:
            self._flush(inst, end + self.dt * 0.5)
        return self._record()

    # ---------- prefill ----------

    def _on_arrival(self, ev: Event) -> None:
        self.log("arrival", ev.request)
        self._enqueue_prefill(ev.request, prefill_time(self.cm, self.prompt[ev.request]))

    def _enqueue_prefill(self, r: int, duration: float) -> None:
        p = min(range(len(self.prefill_free)), key=lambda i: (self.prefill_free[i], i))
        start = max(self.now, self.prefill_free[p])
        self.prefill_free[p] = start + duration
        self.phase[r] = _PREFILLING if start <= self.now else _QUEUED
        self.push(start + duration, PREFILL_DONE, r, p)

    def _on_prefill_done(self, ev: Event) -> None:
        r = ev.request
        self.log("prefill_complete", r, ev.instance)
        self.phase[r] = _QUEUED
        if self.waiting or not self._dispatch(r):
            self.waiting.append(r)

    # ---------- predictions ----------

    def _remaining(self, rs: np.ndarray, gen: np.ndarray) -> np.ndarray:
        """Current N-hat for requests ``rs`` that have generated ``gen`` tokens."""
        since = gen - self.anchor[rs]
        at = self.anchor[rs] + (since // self.k) * self.k
        u = correlated_uniform(self.noise_seed, self.ids[rs], at, self.pred.error_correlation)
        pred = predict_array(self.pred, self.out[rs] - at, at, u, self.prompt[rs])
        return np.maximum(1, pred - (gen - at))

    # ---------- dispatch ----------

    def _dispatch(self, r: int) -> bool:
        loads = [inst.load(self.now) for inst in self.decode]
        target = min(range(len(loads)), key=lambda i: (loads[i], i))
        inst = self.decode[target]
        tokens = int(self.prompt[r] + self.gen[r])
        empty = loads[target] == 0 and inst.reserved == 0
        need = loads[target] + inst.reserved + tokens
        if self.cfg.uses_prediction:
            self.anchor[r] = self.gen[r]
            need += int(self._remaining(np.array([r]), self.gen[r:r + 1])[0])
        if not empty and need > inst.capacity:
            return False
        self.anchor[r] = self.gen[r]
        self.phase[r] = _DECODING
        self.where[r] = target
        self.log("dispatch", r, target)
        self._flush(inst, self.now)
        inst.res += tokens
        self._join(inst, r)
        return True

    def _drain_waiting(self) -> None:
        while self.waiting and self._dispatch(self.waiting[0]):
            self.waiting.popleft()

    def _join(self, inst: DecodeInstance, r: int) -> None:
        if inst.seg is None:
            inst.running.append(r)
            self._plan(inst, self.now)
        else:
            inst.pending.append(r)
            self._truncate(inst)

    # ---------- decode planning ----------

    def _plan(self, inst: DecodeInstance, t0: float) -> None:
        idx = np.asarray(inst.running, dtype=np.int64)
        n = len(idx)
        g0 = self.gen[idx]
        until_done = int((self.out[idx] - g0).min())
        free = inst.capacity - inst.res - inst.reserved
        until_oom = free // n + 1 if free >= 0 else 1
        d = max(1, min(until_done, until_oom, CHUNK))
        run_tokens = float((self.prompt[idx] + g0).sum())
        dur = self.cm.iter_base + self.cm.iter_per_token * (run_tokens + n * np.arange(d, dtype=float))
        if self.charge_prediction:
            lat = self._refresh_latency(idx, g0, d)
            dur = dur + lat
        else:
            lat = np.zeros(d)
        ends = np.cumsum(np.concatenate(([t0], dur)))[1:]
        inst.seg = _Segment(t0, ends, lat, n)
        inst.version += 1
        self.push(float(ends[-1]), DECODE_BOUNDARY, inst.version, inst.id)

    def _refresh_latency(self, idx: np.ndarray, g0: np.ndarray, d: int) -> np.ndarray:
        k = self.k
        since = g0 - self.anchor[idx]
        first = (-since) % k
        # the prediction made at dispatch is charged to prefill, not decode
        late = (first == 0) & (since == 0)
        hist = np.bincount(first, minlength=k)
        counts = np.tile(hist, d // k + 1)[:d].astype(float)
        counts[0] -= late.sum()
        cm = self.cm
        return np.where(counts > 0, cm.predict_latency + cm.predict_latency_per_request * counts, 0.0)

    def _truncate(self, inst: DecodeInstance) -> None:
        """End the current plan with the iteration in progress."""
        seg = inst.seg
        if seg is None:
            return
        c = inst.committed(self.now)
        if c >= len(seg.ends):
            return  # boundary is due at this instant; its event is already queued
        seg.ends = seg.ends[:c + 1]
        seg.latency = seg.latency[:c + 1]
        inst.version += 1
        self.push(float(seg.ends[-1]), DECODE_BOUNDARY, inst.version, inst.id)

    # ---------- decode boundary ----------

    def _on_boundary(self, ev: Event) -> None:
        inst = self.decode[ev.instance]
        if ev.request != inst.version or inst.seg is None:
            return  # superseded plan
        seg = inst.seg
        self._flush(inst, self.now)
        d = len(seg.ends)
        n = seg.n
        idx = np.asarray(inst.running, dtype=np.int64)
        before_last = inst.res + (d - 1) * n

        victims = []
        if before_last + inst.reserved + n > inst.capacity:
            victims = self._pick_victims(inst, idx, before_last, d)
        vset = set(victims)
        keep = np.array([r not in vset for r in inst.running], dtype=bool)
        surv = idx[keep]
        lost = idx[~keep]

        self._materialize(surv, seg.ends, seg.t0)
        if len(lost):
            self._materialize(lost, seg.ends[:-1], seg.t0)
        inst.res = before_last + len(surv)
        inst.busy_ms += float(seg.ends[-1] - seg.t0)
        inst.predict_ms += float(seg.latency.sum())
        inst.seg = None
        pending = [r for r in inst.pending if r not in vset]
        inst.pending = []

        for r in victims:
            self._preempt(inst, r)

        released = bool(victims)
        still = []
        for r in surv.tolist():
            if self.gen[r] == self.out[r]:
                self._finish(inst, r)
                released = True
            elif self.leaving[r]:
                self._pause(inst, r)
            else:
                still.append(r)
        inst.running = still + pending
        if inst.running:
            self._plan(inst, self.now)
        if released:
            self._drain_waiting()

    def _pick_victims(self, inst: DecodeInstance, idx: np.ndarray, before_last: int, d: int) -> list:
        running = set(idx.tolist())
        pool = [r for r in list(inst.running) + inst.pending if not self.leaving[r]]
        pool.sort(key=lambda r: (self.arrival_ms[r], self.ids[r]), reverse=True)
        load, n = before_last, len(idx)
        victims = []
        for r in pool:
            if load + inst.reserved + n <= inst.capacity:
                break
            if r in running:
                load -= int(self.prompt[r] + self.gen[r] + d - 1)
                n -= 1
            else:
                load -= int(self.prompt[r] + self.gen[r])
            victims.append(r)
        return victims

    def _materialize(self, rs: np.ndarray, ends: np.ndarray, t0: float) -> None:
        """Credit requests ``rs`` with one token at each of ``ends``; the
        first of those iterations started at ``t0``."""
        cnt = len(ends)
        if cnt == 0 or len(rs) == 0:
            return
        last = self.last_t[rs]
        gap0 = ends[0] - last
        inner = float(np.diff(ends).max()) if cnt > 1 else 0.0
        self.max_gap[rs] = np.fmax(self.max_gap[rs], np.fmax(gap0, inner))
        self.first_t[rs] = np.where(np.isnan(self.first_t[rs]), ends[0], self.first_t[rs])
        self.last_t[rs] = ends[-1]
        self.gen[rs] += cnt
        if self.resume:
            for j, r in enumerate(rs.tolist()):
                info = self.resume.pop(r, None)
                if info is not None:
                    self._resumed(r, info, float(gap0[j]), t0 - float(last[j]))
        if self.timestamps is not None:
            tl = ends.tolist()
            for r in rs.tolist():
                self.timestamps[r].extend(tl)

    def _resumed(self, r: int, info: tuple, gap: float, idle: float) -> None:
        # idle: from the last token before the pause to the start of the resuming iteration
        kind, stall, rec = info
        if kind == "migration":
            rec["resume_gap"] = gap
            rec["stall_ms"] = idle
            rec["transfer_fraction"] = stall / gap if gap > 0 else 1.0
        elif not math.isnan(gap):
            self.preempt_gaps.append({"request": int(self.ids[r]), "gap": gap, "recompute": stall})

    def _finish(self, inst: DecodeInstance, r: int) -> None:
        self._flush(inst, self.now)
        inst.res -= int(self.prompt[r] + self.gen[r])
        self.phase[r] = _FINISHED
        self.where[r] = -1
        self.finish_t[r] = self.now
        self.unfinished -= 1
        if self.leaving[r]:
            pos, amount = self.reservations.pop(r)
            self.decode[pos].reserved -= amount
            self.leaving[r] = False
        self.log("finish", r, inst.id)

    def _preempt(self, inst: DecodeInstance, r: int) -> None:
        tokens = int(self.prompt[r] + self.gen[r])
        inst.res -= tokens
        self.phase[r] = _PREEMPTED
        self.where[r] = -1
        self.preemptions[r] += 1
        self.oom_count += 1
        self.log("oom_preempt", r, inst.id)
        recompute = prefill_time(self.cm, tokens)
        self.resume[r] = ("preemption", recompute, None)
        self._enqueue_prefill(r, recompute)

    def _pause(self, inst: DecodeInstance, r: int) -> None:
        inst.paused.add(r)
        self.phase[r] = _MIGRATING
        transfer = migration_time(self.cm, int(self.prompt[r] + self.gen[r]))
        self.log("migration_start", r, inst.id)
        self.push(self.now + transfer, MIGRATION_DONE, r, inst.id)

    # ---------- migrations ----------

    def _decide(self, r: int, target: int, tokens: int) -> bool:
        src = self.decode[int(self.where[r])]
        tgt = self.decode[target]
        if self.leaving[r] or r not in src.running or target == src.id:
            return False
        amount = tokens + 1  # room for the token still in flight on the source
        self.leaving[r] = True
        self.reservations[r] = (target, amount)
        tgt.reserved += amount
        self.log("migration_decision", r, target)
        self._truncate(src)
        self._truncate(tgt)
        return True

    def _on_migration_done(self, ev: Event) -> None:
        r = ev.request
        src = self.decode[ev.instance]
        pos, amount = self.reservations.pop(r)
        tgt = self.decode[pos]
        tokens = int(self.prompt[r] + self.gen[r])
        self._flush(src, self.now)
        self._flush(tgt, self.now)
        src.paused.discard(r)
        src.res -= tokens
        tgt.reserved -= amount
        tgt.res += tokens
        self.where[r] = pos
        self.phase[r] = _DECODING
        self.leaving[r] = False
        self.migrated_at[r] = self.now
        self.migrations[r] += 1
        transfer = migration_time(self.cm, tokens)
        rec = {"request": int(self.ids[r]), "source": src.id, "target": tgt.id, "tokens": tokens,
               "transfer_ms": transfer, "resume_gap": None, "stall_ms": None,
               "transfer_fraction": None}
        self.migration_log.append(rec)
        self.resume[r] = ("migration", transfer, rec)
        self.log("migration_complete", r, tgt.id)
        self._join(tgt, r)
        self._drain_waiting()

    def _on_forced(self, ev: Event) -> None:
        r = ev.request
        if self.phase[r] != _DECODING:
            raise SimulationError(f"forced migration of request {self.ids[r]} that is not decoding")
        src = self.decode[int(self.where[r])]
        tokens = int(self.prompt[r] + self.gen[r]) + (src.committed(self.now) if r in src.running else 0)
        if not self._decide(r, ev.instance, tokens):
            raise SimulationError(f"forced migration of request {self.ids[r]} rejected")

    # ---------- rescheduling ----------

    def snapshot(self) -> ClusterSnapshot:
        t = self.now
        rid, pos, gen, mov = [], [], [], []
        for p, inst in enumerate(self.decode):
            c = inst.committed(t)
            if inst.running:
                rs = np.asarray(inst.running, dtype=np.int64)
                rid.append(rs)
                pos.append(np.full(len(rs), p))
                gen.append(self.gen[rs] + c)
                mov.append(~self.leaving[rs] & (t - self.migrated_at[rs] >= self.sched.cooldown))
            other = np.asarray(inst.pending + sorted(inst.paused), dtype=np.int64)
            if len(other):
                rid.append(other)
                pos.append(np.full(len(other), p))
                gen.append(self.gen[other])
                mov.append(np.zeros(len(other), dtype=bool))
        caps = [i.capacity for i in self.decode]
        resv = [i.reserved for i in self.decode]
        iids = np.arange(len(self.decode))
        if not rid:
            e = np.zeros(0)
            return ClusterSnapshot.build(iids, caps, resv, e, e, e, e, e)
        rs = np.concatenate(rid)
        g = np.concatenate(gen)
        if self.sched.use_prediction:
            rem = self._remaining(rs, g).astype(float)
        else:
            rem = np.full(len(rs), np.inf)
        return ClusterSnapshot.build(iids, caps, resv, self.ids[rs], np.concatenate(pos),
                                     self.prompt[rs] + g, rem, np.concatenate(mov))

    def _on_tick(self, ev: Event) -> None:
        if self.cfg.reschedules:
            snap = self.snapshot()
            if len(snap.req_ids):
                for dec in reschedule_tick(snap, self.cm, self.sched):
                    self._decide(self.index[dec.request], dec.target, dec.transfer_tokens)
        self._drain_waiting()
        if self.unfinished:
            self.push(self.now + self.sched.reschedule_interval, TICK)

    # ---------- metrics ----------

    def _flush(self, inst: DecodeInstance, t: float) -> None:
        """Write load samples for sample times before ``t``."""
        stop = int(math.ceil(t / self.dt - 1e-12))
        k0 = inst.next_sample
        if stop <= k0:
            return
        if stop > len(self.samples):
            grow = max(stop, 2 * len(self.samples))
            self.samples = np.vstack([self.samples, np.zeros((grow - len(self.samples), len(self.decode)))])
        times = np.arange(k0, stop) * self.dt
        if inst.seg is None:
            self.samples[k0:stop, inst.id] = inst.res
        else:
            done = np.searchsorted(inst.seg.ends, times, side="right")
            self.samples[k0:stop, inst.id] = inst.res + inst.seg.n * done
        inst.next_sample = stop

    def _check(self) -> None:
        seen = set()
        for inst in self.decode:
            members = inst.running + inst.pending + sorted(inst.paused)
            if seen.intersection(members) or len(set(members)) != len(members):
                raise SimulationError("request resident on more than one instance")
            seen.update(members)
            expect = int((self.prompt[members] + self.gen[members]).sum()) if members else 0
            if inst.res != expect:
                raise SimulationError(f"instance {inst.id}: resident load out of sync")
            if inst.seg is None and inst.res + inst.reserved > inst.capacity:
                raise SimulationError(f"instance {inst.id}: memory invariant violated")
            if inst.reserved < 0:
                raise SimulationError(f"instance {inst.id}: negative reservation")
        if np.any(self.gen > self.out):
            raise SimulationError("request generated past its output length")

    def _record(self) -> RunRecord:
        nsamp = max(inst.next_sample for inst in self.decode)
        return RunRecord(
            ids=self.ids, prompt=self.prompt, output=self.out, arrival_ms=self.arrival_ms,
            first_token_ms=self.first_t, last_token_ms=self.last_t, finish_ms=self.finish_t,
            max_gap_ms=self.max_gap, migrations=self.migrations, preemptions=self.preemptions,
            samples=self.samples[:nsamp].copy(), sample_interval=self.dt,
            oom_count=self.oom_count, migration_log=self.migration_log,
            preempt_gaps=self.preempt_gaps,
            busy_ms=float(sum(i.busy_ms for i in self.decode)),
            predict_ms=float(sum(i.predict_ms for i in self.decode)),
            events=self.events, timestamps=self.timestamps,
        )


def simulate(cfg: ScenarioConfig, trace: Sequence[RequestSpec], forced: Sequence[tuple] = ()) -> RunRecord:
    """Run a scenario and return the raw record. ``forced`` holds
    ``(time_ms, request_id, target)`` migrations injected regardless of policy."""
    sim = Simulator(cfg, trace)
    for at, rid, tgt in forced:
        sim.force_migration(at, rid, tgt)
    return sim.run()


def run(cfg: ScenarioConfig, trace: Sequence[RequestSpec], trace_hash: str = "") -> MetricsReport:
    return build_report(cfg, simulate(cfg, trace), trace_hash)
