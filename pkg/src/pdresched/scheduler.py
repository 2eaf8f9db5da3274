"""Prefill-to-decode assignment and decode-to-decode rescheduling.

The rescheduler works on an immutable :class:`ClusterSnapshot` of array
columns so a tick over hundreds of instances stays cheap. Moving request
``r`` from ``s`` to ``u`` leaves the cluster mean unchanged, so the change in
population variance at projection step ``t`` is::

    (2 / n) * (c_t**2 + c_t * (P_u,t - P_s,t))

where ``c_t`` is the request's projected load and ``P`` the per-instance
projection. Summed with the beta weights this scores every candidate with one
matrix product instead of re-evaluating the whole cluster per move.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import BetaSchedule, CostModel, InstanceState, Phase, RequestState

# relative tolerance under which two candidate scores count as a tie
TIE_RTOL = 1e-9


class SnapshotError(ValueError):
    pass


@dataclass(frozen=True)
class SchedulerConfig:
    theta: float = 0.1
    beta: BetaSchedule = field(default_factory=BetaSchedule)
    reschedule_interval: float = 1000.0  # ms
    # None: per-candidate KV transfer time; a number: constant C_mig in ms
    migration_cost: Optional[float] = None
    # memory filter on target load + predicted remaining only, ignoring the moved KV
    strict_memory_filter: bool = False
    max_migrations_per_tick: int = 1
    use_prediction: bool = True
    # a request that finished a migration less than this many ms ago stays put
    cooldown: float = 0.0

    def __post_init__(self):
        if not self.theta >= 0:
            raise ValueError("scheduler.theta must be >= 0")
        if not self.reschedule_interval > 0:
            raise ValueError("scheduler.reschedule_interval must be > 0")
        if self.max_migrations_per_tick < 1:
            raise ValueError("scheduler.max_migrations_per_tick must be >= 1")
        if self.migration_cost is not None and self.migration_cost < 0:
            raise ValueError("scheduler.migration_cost must be >= 0")
        if self.cooldown < 0:
            raise ValueError("scheduler.cooldown must be >= 0")

    @property
    def horizon(self) -> int:
        return self.beta.horizon if self.use_prediction else 0


@dataclass(frozen=True)
class MigrationDecision:
    request: int
    source: int
    target: int
    predicted_variance_after: float
    transfer_tokens: int

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError("migration source and target must differ")


@dataclass(frozen=True, eq=False)
class ClusterSnapshot:
    """Column view of the decode cluster at one instant.

    ``req_instance`` holds positions into the instance arrays, not ids.
    ``req_remaining`` is ``inf`` for requests without a prediction.
    """

    instance_ids: np.ndarray
    capacity: np.ndarray
    reserved: np.ndarray
    req_ids: np.ndarray
    req_instance: np.ndarray
    req_tokens: np.ndarray
    req_remaining: np.ndarray
    req_movable: np.ndarray

    def __post_init__(self):
        n = len(self.instance_ids)
        if n == 0:
            raise SnapshotError("snapshot has no instances")
        if len(self.capacity) != n or len(self.reserved) != n:
            raise SnapshotError("instance columns have mismatched lengths")
        r = len(self.req_ids)
        for name in ("req_instance", "req_tokens", "req_remaining", "req_movable"):
            if len(getattr(self, name)) != r:
                raise SnapshotError(f"{name} length does not match req_ids")
        if len(np.unique(self.instance_ids)) != n:
            raise SnapshotError("duplicate instance ids")
        if len(np.unique(self.req_ids)) != r:
            raise SnapshotError("a request is resident on more than one instance")
        if r and (self.req_instance.min() < 0 or self.req_instance.max() >= n):
            raise SnapshotError("request assigned to an unknown instance")

    @classmethod
    def build(cls, instance_ids, capacity, reserved, req_ids, req_instance, req_tokens,
              req_remaining, req_movable) -> "ClusterSnapshot":
        return cls(
            np.asarray(instance_ids, dtype=np.int64),
            np.asarray(capacity, dtype=float),
            np.asarray(reserved, dtype=float),
            np.asarray(req_ids, dtype=np.int64),
            np.asarray(req_instance, dtype=np.int64),
            np.asarray(req_tokens, dtype=float),
            np.asarray(req_remaining, dtype=float),
            np.asarray(req_movable, dtype=bool),
        )

    @classmethod
    def from_states(cls, instances: Sequence[InstanceState],
                    requests: Mapping[int, RequestState]) -> "ClusterSnapshot":
        """Snapshot a list of instances; only decoding requests are movable."""
        seen = set()
        cols = ([], [], [], [], [])
        for pos, inst in enumerate(instances):
            for rid in sorted(inst.batch):
                if rid in seen:
                    raise SnapshotError(f"request {rid} is resident on more than one instance")
                seen.add(rid)
                try:
                    req = requests[rid]
                except KeyError:
                    raise SnapshotError(f"instance {inst.id} holds unknown request {rid}") from None
                rem = req.predicted_remaining
                cols[0].append(rid)
                cols[1].append(pos)
                cols[2].append(req.tokens)
                cols[3].append(np.inf if rem is None else rem)
                cols[4].append(req.phase is Phase.DECODING)
        return cls.build([i.id for i in instances], [i.mem_capacity for i in instances],
                         [i.reserved for i in instances], *cols)

    @property
    def n_instances(self) -> int:
        return len(self.instance_ids)

    @cached_property
    def loads(self) -> np.ndarray:
        return np.bincount(self.req_instance, weights=self.req_tokens, minlength=self.n_instances)

    def positions(self, ids: Iterable[int]) -> np.ndarray:
        index = {int(i): p for p, i in enumerate(self.instance_ids)}
        return np.array(sorted(index[int(i)] for i in ids), dtype=np.int64)

    def moved(self, req_pos: int, target_pos: int) -> "ClusterSnapshot":
        """The snapshot after moving one request; the moved request is pinned."""
        inst = self.req_instance.copy()
        inst[req_pos] = target_pos
        movable = self.req_movable.copy()
        movable[req_pos] = False
        return replace(self, req_instance=inst, req_movable=movable)


@dataclass(frozen=True)
class Candidates:
    """Candidate moves as parallel arrays of snapshot positions."""

    req: np.ndarray
    src: np.ndarray
    tgt: np.ndarray

    def __len__(self) -> int:
        return len(self.req)

    def triples(self, snap: ClusterSnapshot) -> list:
        return [(int(snap.req_ids[r]), int(snap.instance_ids[s]), int(snap.instance_ids[t]))
                for r, s, t in zip(self.req, self.src, self.tgt)]


_EMPTY = np.zeros(0, dtype=np.int64)


# ---------- prefill-to-decode assignment ----------

def assign_round_robin(counter: int, n_instances: int) -> int:
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    return counter % n_instances


def assign_current_load(snap: ClusterSnapshot) -> int:
    """Instance with the smallest token load; ties go to the lowest id."""
    order = np.lexsort((snap.instance_ids, snap.loads))
    return int(snap.instance_ids[order[0]])


# ---------- projection ----------

def _step_weights(cfg: SchedulerConfig) -> np.ndarray:
    return np.concatenate(([1.0], cfg.beta.weights)) if cfg.horizon else np.ones(1)


def contributions(snap: ClusterSnapshot, cfg: SchedulerConfig) -> np.ndarray:
    """Per-request projected load, shape (requests, horizon + 1); column 0 is now."""
    t = np.arange(cfg.horizon + 1, dtype=float) * cfg.beta.step
    alive = t[None, :] < snap.req_remaining[:, None]
    alive[:, 0] = True
    return np.where(alive, snap.req_tokens[:, None] + t[None, :], 0.0)


def projection(snap: ClusterSnapshot, contrib: np.ndarray) -> np.ndarray:
    """Per-instance projected load, shape (instances, horizon + 1)."""
    n = snap.n_instances
    return np.stack(
        [np.bincount(snap.req_instance, weights=contrib[:, j], minlength=n)
         for j in range(contrib.shape[1])],
        axis=1,
    ) if len(snap.req_ids) else np.zeros((n, contrib.shape[1]))


def snapshot_weighted_variance(snap: ClusterSnapshot, cfg: SchedulerConfig) -> float:
    proj = projection(snap, contributions(snap, cfg))
    return float(proj.var(axis=0) @ _step_weights(cfg))


# ---------- phase 1: classification ----------

def _classify(proj: np.ndarray, cfg: SchedulerConfig) -> tuple:
    loads = proj[:, 0]
    work = proj[:, 1:] @ cfg.beta.weights if cfg.horizon else loads
    bar = (1.0 + cfg.theta) * work.mean()
    over = work > bar
    under = (loads < bar) & ~over
    return over, under


def classify_instances(snap: ClusterSnapshot, cfg: SchedulerConfig) -> tuple:
    """(overloaded ids, underloaded ids) as frozensets."""
    over, under = _classify(projection(snap, contributions(snap, cfg)), cfg)
    ids = snap.instance_ids
    return frozenset(int(i) for i in ids[over]), frozenset(int(i) for i in ids[under])


# ---------- phase 2: candidate enumeration ----------

def _as_mask(snap: ClusterSnapshot, sel) -> np.ndarray:
    if isinstance(sel, np.ndarray) and sel.dtype == bool:
        return sel
    mask = np.zeros(snap.n_instances, dtype=bool)
    mask[snap.positions(sel)] = True
    return mask


def enumerate_candidates(over, under, snap: ClusterSnapshot, cm: CostModel,
                         cfg: SchedulerConfig) -> Candidates:
    """Every (r, s, t) with s overloaded, t underloaded and r on s passing both
    filters: enough predicted remaining tokens to amortise the transfer, and
    room on the target for the request's whole predicted footprint."""
    over = _as_mask(snap, over)
    under = _as_mask(snap, under)
    if over.any() and (over & under).any():
        raise ValueError("overloaded and underloaded sets must be disjoint")
    rows = np.nonzero(snap.req_movable & over[snap.req_instance])[0]
    cols = np.nonzero(under)[0]
    if len(rows) == 0 or len(cols) == 0:
        return Candidates(_EMPTY, _EMPTY, _EMPTY)

    tokens = snap.req_tokens[rows]
    target_load = snap.loads[cols]
    if cfg.use_prediction:
        remaining = snap.req_remaining[rows]
        if cfg.migration_cost is None:
            cmig = tokens * (cm.kv_bytes_per_token * 8.0 / cm.bandwidth * 1000.0)
        else:
            cmig = np.full(len(rows), float(cfg.migration_cost))
        texec = cm.iter_base + cm.iter_per_token * target_load
        ok = remaining[:, None] > cmig[:, None] / texec[None, :]
    else:
        remaining = np.zeros(len(rows))
        ok = np.ones((len(rows), len(cols)), dtype=bool)

    capacity = snap.capacity[cols]
    if cfg.strict_memory_filter:
        need = target_load[None, :] + remaining[:, None]
    else:
        need = (target_load + snap.reserved[cols])[None, :] + (tokens + remaining)[:, None]
    ok &= need <= capacity[None, :]

    ri, ci = np.nonzero(ok)
    req = rows[ri]
    return Candidates(req, snap.req_instance[req], cols[ci])


# ---------- phase 3: optimal selection ----------

def _select(cands: Candidates, snap: ClusterSnapshot, cfg: SchedulerConfig,
            contrib: np.ndarray, proj: np.ndarray) -> Optional[MigrationDecision]:
    if len(cands) == 0:
        return None
    w = _step_weights(cfg)
    rows, local = np.unique(cands.req, return_inverse=True)
    cw = contrib[rows] * w
    own = (cw * contrib[rows]).sum(axis=1)
    at_src = (cw * proj[snap.req_instance[rows]]).sum(axis=1)
    at_any = cw @ proj.T
    delta = (2.0 / snap.n_instances) * (own[local] + at_any[local, cands.tgt] - at_src[local])

    base = float(proj.var(axis=0) @ w)
    tol = TIE_RTOL * max(1.0, abs(base))
    best = delta.min()
    if not best < -tol:
        return None
    ties = np.nonzero(delta <= best + tol)[0]
    rid = snap.req_ids[cands.req[ties]]
    tid = snap.instance_ids[cands.tgt[ties]]
    pick = ties[np.lexsort((tid, rid))[0]]
    r = cands.req[pick]
    return MigrationDecision(
        request=int(snap.req_ids[r]),
        source=int(snap.instance_ids[cands.src[pick]]),
        target=int(snap.instance_ids[cands.tgt[pick]]),
        predicted_variance_after=base + float(delta[pick]),
        transfer_tokens=int(snap.req_tokens[r]),
    )


def select_optimal(cands: Candidates, snap: ClusterSnapshot,
                   cfg: SchedulerConfig) -> Optional[MigrationDecision]:
    """The candidate with the lowest post-move weighted variance, if it beats
    not moving at all. Near-ties go to the lowest (request id, target id)."""
    contrib = contributions(snap, cfg)
    return _select(cands, snap, cfg, contrib, projection(snap, contrib))


def reschedule_tick(snap: ClusterSnapshot, cm: CostModel, cfg: SchedulerConfig) -> list:
    decisions = []
    pos = {int(r): k for k, r in enumerate(snap.req_ids)}
    for _ in range(cfg.max_migrations_per_tick):
        contrib = contributions(snap, cfg)
        proj = projection(snap, contrib)
        over, under = _classify(proj, cfg)
        if not over.any():
            break
        decision = _select(enumerate_candidates(over, under, snap, cm, cfg), snap, cfg, contrib, proj)
        if decision is None:
            break
        decisions.append(decision)
        snap = snap.moved(pos[decision.request], int(snap.positions([decision.target])[0]))
    return decisions
