"""Independent brute-force reference for the rescheduler, built only on the
object-level functions in ``pdresched.core``."""

import numpy as np

from pdresched.core import (BetaSchedule, InstanceState, Phase, RequestSpec, RequestState,
                            iter_time, migration_time, project_load, token_load, weighted_variance)

from pdresched.scheduler import Candidates

RTOL = 1e-9


def make_cluster(fixture):
    """fixture: list of instances, each ``(capacity, reserved, [(rid, tokens, remaining), ...])``."""
    insts, reqs = [], {}
    for i, (cap, reserved, rs) in enumerate(fixture):
        batch = set()
        for rid, tokens, rem in rs:
            spec = RequestSpec(rid, 0.0, tokens, 10**9)
            reqs[rid] = RequestState(spec, generated=0, phase=Phase.DECODING, instance=i,
                                     predicted_remaining=rem)
            batch.add(rid)
        insts.append(InstanceState(i, cap, batch, reserved))
    return insts, reqs


def classify(insts, reqs, sched: BetaSchedule, theta: float):
    w = [sum(b * project_load(i, reqs, t, sched.step) for t, b in enumerate(sched.weights, 1))
         for i in insts]
    if sched.horizon == 0:
        w = [token_load(i, reqs) for i in insts]
    bar = (1 + theta) * sum(w) / len(w)
    over = {i.id for i, wi in zip(insts, w) if wi > bar}
    under = {i.id for i in insts if token_load(i, reqs) < bar and i.id not in over}
    return over, under


def candidates(insts, reqs, over, under, cm, use_prediction=True):
    out = []
    for s in insts:
        if s.id not in over:
            continue
        for rid in sorted(s.batch):
            r = reqs[rid]
            for t in insts:
                if t.id not in under:
                    continue
                load_t = token_load(t, reqs)
                rem = r.predicted_remaining if use_prediction else 0
                if use_prediction and not rem > migration_time(cm, r.tokens) / iter_time(cm, load_t):
                    continue
                if load_t + t.reserved + r.tokens + rem > t.mem_capacity:
                    continue
                out.append((rid, s.id, t.id))
    return out


def moved_variance(insts, reqs, rid, s, t, sched):
    after = [InstanceState(i.id, i.mem_capacity, set(i.batch), i.reserved) for i in insts]
    after[s].batch.discard(rid)
    after[t].batch.add(rid)
    return weighted_variance(after, reqs, sched)


def best_move(insts, reqs, cands, sched):
    """Exhaustive argmin over candidates; None unless it strictly beats not moving."""
    base = weighted_variance(insts, reqs, sched)
    tol = RTOL * max(1.0, abs(base))
    scored = [(moved_variance(insts, reqs, r, s, t, sched), r, s, t) for r, s, t in cands]
    if not scored:
        return None
    best = min(v for v, *_ in scored)
    if not best < base - tol:
        return None
    ties = [(r, t, s, v) for v, r, s, t in scored if v <= best + tol]
    r, t, s, v = min(ties)
    return r, s, t, v


# ---------- fixtures ----------

def random_fixture(rng, max_inst=5, max_req=20, horizon=6):
    n = int(rng.integers(2, max_inst + 1))
    n_req = int(rng.integers(1, max_req + 1))
    place = rng.integers(0, n, n_req)
    # few distinct sizes so exact ties are common
    tokens = rng.choice([50, 100, 200, 400, 800], n_req)
    rem = rng.choice([1, 2, 3, horizon, 50, 10_000], n_req)
    fixture = []
    rid = 0
    for i in range(n):
        rs = []
        for k in np.nonzero(place == i)[0]:
            rs.append((rid, int(tokens[k]), int(rem[k])))
            rid += 1
        cap = int(rng.choice([2000, 5000, 10**6]))
        fixture.append((cap, int(rng.choice([0, 0, 300])), rs))
    return fixture


def all_pairs(snap):
    req, src, tgt = [], [], []
    for r in range(len(snap.req_ids)):
        for t in range(snap.n_instances):
            if t != snap.req_instance[r]:
                req.append(r)
                src.append(snap.req_instance[r])
                tgt.append(t)
    return Candidates(np.array(req, dtype=np.int64), np.array(src, dtype=np.int64),
                      np.array(tgt, dtype=np.int64))
