
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdresched.core import (BetaSchedule, CostModel, InstanceState, Phase, RequestSpec,
                            RequestState, current_variance, iter_time, migration_time,
                            prefill_time, predict_time, project_load, token_load,
                            weighted_variance)


def req(rid, prompt, generated=0, remaining=None, out=None):
    spec = RequestSpec(rid, 0.0, prompt, out if out is not None else generated + 100000)
    return RequestState(spec, generated=generated, phase=Phase.DECODING, predicted_remaining=remaining)


def cluster(batches, capacity=10**9):
    return [InstanceState(i, capacity, set(b)) for i, b in enumerate(batches)]


# ---------- domain types ----------

@pytest.mark.parametrize("kw", [dict(prompt_len=0), dict(true_output_len=0), dict(arrival_time=-1.0)])
def test_request_spec_rejects_invalid(kw):
    base = dict(id=1, arrival_time=0.0, prompt_len=5, true_output_len=5)
    base.update(kw)
    with pytest.raises(ValueError, match=next(iter(kw))):
        RequestSpec(**base)


def test_request_state_check_catches_inconsistency():
    r = RequestState(RequestSpec(1, 0.0, 5, 3), generated=3, phase=Phase.FINISHED)
    r.check()
    r.generated = 2
    with pytest.raises(AssertionError):
        r.check()
    r.generated = 4
    with pytest.raises(AssertionError):
        r.check()


def test_cost_model_rejects_non_positive():
    with pytest.raises(ValueError, match="bandwidth"):
        CostModel(bandwidth=0)
    with pytest.raises(ValueError, match="iter_base"):
        CostModel(iter_base=float("nan"))


def test_beta_schedule_weights():
    assert np.allclose(BetaSchedule(3, 0.5).weights, [0.5, 0.25, 0.125])
    assert len(BetaSchedule(0).weights) == 0
    with pytest.raises(ValueError):
        BetaSchedule(5, 0.0)
    with pytest.raises(ValueError):
        BetaSchedule(5, 1.5)


# ---------- token_load ----------

def test_token_load_examples():
    reqs = {1: req(1, 36, 1500), 2: req(2, 920, 100), 3: req(3, 10, 0)}
    assert token_load(InstanceState(0, 10**6), reqs) == 0
    assert token_load(InstanceState(0, 10**6, {1, 2}), reqs) == 2556
    assert token_load(InstanceState(0, 10**6, {3}), reqs) == 10


def test_token_load_unknown_request():
    with pytest.raises(KeyError, match="7"):
        token_load(InstanceState(0, 100, {7}), {})


@given(st.lists(st.tuples(st.integers(1, 5000), st.integers(0, 5000)), min_size=2, max_size=20),
       st.integers(1, 19))
def test_token_load_additive(lens, cut):
    cut = min(cut, len(lens) - 1)
    reqs = {i: req(i, p, g) for i, (p, g) in enumerate(lens)}
    a, b = set(range(cut)), set(range(cut, len(lens)))
    load = lambda s: token_load(InstanceState(0, 10**9, s), reqs)
    assert load(a | b) == load(a) + load(b)


# ---------- cost model ----------

def test_iter_time_examples():
    cm = CostModel()
    assert iter_time(cm, 0) == cm.iter_base
    cal = CostModel.calibrated(18.23, 100_000, 10.0)
    assert iter_time(cal, 100_000) == pytest.approx(18.23, abs=1e-12)
    assert iter_time(cm, 100_000) == pytest.approx(18.23, abs=1e-9)
    assert iter_time(cm, 2000) - cm.iter_base == pytest.approx(2 * (iter_time(cm, 1000) - cm.iter_base))
    with pytest.raises(ValueError):
        iter_time(cm, -1)


def test_migration_time_examples():
    cm = CostModel()
    assert migration_time(cm, 0) == 0
    slow = CostModel(bandwidth=cm.bandwidth / 2)
    assert migration_time(slow, 5000) == pytest.approx(2 * migration_time(cm, 5000))
    # 1000 tokens * 57344 B * 8 bit / 25 Gbit/s
    assert migration_time(cm, 1000) == pytest.approx(1000 * 57344 * 8 / 25e9 * 1000)


def test_transfer_dominates_tbt_at_10gbps():
    # a long request at low bandwidth: transfer dwarfs one decode iteration
    cm = CostModel(bandwidth=10e9)
    tokens = 30000
    xfer = migration_time(cm, tokens)
    frac = xfer / (xfer + iter_time(cm, 100_000))
    assert 0.9 < frac < 1.0


@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0, 1))
def test_cost_functions_affine(x, y, lam):
    cm = CostModel()
    z = lam * x + (1 - lam) * y
    for f in (iter_time, migration_time, prefill_time):
        assert f(cm, z) == pytest.approx(lam * f(cm, x) + (1 - lam) * f(cm, y), rel=1e-9, abs=1e-9)


def test_predict_time_table_anchors():
    cm = CostModel()
    assert predict_time(cm, 0) == 0
    assert predict_time(cm, 1) == pytest.approx(1.33)
    assert predict_time(cm, 10) == pytest.approx(2.44)


# ---------- current_variance ----------

def test_current_variance_examples():
    assert current_variance([100, 100, 100]) == 0
    assert current_variance([300, 100, 100]) == pytest.approx(8888.888888, rel=1e-6)
    with pytest.raises(ValueError):
        current_variance([])


@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=12), st.randoms())
def test_current_variance_properties(loads, rnd):
    v = current_variance(loads)
    assert v >= 0
    assert (v == 0) == (len(set(loads)) == 1)
    shuffled = list(loads)
    rnd.shuffle(shuffled)
    assert current_variance(shuffled) == pytest.approx(v, rel=1e-12, abs=1e-9)


@settings(max_examples=200)
@given(st.lists(st.lists(st.integers(1, 1000), max_size=5), min_size=2, max_size=5))
def test_moving_small_request_max_to_min_never_increases_variance(batches):
    loads = [sum(b) for b in batches]
    hi, lo = int(np.argmax(loads)), int(np.argmin(loads))
    for c in batches[hi]:
        if c < loads[hi] - loads[lo]:
            after = list(loads)
            after[hi] -= c
            after[lo] += c
            assert current_variance(after) <= current_variance(loads) + 1e-9


# ---------- project_load ----------

def test_project_load_examples():
    reqs = {1: req(1, 10, 2, remaining=5)}
    inst = InstanceState(0, 100, {1})
    assert project_load(inst, reqs, 0) == token_load(inst, reqs)
    assert project_load(inst, reqs, 3) == 15
    assert project_load(inst, reqs, 5) == 0
    reqs[2] = req(2, 7, 0, remaining=2)
    inst.batch.add(2)
    assert project_load(inst, reqs, 6) == 0
    with pytest.raises(ValueError):
        project_load(inst, reqs, -1)


def test_project_load_step_scales_time():
    reqs = {1: req(1, 10, 0, remaining=100)}
    inst = InstanceState(0, 10**6, {1})
    assert project_load(inst, reqs, 3, step=4) == project_load(inst, reqs, 12)


def test_project_load_without_prediction_grows_forever():
    reqs = {1: req(1, 10, 0, remaining=None)}
    assert project_load(InstanceState(0, 10**6, {1}), reqs, 10**6) == 10 + 10**6


@given(st.lists(st.tuples(st.integers(1, 100), st.integers(0, 100), st.integers(0, 60)),
                min_size=1, max_size=6))
def test_project_load_shape(spec):
    reqs = {i: req(i, p, g, remaining=r) for i, (p, g, r) in enumerate(spec)}
    inst = InstanceState(0, 10**9, set(reqs))
    last = max(1, max(r for _, _, r in spec))  # t = 0 is always the current load
    values = [project_load(inst, reqs, t) for t in range(last + 5)]
    assert all(a >= b for a, b in zip(values[last:], values[last + 1:]))
    assert values[last] == 0
    for i, (p, g, r) in enumerate(spec):
        contrib = [project_load(InstanceState(0, 10**9, {i}), reqs, t) for t in range(last + 3)]
        alive = [c for c in contrib if c > 0]
        assert alive == list(range(p + g, p + g + len(alive)))
        assert all(c == 0 for c in contrib[len(alive):])


# ---------- weighted_variance ----------

def test_weighted_variance_symmetric_cluster_is_zero():
    reqs = {i: req(i, 100, 5, remaining=20) for i in range(4)}
    assert weighted_variance(cluster([{0, 1}, {2, 3}]), reqs, BetaSchedule(10, 0.9)) == 0


def test_weighted_variance_zero_horizon_is_current():
    reqs = {0: req(0, 10, 0, remaining=5), 1: req(1, 30, 0, remaining=5)}
    assert weighted_variance(cluster([{0}, {1}]), reqs, BetaSchedule(0)) == current_variance([10, 30])


def test_weighted_variance_hand_computed():
    # loads [10, 30], one request each, both outliving the horizon, gamma 1, H 2:
    # the gap stays 20 so every term is 100
    reqs = {0: req(0, 10, 0, remaining=100), 1: req(1, 30, 0, remaining=100)}
    assert weighted_variance(cluster([{0}, {1}]), reqs, BetaSchedule(2, 1.0)) == pytest.approx(300)
    # two requests on instance 1: loads [10+t, 30+2t] -> gaps 20, 21, 22
    reqs = {0: req(0, 10, 0, remaining=100), 1: req(1, 15, 0, remaining=100), 2: req(2, 15, 0, remaining=100)}
    want = sum((g / 2) ** 2 for g in (20, 21, 22))
    assert weighted_variance(cluster([{0}, {1, 2}]), reqs, BetaSchedule(2, 1.0)) == pytest.approx(want)


def test_weighted_variance_counts_completions():
    # instance 1's request finishes after 1 step: loads [10+t, 0] for t >= 1
    reqs = {0: req(0, 10, 0, remaining=100), 1: req(1, 10, 0, remaining=1)}
    got = weighted_variance(cluster([{0}, {1}]), reqs, BetaSchedule(2, 0.5))
    assert got == pytest.approx(0 + 0.5 * (11 / 2) ** 2 + 0.25 * (12 / 2) ** 2)


@settings(max_examples=50)
@given(st.lists(st.lists(st.tuples(st.integers(1, 500), st.integers(0, 50)), max_size=4),
                min_size=2, max_size=4),
       st.randoms())
def test_weighted_variance_relabel_invariant(batches, rnd):
    reqs, groups, k = {}, [], 0
    for b in batches:
        ids = set()
        for p, r in b:
            reqs[k] = req(k, p, 0, remaining=r)
            ids.add(k)
            k += 1
        groups.append(ids)
    sched = BetaSchedule(8, 0.9)
    a = weighted_variance(cluster(groups), reqs, sched)
    rnd.shuffle(groups)
    assert weighted_variance(cluster(groups), reqs, sched) == pytest.approx(a, rel=1e-9, abs=1e-9)


def test_weighted_variance_empty_cluster():
    with pytest.raises(ValueError):
        weighted_variance([], {}, BetaSchedule())
