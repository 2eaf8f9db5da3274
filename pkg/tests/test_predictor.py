import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdresched.core import Phase, RequestSpec, RequestState
from pdresched.predictor import (PredictorModel, calibrate_decay, correlated_uniform,
                                 expected_mae, hash_uniform, laplace_from_uniform, predict,
                                 predict_array, prediction_overhead, should_refresh)

RAW = dict(max_len=None, mae_reference_len=None)  # uncapped, no length scaling


def empirical_mae(model, generated, n=100_000, true_remaining=10**7, seed=1):
    u = np.random.default_rng(seed).random(n)
    pred = predict_array(model, np.full(n, true_remaining), np.full(n, generated), u)
    return float(np.abs(pred - true_remaining).mean())


def test_model_validation():
    with pytest.raises(ValueError, match="kind"):
        PredictorModel(kind="psychic")
    with pytest.raises(ValueError, match="refresh_interval"):
        PredictorModel(refresh_interval=0)
    with pytest.raises(ValueError, match="floor_mae"):
        PredictorModel(base_mae=10, floor_mae=20)
    with pytest.raises(ValueError, match="decay_tokens"):
        PredictorModel(decay_tokens=0)
    with pytest.raises(ValueError, match="error_correlation"):
        PredictorModel(error_correlation=1.5)


def test_calibrate_decay_hits_anchor():
    d = calibrate_decay(18256, 100, 8000, 2929)
    m = PredictorModel(floor_mae=100, decay_tokens=d, **RAW)
    assert expected_mae(m, 0) == pytest.approx(18256)
    assert expected_mae(m, 8000) == pytest.approx(2929)
    with pytest.raises(ValueError):
        calibrate_decay(100, 0, 10, 200)


def test_default_curve_passes_through_anchors():
    m = PredictorModel()
    assert expected_mae(m, 0, output_len=31000) == pytest.approx(18256)
    assert expected_mae(m, 8000, output_len=31000) == pytest.approx(2929)
    # shorter requests get proportionally smaller errors
    assert expected_mae(m, 0, output_len=3100) == pytest.approx(1825.6)
    assert expected_mae(PredictorModel(mae_reference_len=None), 0, output_len=3100) == pytest.approx(18256)


def test_oracle_identity():
    m = PredictorModel(kind="oracle")
    assert predict(m, 1234, 0, random.Random(0)) == 1234
    assert list(predict_array(m, [0, 5, 99], [3, 2, 1], [0.1, 0.9, 0.5])) == [0, 5, 99]


def test_noisy_mae_at_anchors():
    m = PredictorModel(**RAW)
    assert empirical_mae(m, 0) == pytest.approx(18256, rel=0.05)
    assert empirical_mae(m, 8000) <= 1.37 * 2929
    assert empirical_mae(m, 8000) == pytest.approx(2929, rel=0.10)


def test_noisy_mae_non_increasing():
    m = PredictorModel(**RAW)
    maes = [empirical_mae(m, g, n=20_000) for g in (0, 2000, 4000, 8000, 16000)]
    assert all(a >= b for a, b in zip(maes, maes[1:]))


def test_truncated_mae_rises_past_window():
    m = PredictorModel(kind="truncated", context_limit=1024, **RAW)
    assert empirical_mae(m, 30000) > empirical_mae(m, 20000)
    assert expected_mae(m, 30000) > expected_mae(m, 20000)


def test_laplace_scale_is_mae():
    u = np.random.default_rng(3).random(200_000)
    eps = laplace_from_uniform(u, 10.0)
    assert np.abs(eps).mean() == pytest.approx(10.0, rel=0.02)
    assert np.median(eps) == pytest.approx(0.0, abs=0.2)
    assert laplace_from_uniform(0.5, 3.0) == 0.0


@given(st.integers(0, 40000), st.integers(0, 32000), st.floats(0, 1, exclude_max=True),
       st.sampled_from(["noisy", "truncated", "oracle"]))
def test_predict_never_negative_and_respects_cap(true_rem, gen, u, kind):
    m = PredictorModel(kind=kind)
    p = int(predict_array(m, true_rem, gen, u, prompt_len=100))
    assert p >= 0
    if kind != "oracle":
        assert 100 + gen + p <= max(32768, 100 + gen)


def test_predict_rejects_negative_inputs():
    with pytest.raises(ValueError):
        predict_array(PredictorModel(), -1, 0, 0.5)
    with pytest.raises(ValueError):
        predict_array(PredictorModel(), 1, -1, 0.5)


def test_predict_is_deterministic():
    m = PredictorModel()
    a = [predict(m, 5000, 100, random.Random(42)) for _ in range(3)]
    assert len(set(a)) == 1
    u = hash_uniform(7, np.arange(100), np.full(100, 20))
    assert np.array_equal(predict_array(m, np.full(100, 5000), np.full(100, 20), u),
                          predict_array(m, np.full(100, 5000), np.full(100, 20), u))


def test_hash_uniform_properties():
    u = hash_uniform(0, np.arange(100_000), np.zeros(100_000, dtype=np.int64))
    assert u.min() >= 0 and u.max() < 1
    assert u.mean() == pytest.approx(0.5, abs=0.01)
    # order independence: a value depends only on its key
    assert hash_uniform(0, [5], [20])[0] == hash_uniform(0, [9, 5], [0, 20])[1]
    assert hash_uniform(0, [5], [20])[0] != hash_uniform(1, [5], [20])[0]


def test_correlated_uniform_marginals_and_correlation():
    ids = np.arange(50_000)
    a = correlated_uniform(0, ids, np.zeros_like(ids), 0.8)
    b = correlated_uniform(0, ids, np.full_like(ids, 20), 0.8)
    assert a.mean() == pytest.approx(0.5, abs=0.01)
    assert np.corrcoef(a, b)[0, 1] > 0.6
    c = correlated_uniform(0, ids, np.full_like(ids, 20), 0.0)
    assert abs(np.corrcoef(a, c)[0, 1]) < 0.05
    same = correlated_uniform(0, ids[:10], np.zeros(10, dtype=np.int64), 1.0)
    assert np.allclose(same, correlated_uniform(0, ids[:10], np.full(10, 40), 1.0))


def state(generated, last=None):
    return RequestState(RequestSpec(1, 0.0, 10, 1000), generated=generated, phase=Phase.DECODING,
                        last_prediction_at=last)


def test_should_refresh_examples():
    m = PredictorModel(refresh_interval=20)
    assert should_refresh(m, state(120, 100))
    assert not should_refresh(m, state(119, 100))
    assert should_refresh(m, state(0))


@pytest.mark.parametrize("out_len,k", [(1, 20), (20, 20), (21, 20), (1000, 20), (999, 7)])
def test_refresh_count_over_lifetime(out_len, k):
    m = PredictorModel(refresh_interval=k)
    r = state(0)
    fires = 0
    while r.generated < out_len:
        if should_refresh(m, r):
            fires += 1
            r.last_prediction_at = r.generated
        r.generated += 1
    assert abs(fires - math.ceil(out_len / k)) <= 1


def test_prediction_overhead_examples():
    assert round(prediction_overhead(1.40, 18.23, 1) * 100, 2) == 7.68
    assert round(prediction_overhead(1.40, 18.23, 20) * 100, 2) == 0.38
    assert prediction_overhead(2, 10, 5) == pytest.approx(2 * prediction_overhead(2, 10, 10))
    with pytest.raises(ValueError):
        prediction_overhead(0, 18.23, 1)
