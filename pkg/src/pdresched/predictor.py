"""Remaining-generation-length estimators.

No learned model lives here. Each estimator reproduces the *error profile* of
a predictor. Besides the exact oracle there is a noisy in-model predictor whose
MAE decays as more tokens are generated, plus a truncated-context predictor
whose MAE grows once the sequence exceeds its input window.

Errors are Laplace distributed, so the configured MAE is exactly ``E|eps|``.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri

from .core import RequestState

KINDS = ("oracle", "noisy", "truncated")

# MAE grows 3.2x when the context goes from 4K to 32K tokens: (32/4)**g == 3.2
TRUNCATION_GROWTH = math.log(3.2) / math.log(8.0)


def calibrate_decay(base_mae: float, floor_mae: float, at_generated: float, mae_at: float) -> float:
    """Decay scale that makes the MAE curve pass through ``(at_generated, mae_at)``."""
    if not base_mae > mae_at > floor_mae:
        raise ValueError("need base_mae > mae_at > floor_mae")
    return at_generated / math.log((base_mae - floor_mae) / (mae_at - floor_mae))


@dataclass(frozen=True)
class PredictorModel:
    kind: str = "noisy"
    refresh_interval: int = 20
    base_mae: float = 18256.0
    # a positive floor leaves near-finished long requests with errors larger
    # than their remaining length, so they look already done
    floor_mae: float = 0.0
    # passes through MAE 2929 at 8000 generated tokens
    decay_tokens: float = calibrate_decay(18256.0, 0.0, 8000.0, 2929.0)
    context_limit: int = 1024
    truncation_growth: float = TRUNCATION_GROWTH
    # upper bound on prompt + generated + predicted; None disables the clamp
    max_len: Optional[int] = 32768
    rng_seed: int = 0
    # The anchor curve describes requests of about this many output tokens;
    # shorter requests get proportionally smaller errors. None keeps the
    # curve for every request.
    mae_reference_len: Optional[float] = 31000.0
    # Gaussian-copula correlation of one request's errors across refreshes;
    # 0 redraws independently each time, 1 keeps the same quantile for life
    error_correlation: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"predictor.kind must be one of {KINDS}, got {self.kind!r}")
        if self.refresh_interval < 1:
            raise ValueError("predictor.refresh_interval must be >= 1")
        if not self.base_mae >= self.floor_mae >= 0:
            raise ValueError("predictor: need base_mae >= floor_mae >= 0")
        if not self.decay_tokens > 0:
            raise ValueError("predictor.decay_tokens must be > 0")
        if self.context_limit < 1:
            raise ValueError("predictor.context_limit must be >= 1")
        if self.mae_reference_len is not None and not self.mae_reference_len > 0:
            raise ValueError("predictor.mae_reference_len must be > 0")
        if not 0.0 <= self.error_correlation <= 1.0:
            raise ValueError("predictor.error_correlation must lie in [0, 1]")


@dataclass(frozen=True)
class PredictionRecord:
    request: int
    at_generated: int
    predicted_remaining: int
    true_remaining: int


def expected_mae_array(model: PredictorModel, generated, prompt_len=0, output_len=None) -> np.ndarray:
    """MAE of one prediction made after ``generated`` tokens.

    ``output_len`` is the request's true total output length; it only matters
    when ``model.mae_reference_len`` is set.
    """
    generated = np.asarray(generated, dtype=float)
    prompt_len = np.asarray(prompt_len, dtype=float)
    if model.kind == "oracle":
        return np.zeros(np.shape(generated))
    span = model.base_mae - model.floor_mae
    if model.kind == "truncated":
        # the window caps how much generated context can help ...
        seen = np.minimum(generated, np.maximum(0.0, model.context_limit - prompt_len))
        mae = model.floor_mae + span * np.exp(-seen / model.decay_tokens)
        # ... and everything beyond it is lost
        ratio = np.maximum((prompt_len + generated) / model.context_limit, 1.0)
        mae = mae * ratio ** model.truncation_growth
    else:
        mae = model.floor_mae + span * np.exp(-generated / model.decay_tokens)
    if model.mae_reference_len is not None and output_len is not None:
        mae = mae * (np.asarray(output_len, dtype=float) / model.mae_reference_len)
    return mae


def expected_mae(model: PredictorModel, generated: int, prompt_len: int = 0,
                 output_len: Optional[int] = None) -> float:
    return float(expected_mae_array(model, generated, prompt_len, output_len))


def laplace_from_uniform(u, scale):
    """Inverse Laplace CDF at ``u`` in [0, 1); works on scalars and arrays."""
    v = np.asarray(u, dtype=float) - 0.5
    out = -np.asarray(scale, dtype=float) * np.sign(v) * np.log(np.maximum(1.0 - 2.0 * np.abs(v), 5e-324))
    return float(out) if out.ndim == 0 else out


def laplace(stream: random.Random, scale: float) -> float:
    return laplace_from_uniform(stream.random(), scale)


def predict_array(model: PredictorModel, true_remaining, generated, u, prompt_len=0) -> np.ndarray:
    """Predicted remaining length for each request, given uniforms ``u``.

    noisy/truncated: ``max(0, round(true + eps))`` with Laplace ``eps`` whose
    mean absolute value is :func:`expected_mae`, clamped so that
    ``prompt + generated + prediction <= max_len``.
    """
    true_remaining = np.asarray(true_remaining, dtype=np.int64)
    generated = np.asarray(generated, dtype=np.int64)
    if np.any(true_remaining < 0) or np.any(generated < 0):
        raise ValueError("true_remaining and generated must be >= 0")
    if model.kind == "oracle":
        return true_remaining.copy()
    scale = expected_mae_array(model, generated, prompt_len, generated + true_remaining)
    noisy = true_remaining + laplace_from_uniform(np.asarray(u, dtype=float), scale)
    # rint rounds half to even, like round()
    value = np.maximum(0, np.rint(noisy)).astype(np.int64)
    if model.max_len is not None:
        cap = np.maximum(0, model.max_len - np.asarray(prompt_len, dtype=np.int64) - generated)
        value = np.minimum(value, cap)
    return value


def predict(model: PredictorModel, true_remaining: int, generated: int, stream: random.Random,
            prompt_len: int = 0) -> int:
    return int(predict_array(model, true_remaining, generated, stream.random(), prompt_len))


_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser; uint64 arithmetic wraps
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def hash_uniform(seed: int, a, b) -> np.ndarray:
    """Counter-based uniforms in [0, 1) keyed by ``(seed, a, b)``.

    Predictions drawn this way do not depend on the order in which the
    simulator asks for them.
    """
    with np.errstate(over="ignore"):
        x = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * np.uint64(0x9E3779B97F4A7C15)
        x = _mix64(x ^ np.asarray(a, dtype=np.int64).astype(np.uint64))
        x = _mix64(x + np.asarray(b, dtype=np.int64).astype(np.uint64) * np.uint64(0xD1B54A32D192ED03))
    return (x >> np.uint64(11)).astype(float) * (1.0 / 9007199254740992.0)


def correlated_uniform(seed: int, request_ids, at_generated, rho: float) -> np.ndarray:
    """Uniforms for refresh draws whose normal scores share a per-request
    component with weight ``rho``; each one is still exactly U(0, 1)."""
    own = hash_uniform(seed, request_ids, at_generated)
    if rho <= 0.0:
        return own
    # key -1 never collides with a refresh point (those are >= 0)
    shared = hash_uniform(seed, request_ids, np.full(np.shape(own), -1))
    lo = 2.0 ** -53
    z = (np.sqrt(rho) * ndtri(np.clip(shared, lo, 1 - lo))
         + np.sqrt(1.0 - rho) * ndtri(np.clip(own, lo, 1 - lo)))
    return np.minimum(ndtr(z), 1.0 - lo)


def should_refresh(model: PredictorModel, request: RequestState) -> bool:
    if request.last_prediction_at is None:
        return True
    return request.generated - request.last_prediction_at >= model.refresh_interval


def prediction_overhead(predict_latency: float, iter_time: float, k: int) -> float:
    """Fraction of decode time spent predicting when the predictor runs every ``k`` iterations."""
    if predict_latency <= 0 or iter_time <= 0 or k <= 0:
        raise ValueError("prediction_overhead inputs must be > 0")
    return predict_latency / (iter_time * k)
