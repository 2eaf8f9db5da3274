"""Discrete-event simulator for decode-phase load rescheduling in
prefill/decode-disaggregated LLM serving."""

from .config import ScenarioConfig, load_config, preset
from .core import BetaSchedule, CostModel, RequestSpec
from .predictor import PredictorModel
from .scheduler import SchedulerConfig
from .simengine import run, simulate

__all__ = ["BetaSchedule", "CostModel", "PredictorModel", "RequestSpec", "ScenarioConfig",
           "SchedulerConfig", "load_config", "preset", "run", "simulate"]
__version__ = "0.1.0"
