"""Federated learning simulator with James-Stein-shrunk batch-norm statistics."""

from .datagen import Dataset, DomainSpec, default_benchmark, load_idx, make_multidomain, split
from .federation import (
    STRATEGIES,
    ClientRecord,
    GlobalUpdate,
    RoundMetrics,
    Simulation,
    StrategySpec,
    aggregate,
    broadcast,
    client_local_update,
    evaluate,
    run_experiment,
    server_model,
)
from .jamesstein import JsConfig, JsReport, estimate_noise_variance, js_adjust_stats, js_shrink
from .nn import LayerSpec, ModelState, ParamKind, build_model, grad_check
from .normalization import NormConfig
from .tensor import NormStats

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DomainSpec",
    "default_benchmark",
    "load_idx",
    "make_multidomain",
    "split",
    "STRATEGIES",
    "ClientRecord",
    "GlobalUpdate",
    "RoundMetrics",
    "Simulation",
    "StrategySpec",
    "aggregate",
    "broadcast",
    "client_local_update",
    "evaluate",
    "run_experiment",
    "server_model",
    "JsConfig",
    "JsReport",
    "estimate_noise_variance",
    "js_adjust_stats",
    "js_shrink",
    "LayerSpec",
    "ModelState",
    "ParamKind",
    "build_model",
    "grad_check",
    "NormConfig",
    "NormStats",
]
