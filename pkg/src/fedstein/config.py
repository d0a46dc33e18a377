"""Experiment configuration: a YAML document with strict keys.

Grammar (every key optional unless noted; unknown keys are errors)::

    seed: 0                  # int
    rounds: 30               # T >= 1
    agg_every: 1             # E >= 1, aggregate when round % E == 0
    local_epochs: 1
    batch_size: 32           # B >= 2
    lr: 0.05                 # in (0, 1]
    eval_every: 1
    test_fraction: 0.25
    workers: 1               # threads for client updates; results identical
    output_dir: runs/default # overridden by $FEDSTEIN_OUTPUT_DIR
    strategy:                # required
      name: fedstein         # singleset|fedavg|fedprox|fedbn|silobn|fixbn|fedstein
      weighting: uniform     # uniform|by_samples
      proximal_mu: 0.01      # fedprox only
      freeze_round: 15       # fixbn only, default rounds // 2
      aggregate_generic / aggregate_bn_affine / bn_stats_policy   # must match the strategy
    model:
      hidden: 32             # width of the default dense+BN model
      norm: batch            # batch|group|layer for the default model
      groups: 1
      layers: [...]          # explicit list of {kind, out, kernel, stride, pad, norm, groups}
      eps: 1.0e-5
      momentum: 0.1
    data:                    # required
      source: synthetic      # synthetic|idx|csv
      classes: 3
      base_means: [[..], ..]
      samples_per_class: 200
      domains: [{id, rotation, scale, shift, noise, samples_per_class}, ...]
      idx: [{domain, images, labels}, ...]   # source: idx
      csv: path                              # source: csv
      unseen: [domain ids held out for global-model evaluation]
    js:
      target: zero           # or a list of floats
      clamp: true
      noise_mode: cross_client   # cross_client|cross_channel
      min_var: 1.0e-8
      min_channels: 3
      total_variance: false
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import List, Optional

import yaml

from .datagen import (
    DEFAULT_BASE_MEANS,
    DomainSpec,
    default_domains,
    load_idx,
    make_multidomain,
    read_csv,
)
from .errors import ConfigError
from .federation import StrategySpec
from .jamesstein import JsConfig
from .nn import LayerSpec

__all__ = ["ModelConfig", "DataConfig", "ExperimentConfig", "parse_config", "load_config", "config_hash"]


def _int(section, key, value, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{section}{key}", f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{section}{key}", f"must be >= {minimum}, got {value}")
    return value


def _float(section, key, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{section}{key}", f"expected a number, got {value!r}")
    return float(value)


def _check_keys(section: str, d: dict, allowed):
    if not isinstance(d, dict):
        raise ConfigError(section or "<root>", f"expected a mapping, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}{unknown[0]}", "unknown key")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 32
    norm: str = "batch"
    groups: int = 1
    layers: Optional[tuple] = None
    eps: float = 1e-5
    momentum: float = 0.1

    def layer_specs(self, input_shape, classes: int) -> List[LayerSpec]:
        if self.layers is not None:
            return list(self.layers)
        head = [LayerSpec("flatten")] if len(input_shape) > 1 else []
        return head + [
            LayerSpec("dense", out=self.hidden),
            LayerSpec("norm", norm=self.norm, groups=self.groups),
            LayerSpec("relu"),
            LayerSpec("dense", out=classes),
        ]

    def to_dict(self) -> dict:
        d = {"eps": self.eps, "momentum": self.momentum}
        if self.layers is not None:
            d["layers"] = [l.to_dict() for l in self.layers]
        else:
            d.update(hidden=self.hidden, norm=self.norm, groups=self.groups)
        return d


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    classes: int = 3
    base_means: tuple = DEFAULT_BASE_MEANS
    samples_per_class: int = 200
    domains: tuple = ()
    idx: tuple = ()
    csv: Optional[str] = None
    unseen: tuple = ()

    def build(self, seed: int):
        if self.source == "synthetic":
            return make_multidomain(self.classes, self.base_means, self.domains, seed)
        if self.source == "idx":
            return [load_idx(e["images"], e["labels"], e["domain"], self.classes) for e in self.idx]
        return read_csv(self.csv)

    def to_dict(self) -> dict:
        d = {"source": self.source, "unseen": list(self.unseen)}
        if self.source == "synthetic":
            d.update(
                classes=self.classes,
                base_means=[list(m) for m in self.base_means],
                domains=[dom.to_dict() for dom in self.domains],
            )
        elif self.source == "idx":
            d.update(classes=self.classes, idx=[dict(e) for e in self.idx])
        else:
            d["csv"] = self.csv
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: StrategySpec
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    js: JsConfig = field(default_factory=JsConfig)
    seed: int = 0
    rounds: int = 30
    agg_every: int = 1
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05
    eval_every: int = 1
    test_fraction: float = 0.25
    workers: int = 1
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        js = {
            "target": self.js.target if isinstance(self.js.target, str) else list(self.js.target),
            "clamp": self.js.clamp,
            "noise_mode": self.js.noise_mode,
            "min_var": self.js.min_var,
            "min_channels": self.js.min_channels,
            "total_variance": self.js.total_variance,
        }
        return {
            "seed": self.seed,
            "rounds": self.rounds,
            "agg_every": self.agg_every,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "eval_every": self.eval_every,
            "test_fraction": self.test_fraction,
            "workers": self.workers,
            "output_dir": self.output_dir,
            "strategy": self.strategy.to_dict(),
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "js": js,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return parse_dict({**self.to_dict(), **kw})


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 over everything that affects results (not output_dir/workers)."""
    d = cfg.to_dict()
    d.pop("output_dir")
    d.pop("workers")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_TOP = ("seed", "rounds", "agg_every", "local_epochs", "batch_size", "lr", "eval_every",
        "test_fraction", "workers", "output_dir", "strategy", "model", "data", "js")


def _parse_strategy(d) -> StrategySpec:
    _check_keys("strategy.", d, ("name", "weighting", "proximal_mu", "freeze_round",
                                 "aggregate_generic", "aggregate_bn_affine", "bn_stats_policy"))
    if "name" not in d:
        raise ConfigError("strategy.name", "required")
    kw = dict(d)
    if "proximal_mu" in kw:
        kw["proximal_mu"] = _float("strategy.", "proximal_mu", kw["proximal_mu"])
    if "freeze_round" in kw:
        kw["freeze_round"] = _int("strategy.", "freeze_round", kw["freeze_round"], 1)
    try:
        return StrategySpec(**kw)
    except ValueError as exc:
        raise ConfigError("strategy", str(exc)) from exc


def _parse_model(d) -> ModelConfig:
    _check_keys("model.", d, ("hidden", "norm", "groups", "layers", "eps", "momentum"))
    kw = {}
    if "hidden" in d:
        kw["hidden"] = _int("model.", "hidden", d["hidden"], 1)
    if "groups" in d:
        kw["groups"] = _int("model.", "groups", d["groups"], 1)
    if "norm" in d:
        if d["norm"] not in ("batch", "group", "layer"):
            raise ConfigError("model.norm", f"must be batch, group or layer, got {d['norm']!r}")
        kw["norm"] = d["norm"]
    if "eps" in d:
        kw["eps"] = _float("model.", "eps", d["eps"])
        if not kw["eps"] > 0:
            raise ConfigError("model.eps", "must be positive")
    if "momentum" in d:
        kw["momentum"] = _float("model.", "momentum", d["momentum"])
        if not 0 < kw["momentum"] <= 1:
            raise ConfigError("model.momentum", "must lie in (0, 1]")
    if "layers" in d:
        layers = []
        for j, layer in enumerate(d["layers"]):
            _check_keys(f"model.layers[{j}].", layer, ("kind", "out", "kernel", "stride", "pad", "norm", "groups"))
            try:
                layers.append(LayerSpec(**layer))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"model.layers[{j}]", str(exc)) from exc
        kw["layers"] = tuple(layers)
    return ModelConfig(**kw)


def _parse_data(d) -> DataConfig:
    _check_keys("data.", d, ("source", "classes", "base_means", "samples_per_class", "domains",
                             "idx", "csv", "unseen"))
    source = d.get("source", "synthetic")
    if source not in ("synthetic", "idx", "csv"):
        raise ConfigError("data.source", f"must be synthetic, idx or csv, got {source!r}")
    kw = {"source": source}
    if "classes" in d:
        kw["classes"] = _int("data.", "classes", d["classes"], 2)
    spc = _int("data.", "samples_per_class", d.get("samples_per_class", 200), 2)
    kw["samples_per_class"] = spc
    if source == "synthetic":
        if "base_means" in d:
            kw["base_means"] = tuple(tuple(float(v) for v in m) for m in d["base_means"])
        elif kw.get("classes", 3) != 3:
            raise ConfigError("data.base_means", "required when classes != 3")
        if "domains" in d:
            doms = []
            for j, dom in enumerate(d["domains"]):
                _check_keys(f"data.domains[{j}].", dom, ("id", "rotation", "scale", "shift", "noise", "samples_per_class"))
                dom = {"samples_per_class": spc, **dom}
                dom["id"] = str(dom.get("id", f"d{j}"))
                try:
                    doms.append(DomainSpec(**dom))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"data.domains[{j}]", str(exc)) from exc
            kw["domains"] = tuple(doms)
        else:
            kw["domains"] = tuple(default_domains(spc))
        ids = [dom.id for dom in kw["domains"]]
    elif source == "idx":
        entries = d.get("idx") or []
        if not entries:
            raise ConfigError("data.idx", "required when source is idx")
        for j, e in enumerate(entries):
            _check_keys(f"data.idx[{j}].", e, ("domain", "images", "labels"))
            for key in ("domain", "images", "labels"):
                if key not in e:
                    raise ConfigError(f"data.idx[{j}].{key}", "required")
        kw["idx"] = tuple(dict(e) for e in entries)
        kw.setdefault("classes", 10)
        ids = [e["domain"] for e in entries]
    else:
        if "csv" not in d:
            raise ConfigError("data.csv", "required when source is csv")
        kw["csv"] = str(d["csv"])
        ids = None
    unseen = tuple(str(u) for u in d.get("unseen", ()))
    if ids is not None:
        for u in unseen:
            if u not in ids:
                raise ConfigError("data.unseen", f"unknown domain {u!r}")
    kw["unseen"] = unseen
    return DataConfig(**kw)


def _parse_js(d) -> JsConfig:
    _check_keys("js.", d, ("target", "clamp", "noise_mode", "min_var", "min_channels", "total_variance"))
    try:
        return JsConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError("js", str(exc)) from exc


def parse_dict(d: dict) -> ExperimentConfig:
    _check_keys("", d, _TOP)
    if "strategy" not in d:
        raise ConfigError("strategy", "required")
    if "data" not in d:
        raise ConfigError("data", "required")
    kw = {
        "strategy": _parse_strategy(d["strategy"]),
        "data": _parse_data(d["data"]),
        "model": _parse_model(d.get("model", {})),
        "js": _parse_js(d.get("js", {})),
    }
    for key, minimum in (("seed", 0), ("rounds", 1), ("agg_every", 1), ("local_epochs", 1),
                         ("batch_size", 2), ("eval_every", 1), ("workers", 1)):
        if key in d:
            kw[key] = _int("", key, d[key], minimum)
    if "lr" in d:
        lr = _float("", "lr", d["lr"])
        if not 0 < lr <= 1:
            raise ConfigError("lr", f"must lie in (0, 1], got {lr}")
        kw["lr"] = lr
    if "test_fraction" in d:
        tf = _float("", "test_fraction", d["test_fraction"])
        if not 0 < tf < 1:
            raise ConfigError("test_fraction", "must lie in (0, 1)")
        kw["test_fraction"] = tf
    if "output_dir" in d:
        kw["output_dir"] = str(d["output_dir"])
    return ExperimentConfig(**kw)


def parse_config(text: str) -> ExperimentConfig:
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"not valid YAML: {exc}") from exc
    if d is None:
        d = {}
    return parse_dict(d)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())
