"""Round-based federated training with strategy-dependent parameter routing.

Each parameter kind (``GENERIC`` weights, BN affine ``gamma``/``beta``, BN
running statistics) is routed by the strategy:

=========  =========  =========  ==========================
strategy   GENERIC    BN_AFFINE  BN_STATS
=========  =========  =========  ==========================
singleset  local      local      local
fedavg     averaged   averaged   averaged
fedprox    averaged   averaged   averaged (+ proximal SGD)
fedbn      averaged   local      local
silobn     averaged   averaged   local
fixbn      averaged   averaged   averaged, frozen at T0
fedstein   averaged   local      James-Stein adjusted
=========  =========  =========  ==========================

FedAvg+GN / FedAvg+LN are ``fedavg`` run on a model whose norm layers are
group/layer norm; those layers only carry ``GENERIC`` parameters.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datagen import Dataset, split
from .errors import DimensionError, NumericError, ProtocolError
from .jamesstein import JsConfig, JsReport, js_adjust_stats
from .nn import (
    ModelState,
    ParamKind,
    apply_batch_stats,
    backward,
    build_model,
    cross_entropy,
    forward,
    sgd_step,
)
from .tensor import stable_mean

logger = logging.getLogger(__name__)

__all__ = [
    "STRATEGIES",
    "StrategySpec",
    "ClientRecord",
    "GlobalUpdate",
    "MetricRow",
    "RoundMetrics",
    "client_local_update",
    "aggregate",
    "broadcast",
    "server_model",
    "evaluate",
    "Simulation",
    "run_experiment",
]

# name -> (aggregate_generic, aggregate_bn_affine, bn_stats_policy)
STRATEGIES: Dict[str, Tuple[bool, bool, str]] = {
    "singleset": (False, False, "local"),
    "fedavg": (True, True, "average"),
    "fedprox": (True, True, "average"),
    "fedbn": (True, False, "local"),
    "silobn": (True, True, "local"),
    "fixbn": (True, True, "average"),
    "fedstein": (True, False, "js"),
}
STATS_POLICIES = ("local", "average", "js")
WEIGHTINGS = ("uniform", "by_samples")


@dataclass(frozen=True)
class StrategySpec:
    name: str
    aggregate_generic: Optional[bool] = None
    aggregate_bn_affine: Optional[bool] = None
    bn_stats_policy: Optional[str] = None
    freeze_round: Optional[int] = None
    proximal_mu: float = 0.0
    weighting: str = "uniform"

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; choose from {sorted(STRATEGIES)}")
        expected = STRATEGIES[self.name]
        for field_name, want in zip(("aggregate_generic", "aggregate_bn_affine", "bn_stats_policy"), expected):
            got = getattr(self, field_name)
            if got is None:
                object.__setattr__(self, field_name, want)
            elif got != want:
                raise ValueError(f"strategy {self.name} requires {field_name}={want!r}, got {got!r}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.proximal_mu < 0:
            raise ValueError("proximal_mu must be non-negative")
        if self.proximal_mu > 0 and self.name != "fedprox":
            raise ValueError("proximal_mu only applies to fedprox")
        if self.freeze_round is not None and self.name != "fixbn":
            raise ValueError("freeze_round only applies to fixbn")

    def route(self, kind: ParamKind) -> str:
        """``'aggregate'``, ``'local'``, ``'js'`` or ``'aggregate+freeze'`` for a tensor kind."""
        if kind == ParamKind.GENERIC:
            return "aggregate" if self.aggregate_generic else "local"
        if kind == ParamKind.BN_AFFINE:
            return "aggregate" if self.aggregate_bn_affine else "local"
        if self.bn_stats_policy == "local":
            return "local"
        if self.bn_stats_policy == "js":
            return "js"
        return "aggregate+freeze" if self.name == "fixbn" else "aggregate"

    def allows(self, kind: ParamKind) -> bool:
        return self.route(kind) != "local"

    def stats_frozen(self, t: int, rounds: int) -> bool:
        if self.name != "fixbn":
            return False
        t0 = self.freeze_round if self.freeze_round is not None else rounds // 2
        return t >= t0

    def to_dict(self) -> dict:
        d = {"name": self.name, "weighting": self.weighting}
        if self.name == "fedprox":
            d["proximal_mu"] = self.proximal_mu
        if self.name == "fixbn" and self.freeze_round is not None:
            d["freeze_round"] = self.freeze_round
        return d


@dataclass
class ClientRecord:
    id: int
    domain: str
    model: ModelState
    train: Dataset
    test: Dataset
    seed: int = 0

    @property
    def n_samples(self) -> int:
        return len(self.train)

    def rng(self, t: int) -> np.random.Generator:
        # independent stream per (global seed, client, round); resumable without saved state
        return np.random.default_rng([int(self.seed), int(self.id), int(t)])


def client_local_update(client: ClientRecord, epochs: int, batch_size: int, lr: float, t: int = 1,
                        proximal_mu: float = 0.0, anchor: Optional[ModelState] = None,
                        update_stats: bool = True):
    """Minibatch SGD over the client's shard.

    Returns ``(updated_client, mean_train_loss)``.  Final minibatches with
    fewer than two samples are dropped (batch norm needs two).
    """
    n = len(client.train)
    if n == 0:
        raise ValueError(f"client {client.id} has an empty training set")
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    rng = client.rng(t)
    model = client.model.copy()
    x_all, y_all = client.train.features, client.train.labels
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if idx.size < 2:
                continue
            logits, cache = forward(model, x_all[idx], "train")
            loss, dlogits = cross_entropy(logits, y_all[idx])
            if not np.isfinite(loss):
                raise NumericError(f"client {client.id} round {t}: non-finite loss")
            grads = backward(model, cache, dlogits)
            if update_stats:
                model = apply_batch_stats(model, cache)
            model = sgd_step(model, grads, lr, proximal_mu, anchor)
            losses.append(loss)
    if not losses:
        raise ValueError(f"client {client.id}: no minibatch of size >= 2")
    return replace(client, model=model), float(np.mean(losses))


@dataclass
class GlobalUpdate:
    """Server output: tensors keyed by ``(layer_index, param_name)``."""

    tensors: Dict[Tuple[int, str], np.ndarray]
    kinds: Dict[Tuple[int, str], ParamKind]
    js_reports: Dict[int, Tuple[JsReport, JsReport]] = field(default_factory=dict)

    def kinds_present(self) -> set:
        return set(self.kinds.values())


def _check_compatible(clients: Sequence[ClientRecord]):
    if not clients:
        raise ValueError("no clients")
    ref = clients[0].model
    for c in clients[1:]:
        m = c.model
        if m.specs != ref.specs or m.input_shape != ref.input_shape:
            raise DimensionError(f"client {c.id} model spec differs from client {clients[0].id}")


def _weights(strategy: StrategySpec, clients: Sequence[ClientRecord]):
    if strategy.weighting == "by_samples":
        return [c.n_samples for c in clients]
    return None


def aggregate(strategy: StrategySpec, clients: Sequence[ClientRecord], js_cfg: JsConfig = JsConfig()) -> GlobalUpdate:
    _check_compatible(clients)
    w = _weights(strategy, clients)
    ref = clients[0].model
    tensors, kinds, reports = {}, {}, {}
    for i, name, kind, _ in ref.named():
        route = strategy.route(kind)
        if route in ("local", "js"):
            continue
        tensors[(i, name)] = stable_mean([c.model.layers[i].params[name] for c in clients], w)
        kinds[(i, name)] = kind
    if strategy.bn_stats_policy == "js":
        for i in ref.bn_layers():
            stats = [c.model.layers[i].running() for c in clients]
            mu, var, reports[i] = js_adjust_stats(stats, js_cfg, w)
            tensors[(i, "running_mean")], tensors[(i, "running_var")] = mu, var
            kinds[(i, "running_mean")] = kinds[(i, "running_var")] = ParamKind.BN_STATS
    return GlobalUpdate(tensors, kinds, reports)


def broadcast(strategy: StrategySpec, update: GlobalUpdate, clients: Sequence[ClientRecord],
              t: int = 1, rounds: int = 1) -> List[ClientRecord]:
    """Overwrite exactly the tensors present in ``update`` on every client."""
    for kind in update.kinds_present():
        if not strategy.allows(kind):
            raise ProtocolError(f"strategy {strategy.name} may not transmit {kind.value} tensors")
    frozen = strategy.stats_frozen(t, rounds)
    out = []
    for c in clients:
        model = c.model.copy()
        for (i, name), value in update.tensors.items():
            if frozen and update.kinds[(i, name)] == ParamKind.BN_STATS:
                continue
            model.layers[i].params[name] = value.copy()
        out.append(replace(c, model=model))
    return out


def server_model(strategy: StrategySpec, clients: Sequence[ClientRecord], update: Optional[GlobalUpdate] = None) -> ModelState:
    """The server's global model used for unseen-domain evaluation.

    Tensors carried by ``update`` are used as-is.  Non-aggregated BN
    affine parameters fall back to gamma=1, beta=0; local BN statistics
    and (for singleset) local weights fall back to a plain client average.
    """
    _check_compatible(clients)
    w = _weights(strategy, clients)
    model = clients[0].model.copy()
    carried = update.tensors if update is not None else {}
    for i, name, kind, arr in clients[0].model.named():
        if (i, name) in carried:
            model.layers[i].params[name] = carried[(i, name)].copy()
        elif kind == ParamKind.BN_AFFINE and not strategy.aggregate_bn_affine:
            model.layers[i].params[name] = np.ones_like(arr) if name == "gamma" else np.zeros_like(arr)
        else:
            model.layers[i].params[name] = stable_mean([c.model.layers[i].params[name] for c in clients], w)
    return model


def _score(model: ModelState, ds: Dataset) -> Tuple[float, float]:
    if len(ds) == 0:
        raise ValueError(f"empty test set for domain {ds.domain}")
    logits, _ = forward(model, ds.features, "eval")
    loss, _ = cross_entropy(logits, ds.labels)
    acc = float(np.mean(logits.argmax(axis=1) == ds.labels))
    return loss, acc


def evaluate(models, datasets: Sequence[Dataset]) -> Dict[str, float]:
    """Eval-mode accuracy per domain plus an unweighted ``'Average'`` entry.

    ``models`` is one model for every dataset or a sequence aligned with
    ``datasets``.
    """
    if isinstance(models, ModelState):
        models = [models] * len(datasets)
    if len(models) != len(datasets):
        raise ValueError(f"{len(models)} models for {len(datasets)} datasets")
    table = {ds.domain: _score(m, ds)[1] for m, ds in zip(models, datasets)}
    table["Average"] = float(np.mean(list(table.values())))
    return table


@dataclass(frozen=True)
class MetricRow:
    scope: str
    domain: str
    split: str
    loss: float
    accuracy: float


@dataclass
class RoundMetrics:
    round: int
    rows: List[MetricRow]
    js_reports: Dict[int, Tuple[JsReport, JsReport]] = field(default_factory=dict)

    def accuracy(self, scope: str, domain: str, split: str = "test") -> float:
        for r in self.rows:
            if (r.scope, r.domain, r.split) == (scope, domain, split):
                return r.accuracy
        raise KeyError((scope, domain, split))


class Simulation:
    """Holds the mutable state of one experiment so it can be checkpointed.

    ``config`` is an :class:`fedstein.config.ExperimentConfig`; datasets
    are rebuilt deterministically from it, so a checkpoint only needs the
    models, the round counter and the metrics so far.
    """

    def __init__(self, config, datasets: Optional[Sequence[Dataset]] = None):
        self.config = config
        cfg = config
        datasets = list(datasets) if datasets is not None else cfg.data.build(cfg.seed)
        unseen = set(cfg.data.unseen)
        self.unseen_test: List[Dataset] = []
        self.clients: List[ClientRecord] = []
        for k, ds in enumerate(datasets):
            train, test = split(ds, cfg.test_fraction, [cfg.seed, 1_000_003, k])
            if ds.domain in unseen:
                self.unseen_test.append(test)
                continue
            model = build_model(cfg.model.layer_specs(ds.features.shape[1:], ds.classes),
                                ds.features.shape[1:], np.random.default_rng([cfg.seed, len(self.clients), 0]),
                                cfg.model.eps, cfg.model.momentum)
            self.clients.append(ClientRecord(len(self.clients), ds.domain, model, train, test, cfg.seed))
        if not self.clients:
            raise ValueError("every domain is marked unseen; nothing to train on")
        self.round = 0
        self.metrics: List[RoundMetrics] = []
        self.global_model = server_model(cfg.strategy, self.clients, self._update())
        self.last_reports: Dict[int, Tuple[JsReport, JsReport]] = {}

    def _update(self) -> GlobalUpdate:
        return aggregate(self.config.strategy, self.clients, self.config.js)

    def _local(self, client: ClientRecord, t: int):
        cfg, strat = self.config, self.config.strategy
        anchor = client.model if strat.proximal_mu > 0 else None
        return client_local_update(
            client, cfg.local_epochs, cfg.batch_size, cfg.lr, t,
            proximal_mu=strat.proximal_mu, anchor=anchor,
            update_stats=not strat.stats_frozen(t, cfg.rounds),
        )

    def step(self) -> Optional[RoundMetrics]:
        cfg = self.config
        t = self.round + 1
        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                results = list(pool.map(lambda c: self._local(c, t), self.clients))
        else:
            results = [self._local(c, t) for c in self.clients]
        # merged in ascending client id whatever the execution order
        self.clients = [r[0] for r in results]
        train_loss = {c.id: r[1] for c, r in zip(self.clients, results)}
        self.last_reports = {}
        if t % cfg.agg_every == 0:
            update = self._update()
            self.clients = broadcast(cfg.strategy, update, self.clients, t, cfg.rounds)
            self.global_model = server_model(cfg.strategy, self.clients, update)
            self.last_reports = update.js_reports
        self.round = t
        if t % cfg.eval_every == 0 or t == cfg.rounds:
            m = self.evaluate_round(train_loss)
            self.metrics.append(m)
            return m
        return None

    def evaluate_round(self, train_loss: Dict[int, float]) -> RoundMetrics:
        rows = []
        local_losses, local_accs = [], []
        for c in self.clients:
            tr_loss_eval, tr_acc = _score(c.model, c.train)
            te_loss, te_acc = _score(c.model, c.test)
            rows.append(MetricRow(f"client:{c.id}", c.domain, "train", train_loss[c.id], tr_acc))
            rows.append(MetricRow(f"client:{c.id}", c.domain, "test", te_loss, te_acc))
            local_losses.append(te_loss)
            local_accs.append(te_acc)
        rows.append(MetricRow("local", "Average", "test", float(np.mean(local_losses)), float(np.mean(local_accs))))
        g_losses, g_accs = [], []
        for c in self.clients:
            loss, acc = _score(self.global_model, c.test)
            rows.append(MetricRow("global", c.domain, "test", loss, acc))
            g_losses.append(loss)
            g_accs.append(acc)
        for ds in self.unseen_test:
            loss, acc = _score(self.global_model, ds)
            rows.append(MetricRow("global", ds.domain, "unseen", loss, acc))
            g_losses.append(loss)
            g_accs.append(acc)
        rows.append(MetricRow("global", "Average", "all", float(np.mean(g_losses)), float(np.mean(g_accs))))
        for r in rows:
            if not np.isfinite(r.loss):
                raise NumericError(f"round {self.round}: non-finite loss for {r.scope}/{r.domain}")
        return RoundMetrics(self.round, rows, dict(self.last_reports))

    def run(self, until: Optional[int] = None) -> List[RoundMetrics]:
        stop = self.config.rounds if until is None else min(until, self.config.rounds)
        while self.round < stop:
            m = self.step()
            if m is not None:
                logger.info("round %d: local avg acc %.4f", m.round, m.accuracy("local", "Average"))
        return self.metrics

    def summary(self) -> Dict[str, Dict[str, float]]:
        """Final per-domain accuracies: seen domains with client models, unseen with the global model."""
        seen = evaluate([c.model for c in self.clients], [c.test for c in self.clients])
        out = {"seen": seen}
        if self.unseen_test:
            out["unseen"] = evaluate(self.global_model, self.unseen_test)
        return out


def run_experiment(config, datasets: Optional[Sequence[Dataset]] = None) -> List[RoundMetrics]:
    return Simulation(config, datasets).run()
