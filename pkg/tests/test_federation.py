from dataclasses import replace

import numpy as np
import pytest

from fedstein.config import DataConfig, ExperimentConfig, ModelConfig
from fedstein.datagen import Dataset, default_domains, split
from fedstein.errors import ProtocolError
from fedstein.federation import (
    STRATEGIES,
    ClientRecord,
    GlobalUpdate,
    Simulation,
    StrategySpec,
    aggregate,
    broadcast,
    client_local_update,
    evaluate,
    server_model,
)
from fedstein.jamesstein import JsConfig
from fedstein.nn import LayerSpec, ParamKind, build_model

KINDS = (ParamKind.GENERIC, ParamKind.BN_AFFINE, ParamKind.BN_STATS)
SPECS = [LayerSpec("dense", out=4), LayerSpec("norm"), LayerSpec("relu"), LayerSpec("dense", out=3)]


def _blobs(seed=0, n=30, sep=3.0, classes=3):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(classes), n)
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = sep * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    x = centers[y] + 0.3 * rng.standard_normal((y.size, 2))
    return Dataset(x, y, f"b{seed}", classes)


def _client(cid, seed=0, data_seed=None, specs=SPECS):
    ds = _blobs(cid if data_seed is None else data_seed)
    train, test = split(ds, 0.25, 0)
    return ClientRecord(cid, ds.domain, build_model(specs, (2,), np.random.default_rng([seed, cid, 0])), train, test, seed)


def _set_all(client, value):
    for i, name, _, arr in list(client.model.named()):
        client.model.layers[i].params[name] = np.full_like(arr, value)
    return client


def _perturbed(seed):
    """Three clients whose every tensor (including BN stats and gamma/beta) differs."""
    rng = np.random.default_rng(seed)
    out = []
    for cid in range(3):
        c = _client(cid)
        for i, name, kind, arr in list(c.model.named()):
            noise = rng.standard_normal(arr.shape)
            c.model.layers[i].params[name] = np.abs(arr + noise) + 0.1 if name == "running_var" else arr + noise
        out.append(c)
    return out


def _small_config(strategy, **kw):
    data = DataConfig(domains=tuple(default_domains(20)[: kw.pop("domains", 2)]), samples_per_class=20)
    base = dict(strategy=StrategySpec(strategy), data=data, model=ModelConfig(hidden=6), rounds=3, batch_size=16)
    base.update(kw)
    return ExperimentConfig(**base)


def test_fedavg_scalar_average():
    a, b = _set_all(_client(0), 2.0), _set_all(_client(1), 4.0)
    upd = aggregate(StrategySpec("fedavg"), [a, b])
    for arr in upd.tensors.values():
        np.testing.assert_array_equal(arr, 3.0)


def test_by_samples_weighting():
    a, b = _set_all(_client(0), 2.0), _set_all(_client(1), 4.0)
    b = replace(b, train=b.train.subset(np.arange(len(b.train) // 2)))
    upd = aggregate(StrategySpec("fedavg", weighting="by_samples"), [a, b])
    na, nb = len(a.train), len(b.train)
    np.testing.assert_allclose(upd.tensors[(0, "weight")], (2 * na + 4 * nb) / (na + nb))


def test_fedstein_identical_clients_fixed_point():
    c = _perturbed(0)[0]
    clients = [replace(c, id=k, model=c.model.copy()) for k in range(3)]
    upd = aggregate(StrategySpec("fedstein"), clients)
    assert ParamKind.BN_AFFINE not in upd.kinds_present()
    for (i, name), arr in upd.tensors.items():
        assert np.array_equal(arr, c.model.layers[i].params[name]), name
    mean_rep, var_rep = upd.js_reports[1]
    assert mean_rep.factor == 1.0 and var_rep.factor == 1.0


def test_fedbn_vs_fedstein_structural_diff():
    clients = _perturbed(1)
    fb = aggregate(StrategySpec("fedbn"), clients)
    fs = aggregate(StrategySpec("fedstein"), clients)
    generic = {k for k, v in fb.kinds.items() if v == ParamKind.GENERIC}
    assert generic == {k for k, v in fs.kinds.items() if v == ParamKind.GENERIC}
    for k in generic:
        assert np.array_equal(fb.tensors[k], fs.tensors[k])
    assert set(fs.tensors) - set(fb.tensors) == {(1, "running_mean"), (1, "running_var")}
    assert set(fb.tensors) <= set(fs.tensors)


@pytest.mark.parametrize("name", sorted(STRATEGIES))
def test_routing_table(name):
    """Observed aggregate+broadcast behaviour matches the declared table for every kind."""
    strategy = StrategySpec(name)
    clients = _perturbed(2)
    before = [c.model.copy() for c in clients]
    upd = aggregate(strategy, clients)
    after = broadcast(strategy, upd, clients, t=1, rounds=10)
    want = dict(zip(("GENERIC", "BN_AFFINE", "BN_STATS"), STRATEGIES[name]))
    for i, pname, kind, _ in before[0].named():
        vals = [c.model.layers[i].params[pname] for c in after]
        olds = [m.layers[i].params[pname] for m in before]
        route = strategy.route(kind)
        assert route in ("aggregate", "local", "js", "aggregate+freeze")
        if route == "local":
            assert (i, pname) not in upd.tensors
            assert all(np.array_equal(v, o) for v, o in zip(vals, olds))
        else:
            assert all(np.array_equal(v, vals[0]) for v in vals)
            assert not np.array_equal(vals[0], olds[0])
        if kind == ParamKind.GENERIC:
            assert (route == "aggregate") == want["GENERIC"]
        elif kind == ParamKind.BN_AFFINE:
            assert (route == "aggregate") == want["BN_AFFINE"]
        else:
            assert {"local": "local", "js": "js", "aggregate": "average", "aggregate+freeze": "average"}[route] == want["BN_STATS"]
            if route == "js":
                from fedstein.jamesstein import js_adjust_stats
                mu, var, _ = js_adjust_stats([m.layers[i].running() for m in before], JsConfig())
                np.testing.assert_array_equal(vals[0], mu if pname == "running_mean" else var)
            elif route.startswith("aggregate"):
                np.testing.assert_allclose(vals[0], np.mean(olds, axis=0), rtol=1e-12)


def test_fedstein_and_fedavg_routes_explicitly():
    fs, fa = StrategySpec("fedstein"), StrategySpec("fedavg")
    assert [fs.route(k) for k in KINDS] == ["aggregate", "local", "js"]
    assert [fa.route(k) for k in KINDS] == ["aggregate", "aggregate", "aggregate"]
    assert StrategySpec("fixbn").route(ParamKind.BN_STATS) == "aggregate+freeze"


def test_fixbn_freezes_stats_after_t0():
    clients = _perturbed(3)
    strategy = StrategySpec("fixbn", freeze_round=5)
    upd = aggregate(strategy, clients)
    assert (1, "running_mean") in upd.tensors
    frozen = broadcast(strategy, upd, clients, t=5, rounds=10)
    live = broadcast(strategy, upd, clients, t=4, rounds=10)
    for c, f, l in zip(clients, frozen, live):
        assert np.array_equal(f.model.layers[1].params["running_mean"], c.model.layers[1].params["running_mean"])
        assert np.array_equal(f.model.layers[0].params["weight"], upd.tensors[(0, "weight")])
        assert np.array_equal(l.model.layers[1].params["running_mean"], upd.tensors[(1, "running_mean")])
    assert StrategySpec("fixbn").stats_frozen(15, 30) and not StrategySpec("fixbn").stats_frozen(14, 30)


def test_singleset_broadcast_leaves_clients_unchanged():
    clients = _perturbed(4)
    upd = aggregate(StrategySpec("singleset"), clients)
    assert not upd.tensors
    for c, a in zip(clients, broadcast(StrategySpec("singleset"), upd, clients)):
        for (_, _, _, x), (_, _, _, y) in zip(c.model.named(), a.model.named()):
            assert np.array_equal(x, y)


def test_broadcast_refuses_forbidden_kind():
    clients = _perturbed(5)
    rogue = GlobalUpdate({(1, "gamma"): np.ones(4)}, {(1, "gamma"): ParamKind.BN_AFFINE})
    with pytest.raises(ProtocolError):
        broadcast(StrategySpec("fedstein"), rogue, clients)
    stats = GlobalUpdate({(1, "running_mean"): np.zeros(4)}, {(1, "running_mean"): ParamKind.BN_STATS})
    with pytest.raises(ProtocolError):
        broadcast(StrategySpec("fedbn"), stats, clients)


@pytest.mark.parametrize("name", sorted(STRATEGIES))
def test_identical_clients_fixed_point_every_strategy(name):
    c = _perturbed(6)[0]
    clients = [replace(c, id=k, model=c.model.copy()) for k in range(3)]
    after = broadcast(StrategySpec(name), aggregate(StrategySpec(name), clients), clients)
    for a in after:
        for (_, n, _, x), (_, _, _, y) in zip(c.model.named(), a.model.named()):
            assert np.array_equal(x, y), n


def test_strategy_spec_invariants():
    with pytest.raises(ValueError):
        StrategySpec("fedstein", aggregate_bn_affine=True)
    with pytest.raises(ValueError):
        StrategySpec("fedavg", bn_stats_policy="js")
    with pytest.raises(ValueError):
        StrategySpec("fedavg", proximal_mu=0.1)
    with pytest.raises(ValueError):
        StrategySpec("nope")
    assert StrategySpec("fedprox", proximal_mu=0.01).proximal_mu == 0.01


def test_single_client_equivalence():
    """K=1: every aggregation is an identity, so these four strategies coincide bitwise."""
    finals = []
    for name in ("fedavg", "fedbn", "silobn", "fedstein"):
        sim = Simulation(_small_config(name, domains=1, rounds=4))
        sim.run()
        finals.append(sim.clients[0].model)
    for other in finals[1:]:
        for (_, n, _, x), (_, _, _, y) in zip(finals[0].named(), other.named()):
            assert np.array_equal(x, y), n


def test_lr_zero_round_changes_only_bn_stats():
    c = _client(0)
    out, _ = client_local_update(c, 1, 8, 0.0)
    for (_, n, kind, x), (_, _, _, y) in zip(c.model.named(), out.model.named()):
        if kind == ParamKind.BN_STATS:
            assert not np.array_equal(x, y), n
        else:
            assert np.array_equal(x, y), n


def test_fedavg_lr_zero_global_is_average_of_inits():
    cfg = _small_config("fedavg", rounds=1, lr=0.0)
    sim = Simulation(cfg)
    inits = [c.model.copy() for c in sim.clients]
    sim.run()
    for i, name, kind, arr in sim.global_model.named():
        if kind == ParamKind.GENERIC:
            expected = (inits[0].layers[i].params[name] + inits[1].layers[i].params[name]) / 2
            np.testing.assert_allclose(arr, expected, rtol=0, atol=1e-15)


def test_singleset_equals_standalone_training():
    cfg = _small_config("singleset", rounds=3)
    sim = Simulation(cfg)
    standalone = [replace(c, model=c.model.copy()) for c in sim.clients]
    sim.run()
    for c, s in zip(sim.clients, standalone):
        for t in range(1, cfg.rounds + 1):
            s, _ = client_local_update(s, cfg.local_epochs, cfg.batch_size, cfg.lr, t)
        for (_, n, _, x), (_, _, _, y) in zip(c.model.named(), s.model.named()):
            assert np.array_equal(x, y), n
    final = sim.metrics[-1]
    for c in sim.clients:
        acc = evaluate(c.model, [c.test])[c.domain]
        assert final.accuracy(f"client:{c.id}", c.domain) == acc


def test_local_update_reaches_high_train_accuracy():
    c = _client(0)
    out, _ = client_local_update(c, 50, 16, 0.05)
    assert evaluate(out.model, [out.train])["Average"] >= 0.95


def test_local_update_deterministic():
    a, la = client_local_update(_client(3), 2, 8, 0.1, t=4)
    b, lb = client_local_update(_client(3), 2, 8, 0.1, t=4)
    assert la == lb
    for (_, _, _, x), (_, _, _, y) in zip(a.model.named(), b.model.named()):
        assert np.array_equal(x, y)


def test_local_update_validates():
    with pytest.raises(ValueError):
        client_local_update(_client(0), 1, 1, 0.1)


def test_evaluate_perfect_and_average():
    c = _client(0)
    model, _ = client_local_update(c, 60, 16, 0.1)
    sep = evaluate(model.model, [model.train])
    assert sep[model.domain] == 1.0
    table = evaluate([_client(0).model, model.model], [_blobs(5), _blobs(6)])
    doms = [v for k, v in table.items() if k != "Average"]
    assert abs(table["Average"] - sum(doms) / len(doms)) < 1e-12


def test_evaluate_random_model_near_chance():
    rng = np.random.default_rng(11)
    y = np.repeat(np.arange(10), 100)
    ds = Dataset(rng.standard_normal((y.size, 8)), y, "r", 10)
    model = build_model([LayerSpec("dense", out=16), LayerSpec("relu"), LayerSpec("dense", out=10)], (8,), 11)
    assert abs(evaluate(model, [ds])["Average"] - 0.1) <= 0.05


def test_fedstein_keeps_affine_local_but_shares_generic():
    sim = Simulation(_small_config("fedstein", domains=3, rounds=3, lr=0.2))
    sim.run()
    g = [c.model.layers[1].params["gamma"] for c in sim.clients]
    w = [c.model.layers[0].params["weight"] for c in sim.clients]
    assert not np.array_equal(g[0], g[1])
    assert all(np.array_equal(w[0], x) for x in w)


def test_server_model_defaults_for_local_affine():
    clients = _perturbed(7)
    strategy = StrategySpec("fedbn")
    upd = aggregate(strategy, clients)
    g = server_model(strategy, clients, upd)
    np.testing.assert_array_equal(g.layers[1].params["gamma"], 1.0)
    np.testing.assert_array_equal(g.layers[1].params["beta"], 0.0)
    np.testing.assert_array_equal(g.layers[0].params["weight"], upd.tensors[(0, "weight")])


def test_threaded_workers_match_serial():
    a = Simulation(_small_config("fedstein", domains=3, rounds=2))
    b = Simulation(_small_config("fedstein", domains=3, rounds=2, workers=3))
    a.run(), b.run()
    for ca, cb in zip(a.clients, b.clients):
        for (_, _, _, x), (_, _, _, y) in zip(ca.model.named(), cb.model.named()):
            assert np.array_equal(x, y)
