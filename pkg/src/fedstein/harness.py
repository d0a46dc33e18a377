"""Metrics CSV, checkpoints, and the run driver that ties them together.

Output directory layout of one run::

    config.yaml       full effective configuration (reproduces the run)
    metrics.csv       round,scope,domain,split,loss,accuracy
    js_reports.csv    round,layer,moment,raw_factor,factor,sigma2,applied
    checkpoint.json   latest checkpoint (see save_checkpoint)

``metrics.csv`` rows come per evaluated round in this order: for each client
``client:<id>`` train then test, then ``local,Average``, then ``global``
rows for every seen domain, every unseen domain (split ``unseen``) and
``global,Average``.  The file ends with summary rows whose round column is
``summary``: seen domains evaluated with their client model (scope
``seen``) plus their Average, then unseen domains with the global model
(scope ``unseen``).  Summary accuracies are percentages with one decimal
and an empty loss; all other numbers are shortest round-trip decimals.

Checkpoints are JSON.  Every float is written with Python's shortest
round-trip ``repr``, so load followed by save reproduces the file byte for
byte.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, config_hash
from .errors import CheckpointMismatchError, FormatError
from .federation import MetricRow, RoundMetrics, Simulation
from .jamesstein import JsReport
from .nn import LayerSpec, ModelState, ParamKind

logger = logging.getLogger(__name__)

METRICS_HEADER = ["round", "scope", "domain", "split", "loss", "accuracy"]
JS_HEADER = ["round", "layer", "moment", "raw_factor", "factor", "sigma2", "applied"]
CHECKPOINT_FORMAT = "fedstein-checkpoint/1"
OUTPUT_ENV = "FEDSTEIN_OUTPUT_DIR"


def _num(x: float) -> str:
    return repr(float(x))


def write_metrics(metrics: Sequence[RoundMetrics], path, summary: Optional[Dict[str, Dict[str, float]]] = None):
    if not metrics:
        raise ValueError("no metrics to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in metrics:
            for r in m.rows:
                w.writerow([m.round, r.scope, r.domain, r.split, _num(r.loss), _num(r.accuracy)])
        for scope, table in (summary or {}).items():
            split = "test" if scope == "seen" else "unseen"
            for domain, acc in table.items():
                w.writerow(["summary", scope, domain, split, "", f"{100 * acc:.1f}"])


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_js_reports(metrics: Sequence[RoundMetrics], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(JS_HEADER)
        for m in metrics:
            for layer in sorted(m.js_reports):
                for moment, rep in zip(("mean", "var"), m.js_reports[layer]):
                    w.writerow([m.round, layer, moment, _num(rep.raw_factor), _num(rep.factor),
                                _num(rep.sigma2_used), int(rep.applied)])


def format_table(tables: Dict[str, Dict[str, float]]) -> str:
    lines = []
    for scope, table in tables.items():
        lines.append(f"[{scope}]")
        for domain, acc in table.items():
            lines.append(f"  {domain:<16}{100 * acc:6.1f}")
    return "\n".join(lines)


# -- checkpoints ------------------------------------------------------------

def model_to_dict(model: ModelState) -> dict:
    return {
        "input_shape": list(model.input_shape),
        "eps": model.eps,
        "momentum": model.momentum,
        "layers": [
            {
                "spec": layer.spec.to_dict(),
                "params": {
                    name: {
                        "kind": layer.kinds[name].value,
                        "shape": list(arr.shape),
                        "data": [float(v) for v in arr.reshape(-1)],
                    }
                    for name, arr in layer.params.items()
                },
            }
            for layer in model.layers
        ],
    }


def model_from_dict(d: dict) -> ModelState:
    from .nn import build_model

    specs = [LayerSpec.from_dict(l["spec"]) for l in d["layers"]]
    model = build_model(specs, d["input_shape"], 0, d["eps"], d["momentum"])
    for layer, ld in zip(model.layers, d["layers"]):
        if set(ld["params"]) != set(layer.params):
            raise FormatError(f"checkpoint params {sorted(ld['params'])} do not match layer {layer.spec}")
        for name, p in ld["params"].items():
            arr = np.array(p["data"], dtype=np.float64).reshape(p["shape"])
            if arr.shape != layer.params[name].shape:
                raise FormatError(f"param {name}: shape {arr.shape} vs expected {layer.params[name].shape}")
            kind = ParamKind(p["kind"])
            if kind != layer.kinds[name]:
                raise FormatError(f"param {name}: kind {kind.value} vs expected {layer.kinds[name].value}")
            layer.params[name] = arr
    return model


def _metrics_to_list(metrics: Sequence[RoundMetrics]) -> list:
    return [
        {
            "round": m.round,
            "rows": [[r.scope, r.domain, r.split, r.loss, r.accuracy] for r in m.rows],
            "js": [
                [layer, [[rep.raw_factor, rep.factor, rep.sigma2_used, rep.applied] for rep in pair]]
                for layer, pair in sorted(m.js_reports.items())
            ],
        }
        for m in metrics
    ]


def _metrics_from_list(items: list) -> List[RoundMetrics]:
    out = []
    for it in items:
        rows = [MetricRow(*r) for r in it["rows"]]
        reps = {int(layer): tuple(JsReport(*rep) for rep in pair) for layer, pair in it["js"]}
        out.append(RoundMetrics(it["round"], rows, reps))
    return out


def checkpoint_dict(sim: Simulation) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash(sim.config),
        "round": sim.round,
        "clients": [{"id": c.id, "domain": c.domain, "model": model_to_dict(c.model)} for c in sim.clients],
        "global": model_to_dict(sim.global_model),
        "metrics": _metrics_to_list(sim.metrics),
    }


def dumps_checkpoint(d: dict) -> str:
    return json.dumps(d, indent=1, allow_nan=False) + "\n"


def save_checkpoint(sim: Simulation, path):
    Path(path).write_text(dumps_checkpoint(checkpoint_dict(sim)))


def load_checkpoint(path, config: Optional[ExperimentConfig] = None, override: bool = False) -> dict:
    """Parse a checkpoint file.

    With ``config`` given, refuses (``CheckpointMismatchError``) when the
    stored hash differs unless ``override`` is set.  Returns a dict with
    ``round``, ``clients`` (list of (id, domain, ModelState)), ``global``,
    ``metrics`` and the raw ``config_hash``.
    """
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a JSON checkpoint: {exc}") from exc
    if not isinstance(d, dict) or d.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: missing or unknown checkpoint format tag")
    if config is not None and not override and d["config_hash"] != config_hash(config):
        raise CheckpointMismatchError(
            f"{path}: checkpoint was written for config {d['config_hash'][:12]}, "
            f"current config is {config_hash(config)[:12]}"
        )
    try:
        return {
            "config_hash": d["config_hash"],
            "round": int(d["round"]),
            "clients": [(c["id"], c["domain"], model_from_dict(c["model"])) for c in d["clients"]],
            "global": model_from_dict(d["global"]),
            "metrics": _metrics_from_list(d["metrics"]),
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed checkpoint: {exc}") from exc


def restore(sim: Simulation, ckpt: dict) -> Simulation:
    if len(ckpt["clients"]) != len(sim.clients):
        raise FormatError(f"checkpoint has {len(ckpt['clients'])} clients, config yields {len(sim.clients)}")
    for c, (cid, domain, model) in zip(sim.clients, ckpt["clients"]):
        if (c.id, c.domain) != (cid, domain):
            raise FormatError(f"checkpoint client {cid}/{domain} does not match {c.id}/{c.domain}")
        c.model = model
    sim.global_model = ckpt["global"]
    sim.round = ckpt["round"]
    sim.metrics = ckpt["metrics"]
    return sim


def resolve_output_dir(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or config.output_dir)


def run(config: ExperimentConfig, resume: Optional[str] = None, until: Optional[int] = None,
        output_dir=None) -> Simulation:
    """Run (or resume) an experiment and write every artifact to disk."""
    out = Path(output_dir) if output_dir is not None else resolve_output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(config.dump())
    logger.info("effective config:\n%s", config.dump())
    sim = Simulation(config)
    if resume is not None:
        restore(sim, load_checkpoint(resume, config))
    sim.run(until)
    if sim.metrics:
        summary = sim.summary() if sim.round == config.rounds else None
        write_metrics(sim.metrics, out / "metrics.csv", summary)
        write_js_reports(sim.metrics, out / "js_reports.csv")
    save_checkpoint(sim, out / "checkpoint.json")
    return sim
