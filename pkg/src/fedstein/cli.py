"""Command line entry point: ``fedstein {run,eval,gradcheck,gen-data}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import harness
from .config import load_config, parse_dict
from .datagen import load_idx, read_csv, write_csv
from .errors import FedSteinError
from .federation import evaluate
from .nn import DEFAULT_GRADCHECK_SPECS, LayerSpec, grad_check


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    sim = harness.run(cfg, resume=args.resume, until=args.until, output_dir=args.output_dir)
    out = args.output_dir or harness.resolve_output_dir(cfg)
    print(f"round {sim.round}/{cfg.rounds} done; outputs in {out}")
    if sim.round == cfg.rounds:
        print(harness.format_table(sim.summary()))
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    ckpt = harness.load_checkpoint(args.checkpoint, cfg)
    if args.labels:
        datasets = [load_idx(args.data, args.labels, Path(args.data).stem)]
    else:
        datasets = read_csv(args.data)
    tables = {"global": evaluate(ckpt["global"], datasets)}
    for cid, domain, model in ckpt["clients"]:
        mine = [ds for ds in datasets if ds.domain == domain]
        if mine:
            tables[f"client:{cid}"] = evaluate(model, mine)
    print(harness.format_table(tables))
    return 0


def _cmd_gradcheck(args) -> int:
    if args.spec:
        d = yaml.safe_load(Path(args.spec).read_text())
        specs = [(Path(args.spec).stem, [LayerSpec(**l) for l in d["layers"]], tuple(d["input_shape"]))]
    else:
        specs = DEFAULT_GRADCHECK_SPECS
    ok = True
    for name, layers, shape in specs:
        rep = grad_check(layers, shape, seed=args.seed, h=args.h, tol=args.tol)
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {name}: max rel. err. {rep.max_rel_err:.3e} at {rep.worst} ({rep.checked} entries)")
        ok &= rep.passed
    return 0 if ok else 1


def _cmd_gen_data(args) -> int:
    d = yaml.safe_load(Path(args.spec).read_text()) or {}
    if "strategy" not in d:
        d = {"strategy": {"name": "fedavg"}, "data": d.get("data", d)}
    cfg = parse_dict(d)
    seed = cfg.seed if args.seed is None else args.seed
    datasets = cfg.data.build(seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(datasets, out)
    print(f"wrote {sum(len(ds) for ds in datasets)} samples in {len(datasets)} domains to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedstein", description="Federated BN-statistics simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a YAML config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--resume", help="checkpoint to continue from")
    r.add_argument("--until", type=int, help="stop after this round")
    r.add_argument("--output-dir")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("eval", help="accuracy table of a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("data", help="dataset CSV, or IDX images file with --labels")
    e.add_argument("--labels", help="IDX labels file")
    e.add_argument("--config", help="refuse checkpoints written for a different config")
    e.set_defaults(func=_cmd_eval)

    g = sub.add_parser("gradcheck", help="backprop vs central finite differences")
    g.add_argument("spec", nargs="?", help="YAML with input_shape and layers (default: built-in specs)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=_cmd_gradcheck)

    d = sub.add_parser("gen-data", help="write a config's datasets to CSV")
    d.add_argument("spec", help="experiment config or bare data section (YAML)")
    d.add_argument("--out", default="data/datasets.csv")
    d.add_argument("--seed", type=int)
    d.set_defaults(func=_cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (FedSteinError, OSError, ValueError, KeyError) as exc:
        print(f"fedstein {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
