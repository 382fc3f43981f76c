"""Command line entry point: ``qrouting <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench
from .instances import DatasetError, generate_dataset, load_dataset, save_dataset
from .learner import TrainConfig, load_config, train
from .qnet import QNetwork


def _ints(text: str):
    return [int(v) for v in text.split(",") if v]


def cmd_gen(args):
    data = generate_dataset(args.count, args.n, args.depots, args.capacity, args.seed)
    save_dataset(args.out, data)
    print(json.dumps({"written": len(data), "out": args.out}))


def cmd_train(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    cfg = cfg.with_overrides(args.set or [])
    result = train(cfg, args.out_dir)
    print(json.dumps({"best_eval": result.best_eval, "out_dir": args.out_dir, "train_steps": len(result.steps)}))


def cmd_solve(args):
    net = QNetwork.load(args.checkpoint)
    data = load_dataset(args.instances)
    if args.mode == "greedy":
        solver = bench.greedy_solver(net)
    else:
        solver = bench.sampling_solver(net, args.samples, args.temperature, args.seed)
    with open(args.out, "w") as fh:
        for k, inst in enumerate(data):
            fh.write(json.dumps(solver(inst, k).to_dict()) + "\n")
    print(json.dumps({"solved": len(data), "out": args.out}))


def cmd_eval(args):
    data = load_dataset(args.instances)
    reports = []
    if args.checkpoint:
        net = QNetwork.load(args.checkpoint)
        reports.append(bench.evaluate(bench.greedy_solver(net), data, "greedy"))
        if args.samples:
            solver = bench.sampling_solver(net, args.samples, args.temperature, args.seed)
            reports.append(bench.evaluate(solver, data, f"sample{args.samples}"))
    baselines = {"nn": ("nearest_neighbor", bench.nn_solver), "oracle": ("brute_force", bench.oracle_solver)}
    for name in [b for b in (args.baselines or "").split(",") if b]:
        if name not in baselines:
            raise ValueError(f"unknown baseline {name!r}")
        label, make = baselines[name]
        reports.append(bench.evaluate(make(), data, label))
    if not reports:
        raise ValueError("nothing to evaluate: give --checkpoint and/or --baselines")
    gaps = bench.gaps_to_best(reports)
    doc = {"methods": [{**r.to_dict(), "gap_percent": gaps[r.method]} for r in reports]}
    Path(args.report).write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps({r.method: {"mean": r.mean_cost, "gap": round(gaps[r.method], 2), "passed": r.passed}
                      for r in reports}))
    if not all(r.passed for r in reports):
        raise RuntimeError("invalid solutions in report")


def cmd_tradeoff(args):
    net = QNetwork.load(args.checkpoint)
    rows = bench.tradeoff_curve(net, load_dataset(args.instances), _ints(args.samples), args.temperature, args.seed)
    bench.write_csv(args.out, rows, bench.TRADEOFF_HEADER)
    print(json.dumps({"rows": len(rows), "out": args.out}))


def cmd_generalize(args):
    nets = {Path(p).stem: QNetwork.load(p) for p in args.checkpoints.split(",") if p}
    rows = bench.generalization_matrix(nets, _ints(args.sizes), args.mode, args.count, args.seed,
                                       args.depots, args.samples, args.temperature)
    bench.write_csv(args.out, rows, bench.GENERALIZATION_HEADER)
    print(json.dumps({"rows": len(rows), "out": args.out}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qrouting", description="Q-learning for vehicle routing")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a JSON-lines dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--depots", type=int, default=1)
    g.add_argument("--capacity", type=int, default=None)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a Q-network")
    t.add_argument("--config", help="JSON or TOML file with TrainConfig fields")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("solve", help="decode instances with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--instances", required=True)
    s.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    s.add_argument("--samples", type=int, default=1024)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", help="evaluate a checkpoint and baselines")
    e.add_argument("--checkpoint")
    e.add_argument("--instances", required=True)
    e.add_argument("--baselines", default="")
    e.add_argument("--samples", type=int, default=0)
    e.add_argument("--temperature", type=float, default=1.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("tradeoff", help="mean cost against sample count")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--instances", required=True)
    o.add_argument("--samples", default="1,16,64,256,1024")
    o.add_argument("--temperature", type=float, default=1.0)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_tradeoff)

    z = sub.add_parser("generalize", help="cross-size evaluation of several checkpoints")
    z.add_argument("--checkpoints", required=True)
    z.add_argument("--sizes", required=True)
    z.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    z.add_argument("--count", type=int, default=100)
    z.add_argument("--depots", type=int, default=2)
    z.add_argument("--samples", type=int, default=64)
    z.add_argument("--temperature", type=float, default=1.0)
    z.add_argument("--seed", type=int, default=0)
    z.add_argument("--out", required=True)
    z.set_defaults(func=cmd_generalize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (DatasetError, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
