"""Command line entry point: ``fedali run | eval | export-embeddings``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import Dataset, load_windows
from .evalharness import (ConfigError, cross_predictions, generalization_score, macro_f1,
                          personalization_score, run_experiment, server_view)
from .federation import load_checkpoint
from .model import export_embeddings, predict

log = logging.getLogger("fedali")


def _test_sets(path: Path) -> list[Dataset]:
    if path.is_file():
        return [load_windows(path)]
    files = sorted(path.glob("client_*_test.npz"))
    if not files:
        raise FileNotFoundError(f"{path}: no client_*_test.npz files")
    return [load_windows(f) for f in files]


def _default_data_dir(ckpt: Path, meta: dict) -> Path:
    # <out>/<label>/seed<k>/checkpoints/round_NNNN.npz -> <out>/data/seed<k>
    return ckpt.resolve().parents[3] / "data" / f"seed{meta.get('seed', 0)}"


def cmd_run(args) -> int:
    strategies = [s.strip() for s in args.strategies.split(",")] if args.strategies else None
    seeds = [args.seed] if args.seed is not None else None
    out = run_experiment(args.config, args.out, seeds=seeds, strategies=strategies, resume=args.resume)
    summary = json.loads((out / "summary.json").read_text())
    print(f"{'strategy':<16}{'seed':>6}{'round':>7}{'personal':>18}{'general':>18}{'global':>9}")
    for label, per_seed in summary.items():
        for seed, rep in per_seed.items():
            def fmt(x):
                return "N/A" if x is None else f"{x['mean']:.2f} ± {x['std']:.2f}"
            g = "N/A" if rep["global"] is None else f"{rep['global']:.2f}"
            rnd = "-" if rep["round"] is None else rep["round"]
            print(f"{label:<16}{seed:>6}{rnd:>7}{fmt(rep['personalization']):>18}"
                  f"{fmt(rep['generalization']):>18}{g:>9}")
    print(f"artifacts: {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    server, clients, meta = load_checkpoint(ckpt)
    tests = _test_sets(Path(args.data) if args.data else _default_data_dir(ckpt, meta))
    classes = server.weights.config.classes
    result = {"round": server.round, "strategy": server.strategy.name}
    if server.strategy.name != "centralized":
        if len(clients) != len(tests):
            raise ValueError(f"checkpoint has {len(clients)} clients but {len(tests)} test sets were found")
        preds = cross_predictions([clients[cid][0] for cid in sorted(clients)], tests)
        for key, fn in (("personalization", personalization_score), ("generalization", generalization_score)):
            s = fn(preds, tests, classes)
            result[key] = {"mean": s.mean, "std": s.std}
    if server.strategy.has_global_model:
        union = Dataset.union(tests)
        result["global"] = macro_f1(predict(server_view(server.weights), union.samples), union.labels, classes)
    else:
        result["global"] = None
    print(json.dumps(result, indent=2))
    return 0


def cmd_export(args) -> int:
    ckpt = Path(args.ckpt)
    server, clients, meta = load_checkpoint(ckpt)
    if args.client is None:
        weights = server_view(server.weights)
    else:
        weights = clients[args.client][0]
    tests = _test_sets(Path(args.data) if args.data else _default_data_dir(ckpt, meta))
    data = tests[args.client] if args.client is not None and len(tests) > args.client else Dataset.union(tests)
    emb, _ = export_embeddings(weights, data, args.block, path=args.out)
    print(f"wrote {emb.shape[0]} x {emb.shape[1]} embeddings to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedali", description="Federated training with prototype alignment.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--strategies", help="comma separated, e.g. fedavg,fedali,fedprox(0.1)")
    r.add_argument("--out", default="runs")
    r.add_argument("--resume", help="checkpoint file to continue from")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help="directory of client_*_test.npz files (default: next to the run)")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-embeddings", help="dump per-sample block embeddings as CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--block", type=int, required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--data")
    x.add_argument("--client", type=int, help="client model to use (default: server model)")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
