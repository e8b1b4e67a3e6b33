"""Command-line entry point: ``gridcrit <command> ...``.

Exit codes: 0 success, 1 computational failure (non-convergence,
divergence), 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from gridcrit import __version__
from gridcrit.dataset import (
    SCHEMA_VERSION,
    DatasetError,
    GenerationConfig,
    extract_features,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from gridcrit.grid import CaseError, ieee30, load_case
from gridcrit.metrics import MetricScores, confusion, format_table, scores, timing_comparison
from gridcrit.mgat import MODEL_SCHEMA_VERSION, Hyper, MgatModel, TrainingDivergedError, identify, train
from gridcrit.oracle import OracleConfig, evaluate_case
from gridcrit.powerflow import DEFAULT_MAX_ITER, DEFAULT_TOL, SingularJacobianError, solve_ac

log = logging.getLogger("gridcrit")

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class ComputeError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_oracle_flags(p):
    g = p.add_argument_group("oracle")
    g.add_argument("--k", type=int, default=5, help="transmission paths per generator/load pair")
    g.add_argument("--weights", type=_floats, default=None, help="5 node index weights (sum 1)")
    g.add_argument("--branch-weights", type=_floats, default=None, help="3 branch index weights (sum 1)")
    g.add_argument("--fraction", type=float, default=0.2)
    g.add_argument("--node-count", type=int, default=None)
    g.add_argument("--branch-count", type=int, default=None)
    g.add_argument("--rounding", choices=("floor", "ceil"), default="floor")
    g.add_argument("--exclude-endpoints", action="store_true")
    g.add_argument("--distance-degree", action="store_true", help="divide degree terms by electrical distance")


def _add_solver_flags(p):
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER)


def _add_train_flags(p):
    d = Hyper()
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--hidden", type=int, default=d.hidden)
    g.add_argument("--heads", type=int, default=d.heads)
    g.add_argument("--layers", type=int, default=d.layers)
    g.add_argument("--dropout", type=float, default=d.dropout)
    g.add_argument("--input-dropout", action="store_true", help="also drop input features")
    g.add_argument("--no-attention-dropout", action="store_true")
    g.add_argument("--slope", type=float, default=d.slope)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--lr-decay", type=float, default=d.lr_decay, help="per-epoch learning-rate factor")
    g.add_argument("--batch", type=int, default=d.batch, help="scenarios per Adam step")
    g.add_argument("--no-average", action="store_true", help="evaluate the last iterate, not the epoch mean")
    g.add_argument("--mode", choices=("static", "dynamic", "gatv2"), default=d.mode)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="gridcrit", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--version",
        action="version",
        version=f"gridcrit {__version__} (dataset schema {SCHEMA_VERSION}, model schema {MODEL_SCHEMA_VERSION})",
    )
    parser.add_argument("--config", help="JSON file supplying default flag values")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    # every "case" argument is a case file path, or "ieee30" for the bundled 30-bus case
    p = subs["solve"] = sub.add_parser("solve", help="AC power flow of a case file")
    p.add_argument("case")
    _add_solver_flags(p)
    p.add_argument("-o", "--out")

    p = subs["label"] = sub.add_parser("label", help="criticality report of a case")
    p.add_argument("case")
    _add_oracle_flags(p)
    _add_solver_flags(p)
    p.add_argument("-o", "--out")

    p = subs["gen"] = sub.add_parser("gen", help="generate a labelled scenario dataset")
    p.add_argument("case")
    p.add_argument("--n", type=int, default=100, help="scenarios to attempt")
    p.add_argument("--seed", type=int)
    p.add_argument("--lo", type=float, default=0.8)
    p.add_argument("--hi", type=float, default=1.2)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=False, help="dataset directory")
    _add_oracle_flags(p)
    _add_solver_flags(p)

    p = subs["train"] = sub.add_parser("train", help="train a node or branch classifier")
    p.add_argument("dataset")
    p.add_argument("--target", choices=("nodes", "branches"), default="nodes")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="model file (model.json)")
    p.add_argument("--curves", help="per-epoch CSV (default: <out>.curves.csv)")
    _add_train_flags(p)

    p = subs["eval"] = sub.add_parser("eval", help="confusion metrics on a dataset split")
    p.add_argument("dataset")
    p.add_argument("--model", action="append", required=False, help="model file; repeatable")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("-o", "--out")

    p = subs["identify"] = sub.add_parser("identify", help="predict critical links of a case")
    p.add_argument("case")
    p.add_argument("--model", action="append", required=False)
    _add_solver_flags(p)
    p.add_argument("-o", "--out")

    p = subs["bench"] = sub.add_parser("bench", help="oracle vs model timing")
    p.add_argument("case")
    p.add_argument("--model", action="append", required=False)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    _add_oracle_flags(p)
    p.add_argument("-o", "--out")
    return parser, subs


def _apply_config(argv, parser, subs):
    """Feed config-file values in as subcommand defaults; explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = json.loads(Path(known.config).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    for name, p in subs.items():
        dests = {a.dest for a in p._actions}
        flat = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
        section = {k.replace("-", "_"): v for k, v in cfg.get(name, {}).items()}
        merged = {k: v for k, v in {**flat, **section}.items() if k in dests}
        for key in ("weights", "branch_weights"):
            if isinstance(merged.get(key), list):
                merged[key] = tuple(merged[key])
        p.set_defaults(**merged)


def _oracle_config(args) -> OracleConfig:
    kw = dict(
        k=args.k,
        fraction=args.fraction,
        node_count=args.node_count,
        branch_count=args.branch_count,
        rounding=args.rounding,
        include_endpoints=not args.exclude_endpoints,
        distance_weighted_degree=args.distance_degree,
    )
    if args.weights is not None:
        kw["node_weights"] = tuple(args.weights)
    if args.branch_weights is not None:
        kw["branch_weights"] = tuple(args.branch_weights)
    cfg = OracleConfig(**kw)
    if len(cfg.node_weights) != 5 or len(cfg.branch_weights) != 3:
        raise UsageError("need 5 node weights and 3 branch weights")
    return cfg


def _hyper(args) -> Hyper:
    return Hyper(
        layers=args.layers,
        hidden=args.hidden,
        heads=args.heads,
        slope=args.slope,
        dropout=args.dropout,
        input_dropout=args.input_dropout,
        attention_dropout=not args.no_attention_dropout,
        lr=args.lr,
        weight_decay=args.weight_decay,
        lr_decay=args.lr_decay,
        batch=args.batch,
        average=not args.no_average,
        epochs=args.epochs,
        mode=args.mode,
        seed=args.seed,
    )


def _emit(obj, out) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_case(path):
    if path == "ieee30" and not Path(path).exists():
        return ieee30()
    if not Path(path).is_file():
        raise UsageError(f"case file not found: {path}")
    return load_case(path)


def _solve(case, args):
    try:
        flow = solve_ac(case, args.tol, args.max_iter)
    except SingularJacobianError as exc:
        raise ComputeError(str(exc)) from None
    return flow


def _models(args) -> list[MgatModel]:
    if not args.model:
        raise UsageError("at least one --model is required")
    out = []
    for path in args.model:
        if not Path(path).is_file():
            raise UsageError(f"model file not found: {path}")
        try:
            out.append(MgatModel.load(path))
        except (ValueError, KeyError) as exc:
            raise UsageError(f"bad model file {path}: {exc}") from None
    return out


def cmd_solve(args) -> int:
    case = _load_case(args.case)
    flow = _solve(case, args)
    _emit({"case": str(args.case), "tol": args.tol, "max_iter": args.max_iter, "solution": flow.to_dict()}, args.out)
    if not flow.converged:
        print(f"power flow did not converge after {flow.iterations} iterations", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


def cmd_label(args) -> int:
    case = _load_case(args.case)
    flow = _solve(case, args)
    if not flow.converged:
        raise ComputeError("power flow did not converge")
    report = evaluate_case(case, flow, _oracle_config(args))
    _emit(report.to_dict(), args.out)
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.seed is None:
        raise UsageError("gen requires --seed")
    if not args.out:
        raise UsageError("gen requires --out")
    case = _load_case(args.case)
    cfg = GenerationConfig(n_target=args.n, seed=args.seed, lo=args.lo, hi=args.hi, tol=args.tol, max_iter=args.max_iter)
    try:
        ds = generate_dataset(case, cfg, _oracle_config(args), jobs=args.jobs)
    except DatasetError as exc:
        raise ComputeError(str(exc)) from None
    save_dataset(ds, args.out)
    print(f"{ds.converged} converged, {ds.discarded} discarded -> {args.out}", file=sys.stderr)
    return EXIT_OK


def _load_ds(path):
    if not (Path(path) / "meta.json").is_file():
        raise UsageError(f"not a dataset directory: {path}")
    try:
        return load_dataset(path)
    except DatasetError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    if args.seed is None:
        raise UsageError("train requires --seed")
    if not args.out:
        raise UsageError("train requires --out")
    ds = _load_ds(args.dataset)

    def progress(row):
        log.info("epoch %d train %.5f val %.5f acc %.4f", row["epoch"], row["train_loss"], row["val_loss"], row["val_acc"])

    try:
        model, report = train(ds, args.target, _hyper(args), log=progress)
    except TrainingDivergedError as exc:
        raise ComputeError(str(exc)) from None
    model.save(args.out)
    curves = args.curves or str(Path(args.out).with_suffix("")) + ".curves.csv"
    report.write_csv(curves)
    print(f"best epoch {report.best_epoch} -> {args.out}, {curves}", file=sys.stderr)
    return EXIT_OK


def evaluate_models(ds, models, split="test") -> dict:
    graphs = ds.subset(split, normalized=False)
    out = {}
    for m in models:
        cm = None
        for g in graphs:
            pred, _ = identify(m, g)
            c = confusion(pred, g.labels(m.target))
            cm = c if cm is None else cm + c
        out[m.target] = {"confusion": vars(cm).copy() if cm else None, "scores": scores(cm).to_dict()}
    return out


def cmd_eval(args) -> int:
    ds = _load_ds(args.dataset)
    models = _models(args)
    result = evaluate_models(ds, models, args.split)
    payload = {"split": args.split, "n_scenarios": len(ds.split[args.split]), "results": result}
    _emit(payload, args.out)
    table = format_table({k: MetricScores(**v["scores"]) for k, v in result.items()})
    print(table, file=sys.stdout if args.out else sys.stderr)
    return EXIT_OK


def cmd_identify(args) -> int:
    case = _load_case(args.case)
    models = _models(args)
    flow = _solve(case, args)
    if not flow.converged:
        raise ComputeError("power flow did not converge")
    graph = extract_features(case, flow)
    out = {}
    for m in models:
        labels, probs = identify(m, graph)
        ids = case.bus_ids if m.target == "nodes" else [br.id for br in case.branches]
        out[m.target] = {
            "ids": ids,
            "labels": labels.astype(int).tolist(),
            "p_critical": probs[:, 0].tolist(),
            "critical": [i for i, l in zip(ids, labels) if l],
        }
    _emit(out, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    case = _load_case(args.case)
    models = _models(args)
    rep = timing_comparison(case, models, args.n, args.seed, _oracle_config(args))
    _emit(rep.to_dict(), args.out)
    if rep.speedup is not None:
        print(
            f"oracle {rep.oracle_seconds:.2f}s, model {rep.model_seconds:.2f}s "
            f"(features {rep.feature_seconds:.2f}s, inference {rep.inference_seconds:.2f}s), "
            f"speedup {rep.speedup:.1f}x",
            file=sys.stderr,
        )
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "label": cmd_label,
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "identify": cmd_identify,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        _apply_config(argv, parser, subs)
    except UsageError as exc:
        print(f"gridcrit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    np.seterr(all="ignore")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, CaseError, OSError) as exc:
        print(f"gridcrit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"gridcrit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ComputeError as exc:
        print(f"gridcrit: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
