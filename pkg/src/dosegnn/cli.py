"""``dosegnn`` command line.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from dosegnn import __version__
from dosegnn.bundle import BundleError, read_bundle, read_dataset, read_volume, write_volume
from dosegnn.evaluation import (
    EvaluationError,
    cdvh,
    compare_models,
    dose_grid_structures,
    dvh_bins,
    rmse,
)
from dosegnn.graph import GraphConfig, build_graph, write_graph_json
from dosegnn.model import EncoderConfig, Model, ModelConfig, ModelError, predict
from dosegnn.phantom import PhantomConfig, PhantomConfigError, generate_dataset, write_dataset
from dosegnn.train import NumericalError, TrainConfig, split_dataset, train_model
from dosegnn.volume import GeometryError, VoxelGrid

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DATA_ERRORS = (BundleError, GeometryError, EvaluationError, ModelError, PhantomConfigError,
               FileNotFoundError, KeyError, json.JSONDecodeError)


class UsageError(Exception):
    pass


def _dump(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


# execution-only settings never reach artifacts, so outputs are byte-stable across them
EXECUTION_ONLY = ("threads", "verbose")


def _resolved(args: argparse.Namespace, artifact: bool = True) -> dict:
    skip = ("func",) + (EXECUTION_ONLY if artifact else ())

    def plain(v):
        if isinstance(v, Path):
            return str(v)
        return [plain(x) for x in v] if isinstance(v, list) else v

    return {k: plain(v) for k, v in vars(args).items() if k not in skip}


def _split(plans, seed: int, n_test: int):
    cfg = TrainConfig(seed=seed, n_train=len(plans) - n_test, n_test=n_test)
    try:
        return split_dataset(plans, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_phantom_generate(args) -> int:
    cfg = PhantomConfig(seed=args.seed)
    bundles = generate_dataset(cfg, args.count)
    write_dataset(bundles, args.out, cfg)
    print(f"wrote {len(bundles)} cases to {args.out}")
    return EXIT_OK


def cmd_graph_stats(args) -> int:
    plan = read_bundle(args.plan)
    g = build_graph(plan.ct, plan.dose, GraphConfig(threshold=args.threshold_mm), threads=args.threads)
    summary = g.summary()
    print(json.dumps({k: v for k, v in summary.items() if k != "degree_histogram"}))
    if args.out:
        write_graph_json(g, args.out, _resolved(args))
    return EXIT_OK


def cmd_train(args) -> int:
    plans = read_dataset(args.data)
    train_set, _ = _split(plans, args.seed, args.n_test)
    model_cfg = ModelConfig(
        kind=args.model,
        encoder=EncoderConfig(kind=args.encoder),
        threshold=args.threshold_mm,
    )
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                      n_train=len(train_set), n_test=args.n_test)
    model, report = train_model(model_cfg, train_set, cfg, threads=args.threads)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    report_path = args.report or args.out.parent / "report.json"
    doc = {"config": _resolved(args), "model_config": model_cfg.to_dict(), **report.to_dict()}
    _dump(doc, report_path)
    print(f"final loss {report.epoch_loss[-1] if report.epoch_loss else float('nan'):.6g}; "
          f"model written to {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = Model.load(args.model)
    plan = read_bundle(args.plan)
    pred = predict(model, plan, threads=args.threads)
    args.out.mkdir(parents=True, exist_ok=True)
    write_volume(args.out / "pred.f32", pred)
    geom = plan.dose
    _dump({
        "config": _resolved(args),
        "plan": plan.name,
        "model_kind": model.kind,
        "origin": list(geom.origin),
        "spacing": list(geom.spacing),
        "dims": list(geom.dims),
        "file": "pred.f32",
        "unit": "Gy",
    }, args.out / "pred.json")
    print(f"wrote prediction for {plan.name} to {args.out}")
    return EXIT_OK


def _read_prediction(pred_dir: Path, plan) -> np.ndarray:
    meta = json.loads((pred_dir / "pred.json").read_text())
    geom = VoxelGrid(meta["origin"], meta["spacing"], meta["dims"])
    if not geom.same_geometry(plan.dose):
        raise EvaluationError(f"prediction in {pred_dir} is not on the dose grid of {plan.name!r}")
    return read_volume(pred_dir / meta.get("file", "pred.f32"), geom.size).astype(np.float64)


def cmd_evaluate(args) -> int:
    plan = read_bundle(args.plan)
    if not plan.has_dose:
        raise EvaluationError(f"plan {plan.name!r} has no ground-truth dose")
    pred = _read_prediction(args.pred, plan)
    doc = {"config": _resolved(args), "plan": plan.name,
           "rmse": rmse(pred, plan.dose.values.astype(np.float64))}
    print(json.dumps({"plan": doc["plan"], "rmse": doc["rmse"]}))
    if args.out:
        _dump(doc, args.out)
    return EXIT_OK


def cmd_cdvh(args) -> int:
    plan = read_bundle(args.plan)
    if args.pred:
        dose = _read_prediction(args.pred, plan)
    elif plan.has_dose:
        dose = plan.dose.values
    else:
        raise EvaluationError(f"plan {plan.name!r} has no dose and no --pred was given")
    masks = {m.name: m for m in dose_grid_structures(plan)}
    if args.structure not in masks:
        raise EvaluationError(f"structure {args.structure!r} not found on the dose grid of {plan.name!r}")
    curve = cdvh(dose, masks[args.structure], dvh_bins(plan.prescription_dose, args.bins))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(curve.to_csv())
    else:
        sys.stdout.write(curve.to_csv())
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.models:
        raise UsageError("report needs at least one --models entry")
    plans = read_dataset(args.data)
    _, test_set = _split(plans, args.seed, args.n_test)
    models = {}
    for path in args.models:
        model = Model.load(path)
        name = model.kind if model.kind not in models else Path(path).stem
        models[name] = model
    config = _resolved(args)
    config["model_checksums"] = {name: m.checksum() for name, m in models.items()}
    report = compare_models(models, test_set, n_bins=args.bins, config=config, threads=args.threads)
    report.write(args.out)
    for name, value in report.mean_rmse.items():
        print(f"{name}: mean test RMSE {value:.4f} Gy")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)

    parser = argparse.ArgumentParser(prog="dosegnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dosegnn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic datasets")
    psub = phantom.add_subparsers(dest="action", required=True)
    gen = psub.add_parser("generate", parents=[common])
    gen.add_argument("--count", type=int, default=20)
    gen.add_argument("--out", type=Path, required=True)
    gen.set_defaults(func=cmd_phantom_generate)

    graph = sub.add_parser("graph", help="graph diagnostics")
    gsub = graph.add_subparsers(dest="action", required=True)
    stats = gsub.add_parser("stats", parents=[common])
    stats.add_argument("--plan", type=Path, required=True)
    stats.add_argument("--threshold-mm", type=float, default=5.0)
    stats.add_argument("--out", type=Path)
    stats.set_defaults(func=cmd_graph_stats)

    train = sub.add_parser("train", parents=[common])
    train.add_argument("--data", type=Path, required=True)
    train.add_argument("--model", choices=["dosegnn", "heuristic1", "heuristic2"], default="dosegnn")
    train.add_argument("--encoder", choices=["mlp", "cnn3d"], default="mlp")
    train.add_argument("--threshold-mm", type=float, default=5.0)
    train.add_argument("--epochs", type=int, default=200)
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--n-test", type=int, default=5)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--report", type=Path)
    train.set_defaults(func=cmd_train)

    pred = sub.add_parser("predict", parents=[common])
    pred.add_argument("--model", type=Path, required=True)
    pred.add_argument("--plan", type=Path, required=True)
    pred.add_argument("--out", type=Path, required=True)
    pred.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", parents=[common])
    ev.add_argument("--plan", type=Path, required=True)
    ev.add_argument("--pred", type=Path, required=True)
    ev.add_argument("--out", type=Path)
    ev.set_defaults(func=cmd_evaluate)

    cd = sub.add_parser("cdvh", parents=[common])
    cd.add_argument("--plan", type=Path, required=True)
    cd.add_argument("--pred", type=Path)
    cd.add_argument("--structure", default="PTV")
    cd.add_argument("--bins", type=int, default=100)
    cd.add_argument("--out", type=Path)
    cd.set_defaults(func=cmd_cdvh)

    rep = sub.add_parser("report", parents=[common])
    rep.add_argument("--data", type=Path, required=True)
    rep.add_argument("--models", type=Path, nargs="*", default=[])
    rep.add_argument("--n-test", type=int, default=5)
    rep.add_argument("--bins", type=int, default=100)
    rep.add_argument("--out", type=Path, required=True)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    print(json.dumps({"command": args.command, **_resolved(args, artifact=False)}, sort_keys=True),
          file=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dosegnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"dosegnn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"dosegnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
