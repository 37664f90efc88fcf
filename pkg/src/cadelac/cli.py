"""Command line entry point: ``cadelac {collect,train,eval,run-mpc,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from cadelac import harness, pipeline
from cadelac.checkpoint import Checkpoint
from cadelac.config import ExperimentConfig
from cadelac.sim import load_dataset, save_dataset


def load_config(spec):
    """Either a path to a JSON file or the name of a bundled config (``desk``, ``full``)."""
    if os.path.exists(spec):
        return ExperimentConfig.load(spec)
    return ExperimentConfig.builtin(spec)


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)


def cmd_collect(args):
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    ds = pipeline.collect(cfg, seed)
    save_dataset(ds, args.out, csv_export=not args.no_csv)
    pipeline.write_manifest(args.out, cfg, command="collect", seed=seed, dataset_hash=ds.manifest.get("config_hash"))
    print(f"collected {len(ds.records)} trajectories ({ds.n_rows} rows) into {args.out}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    ds = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "checkpoint.json")
    ckpt, report = pipeline.fit(cfg, ds, path, args.epochs)
    report.save(os.path.join(args.out, "train_report.json"))
    report.save_loss_csv(os.path.join(args.out, "loss.csv"))
    _dump(os.path.join(args.out, "timing.json"), {"wall_time_s": report.wall_time})
    pipeline.write_manifest(args.out, cfg, command="train", seed=cfg.train.seed,
                            checkpoint_hash=ckpt.manifest.get("hash"))
    print(f"checkpoint written to {path}")
    print("held-out residual rmse  model", _fmt(report.rmse_heldout), " nominal", _fmt(report.rmse_nominal_heldout))
    return 0


def _fmt(v):
    return "[" + ", ".join(f"{x:.4g}" for x in v) + "]"


def cmd_eval(args):
    cfg = load_config(args.config)
    bounds = {"residual_ratio": 0.5, "tracking_reduction": 0.2, **(cfg.eval.bounds or {})}
    ckpt = Checkpoint.load(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    ok = True
    if args.data:
        metrics = pipeline.residual_metrics(ckpt, load_dataset(args.data))
        _dump(os.path.join(args.out, "residual_metrics.json"), metrics)
        passed, lines = pipeline.residual_check(metrics, bounds["residual_ratio"])
        ok &= passed
        print("residual prediction on held-out environments")
        print("\n".join("  " + s for s in lines))
    if args.closed_loop:
        scenarios = pipeline.tracking_scenarios(cfg, args.n_envs, args.n_traj, args.reference,
                                                duration=args.duration, inner_loop=args.inner_loop or None)
        reports, _ = pipeline.run_tracking(cfg, ckpt, scenarios, args.out if args.logs else None)
        agg = harness.aggregate_and_export(reports, args.out)
        passed, lines = pipeline.tracking_check(agg, bounds["tracking_reduction"])
        ok &= passed
        print("closed-loop tracking")
        print("\n".join("  " + s for s in lines))
    pipeline.write_manifest(args.out, cfg, command="eval", seed=cfg.eval.seed, checkpoint=args.checkpoint)
    if args.assert_bounds and not ok:
        print("evaluation bounds violated", file=sys.stderr)
        return 1
    return 0


def _scenarios_from_file(path):
    with open(path) as fh:
        raw = json.load(fh)
    items = raw["scenarios"] if isinstance(raw, dict) and "scenarios" in raw else raw
    items = items if isinstance(items, list) else [items]
    out = []
    for item in items:
        ctrls = item.get("controllers")
        if ctrls:
            base = {k: v for k, v in item.items() if k != "controllers"}
            out += [harness.ScenarioConfig.from_dict({**base, "controller": c, "name": ""}) for c in ctrls]
        else:
            out.append(harness.ScenarioConfig.from_dict(item))
    return out


def cmd_run_mpc(args):
    cfg = load_config(args.config)
    ckpt = Checkpoint.load(args.checkpoint) if args.checkpoint else None
    scenarios = _scenarios_from_file(args.scenario)
    if ckpt is None and any(s.controller == "cadelac" for s in scenarios):
        print("the cadelac controller needs --checkpoint", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    _dump(os.path.join(args.out, "scenarios.json"), [s.to_dict() for s in scenarios])
    reports, _ = pipeline.run_tracking(cfg, ckpt, scenarios, args.out)
    agg = harness.aggregate_and_export(reports, args.out)
    pipeline.write_manifest(args.out, cfg, command="run-mpc", seeds=[s.seed for s in scenarios],
                            checkpoint=args.checkpoint)
    _print_table(agg)
    return 0


def _print_table(agg):
    print(f"{'controller':<10} {'runs':>4} {'div':>4} {'rmse_ee':>10} {'solve_ms':>9}")
    for ctrl, row in agg["controllers"].items():
        ee = row.get("rmse_ee", float("nan"))
        ms = row.get("solve_ms_mean", float("nan"))
        print(f"{ctrl:<10} {row['runs']:>4} {row['diverged']:>4} {ee:>10.4g} {ms:>9.2f}")
    for ctrl, red in agg["reductions"].items():
        print(f"{ctrl}: {100 * red['reduction']:.1f}% lower ee error than nominal over {red['pairs']} pairs")


def cmd_report(args):
    reports = []
    for d in args.runs:
        with open(os.path.join(d, "runs.json")) as fh:
            reports += json.load(fh)
    agg = harness.aggregate_and_export(reports, args.out)
    _print_table(agg)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="cadelac")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="simulate tracking runs and store a dataset")
    c.add_argument("--config", default="desk")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--no-csv", action="store_true")
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="fit the encoder and residual model")
    t.add_argument("--config", default="desk")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="residual and closed-loop evaluation")
    e.add_argument("--config", default="desk")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--out", required=True)
    e.add_argument("--closed-loop", action="store_true")
    e.add_argument("--reference", choices=("chirp", "lemniscate"))
    e.add_argument("--n-envs", type=int)
    e.add_argument("--n-traj", type=int)
    e.add_argument("--duration", type=float)
    e.add_argument("--inner-loop", action="store_true")
    e.add_argument("--logs", action="store_true", help="write per-step CSV logs")
    e.add_argument("--assert", dest="assert_bounds", action="store_true",
                   help="exit non-zero when a configured bound is violated")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run-mpc", help="run closed-loop scenarios from a JSON file")
    r.add_argument("--config", default="desk")
    r.add_argument("--checkpoint")
    r.add_argument("--scenario", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run_mpc)

    s = sub.add_parser("report", help="aggregate runs.json files from earlier runs")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
