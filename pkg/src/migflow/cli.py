"""Command-line entry point: ``migflow <command> [--config FILE] [--seed N] --out DIR``.

Each command writes its outputs atomically into ``--out`` together with a
``manifest.json`` recording the resolved configuration, seeds, input hashes
and package versions. ``migflow replay --manifest FILE --out DIR`` reruns a
command from its manifest alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, workflow
from .baselines import aggregate_windows, comparison_metrics, tensor_measures
from .config import config_dict, load_config, validate_config
from .domain import TargetDataset
from .errors import IngestionError, MigflowError, RunError, UsageError
from .estimation import EvaluationPoints, elasticity
from .synthetic import corridor_correlations, corrupt_observations, evaluate_recovery, generate, sweep
from .training import train_ensemble, train_test_split

log = logging.getLogger("migflow")

# which input directories each command reads
INPUTS = {
    "synth": (),
    "train": ("data",),
    "ensemble": ("data",),
    "estimate": ("data", "model"),
    "elasticity": ("data", "model"),
    "baseline": ("data",),
    "evaluate": ("data", "estimates"),
    "sweep": (),
}

# config field that --seed overrides, per command
SEED_FIELD = {
    "synth": "world.seed",
    "train": "train.seed",
    "ensemble": "ensemble.seed_base",
    "estimate": "estimate.seed",
    "elasticity": "elasticity.seed",
    "baseline": None,
    "evaluate": None,
    "sweep": "world.seed",
}


def _write_metrics(path, metrics):
    rows = sorted(metrics.items())
    io.write_csv(path, ("metric", "value"), rows)


def _checkpoints(model_dir):
    model_dir = Path(model_dir)
    paths = sorted(model_dir.glob("*.ckpt"))
    if not paths:
        raise IngestionError(f"no checkpoints in {model_dir}")
    return [io.load_checkpoint(p) for p in paths]


def _with_holdout(dataset, cfg):
    if not cfg.train.holdout or dataset.targets.test_corridors is not None:
        return dataset
    observed = np.zeros((dataset.n, dataset.n), dtype=bool)
    fl = dataset.targets.flows
    observed[fl[:, 1].astype(int), fl[:, 2].astype(int)] = True
    test = train_test_split(observed, cfg.train.test_fraction, cfg.train.seed)
    t = dataset.targets
    dataset.targets = TargetDataset(t.stock_diffs, t.flows, t.net_migration, test)
    return dataset


def _history_rows(result):
    return [(e, h.stock, h.net, h.flow, h.total) for e, h in enumerate(result.history)]


def cmd_synth(cfg, paths, out):
    world = generate(cfg.world.spec(), cfg.world.seed)
    obs = corrupt_observations(world, cfg.corruption.spec())
    io.save_dataset(out, world.registry, world.axis, world.tables, world.rates, obs.stocks, obs.targets,
                    world.flows, world.stocks)
    meta = {"alpha": world.alpha.tolist(), "eta": world.eta, "clamped_cells": world.clamped_cells,
            "slots": [list(s) for s in world.design.slots]}
    (out / "world.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"world": cfg.world.seed, "corruption": cfg.corruption.seed}


def cmd_train(cfg, paths, out):
    dataset = _with_holdout(io.load_dataset(paths["data"]), cfg)
    tc = cfg.train.train_config()
    result, design = workflow.fit(dataset, tc, cfg.arch.model_dump())
    extra = {"pipeline": design.pipeline_dict(), "layout_hash": design.layout_hash()}
    io.save_checkpoint(out / "model.ckpt", result.params, tc.seed, io.config_hash(config_dict(cfg)), extra)
    io.write_csv(out / "loss_history.csv", ("epoch", "stock", "net_migration", "flow", "total"),
                 _history_rows(result))
    if dataset.targets.test_corridors is not None:
        codes = dataset.registry.codes
        io.write_csv(out / "test_corridors.csv", io.SCHEMAS["test_corridors"],
                     [(codes[j], codes[k]) for j, k in zip(*np.nonzero(dataset.targets.test_corridors))])
    return {"train": tc.seed}


def cmd_ensemble(cfg, paths, out):
    dataset = _with_holdout(io.load_dataset(paths["data"]), cfg)
    tc = cfg.train.train_config()
    design = workflow.fit_design(dataset)
    arch = workflow.architecture(design, **cfg.arch.model_dump())
    outcomes = train_ensemble(tc, cfg.ensemble.members, cfg.ensemble.seed_base, dataset.targets, design,
                              dataset.rates, dataset.initial_stocks(), arch)
    extra = {"pipeline": design.pipeline_dict(), "layout_hash": design.layout_hash()}
    rows = []
    for m, outcome in enumerate(outcomes):
        if outcome.result is not None:
            io.save_checkpoint(out / f"member_{m:03d}.ckpt", outcome.result.params, outcome.seed,
                               io.config_hash(config_dict(cfg)), extra)
            loss = outcome.result.history[-1].total if outcome.result.history else float("nan")
            rows.append((m, outcome.seed, "ok", loss))
        else:
            rows.append((m, outcome.seed, outcome.error, float("nan")))
    io.write_csv(out / "members.csv", ("member", "seed", "status", "final_loss"), rows)
    if not any(o.result is not None for o in outcomes):
        raise RunError("every ensemble member failed")
    return {"seed_base": cfg.ensemble.seed_base, "members": [o.seed for o in outcomes]}


def _members(paths, dataset):
    ckpts = _checkpoints(paths["model"])
    design = workflow.fit_design(dataset, ckpts[0].extra.get("pipeline"))
    return [c.params for c in ckpts], design


def cmd_estimate(cfg, paths, out):
    dataset = io.load_dataset(paths["data"])
    members, design = _members(paths, dataset)
    tc = cfg.train.train_config()
    est, cals = workflow.estimate(members, dataset, design, tc, cfg.estimate.n_samples, cfg.estimate.seed,
                                  cfg.estimate.calibrate)
    io.export_estimates(est, dataset.registry, out)
    codes = dataset.registry.codes
    n = dataset.n
    offsets = np.mean([c.offsets for c in cals], axis=0)
    io.write_csv(out / "calibration.csv", ("birth", "residence", "mean_offset"),
                 [(codes[i], codes[j], offsets[i, j]) for i in range(n) for j in range(n)])
    summary = {"n_samples": est.n_samples, "failures": len(est.failures),
               "floored_cells": [c.floored for c in cals], "skipped_cells": [c.skipped for c in cals]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"sampler": cfg.estimate.seed}


def cmd_elasticity(cfg, paths, out):
    dataset = io.load_dataset(paths["data"])
    members, design = _members(paths, dataset)
    if cfg.elasticity.n_points is None:
        points = EvaluationPoints.all(design)
    else:
        points = EvaluationPoints.sample(design, cfg.elasticity.n_points, cfg.elasticity.seed)
    report = elasticity(members, design, dataset.rates, dataset.initial_stocks(), points,
                        cfg.train.train_config())
    io.write_csv(out / "elasticity.csv", ("covariate", "mean", "std"), report.as_rows())
    return {"points": cfg.elasticity.seed}


def cmd_baseline(cfg, paths, out):
    dataset = io.load_dataset(paths["data"])
    codes = dataset.registry.codes
    n = dataset.n
    report_rows = []
    for method in cfg.baseline.methods:
        per_year = workflow.baseline_flows(dataset, method)
        io.write_csv(out / f"{method}.csv", ("year", "origin", "destination", "value"),
                     [(year, codes[j], codes[k], od[j, k]) for year, od, _, _ in per_year
                      for j in range(n) for k in range(n) if j != k])
        if dataset.true_flows is None:
            continue
        est = [_measures_from_baseline(od, bd) for _, od, bd, _ in per_year]
        truth = [tensor_measures(T) for T in dataset.true_flows[:len(est)]]
        est, truth = _windowed(est, cfg.baseline.window), _windowed(truth, cfg.baseline.window)
        report_rows.append(comparison_metrics(est, truth, method).row())
    if report_rows:
        io.write_csv(out / "comparison.csv", ("method", "od", "birth_destination", "inflow", "outflow", "net"),
                     report_rows)
    return {}


def _measures_from_baseline(od, bd):
    return {"od": od, "birth_destination": bd, "inflow": od.sum(axis=0), "outflow": od.sum(axis=1),
            "net": od.sum(axis=0) - od.sum(axis=1)}


def _windowed(measures, window):
    if window == 1:
        return measures
    keys = measures[0].keys()
    return [{k: s for k, s in zip(keys, block)} for block in
            zip(*(aggregate_windows([m[k] for m in measures], window) for k in keys))]


def cmd_evaluate(cfg, paths, out):
    dataset = io.load_dataset(paths["data"])
    if dataset.true_flows is None:
        raise IngestionError(f"{paths['data']} holds no true flows to evaluate against")
    mean, _ = io.load_estimates(paths["estimates"], dataset.registry, len(dataset.axis), dataset.axis.start_year)
    metrics = evaluate_recovery(mean["flows"], dataset.true_flows, dataset.targets.test_corridors)
    _write_metrics(out / "metrics.csv", metrics)
    per = corridor_correlations(mean["flows"].sum(axis=1), dataset.true_flows.sum(axis=1))
    codes = dataset.registry.codes
    test = dataset.targets.test_corridors
    io.write_csv(out / "corridor_r.csv", ("origin", "destination", "group", "r"),
                 [(codes[j], codes[k], "test" if test is not None and test[j, k] else "train", per[j, k])
                  for j in range(dataset.n) for k in range(dataset.n) if j != k])
    return {}


def cmd_sweep(cfg, paths, out):
    world = generate(cfg.world.spec(), cfg.world.seed)
    obs = corrupt_observations(world, cfg.corruption.spec())
    rows = sweep(world, obs, cfg.sweep.grid, cfg.train.train_config(), cfg.arch.model_dump())
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    io.write_csv(out / "sweep.csv", keys, [[r.get(k, float("nan")) for k in keys] for r in rows])
    return {"world": cfg.world.seed, "corruption": cfg.corruption.seed, "train": cfg.train.seed}


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic world and its corrupted observations"),
    "train": (cmd_train, "train one network on a dataset"),
    "ensemble": (cmd_ensemble, "train an ensemble of networks differing in seed"),
    "estimate": (cmd_estimate, "calibrate, push initial-stock draws through the ensemble and export"),
    "elasticity": (cmd_elasticity, "elasticities of the estimated flows per covariate"),
    "baseline": (cmd_baseline, "stock-differencing and demographic-accounting flows"),
    "evaluate": (cmd_evaluate, "score exported estimates against true flows"),
    "sweep": (cmd_sweep, "grid of trainings on one synthetic world"),
}


def run(command, cfg, paths, out, argv=None):
    """Run ``command`` and write its outputs and manifest into ``out``."""
    func, _ = COMMANDS[command]
    resolved = {}
    for name in INPUTS[command]:
        if paths.get(name) is None:
            raise UsageError(f"{command} needs --{name}")
        p = Path(paths[name])
        if not p.exists():
            raise IngestionError(f"missing input path {p}")
        resolved[name] = str(p.resolve())
    inputs = {name: io.hash_tree(p) for name, p in resolved.items()}
    with io.staged_output(out) as scratch:
        seeds = func(cfg, resolved, scratch)
        io.write_manifest(scratch, command, config_dict(cfg), seeds,
                          {"paths": resolved, "sha256": inputs}, argv)
    return seeds


def replay(manifest_path, out):
    """Rerun the command recorded in a manifest; inputs must still hash the same."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise IngestionError(f"missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    command = manifest["command"]
    if command not in COMMANDS:
        raise UsageError(f"manifest names unknown command {command!r}")
    cfg = validate_config(manifest["config"])
    paths = manifest["inputs"]["paths"]
    for name, p in paths.items():
        if io.hash_tree(p) != manifest["inputs"]["sha256"][name]:
            raise IngestionError(f"input {name} at {p} changed since the manifest was written")
    return run(command, cfg, paths, out, manifest.get("argv"))


def build_parser():
    parser = argparse.ArgumentParser(prog="migflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the command's primary seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a configuration field (repeatable)")
        for inp in INPUTS[name]:
            p.add_argument(f"--{inp}", required=True, help=f"{inp} directory")
    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            replay(args.manifest, Path(args.out))
            return 0
        overrides = list(args.set)
        field = SEED_FIELD[args.command]
        if args.seed is not None and field is not None:
            overrides.append(f"{field}={args.seed}")
        cfg = load_config(args.config, overrides)
        paths = {name: getattr(args, name) for name in INPUTS[args.command]}
        run(args.command, cfg, paths, Path(args.out), argv)
    except MigflowError as exc:
        print(f"migflow {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"migflow {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 9
    return 0


if __name__ == "__main__":
    sys.exit(main())
