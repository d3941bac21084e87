"""Command-line entry point: ``tcr {simulate,train,oracle,run,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from tcr.errors import InvalidConfiguration, TCRError
from tcr.experiments import (
    LINEAR,
    build_prior,
    build_simulator,
    feature_labels,
    load_config,
    plan,
    resolve_output_dir,
    run,
)
from tcr.oracle import analytical_one_cause, path_sum_check, verify_zero_loss
from tcr.physics import write_trajectories
from tcr.rng import RNG_ALGORITHM
from tcr.scm import InterventionPrior
from tcr.trainer import build_dataset, check_gradient_fd, gradient, initialize

EXIT_OK, EXIT_SEED_FAILURE, EXIT_CONFIG = 0, 1, 2


def _parser():
    p = argparse.ArgumentParser(prog="tcr", description="Targeted causal reduction experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    specs = {
        "simulate": "generate the intervened dataset and write it as CSV",
        "train": "train on the configured seeds and write per-seed artifacts",
        "oracle": "closed-form solution for a linear experiment",
        "run": "full sweep: train, evaluate, compare, emit plot data",
        "gradcheck": "finite-difference check of the analytic gradient",
    }
    for name, help_ in specs.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--seed", type=int, action="append", help="override the seed list (repeatable)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        if name in ("train", "run"):
            s.add_argument("--jobs", type=int, default=1, help="seeds run concurrently")
        if name == "gradcheck":
            s.add_argument("--points", type=int, default=10)
            s.add_argument("--tolerance", type=float, default=1e-5)
    return p


def _print(obj):
    print(json.dumps(obj, indent=2, default=float))


def cmd_simulate(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for seed in cfg.seeds:
        sim = build_simulator(cfg, seed)
        prior = build_prior(cfg, sim)
        tc = cfg.train_config(seed)
        ds = build_dataset(sim, prior, tc.n_paths, tc.sim_batch, seed, tc.split_fractions)
        x = ds.x.reshape(-1, ds.n_features)
        reps = np.repeat(np.arange(ds.n_groups), ds.batch_size)
        labels = feature_labels(sim)
        layout = [{"index": k, "label": lab} for k, lab in enumerate(labels)]
        meta = {"seed": int(seed), "config_hash": cfg.config_hash, "split": ds.split[reps].tolist()}
        path = write_trajectories(out / f"trajectories_seed_{seed}.csv", ds.seeds[reps], ds.interventions[reps], x, x @ sim.tau0, layout, meta)
        files.append(str(path))
    _print({"files": files})
    return EXIT_OK


def cmd_oracle(cfg, out):
    if cfg.experiment not in LINEAR or cfg.experiment == "two-branch":
        raise InvalidConfiguration("a closed-form oracle exists only for linear-dense and linear-chain")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in cfg.seeds:
        scm = build_simulator(cfg, seed).scm
        sol = analytical_one_cause(scm)
        prior = InterventionPrior.gaussian(scm.n_vars, scm.omega_set)
        rows.append(
            {
                "seed": int(seed),
                "config_hash": cfg.config_hash,
                "rng_algorithm": RNG_ALGORITHM,
                "solution": sol.to_dict(),
                "max_consistency_loss": verify_zero_loss(scm, sol, prior, 50, seed=seed),
                "path_sum_gap": path_sum_check(scm, sol),
            }
        )
        scm.save(out / f"scm_seed_{seed}.json")
    (out / "oracle.json").write_text(json.dumps(rows, indent=2))
    _print(rows)
    return EXIT_OK


def _train_like(cfg, out, jobs):
    report = run(cfg, jobs=jobs, out=out)
    _print({"output_dir": str(out), "failed_seeds": report["failed_seeds"], "aggregate": report["aggregate"]})
    return EXIT_SEED_FAILURE if report["failed_seeds"] else EXIT_OK


def cmd_gradcheck(cfg, out, points, tolerance):
    results, ok = [], True
    for seed in cfg.seeds:
        sim = build_simulator(cfg, seed)
        prior = build_prior(cfg, sim)
        tc = cfg.train_config(seed)
        ds = build_dataset(sim, prior, min(tc.n_paths, 8 * tc.sim_batch), tc.sim_batch, seed, tc.split_fractions)
        for k in range(points):
            params = initialize(cfg.n_causes, sim.n_features, seed * 1000 + k, sim.omega_mask, sim.tau_mask)
            g = gradient(params, ds, sim.tau0, tc.eta_ov, tc.eta_bal)
            rep = check_gradient_fd(params, ds, sim.tau0, tolerance, tc.eta_ov, tc.eta_bal, grad=g)
            ok &= rep.passed
            results.append({"seed": int(seed), "point": k, "max_error": rep.max_error, "block_errors": rep.block_errors})
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(json.dumps({"config_hash": cfg.config_hash, "results": results}, indent=2, default=float))
    _print({"passed": bool(ok), "max_error": max(r["max_error"] for r in results)})
    return EXIT_OK if ok else EXIT_SEED_FAILURE


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed:
            cfg = cfg.with_seeds(args.seed)
        out = resolve_output_dir(cfg, args.out)
        if args.dry_run:
            _print({"command": args.command, **plan(cfg, args.out)})
            return EXIT_OK
    except InvalidConfiguration as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "oracle":
            return cmd_oracle(cfg, out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out, args.points, args.tolerance)
        return _train_like(cfg, out, args.jobs)
    except InvalidConfiguration as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TCRError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SEED_FAILURE


if __name__ == "__main__":
    sys.exit(main())
