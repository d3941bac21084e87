"""Config-driven experiment runs: build data, train, score against ground truth, write artifacts."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy
import torch

from tcr.errors import InvalidConfiguration, TCRError
from tcr.oracle import (
    analytical_one_cause,
    branch_solutions,
    cosine_similarity,
    path_sum_check,
    verify_zero_loss,
)
from tcr.physics import (
    DoubleWellConfig,
    DoubleWellSimulator,
    SpringMassConfig,
    SpringMassSimulator,
    group_slots,
    make_grouped_config,
    mass_profile,
    pearson,
)
from tcr.reduction import mechanism_predict
from tcr.rng import RNG_ALGORITHM, derive_seed
from tcr.scm import InterventionPrior, sample_random_scm, two_branch_groups
from tcr.trainer import ScmSimulator, TrainConfig, train

SCHEMA_VERSION = 1
EXPERIMENTS = ("linear-dense", "linear-chain", "two-branch", "double-well", "spring-mass", "spring-mass-grouped")
LINEAR = {"linear-dense": "dense", "linear-chain": "chain", "two-branch": "two-branch"}
OUTPUT_ENV = "TCR_OUTPUT_ROOT"
TOP_KEYS = {"schema_version", "experiment", "simulator", "prior", "train", "n_causes", "seeds", "output_dir", "evaluation"}

_LINEAR_TRAIN = dict(learning_rate=1e-3, epochs=100, sim_batch=128, intervention_batch=64, n_paths=10000)

DEFAULTS = {
    "linear-dense": dict(simulator={"n_vars": 10}, train=_LINEAR_TRAIN, n_causes=1, seeds=list(range(20))),
    "linear-chain": dict(simulator={"n_vars": 10}, train=_LINEAR_TRAIN, n_causes=1, seeds=list(range(20))),
    "two-branch": dict(
        simulator={"n_vars": 11},
        train=dict(
            learning_rate=1e-3,
            scheduler="cosine",
            final_lr=1e-5,
            epochs=600,
            intervention_batch=512,
            restarts=10,
            eta_ov=0.1,
            eta_bal=1e-3,
        ),
        n_causes=2,
        seeds=list(range(20)),
    ),
    "double-well": dict(
        simulator={},
        train=dict(learning_rate=5e-4, epochs=200, intervention_batch=64),
        n_causes=1,
        seeds=[0],
        evaluation={"n_eval": 2000, "phase_samples": 200, "phase_times": 20},
    ),
    "spring-mass": dict(
        simulator={},
        train=dict(
            learning_rate=1e-4,
            scheduler="cosine",
            final_lr=0.0,
            epochs=4800,
            intervention_batch=64,
            restarts=5,
            eta_ov=0.1,
            eta_bal=0.1,
            init_marginals="data",
        ),
        n_causes=2,
        seeds=[0],
    ),
    "spring-mass-grouped": dict(
        simulator={"groups": 2, "masses_per_group": 4},
        train=dict(
            learning_rate=1e-3,
            scheduler="cosine",
            final_lr=0.0,
            epochs=1800,
            intervention_batch=512,
            restarts=5,
            eta_ov=0.1,
            eta_bal=0.1,
            init_marginals="data",
            optimizer="adam",
        ),
        n_causes=2,
        seeds=[0],
    ),
}

_EVAL_KEYS = {"n_eval", "phase_samples", "phase_times"}
_SM_KEYS = {f.name for f in fields(SpringMassConfig)}
_GROUPED_KEYS = {"groups", "masses_per_group", "spacing"} | (_SM_KEYS - {"masses", "adjacency", "layout"})
_SIM_KEYS = {
    "linear-dense": {"n_vars"},
    "linear-chain": {"n_vars"},
    "two-branch": {"n_vars"},
    "double-well": {f.name for f in fields(DoubleWellConfig)},
    "spring-mass": _SM_KEYS,
    "spring-mass-grouped": _GROUPED_KEYS,
}


def _check_keys(block, allowed, where):
    if not isinstance(block, dict):
        raise InvalidConfiguration(f"{where} must be an object")
    unknown = set(block) - set(allowed)
    if unknown:
        raise InvalidConfiguration(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    simulator: dict
    prior: dict
    train: TrainConfig
    n_causes: int
    seeds: tuple
    output_dir: str | None = None
    evaluation: dict = field(default_factory=dict)

    def to_dict(self):
        t = self.train.to_dict()
        t.pop("master_seed")
        return {
            "schema_version": SCHEMA_VERSION,
            "experiment": self.experiment,
            "simulator": self.simulator,
            "prior": self.prior,
            "train": t,
            "n_causes": self.n_causes,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "evaluation": self.evaluation,
        }

    @property
    def config_hash(self):
        """SHA-256 of the canonical JSON of everything except the output location."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_seeds(self, seeds):
        return ExperimentConfig(
            self.experiment, self.simulator, self.prior, self.train, self.n_causes, tuple(seeds), self.output_dir, self.evaluation
        )

    def train_config(self, seed):
        kw = self.train.to_dict()
        kw["master_seed"] = int(seed)
        return TrainConfig(**kw)


def parse_config(raw):
    """Validate a config mapping and fill in the experiment defaults (fail closed on unknown keys)."""
    _check_keys(raw, TOP_KEYS, "config")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise InvalidConfiguration(f"schema_version must be {SCHEMA_VERSION}")
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        raise InvalidConfiguration(f"experiment must be one of {EXPERIMENTS}")
    d = DEFAULTS[exp]
    sim = dict(d["simulator"])
    user_sim = raw.get("simulator", {})
    _check_keys(user_sim, _SIM_KEYS[exp], "simulator")
    sim.update(user_sim)
    prior = {"std": None}
    user_prior = raw.get("prior", {})
    _check_keys(user_prior, {"std"}, "prior")
    prior.update(user_prior)
    if prior["std"] is not None and not prior["std"] >= 0:
        raise InvalidConfiguration("prior std must be non-negative")
    train_kw = dict(d["train"])
    user_train = raw.get("train", {})
    _check_keys(user_train, {f.name for f in fields(TrainConfig)} - {"master_seed"}, "train")
    train_kw.update(user_train)
    evaluation = dict(d.get("evaluation", {}))
    user_eval = raw.get("evaluation", {})
    _check_keys(user_eval, _EVAL_KEYS, "evaluation")
    evaluation.update(user_eval)
    seeds = raw.get("seeds", d["seeds"])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise InvalidConfiguration("seeds must be a non-empty list of non-negative integers")
    n_causes = raw.get("n_causes", d["n_causes"])
    if not isinstance(n_causes, int) or n_causes < 1:
        raise InvalidConfiguration("n_causes must be a positive integer")
    out = raw.get("output_dir")
    cfg = ExperimentConfig(
        experiment=exp,
        simulator=sim,
        prior=prior,
        train=TrainConfig(**train_kw),
        n_causes=n_causes,
        seeds=tuple(seeds),
        output_dir=out,
        evaluation=evaluation,
    )
    build_simulator(cfg, cfg.seeds[0])  # surfaces simulator parameter errors early
    return cfg


def load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfiguration(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw)


def default_config(experiment, **overrides):
    raw = {"schema_version": SCHEMA_VERSION, "experiment": experiment}
    raw.update(overrides)
    return parse_config(raw)


# ---------------------------------------------------------------------------
# building blocks


def build_simulator(cfg, seed):
    """Simulator for one seed; linear experiments draw a fresh SCM per seed."""
    s = cfg.simulator
    if cfg.experiment in LINEAR:
        try:
            scm = sample_random_scm(LINEAR[cfg.experiment], int(s["n_vars"]), seed)
        except (TypeError, ValueError) as exc:
            raise InvalidConfiguration(str(exc)) from exc
        return ScmSimulator(scm)
    try:
        if cfg.experiment == "double-well":
            return DoubleWellSimulator(DoubleWellConfig(**s))
        if cfg.experiment == "spring-mass":
            return SpringMassSimulator(SpringMassConfig(**s))
        return SpringMassSimulator(make_grouped_config(**s))
    except TypeError as exc:
        raise InvalidConfiguration(str(exc)) from exc


def build_prior(cfg, simulator):
    std = cfg.prior.get("std")
    if std is None:
        std = simulator.config.shift_std if hasattr(simulator, "config") else 1.0
    return InterventionPrior(std=np.where(simulator.omega_mask, float(std), 0.0))


def feature_labels(simulator):
    if hasattr(simulator, "layout"):
        out = []
        for row in simulator.layout():
            label = f"{row['quantity']}@t{row['time_index']}"
            if "mass_index" in row:
                label = f"m{row['mass_index']}:{label}"
            out.append(label)
        return out
    return [f"X{k + 1}" for k in range(simulator.n_features)]


def _final_losses(result):
    out = {}
    for split in ("train", "val", "test"):
        rows = result.history_of(split=split)
        if rows:
            out[split] = rows[-1].loss.as_row()
    return out


def _l1_fraction(w, idx):
    w = np.abs(w)
    total = w.sum()
    return float(w[idx].sum() / total) if total > 0 else 0.0


def _score_linear(cfg, simulator, params):
    scm = simulator.scm
    if cfg.experiment == "two-branch":
        groups = [list(g) for g in two_branch_groups(scm.n_vars)]
        metrics = {"tau_branch_fraction": [], "omega_branch_fraction": [], "dominant_branch": []}
        for k in range(params.n_causes):
            tf = [_l1_fraction(params.tau[k], g) for g in groups]
            of = [_l1_fraction(params.omega[k], g) for g in groups]
            metrics["tau_branch_fraction"].append(max(tf))
            metrics["omega_branch_fraction"].append(max(of))
            metrics["dominant_branch"].append(int(np.argmax(tf)))
        sols = branch_solutions(scm, groups)
        cos = []
        for k in range(params.n_causes):
            b = metrics["dominant_branch"][k]
            cos.append(
                [
                    cosine_similarity(params.tau[k], sols[b].tau_full(scm.n_vars)),
                    cosine_similarity(params.omega[k], sols[b].omega_full(scm.n_vars)),
                ]
            )
        metrics["branch_cosine"] = cos
        metrics["separated"] = bool(
            min(metrics["tau_branch_fraction"] + metrics["omega_branch_fraction"]) >= 0.9
            and len(set(metrics["dominant_branch"])) == params.n_causes
        )
        return metrics
    sol = analytical_one_cause(scm)
    prior = InterventionPrior.gaussian(scm.n_vars, scm.omega_set)
    return {
        "cos_tau": cosine_similarity(params.tau[0], sol.tau_full(scm.n_vars)),
        "cos_omega": cosine_similarity(params.omega[0], sol.omega_full(scm.n_vars)),
        "oracle_max_loss": verify_zero_loss(scm, sol, prior, 50, seed=0),
        "path_sum_gap": path_sum_check(scm, sol),
    }


def _score_double_well(cfg, simulator, params, seed):
    ev = cfg.evaluation
    x = simulator.sample(np.zeros(simulator.n_features), int(ev["n_eval"]), derive_seed(seed, 99))
    y = x @ simulator.tau0
    pred = mechanism_predict(params, x @ params.tau.T)
    acc = float(np.mean(np.sign(pred) == np.sign(y)))
    n_s, n_t = int(ev["phase_samples"]), int(ev["phase_times"])
    phase = []
    for b in range(min(n_s, x.shape[0])):
        for k in range(min(n_t, simulator.config.n_times)):
            phase.append([b, k, float(x[b, 2 * k]), float(x[b, 2 * k + 1]), int(np.sign(pred[b]))])
    return {"accuracy": acc, "right_well_fraction": float(np.mean(y > 0))}, {"phase": phase}


def _score_spring_mass(cfg, simulator, params):
    c = simulator.config
    profiles = [mass_profile(c, params.omega[k]).tolist() for k in range(params.n_causes)]
    metrics = {
        "mass_omega_correlation": [pearson(c.masses, p) for p in profiles],
        "alpha": params.alpha.tolist(),
        "beta": params.beta,
    }
    return metrics, {"mass_profile": profiles, "masses": c.masses.tolist()}


def _score_grouped(cfg, simulator, params):
    c = simulator.config
    per = int(cfg.simulator.get("masses_per_group", 4))
    groups = [group_slots(c, range(per * g, per * g + per)) for g in range(c.n_masses // per)]
    y_slots = np.arange(1, c.n_features, 2)
    metrics = {"tau_group_fraction": [], "omega_group_fraction": [], "dominant_group": [], "tau_y_fraction": []}
    for k in range(params.n_causes):
        fr = [_l1_fraction(params.tau[k], g) for g in groups]
        metrics["tau_group_fraction"].append(max(fr))
        metrics["dominant_group"].append(int(np.argmax(fr)))
        metrics["omega_group_fraction"].append(max(_l1_fraction(params.omega[k], g) for g in groups))
        metrics["tau_y_fraction"].append(_l1_fraction(params.tau[k], y_slots))
    metrics["tau_y_fraction_total"] = _l1_fraction(params.tau.ravel(), np.concatenate([y_slots + k * c.n_features for k in range(params.n_causes)]))
    metrics["alpha"] = params.alpha.tolist()
    metrics["beta"] = params.beta
    return metrics


def run_seed(cfg, seed, out_dir=None):
    """Train and score one seed; failures are returned as a record instead of raised."""
    t0 = time.perf_counter()
    entry = {"seed": int(seed), "status": "ok", "metrics": {}, "extras": {}}
    try:
        simulator = build_simulator(cfg, seed)
        prior = build_prior(cfg, simulator)
        tc = cfg.train_config(seed)
        result = train(simulator, prior, simulator.tau0, cfg.n_causes, tc)
        params = result.best_params
        metrics = {
            "final_losses": _final_losses(result),
            "selected_restart": result.selected_restart,
            "restart_val_losses": result.restart_val_losses.tolist(),
            "bound_violations": result.bound_violations,
            "logged_steps": len(result.history),
        }
        extras = {}
        if cfg.experiment in LINEAR:
            metrics.update(_score_linear(cfg, simulator, params))
        elif cfg.experiment == "double-well":
            m, extras = _score_double_well(cfg, simulator, params, seed)
            metrics.update(m)
        elif cfg.experiment == "spring-mass":
            m, extras = _score_spring_mass(cfg, simulator, params)
            metrics.update(m)
        else:
            metrics.update(_score_grouped(cfg, simulator, params))
        entry["metrics"] = metrics
        entry["params"] = params.to_dict()
        entry["labels"] = feature_labels(simulator)
        entry["history"] = [h.as_row() for h in result.history]
        entry["extras"] = extras
        entry["diagnostics"] = result.diagnostics
        if out_dir is not None:
            d = Path(out_dir) / f"seed_{seed}"
            d.mkdir(parents=True, exist_ok=True)
            params.save(d / "params.json", metadata={"seed": int(seed), "config_hash": cfg.config_hash, "epochs": tc.epochs})
            _write_csv(d / "history.csv", HISTORY_COLUMNS, _history_rows(cfg, entry))
            (d / "metrics.json").write_text(json.dumps({"seed": int(seed), "config_hash": cfg.config_hash, **metrics}, indent=2))
    except TCRError as exc:
        entry["status"] = "failed"
        entry["error"] = {"type": type(exc).__name__, "message": str(exc)}
    entry["wall_time"] = time.perf_counter() - t0
    return entry


def _run_seed_job(args):
    torch.set_num_threads(1)
    return run_seed(*args)


def environment():
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "platform": platform.platform(),
        "rng_algorithm": RNG_ALGORITHM,
    }


def _numeric_leaves(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, bool):
            out[key] = float(v)
        elif isinstance(v, (int, float)):
            out[key] = float(v)
        elif isinstance(v, list) and v and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            for j, x in enumerate(v):
                out[f"{key}[{j}]"] = float(x)
        elif isinstance(v, dict):
            out.update(_numeric_leaves(v, key + "."))
    return out


def aggregate(seed_entries):
    """Mean/min/max of every numeric metric over the successful seeds."""
    rows = [_numeric_leaves(e["metrics"]) for e in seed_entries if e["status"] == "ok"]
    keys = sorted(set().union(*rows)) if rows else []
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows if k in r and r[k] is not None and np.isfinite(r[k])])
        if vals.size:
            out[k] = {"mean": float(vals.mean()), "min": float(vals.min()), "max": float(vals.max()), "n": int(vals.size)}
    return out


def resolve_output_dir(cfg, out=None):
    if out is not None:
        return Path(out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / cfg.experiment


def plan(cfg, out=None):
    tc = cfg.train
    return {
        "experiment": cfg.experiment,
        "config_hash": cfg.config_hash,
        "seeds": list(cfg.seeds),
        "output_dir": str(resolve_output_dir(cfg, out)),
        "groups_per_dataset": tc.n_paths // tc.sim_batch,
        "restarts": tc.restarts,
        "epochs": tc.epochs,
        "n_causes": cfg.n_causes,
    }


def run(cfg, jobs=1, out=None):
    """Run every seed, write per-seed artifacts, the report and the plot data."""
    out_dir = resolve_output_dir(cfg, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    args = [(cfg, s, out_dir) for s in cfg.seeds]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_run_seed_job, args))
    else:
        entries = [run_seed(*a) for a in args]
    report = {
        "experiment": cfg.experiment,
        "config_hash": cfg.config_hash,
        "config": cfg.to_dict(),
        "seeds": entries,
        "aggregate": aggregate(entries),
        "environment": environment(),
        "failed_seeds": [e["seed"] for e in entries if e["status"] != "ok"],
    }
    slim = {**report, "seeds": [{k: v for k, v in e.items() if k not in ("history", "extras")} for e in entries]}
    (out_dir / "report.json").write_text(json.dumps(slim, indent=2))
    emit_plot_data(report, out_dir)
    return report


# ---------------------------------------------------------------------------
# artifacts

HISTORY_COLUMNS = [
    "config_hash",
    "seed",
    "restart",
    "epoch",
    "split",
    "lr",
    "cause",
    "mechanism",
    "consistency",
    "relevance",
    "overlap",
    "balancing",
    "total",
]


def _cell(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.17g}"
    if v is None:
        return ""
    return str(v)


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _history_rows(cfg_or_hash, entry):
    h = cfg_or_hash if isinstance(cfg_or_hash, str) else cfg_or_hash.config_hash
    return [[h, entry["seed"]] + [row[c] for c in HISTORY_COLUMNS[2:]] for row in entry.get("history", [])]


def emit_plot_data(report, out_dir, trajectories=None):
    """Write the plot-ready CSVs; ``trajectories`` optionally overrides each seed's phase-space samples."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = report.get("config_hash", "")
    exp = report.get("experiment", "")
    n = report.get("config", {}).get("n_causes", 1)
    entries = [e for e in report.get("seeds", []) if e.get("status") == "ok"]

    rows = []
    for e in entries:
        rows.extend(_history_rows(h, e))
    files = [out_dir / "loss_curves.csv"]
    _write_csv(files[0], HISTORY_COLUMNS, rows)

    header = ["config_hash", "seed", "index", "label"] + [f"tau_{k + 1}" for k in range(n)] + [f"omega_{k + 1}" for k in range(n)]
    rows = []
    for e in entries:
        tau, omega = np.array(e["params"]["tau"]), np.array(e["params"]["omega"])
        for j, label in enumerate(e["labels"]):
            rows.append([h, e["seed"], j, label] + [float(v) for v in tau[:, j]] + [float(v) for v in omega[:, j]])
    files.append(out_dir / "weights.csv")
    _write_csv(files[-1], header, rows)

    if exp == "double-well":
        rows = []
        for e in entries:
            phase = (trajectories or {}).get(e["seed"], e["extras"].get("phase", []))
            rows.extend([h, e["seed"], *r] for r in phase)
        files.append(out_dir / "phase_space.csv")
        _write_csv(files[-1], ["config_hash", "seed", "sample", "time_index", "position", "velocity", "predicted_sign"], rows)
    if exp == "spring-mass":
        rows = []
        for e in entries:
            masses = e["extras"].get("masses", [])
            for k, prof in enumerate(e["extras"].get("mass_profile", [])):
                rows.extend([h, e["seed"], k + 1, i, masses[i], float(v)] for i, v in enumerate(prof))
        files.append(out_dir / "mass_profile.csv")
        _write_csv(files[-1], ["config_hash", "seed", "cause", "mass_index", "mass", "mean_abs_omega"], rows)
    return files
