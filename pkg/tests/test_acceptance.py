"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Training-based checks use the experiment defaults unchanged. Runs are cached
per experiment so the bound check can inspect every logged step.
"""

import functools
import math
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import chain_scm
from tcr.experiments import default_config, run
from tcr.losses import GaussianDist, gaussian_kl
from tcr.oracle import (
    analytical_one_cause,
    canonical,
    nonidentifiable_pair,
    path_sum_check,
    population_consistency,
    verify_zero_loss,
)
from tcr.rng import make_rng
from tcr.scm import InterventionPrior, sample_intervention, sample_random_scm
from tcr.trainer import ScmSimulator, build_dataset, check_gradient_fd, initialize

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return _report


@functools.lru_cache(maxsize=None)
def _experiment(name, seeds=None):
    cfg = default_config(name)
    if seeds is not None:
        cfg = cfg.with_seeds(seeds)
    t0 = time.perf_counter()
    report = run(cfg, jobs=1, out=_out_root() / name)
    return report, time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def _out_root():
    return Path(tempfile.mkdtemp(prefix="tcr-acceptance-"))


def _metrics(report):
    assert not report["failed_seeds"], report["failed_seeds"]
    return [e["metrics"] for e in report["seeds"]]


def test_criterion_01_oracle_zero_loss(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        scm = sample_random_scm("dense", 10, seed=seed)
        prior = InterventionPrior.gaussian(10, scm.omega_set)
        worst = max(worst, verify_zero_loss(scm, analytical_one_cause(scm), prior, 50, seed=seed))
    dt = time.perf_counter() - t0
    verdict(1, worst < 1e-8 and dt < 5, f"max consistency loss {worst:.2e} over 20 SCMs x 50 interventions in {dt:.2f}s")


def test_criterion_02_chain_closed_form(verdict):
    sol = analytical_one_cause(chain_scm([1.0, 1.0, 1.0]))
    err_tau = np.max(np.abs(canonical(sol.tau1_bar) - np.array([0.0, 0.0, 1.0])))
    err_omega = np.max(np.abs(canonical(sol.omega1_bar) - np.ones(3) / math.sqrt(3)))
    verdict(2, max(err_tau, err_omega) < 1e-12, f"componentwise error tau {err_tau:.1e}, omega {err_omega:.1e}")


def test_criterion_03_linear_convergence(verdict):
    report, dt = _experiment("linear-dense")
    m = _metrics(report)
    ct = np.array([x["cos_tau"] for x in m])
    co = np.array([x["cos_omega"] for x in m])
    ok = len(m) == 20 and ct.mean() >= 0.99 and co.mean() >= 0.99 and ct.min() >= 0.95 and co.min() >= 0.95
    ok = ok and dt < 600
    verdict(
        3,
        ok,
        f"cosine tau mean {ct.mean():.4f} min {ct.min():.4f}; omega mean {co.mean():.4f} min {co.min():.4f}; "
        f"{len(m)} seeds in {dt:.0f}s",
    )


def test_criterion_04_gradient_check(verdict):
    t0 = time.perf_counter()
    scm = sample_random_scm("dense", 10, seed=0)
    sim = ScmSimulator(scm)
    prior = InterventionPrior.gaussian(10, scm.omega_set)
    ds = build_dataset(sim, prior, 1280, 128, seed=0)
    worst = {}
    for k in range(10):
        params = initialize(2, 10, 100 + k, omega_mask=sim.omega_mask, tau_mask=sim.tau_mask)
        params = params.replace(beta=0.3 * k - 1.0, mu_z=make_rng(k).standard_normal(2))
        rep = check_gradient_fd(params, ds, scm.tau0, 1e-5, eta_ov=0.1, eta_bal=1e-3)
        for b, e in rep.block_errors.items():
            worst[b] = max(worst.get(b, 0.0), e)
    dt = time.perf_counter() - t0
    top = max(worst.values())
    verdict(4, top < 1e-5 and dt < 60, f"max relative error {top:.2e} (worst block {max(worst, key=worst.get)}) in {dt:.1f}s")


def test_criterion_05_kl_monte_carlo(verdict):
    rng = make_rng(2024)
    n_samples = 1_000_000
    worst_z = 0.0
    for _ in range(20):
        ps = []
        for _ in range(2):
            L = rng.standard_normal((3, 3))
            ps.append(GaussianDist(rng.standard_normal(3), L @ L.T + 0.5 * np.eye(3)))
        p, q = ps
        x = rng.multivariate_normal(p.mean, p.cov, size=n_samples)
        log_ratio = np.zeros(n_samples)
        for g, sign in ((p, 1.0), (q, -1.0)):
            d = x - g.mean
            log_ratio += sign * -0.5 * (np.sum(d * np.linalg.solve(g.cov, d.T).T, axis=1) + np.linalg.slogdet(g.cov)[1])
        se = log_ratio.std() / math.sqrt(n_samples)
        worst_z = max(worst_z, abs(log_ratio.mean() - gaussian_kl(p, q)) / se)
    verdict(5, worst_z < 3, f"largest deviation {worst_z:.2f} standard errors over 20 pairs")


def test_criterion_06_relevance_bound(verdict):
    names = ["linear-dense", "two-branch", "double-well", "spring-mass", "spring-mass-grouped"]
    steps = violations = 0
    for name in names:
        report, _ = _experiment(name, (0,) if name != "linear-dense" else None)
        for e in report["seeds"]:
            for row in e.get("history", []):
                steps += 1
                violations += int(row["relevance"] > row["consistency"] + 1e-9)
    verdict(6, steps > 0 and violations == 0, f"{violations} violations over {steps} logged evaluations in {len(names)} experiments")


def test_criterion_07_two_branch(verdict):
    report, dt = _experiment("two-branch", (0,))
    m = _metrics(report)[0]
    fr = m["tau_branch_fraction"] + m["omega_branch_fraction"]
    distinct = len(set(m["dominant_branch"])) == 2
    ok = min(fr) >= 0.9 and distinct and dt < 900
    verdict(
        7,
        ok,
        f"tau branch fractions {np.round(m['tau_branch_fraction'], 3).tolist()}, omega "
        f"{np.round(m['omega_branch_fraction'], 3).tolist()}, dominant {m['dominant_branch']} in {dt:.0f}s",
    )


def test_criterion_08_nonidentifiable(verdict):
    scm = chain_scm([1.0, 1.0, 1.0], intervened=(0, 1))
    a, b = nonidentifiable_pair(scm)
    prior = InterventionPrior.gaussian(4, scm.omega_set)
    ints = [sample_intervention(prior, seed=k) for k in range(50)]
    la = float(population_consistency(scm, a.to_params(scm), ints).max())
    lb = float(population_consistency(scm, b.to_params(scm), ints).max())
    dot = float(a.tau_full(4) @ b.tau_full(4))
    verdict(8, max(la, lb) < 1e-8 and dot == 0, f"losses {la:.1e} / {lb:.1e}, tau inner product {dot}")


def test_criterion_09_spring_mass(verdict):
    report, dt = _experiment("spring-mass", (0,))
    m = _metrics(report)[0]
    corr = m["mass_omega_correlation"]
    ok = min(corr) >= 0.95 and dt < 1800
    verdict(
        9,
        ok,
        f"mass vs mean |omega| correlation {np.round(corr, 4).tolist()}, alpha {np.round(m['alpha'], 4).tolist()} "
        f"in {dt:.0f}s",
    )


def test_criterion_10_grouped_spring_mass(verdict):
    report, dt = _experiment("spring-mass-grouped", (0,))
    m = _metrics(report)[0]
    ok = (
        min(m["tau_group_fraction"]) >= 0.85
        and len(set(m["dominant_group"])) == 2
        and m["tau_y_fraction_total"] < 0.15
    )
    verdict(
        10,
        ok,
        f"group fractions {np.round(m['tau_group_fraction'], 3).tolist()}, groups {m['dominant_group']}, "
        f"y fraction {m['tau_y_fraction_total']:.3f} in {dt:.0f}s",
    )


def test_criterion_11_double_well(verdict):
    report, dt = _experiment("double-well", (0,))
    m = _metrics(report)[0]
    verdict(11, m["accuracy"] >= 0.9 and dt < 600, f"held-out sign agreement {m['accuracy']:.4f} in {dt:.0f}s")


def test_criterion_12_path_sums(verdict):
    rng = make_rng(12)
    worst = 0.0
    for seed in range(50):
        topology = ("dense", "chain", "two-branch")[seed % 3]
        n = int(rng.choice([3, 5])) if topology == "two-branch" else int(rng.integers(2, 7))
        scm = sample_random_scm(topology, n, seed=seed)
        worst = max(worst, path_sum_check(scm, analytical_one_cause(scm)))
    verdict(12, worst < 1e-10, f"max relative gap {worst:.2e} over 50 SCMs with N <= 6")
