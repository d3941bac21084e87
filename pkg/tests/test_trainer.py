import math

import numpy as np
import pytest

from tcr.errors import InsufficientData, InvalidConfiguration, TrainingFailed
from tcr.oracle import analytical_one_cause, cosine_similarity
from tcr.rng import derive_seed, make_rng
from tcr.scm import InterventionPrior, population_moments, sample_intervention, sample_random_scm
from tcr.trainer import (
    Dataset,
    ScmSimulator,
    TrainConfig,
    build_dataset,
    check_gradient_fd,
    fit_marginals,
    fit_omega,
    gradient,
    initialize,
    loss_value,
    resimulate,
    select_restart,
    split_sizes,
    train,
)


def _exact_samples(moments, B, rng):
    """B rows whose 1/B-normalized empirical mean and covariance equal ``moments`` exactly."""
    N = moments.mean.size
    z = rng.standard_normal((B, N))
    z -= z.mean(axis=0)
    w = np.linalg.cholesky(z.T @ z / B)
    z = np.linalg.solve(w, z.T).T
    return moments.mean + z @ np.linalg.cholesky(moments.cov).T


def _population_dataset(scm, n_groups=12, B=64, seed=0):
    prior = InterventionPrior.gaussian(scm.n_vars, scm.omega_set)
    rng = make_rng(seed)
    ints = np.stack([np.zeros(scm.n_vars)] + [sample_intervention(prior, seed + g) for g in range(1, n_groups)])
    x = np.stack([_exact_samples(population_moments(scm, i), B, rng) for i in ints])
    split = np.array(["train"] * (n_groups - 4) + ["val"] * 2 + ["test"] * 2)
    return Dataset(interventions=ints, x=x, seeds=np.arange(n_groups), split=split)


@pytest.fixture(scope="module")
def problem():
    scm = sample_random_scm("dense", 10, seed=0)
    sim = ScmSimulator(scm)
    prior = InterventionPrior.gaussian(10, scm.omega_set)
    ds = build_dataset(sim, prior, 2000, 64, seed=1)
    return scm, sim, prior, ds


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"learning_rate": 0},
            {"sim_batch": 1},
            {"split_fractions": (0.5, 0.3, 0.3)},
            {"scheduler": "step"},
            {"optimizer": "lbfgs"},
            {"restarts": 0},
            {"eta_ov": -0.1},
            {"scheduler": "cosine", "final_lr": 1.0},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfiguration):
            TrainConfig(**kw)

    def test_cosine_schedule(self):
        c = TrainConfig(learning_rate=1e-3, scheduler="cosine", final_lr=1e-5, epochs=600)
        assert c.lr_at(0) == pytest.approx(1e-3)
        assert c.lr_at(300) == pytest.approx(0.5 * (1e-3 + 1e-5))
        assert c.lr_at(599) == pytest.approx(1e-5, abs=1e-8)
        assert all(c.lr_at(e) >= c.lr_at(e + 1) for e in range(599))

    def test_constant_schedule(self):
        c = TrainConfig(learning_rate=0.1, epochs=5)
        assert {c.lr_at(e) for e in range(5)} == {0.1}


class TestBuildDataset:
    def test_table_sizes(self, problem):
        scm, sim, prior, _ = problem
        ds = build_dataset(sim, prior, 10000, 128, seed=0)
        assert ds.n_groups == 78 and ds.batch_size == 128
        assert split_sizes(78) == (54, 12, 12)
        assert [len(ds.indices(s)) for s in ("train", "val", "test")] == [54, 12, 12]

    def test_zero_prior(self, problem):
        scm, sim, _, _ = problem
        ds = build_dataset(sim, InterventionPrior(std=np.zeros(10)), 640, 64, seed=0)
        assert np.all(ds.interventions == 0)

    def test_deterministic(self, problem):
        _, sim, prior, _ = problem
        a = build_dataset(sim, prior, 640, 64, seed=5)
        b = build_dataset(sim, prior, 640, 64, seed=5)
        assert a.x.tobytes() == b.x.tobytes()
        assert a.interventions.tobytes() == b.interventions.tobytes()
        assert list(a.split) == list(b.split)

    def test_insufficient(self, problem):
        _, sim, prior, _ = problem
        with pytest.raises(InsufficientData):
            build_dataset(sim, prior, 100, 64, seed=0)

    def test_moments_normalization(self, problem):
        ds = problem[3]
        mean, cov = ds.moments
        xc = ds.x[3] - ds.x[3].mean(axis=0)
        np.testing.assert_allclose(cov[3], xc.T @ xc / ds.batch_size, atol=1e-12)

    def test_resimulate_keeps_groups(self, problem):
        _, sim, _, ds = problem
        fresh = resimulate(sim, ds, seed=9)
        assert fresh.interventions is ds.interventions and list(fresh.split) == list(ds.split)
        assert not np.array_equal(fresh.x, ds.x)


class TestGradient:
    def test_stationary_at_oracle(self):
        scm = sample_random_scm("dense", 8, seed=2)
        ds = _population_dataset(scm)
        params = analytical_one_cause(scm).to_params(scm)
        assert loss_value(params, ds, scm.tau0) < 1e-8
        g = gradient(params, ds, scm.tau0)
        assert math.sqrt(sum(float(np.sum(v**2)) for v in g.values())) < 1e-6

    def test_fd_random_point(self, problem):
        scm, _, _, ds = problem
        params = initialize(2, 10, 3, omega_mask=scm.omega_mask, tau_mask=scm.omega_mask)
        rep = check_gradient_fd(params, ds, scm.tau0, 1e-5, eta_ov=0.1, eta_bal=1e-3)
        assert rep.passed, rep.block_errors

    def test_fd_beta_quadratic(self, problem):
        scm, _, _, ds = problem
        params = initialize(1, 10, 4, omega_mask=scm.omega_mask, tau_mask=scm.omega_mask)
        assert check_gradient_fd(params, ds, scm.tau0).block_errors["beta"] < 1e-9

    def test_fd_near_overlap_kink(self, problem):
        scm, _, _, ds = problem
        params = initialize(2, 10, 3, omega_mask=scm.omega_mask, tau_mask=scm.omega_mask)
        tau = params.tau.copy()
        tau[0, 0], tau[1, 1] = 1e-7, 0.0
        rep = check_gradient_fd(params.replace(tau=tau), ds, scm.tau0, 1e-5, eta_ov=0.1)
        assert rep.passed, rep.block_errors

    def test_corrupted_block_is_flagged(self, problem):
        scm, _, _, ds = problem
        params = initialize(2, 10, 5, omega_mask=scm.omega_mask, tau_mask=scm.omega_mask)
        g = gradient(params, ds, scm.tau0)
        g["mu_z"] = g["mu_z"] + 0.5
        rep = check_gradient_fd(params, ds, scm.tau0, grad=g)
        assert not rep.passed and rep.worst_block == "mu_z"
        assert all(v < 1e-5 for k, v in rep.block_errors.items() if k != "mu_z")

    def test_masked_entries_are_zero(self, problem):
        scm, _, _, ds = problem
        params = initialize(2, 10, 6, omega_mask=scm.omega_mask, tau_mask=scm.omega_mask)
        g = gradient(params, ds, scm.tau0)
        assert np.all(g["omega"][:, 9] == 0) and np.all(g["tau"][:, 9] == 0)

    def test_convex_in_beta(self, problem):
        scm, _, _, ds = problem
        params = initialize(1, 10, 7, omega_mask=scm.omega_mask, tau_mask=scm.omega_mask)
        betas = np.linspace(-2, 2, 9)
        grads = [float(gradient(params.replace(beta=b), ds, scm.tau0)["beta"]) for b in betas]
        assert np.all(np.diff(grads) > 0)


class TestFitMarginals:
    def test_stationary_in_gamma(self, problem):
        scm, _, _, ds = problem
        params = initialize(2, 10, 8, omega_mask=scm.omega_mask, tau_mask=scm.omega_mask)
        fitted = fit_marginals(params, ds, scm.tau0, "train")
        g = gradient(fitted, ds, scm.tau0)
        for name in ("alpha", "beta", "mu_z", "log_var_z", "log_var_y_given_z"):
            assert np.max(np.abs(g[name])) < 1e-9, name
        assert loss_value(fitted, ds, scm.tau0) < loss_value(params, ds, scm.tau0)
        np.testing.assert_array_equal(fitted.tau, params.tau)

    def test_omega_fit_is_stationary(self, problem):
        scm, _, _, ds = problem
        params = initialize(2, 10, 9, omega_mask=scm.omega_mask, tau_mask=scm.omega_mask)
        fitted = fit_marginals(fit_omega(params, ds, "train"), ds, scm.tau0, "train")
        g = gradient(fitted, ds, scm.tau0)
        assert np.max(np.abs(g["omega"])) < 1e-9
        assert np.all(fitted.omega[:, ~scm.omega_mask] == 0)
        assert loss_value(fitted, ds, scm.tau0) < loss_value(fit_marginals(params, ds, scm.tau0, "train"), ds, scm.tau0)

    def test_underdetermined_omega_in_span(self, problem):
        scm, _, _, ds = problem
        idx = np.arange(6)
        params = initialize(1, 10, 10, omega_mask=scm.omega_mask, tau_mask=scm.omega_mask)
        w = fit_omega(params, ds, idx).omega[0]
        ints = ds.interventions[idx] - ds.interventions[idx].mean(axis=0)
        coef, *_ = np.linalg.lstsq(ints.T, w, rcond=None)
        np.testing.assert_allclose(ints.T @ coef, w, atol=1e-10)


class TestTrain:
    def test_zero_epochs(self, problem):
        scm, sim, prior, ds = problem
        cfg = TrainConfig(epochs=0, master_seed=3)
        res = train(sim, prior, scm.tau0, 1, cfg, dataset=ds)
        assert res.history == []
        init = initialize(1, 10, derive_seed(3, 1, 0), omega_mask=sim.omega_mask, tau_mask=sim.tau_mask)
        np.testing.assert_array_equal(res.best_params.tau, init.tau)

    def test_deterministic(self, problem):
        scm, sim, prior, ds = problem
        cfg = TrainConfig(epochs=5, restarts=2, master_seed=1, learning_rate=1e-2)
        a = train(sim, prior, scm.tau0, 1, cfg, dataset=ds)
        b = train(sim, prior, scm.tau0, 1, cfg, dataset=ds)
        assert a.best_params.tau.tobytes() == b.best_params.tau.tobytes()
        assert [h.loss.total for h in a.history] == [h.loss.total for h in b.history]

    def test_selection_and_masks(self, problem):
        scm, sim, prior, ds = problem
        cfg = TrainConfig(epochs=10, restarts=3, learning_rate=1e-2, optimizer="adam")
        res = train(sim, prior, scm.tau0, 2, cfg, dataset=ds)
        assert res.selected_restart == int(np.argmin(res.restart_val_losses))
        for p in res.restart_params:
            assert np.all(p.omega[:, 9] == 0) and np.all(p.tau[:, 9] == 0)
        assert res.bound_violations == 0
        assert {h.split for h in res.history} == {"train", "val", "test"}

    def test_loss_trend(self, problem):
        scm, sim, prior, _ = problem
        cfg = TrainConfig(epochs=60, master_seed=2)
        res = train(sim, prior, scm.tau0, 1, cfg)
        losses = np.array([h.loss.total for h in res.history_of(split="train")])
        avg = np.convolve(losses, np.ones(10) / 10, mode="valid")
        assert np.all(np.diff(avg) <= 1e-12)
        assert losses[-1] < losses[0]

    def test_all_restarts_fail(self, problem):
        scm, sim, prior, ds = problem
        cfg = TrainConfig(epochs=20, restarts=2, learning_rate=1e6)
        with pytest.raises(TrainingFailed) as info:
            train(sim, prior, scm.tau0, 1, cfg, dataset=ds)
        assert len(info.value.diagnostics) == 2

    def test_resimulate_flag(self, problem):
        scm, sim, prior, ds = problem
        cfg = TrainConfig(epochs=3, resimulate_per_epoch=True)
        res = train(sim, prior, scm.tau0, 1, cfg, dataset=ds)
        assert len(res.history_of(split="train")) == 3

    def test_adam_converges_given_budget(self):
        scm = sample_random_scm("dense", 6, seed=4)
        sim = ScmSimulator(scm)
        prior = InterventionPrior.gaussian(6, scm.omega_set)
        cfg = TrainConfig(epochs=1500, learning_rate=1e-2, optimizer="adam", n_paths=5000, log_every=1500)
        res = train(sim, prior, scm.tau0, 1, cfg)
        sol = analytical_one_cause(scm)
        assert cosine_similarity(res.best_params.tau[0], sol.tau_full(6)) > 0.99
        assert cosine_similarity(res.best_params.omega[0], sol.omega_full(6)) > 0.99


class TestSelectRestart:
    def test_ties_lowest_index(self):
        assert select_restart([1.0, 0.5, 0.5]) == 1

    def test_nonfinite_skipped(self):
        assert select_restart([math.inf, math.nan, 2.0]) == 2

    def test_permutation_invariant_choice(self):
        vals = np.array([3.0, 1.0, 2.0, 1.5])
        perm = np.array([2, 0, 3, 1])
        assert perm[select_restart(vals[perm])] == select_restart(vals)
