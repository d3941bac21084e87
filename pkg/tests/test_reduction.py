import numpy as np
import pytest

from tcr.errors import InvalidInput
from tcr.reduction import (
    ReductionParams,
    apply_reduction,
    high_level_shift,
    mechanism_predict,
    pushforward_stats,
)
from tcr.rng import make_rng
from tcr.scm import Moments, population_moments, sample_random_scm, simulate
from tcr.trainer import initialize


def _params(n=2, N=5, seed=0, **kw):
    return initialize(n, N, seed, **kw)


def _random_moments(N, seed):
    rng = make_rng(seed)
    L = rng.standard_normal((N, N))
    return Moments(mean=rng.standard_normal(N), cov=L @ L.T + 0.1 * np.eye(N))


class TestReductionParams:
    def test_omega_mask_projects(self):
        mask = np.array([True, True, False, True, False])
        p = _params(omega_mask=mask)
        assert np.all(p.omega[:, ~mask] == 0)
        assert np.all(p.omega[:, mask] != 0)

    def test_replace_keeps_mask(self):
        mask = np.array([True, False, True, True, True])
        p = _params(omega_mask=mask).replace(omega=np.ones((2, 5)))
        np.testing.assert_array_equal(p.omega[:, 1], [0, 0])

    def test_variances_positive(self):
        p = _params().replace(log_var_z=np.array([-50.0, 30.0]), log_var_y_given_z=-40.0)
        assert np.all(p.var_z > 0) and p.var_y_given_z > 0

    def test_shape_mismatch(self):
        p = _params()
        with pytest.raises(InvalidInput):
            p.replace(alpha=np.ones(3))
        with pytest.raises(InvalidInput):
            p.replace(omega=np.ones((2, 4)))

    def test_roundtrip(self, tmp_path):
        p = _params(n=3, N=7, seed=4, omega_mask=np.arange(7) < 6)
        p.save(tmp_path / "p.json", metadata={"seed": 4, "epoch": 10})
        q, meta = ReductionParams.load(tmp_path / "p.json")
        assert meta["epoch"] == 10
        for name in ("tau", "omega", "alpha", "mu_z", "log_var_z"):
            np.testing.assert_array_equal(getattr(q, name), getattr(p, name))
        assert q.beta == p.beta and q.n_causes == 3
        np.testing.assert_array_equal(q.omega_mask, p.omega_mask)

    def test_rescale_composed_map(self):
        p = _params(n=2, N=6, seed=2)
        x = make_rng(1).standard_normal((50, 6))
        q = p.rescale([3.0, -0.25])
        f_p = mechanism_predict(p, apply_reduction(p, np.zeros(6), x)[1])
        f_q = mechanism_predict(q, apply_reduction(q, np.zeros(6), x)[1])
        np.testing.assert_allclose(f_q, f_p, atol=1e-10)
        np.testing.assert_allclose(q.var_z, p.var_z * np.array([9.0, 0.0625]))


class TestApplyReduction:
    def test_zero_tau(self):
        p = _params().replace(tau=np.zeros((2, 5)))
        _, z = apply_reduction(p, np.zeros(5), make_rng(0).standard_normal((8, 5)))
        assert np.all(z == 0)

    def test_coordinate_projection(self):
        x = make_rng(3).standard_normal((10, 5))
        e = np.zeros((1, 5))
        e[0, 2] = 1.0
        p = _params(n=1).replace(tau=e)
        y, z = apply_reduction(p, np.eye(5)[4], x)
        np.testing.assert_array_equal(z[:, 0], x[:, 2])
        np.testing.assert_array_equal(y, x[:, 4])

    def test_matches_loop(self):
        p = _params(n=3, N=4, seed=5)
        x = make_rng(6).standard_normal((7, 4))
        _, z = apply_reduction(p, np.zeros(4), x)
        ref = np.zeros((7, 3))
        for b in range(7):
            for k in range(3):
                for j in range(4):
                    ref[b, k] += p.tau[k, j] * x[b, j]
        np.testing.assert_allclose(z, ref, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInput):
            apply_reduction(_params(), np.zeros(5), np.zeros((3, 4)))
        with pytest.raises(InvalidInput):
            apply_reduction(_params(), np.zeros(4), np.zeros((3, 5)))


class TestPushforwardStats:
    def test_orthonormal_identity(self):
        Q, _ = np.linalg.qr(make_rng(0).standard_normal((5, 5)))
        p = _params(n=2).replace(tau=Q[:2])
        s = pushforward_stats(p, np.zeros(5), Moments(np.zeros(5), np.eye(5)))
        np.testing.assert_allclose(s.sigma_z_hat, np.eye(2), atol=1e-12)

    def test_scalar_expansion(self):
        m = _random_moments(5, 1)
        p = _params(n=1, N=5, seed=3)
        s = pushforward_stats(p, np.zeros(5), m)
        t = p.tau[0]
        expected = sum(t[j] * m.cov[j, k] * t[k] for j in range(5) for k in range(5))
        assert s.sigma_z_hat[0, 0] == pytest.approx(expected, rel=1e-12)

    def test_monte_carlo(self):
        scm = sample_random_scm("dense", 5, seed=2)
        p = _params(n=2, N=5, seed=1)
        i = np.array([0.5, -0.3, 0.2, 1.0, 0.0])
        pop = pushforward_stats(p, scm.tau0, population_moments(scm, i))
        B = 1_000_000
        emp = pushforward_stats(p, scm.tau0, Moments.from_samples(simulate(scm, i, B, seed=7).x_samples))
        tol = 6 * np.sqrt(max(pop.var_y_hat, np.max(np.diag(pop.sigma_z_hat))) / B) * 5
        np.testing.assert_allclose(emp.mu_z_hat, pop.mu_z_hat, atol=tol)
        np.testing.assert_allclose(emp.sigma_z_hat, pop.sigma_z_hat, rtol=0.02, atol=tol)
        np.testing.assert_allclose(emp.cov_zy_hat, pop.cov_zy_hat, rtol=0.02, atol=tol)
        assert emp.var_y_hat == pytest.approx(pop.var_y_hat, rel=0.02)

    def test_affine_in_moments(self):
        p = _params(n=2, N=4, seed=8)
        tau0 = np.eye(4)[3]
        m1, m2 = _random_moments(4, 1), _random_moments(4, 2)
        s1 = pushforward_stats(p, tau0, m1)
        s2 = pushforward_stats(p, tau0, m2)
        s12 = pushforward_stats(p, tau0, Moments(m1.mean + m2.mean, m1.cov + m2.cov))
        np.testing.assert_allclose(s12.sigma_z_hat, s1.sigma_z_hat + s2.sigma_z_hat, atol=1e-12)
        np.testing.assert_allclose(s12.mu_z_hat, s1.mu_z_hat + s2.mu_z_hat, atol=1e-12)
        assert np.linalg.eigvalsh(s1.sigma_z_hat)[0] >= -1e-10


class TestHighLevelShift:
    def test_zero(self):
        np.testing.assert_array_equal(high_level_shift(_params(), np.zeros(5)), [0, 0])

    def test_unit_omega(self):
        mask = np.arange(4) < 3
        p = _params(n=1, N=4, omega_mask=mask).replace(omega=np.ones((1, 4)))
        for k in range(3):
            assert high_level_shift(p, np.eye(4)[k])[0] == pytest.approx(1.0)

    def test_dot_products(self):
        p = _params(n=3, N=5, seed=6)
        i = make_rng(2).standard_normal(5)
        ref = [sum(p.omega[k, j] * i[j] for j in range(5)) for k in range(3)]
        np.testing.assert_allclose(high_level_shift(p, i), ref, atol=1e-14)

    def test_outside_mask(self):
        p = _params(omega_mask=np.arange(5) < 4)
        with pytest.raises(InvalidInput):
            high_level_shift(p, np.eye(5)[4])


class TestMechanismPredict:
    def test_zero_alpha(self):
        p = _params(n=2).replace(alpha=np.zeros(2), beta=1.5)
        assert mechanism_predict(p, np.array([3.0, -4.0])) == 1.5

    def test_arithmetic(self):
        p = _params(n=1).replace(alpha=np.array([2.0]), beta=1.0)
        assert mechanism_predict(p, np.array([3.0])) == 7.0

    def test_batch(self):
        p = _params(n=2).replace(alpha=np.array([1.0, -1.0]), beta=0.5)
        np.testing.assert_allclose(mechanism_predict(p, np.array([[1.0, 0.0], [0.0, 2.0]])), [1.5, -1.5])
