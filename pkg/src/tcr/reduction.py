"""Learnable linear reduction (tau, omega, gamma) and its pushforward statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tcr.errors import InvalidInput
from tcr.scm import PSD_TOL, Moments


def _arr(a, ndim):
    out = np.array(a, dtype=np.float64)
    if out.ndim != ndim:
        raise InvalidInput(f"expected a {ndim}-d array, got shape {out.shape}")
    return out


def _mask(m, N):
    mask = np.array(m, dtype=bool)
    if mask.shape != (N,):
        raise InvalidInput("masks must have length N")
    mask.setflags(write=False)
    return mask


@dataclass(frozen=True, eq=False)
class ReductionParams:
    """Parameters of an n-cause linear TCR.

    ``tau`` and ``omega`` are n x N. ``alpha``/``beta`` define the affine
    mechanism ``Y = alpha . Z + beta + R0``; variances are stored as logs.
    If ``omega_mask`` is given, omega columns outside it are zeroed; likewise
    ``tau_mask`` restricts tau (used to keep the causes off the target slots).
    """

    tau: np.ndarray
    omega: np.ndarray
    alpha: np.ndarray
    beta: float
    log_var_y_given_z: float
    mu_z: np.ndarray
    log_var_z: np.ndarray
    omega_mask: np.ndarray | None = field(default=None)
    tau_mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        tau = _arr(self.tau, 2)
        omega = _arr(self.omega, 2)
        n, N = tau.shape
        if omega.shape != (n, N):
            raise InvalidInput(f"omega shape {omega.shape} does not match tau shape {tau.shape}")
        alpha, mu_z, log_var_z = (_arr(v, 1) for v in (self.alpha, self.mu_z, self.log_var_z))
        if alpha.shape != (n,) or mu_z.shape != (n,) or log_var_z.shape != (n,):
            raise InvalidInput("alpha, mu_z and log_var_z must have one entry per cause")
        if self.omega_mask is not None:
            mask = _mask(self.omega_mask, N)
            omega = np.where(mask, omega, 0.0)
            object.__setattr__(self, "omega_mask", mask)
        if self.tau_mask is not None:
            mask = _mask(self.tau_mask, N)
            tau = np.where(mask, tau, 0.0)
            object.__setattr__(self, "tau_mask", mask)
        for name, v in (("tau", tau), ("omega", omega), ("alpha", alpha), ("mu_z", mu_z), ("log_var_z", log_var_z)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "log_var_y_given_z", float(self.log_var_y_given_z))

    @property
    def n_causes(self):
        return self.tau.shape[0]

    @property
    def n_vars(self):
        return self.tau.shape[1]

    @property
    def var_z(self):
        return np.exp(self.log_var_z)

    @property
    def var_y_given_z(self):
        return float(np.exp(self.log_var_y_given_z))

    def replace(self, **changes):
        kw = {k: getattr(self, k) for k in BLOCKS}
        kw["omega_mask"] = self.omega_mask
        kw["tau_mask"] = self.tau_mask
        kw.update(changes)
        return ReductionParams(**kw)

    def rescale(self, c):
        """Reparametrize cause k by factor c[k]; the composed map f o tau is unchanged."""
        c = np.broadcast_to(np.asarray(c, dtype=float), (self.n_causes,))
        if np.any(c == 0):
            raise InvalidInput("rescaling factors must be nonzero")
        return self.replace(
            tau=self.tau * c[:, None],
            omega=self.omega * c[:, None],
            mu_z=self.mu_z * c,
            log_var_z=self.log_var_z + 2 * np.log(np.abs(c)),
            alpha=self.alpha / c,
        )

    def to_dict(self):
        d = {
            "n_causes": self.n_causes,
            "n_vars": self.n_vars,
            "tau": self.tau.tolist(),
            "omega": self.omega.tolist(),
            "alpha": self.alpha.tolist(),
            "beta": self.beta,
            "log_var_y_given_z": self.log_var_y_given_z,
            "mu_z": self.mu_z.tolist(),
            "log_var_z": self.log_var_z.tolist(),
        }
        for name in ("omega_mask", "tau_mask"):
            m = getattr(self, name)
            if m is not None:
                d[name] = np.flatnonzero(m).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        masks = {}
        for name in ("omega_mask", "tau_mask"):
            if name in d:
                m = np.zeros(d["n_vars"], dtype=bool)
                m[d[name]] = True
                masks[name] = m
        return cls(
            tau=d["tau"],
            omega=d["omega"],
            alpha=d["alpha"],
            beta=d["beta"],
            log_var_y_given_z=d["log_var_y_given_z"],
            mu_z=d["mu_z"],
            log_var_z=d["log_var_z"],
            **masks,
        )

    def save(self, path, metadata=None):
        payload = {"params": self.to_dict(), "metadata": metadata or {}}
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, path):
        payload = json.loads(Path(path).read_text())
        return cls.from_dict(payload["params"]), payload.get("metadata", {})


BLOCKS = ("tau", "omega", "alpha", "beta", "mu_z", "log_var_z", "log_var_y_given_z")


@dataclass(frozen=True, eq=False)
class PushforwardStats:
    """Second-order statistics of (Y, Z) under one intervention."""

    mu_z_hat: np.ndarray
    sigma_z_hat: np.ndarray
    mu_y_hat: float
    var_y_hat: float
    cov_zy_hat: np.ndarray

    def __post_init__(self):
        sig = np.array(self.sigma_z_hat, dtype=float)
        sig = 0.5 * (sig + sig.T)
        scale = max(1.0, float(np.max(np.abs(np.diag(sig)))))
        if np.linalg.eigvalsh(sig)[0] < -PSD_TOL * scale:
            raise InvalidInput("sigma_z_hat is not positive semidefinite")
        if self.var_y_hat < -PSD_TOL * max(1.0, abs(self.var_y_hat)):
            raise InvalidInput("var_y_hat must be non-negative")
        object.__setattr__(self, "sigma_z_hat", sig)
        object.__setattr__(self, "mu_z_hat", np.array(self.mu_z_hat, dtype=float))
        object.__setattr__(self, "cov_zy_hat", np.array(self.cov_zy_hat, dtype=float))
        object.__setattr__(self, "mu_y_hat", float(self.mu_y_hat))
        object.__setattr__(self, "var_y_hat", max(float(self.var_y_hat), 0.0))


def _check_tau0(params, tau0):
    tau0 = np.asarray(tau0, dtype=float)
    if tau0.shape != (params.n_vars,):
        raise InvalidInput(f"tau0 must have length {params.n_vars}")
    return tau0


def apply_reduction(params, tau0, x_samples):
    """Map low-level samples (B x N) to ``(y_hat, z_hat)``."""
    tau0 = _check_tau0(params, tau0)
    x = np.asarray(x_samples, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.n_vars:
        raise InvalidInput(f"x_samples must be B x {params.n_vars}")
    return x @ tau0, x @ params.tau.T


def pushforward_stats(params, tau0, moments):
    tau0 = _check_tau0(params, tau0)
    if not isinstance(moments, Moments) or moments.mean.shape != (params.n_vars,):
        raise InvalidInput("moments must be a Moments instance over the N low-level variables")
    T, mu, S = params.tau, moments.mean, moments.cov
    TS = T @ S
    return PushforwardStats(
        mu_z_hat=T @ mu,
        sigma_z_hat=TS @ T.T,
        mu_y_hat=float(tau0 @ mu),
        var_y_hat=float(tau0 @ S @ tau0),
        cov_zy_hat=TS @ tau0,
    )


def high_level_shift(params, intervention):
    i = np.asarray(intervention, dtype=float)
    if i.shape != (params.n_vars,):
        raise InvalidInput(f"intervention must have length {params.n_vars}")
    if params.omega_mask is not None and np.any(i[~params.omega_mask] != 0):
        raise InvalidInput("intervention is nonzero outside the intervenable set")
    return params.omega @ i


def mechanism_predict(params, z):
    """Conditional mean alpha . z + beta; ``z`` may be one vector or a B x n batch."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != params.n_causes:
        raise InvalidInput(f"z must have {params.n_causes} components")
    out = z @ params.alpha + params.beta
    return float(out) if np.ndim(out) == 0 else out
