"""Gaussian consistency loss, causal relevance bound and the two regularizers.

The per-intervention terms are written once, in torch (float64), so that the
trainer can differentiate exactly the same expressions that the public
numpy-facing functions evaluate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import torch

from tcr.errors import (
    DegenerateParameters,
    DegeneratePushforward,
    DegenerateReference,
    InvalidInput,
    NumericallyInconsistentStats,
)

DTYPE = torch.float64
SINGULAR_COND = 1e12
S2_NEGATIVE_TOL = 1e-10
S2_FLOOR = 1e-12
CHOL_RIDGE = 1e-12
BOUND_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise InvalidInput("covariance shape does not match mean")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov)[0] < -1e-10 * max(1.0, np.abs(cov).max()):
            raise InvalidInput("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size


@dataclass
class LossBreakdown:
    cause_term: float
    mechanism_term: float
    consistency: float
    relevance: float | None = None
    overlap: float | None = None
    balancing: float | None = None
    total: float | None = None
    # number of interventions whose conditional variance had to be floored
    clamped: int = 0
    # number of interventions needing a ridge before Cholesky succeeded
    ridged: int = 0

    @property
    def bound_violated(self):
        return self.relevance is not None and self.relevance > self.consistency + BOUND_TOL

    def as_row(self):
        return {
            "cause": self.cause_term,
            "mechanism": self.mechanism_term,
            "consistency": self.consistency,
            "relevance": self.relevance,
            "overlap": self.overlap,
            "balancing": self.balancing,
            "total": self.total,
        }


def gaussian_kl(p, q):
    """KL(p || q) between two multivariate Gaussians, floored at zero."""
    if p.dim != q.dim:
        raise InvalidInput("Gaussians must have equal dimension")
    if np.linalg.cond(q.cov) > SINGULAR_COND:
        raise DegenerateReference("reference covariance is singular")
    cq = scipy.linalg.cho_factor(q.cov, lower=True)
    diff = q.mean - p.mean
    maha = diff @ scipy.linalg.cho_solve(cq, diff)
    trace = np.trace(scipy.linalg.cho_solve(cq, p.cov))
    sign_p, logdet_p = np.linalg.slogdet(p.cov)
    if sign_p <= 0:
        return math.inf
    logdet_q = 2.0 * np.sum(np.log(np.diag(cq[0])))
    kl = 0.5 * (maha + trace - (logdet_p - logdet_q) - p.dim)
    return max(float(kl), 0.0)


# ---------------------------------------------------------------------------
# torch core


def _t(x):
    return torch.tensor(np.array(x, dtype=float), dtype=DTYPE)


def _cholesky(sigma):
    L, info = torch.linalg.cholesky_ex(sigma)
    ridged = info != 0
    if bool(ridged.any()):
        eye = torch.eye(sigma.shape[-1], dtype=sigma.dtype)
        sigma = torch.where(ridged[:, None, None], sigma + CHOL_RIDGE * eye, sigma)
        L, info = torch.linalg.cholesky_ex(sigma)
        if bool((info != 0).any()):
            raise DegeneratePushforward("pushforward covariance of Z is singular")
    return L, int(ridged.sum())


def stats_terms(mu_zh, sig_zh, mu_yh, var_yh, c_zy, shift, alpha, beta, mu_z, log_var_z, log_var_yz):
    """Per-intervention cause, mechanism and relevance terms.

    Shapes: ``mu_zh`` (G, n), ``sig_zh`` (G, n, n), ``mu_yh``/``var_yh`` (G,),
    ``c_zy`` (G, n), ``shift`` (G, n) is the high-level shift W i. Returns a
    dict of (G,) tensors plus the clamp/ridge counters.
    """
    n = mu_zh.shape[-1]
    var_z = torch.exp(log_var_z)
    L, ridged = _cholesky(sig_zh)
    logdet_hat = 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
    diag_hat = torch.diagonal(sig_zh, dim1=-2, dim2=-1)
    cause = 0.5 * (
        (((mu_z + shift - mu_zh) ** 2 + diag_hat) / var_z).sum(-1)
        - logdet_hat
        + log_var_z.sum()
        - n
    )

    # Regression of Y on Z under the pushforward: slope a, residual variance s2.
    a = torch.cholesky_solve(c_zy.unsqueeze(-1), L).squeeze(-1)
    s2 = var_yh - (c_zy * a).sum(-1)
    tol = S2_NEGATIVE_TOL * torch.clamp(var_yh.detach(), min=1.0)
    if bool((s2.detach() < -tol).any()):
        raise NumericallyInconsistentStats(
            f"conditional variance of Y given Z is negative (min {float(s2.min()):.3e})"
        )
    clamped = int((s2.detach() < S2_FLOOR).sum())
    s2 = torch.clamp(s2, min=S2_FLOOR)
    slope_gap = alpha - a
    offset = mu_zh @ alpha + beta - mu_yh
    gap_sq = offset**2 + torch.einsum("gi,gij,gj->g", slope_gap, sig_zh, slope_gap)
    var_yz = torch.exp(log_var_yz)
    mechanism = 0.5 * (gap_sq / var_yz + s2 / var_yz - torch.log(s2) + log_var_yz - 1.0)

    # KL between the Y marginals (monitoring only).
    mean_model = beta + (mu_z + shift) @ alpha
    var_model = (alpha**2 * var_z).sum() + var_yz
    var_yh_safe = torch.clamp(var_yh, min=S2_FLOOR)
    relevance = 0.5 * (
        (mean_model - mu_yh) ** 2 / var_model
        + var_yh_safe / var_model
        - torch.log(var_yh_safe / var_model)
        - 1.0
    )
    return {
        "cause": cause,
        "mechanism": mechanism,
        "relevance": relevance,
        "clamped": clamped,
        "ridged": ridged,
    }


def pushforward_torch(tau, tau0, mu_x, cov_x):
    """Batched pushforward statistics from low-level moments (G, N) and (G, N, N)."""
    TS = torch.matmul(tau, cov_x)  # (G, n, N)
    return {
        "mu_zh": mu_x @ tau.T,
        "sig_zh": torch.matmul(TS, tau.T),
        "mu_yh": mu_x @ tau0,
        "var_yh": torch.einsum("i,gij,j->g", tau0, cov_x, tau0),
        "c_zy": TS @ tau0,
    }


def _normalized_abs_rows(M):
    norms = torch.linalg.norm(M, dim=1)
    if bool((norms == 0).any()):
        raise DegenerateParameters("reduction map row has zero norm")
    return M.abs() / norms[:, None]


def overlap_torch(tau, omega):
    n = tau.shape[0]
    if n < 2:
        return torch.zeros((), dtype=DTYPE)
    total = torch.zeros((), dtype=DTYPE)
    for M in (tau, omega):
        P = _normalized_abs_rows(M)
        G = P @ P.T
        total = total + torch.triu(G, diagonal=1).sum()
    return total


def balancing_torch(tau, omega, alpha):
    total = torch.zeros((), dtype=DTYPE)
    for M in (tau, omega):
        norms = alpha.abs() * torch.linalg.norm(M, dim=1)
        denom = norms.sum()
        if float(denom.detach()) == 0.0:
            raise DegenerateParameters("all alpha-weighted reduction rows are zero")
        total = total + torch.sqrt((norms**2).sum()) / denom
    return total


# ---------------------------------------------------------------------------
# numpy-facing API


def _fsum_mean(t):
    vals = t.detach().cpu().numpy()
    return math.fsum(vals.tolist()) / len(vals)


def _stack_stats(params, stats_per_intervention):
    if not stats_per_intervention:
        raise InvalidInput("need at least one (intervention, stats) pair")
    ints, stats = zip(*stats_per_intervention)
    shift = np.stack([params.omega @ np.asarray(i, dtype=float) for i in ints])
    return dict(
        mu_zh=_t(np.stack([s.mu_z_hat for s in stats])),
        sig_zh=_t(np.stack([s.sigma_z_hat for s in stats])),
        mu_yh=_t([s.mu_y_hat for s in stats]),
        var_yh=_t([s.var_y_hat for s in stats]),
        c_zy=_t(np.stack([s.cov_zy_hat for s in stats])),
        shift=_t(shift),
    )


def _gamma(params):
    return dict(
        alpha=_t(params.alpha),
        beta=_t(params.beta),
        mu_z=_t(params.mu_z),
        log_var_z=_t(params.log_var_z),
        log_var_yz=_t(params.log_var_y_given_z),
    )


def _evaluate(params, stats_per_intervention):
    with torch.no_grad():
        terms = stats_terms(**_stack_stats(params, stats_per_intervention), **_gamma(params))
    cause = _fsum_mean(terms["cause"])
    mech = _fsum_mean(terms["mechanism"])
    return LossBreakdown(
        cause_term=max(cause, 0.0),
        mechanism_term=max(mech, 0.0),
        consistency=max(cause, 0.0) + max(mech, 0.0),
        relevance=max(_fsum_mean(terms["relevance"]), 0.0),
        clamped=terms["clamped"],
        ridged=terms["ridged"],
    )


def per_intervention_consistency(params, stats_per_intervention):
    """Consistency loss of each intervention separately (array of length G)."""
    with torch.no_grad():
        terms = stats_terms(**_stack_stats(params, stats_per_intervention), **_gamma(params))
    return (terms["cause"] + terms["mechanism"]).numpy()


def consistency_loss(params, stats_per_intervention):
    """Mean over interventions of the cause and mechanism KL terms.

    ``relevance`` is filled in as well since it comes from the same statistics.
    """
    return _evaluate(params, stats_per_intervention)


def relevance_loss(params, stats_per_intervention):
    return _evaluate(params, stats_per_intervention).relevance


def overlap_loss(params):
    with torch.no_grad():
        return float(overlap_torch(_t(params.tau), _t(params.omega)))


def balancing_loss(params):
    with torch.no_grad():
        return float(balancing_torch(_t(params.tau), _t(params.omega), _t(params.alpha)))


def total_loss(params, stats_per_intervention, eta_ov=0.0, eta_bal=0.0):
    if eta_ov < 0 or eta_bal < 0:
        raise InvalidInput("regularization weights must be non-negative")
    out = _evaluate(params, stats_per_intervention)
    out.overlap = overlap_loss(params)
    out.balancing = balancing_loss(params)
    out.total = out.consistency + eta_ov * out.overlap + eta_bal * out.balancing
    return out
