"""Closed-form 1-cause reductions for block-triangular linear Gaussian SCMs.

For target block P and cause block C (no edges from P back into C):

    tau1  = A_PC^T (I - A_PP)^-T tau0_bar
    omega1 = (I - A_CC)^-T tau1

with alpha = 1 and the high-level marginals read off the exogenous law.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tcr.errors import AbstractionViolated, DegenerateParameters, InvalidConfiguration, ModelDegenerate
from tcr.losses import per_intervention_consistency
from tcr.reduction import ReductionParams, pushforward_stats
from tcr.rng import make_rng
from tcr.scm import SINGULAR_COND, population_moments, sample_intervention


@dataclass(frozen=True, eq=False)
class OracleSolution:
    """Exact 1-cause TCR; vectors are restricted to ``pi1`` (omega zero off the intervened set)."""

    tau1_bar: np.ndarray
    omega1_bar: np.ndarray
    alpha: float
    beta: float
    pi1: tuple
    pi0: tuple = ()
    mu_z: float | None = None
    var_z: float | None = None
    var_y_given_z: float | None = None
    tau_u0: np.ndarray | None = None
    tau_u1: np.ndarray | None = None

    def tau_full(self, n_vars):
        t = np.zeros(n_vars)
        t[list(self.pi1)] = self.tau1_bar
        return t

    def omega_full(self, n_vars):
        w = np.zeros(n_vars)
        w[list(self.pi1)] = self.omega1_bar
        return w

    def to_params(self, scm):
        """ReductionParams realizing this solution on ``scm`` (requires the marginal fields)."""
        if self.mu_z is None or self.var_z is None or self.var_y_given_z is None:
            raise InvalidConfiguration("solution carries no high-level marginals")
        n = scm.n_vars
        return ReductionParams(
            tau=self.tau_full(n)[None, :],
            omega=self.omega_full(n)[None, :],
            alpha=[self.alpha],
            beta=self.beta,
            log_var_y_given_z=np.log(self.var_y_given_z),
            mu_z=[self.mu_z],
            log_var_z=[np.log(self.var_z)],
            omega_mask=scm.omega_mask,
            tau_mask=~np.isin(np.arange(n), scm.pi0),
        )

    def to_dict(self):
        d = {
            "tau1_bar": self.tau1_bar.tolist(),
            "omega1_bar": self.omega1_bar.tolist(),
            "alpha": self.alpha,
            "beta": self.beta,
            "pi1": list(self.pi1),
            "pi0": list(self.pi0),
            "mu_z": self.mu_z,
            "var_z": self.var_z,
            "var_y_given_z": self.var_y_given_z,
        }
        for key in ("tau_u0", "tau_u1"):
            v = getattr(self, key)
            d[key] = None if v is None else v.tolist()
        return d


def canonical(v):
    """Unit-norm copy of ``v`` whose first nonzero entry is positive."""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise DegenerateParameters("cannot normalize a zero vector")
    v = v / norm
    nz = np.flatnonzero(np.abs(v) > 0)
    return -v if v[nz[0]] < 0 else v


def cosine_similarity(learned, reference):
    """|<a, b>| / (|a| |b|); sign and scale of a reduction are not identifiable."""
    a = np.asarray(learned, dtype=float).ravel()
    b = np.asarray(reference, dtype=float).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateParameters("cosine similarity of a zero vector")
    return float(min(abs(a @ b) / (na * nb), 1.0))


def _solve(M, b, transpose=False):
    if np.linalg.cond(M) > SINGULAR_COND:
        raise ModelDegenerate("singular block in (I - A)")
    return np.linalg.solve(M.T if transpose else M, b)


def _one_cause(scm, target, causes, tau0_bar, intervened):
    """Exact solution for alignment (target block, cause block); omega zeroed off ``intervened``."""
    target, causes = list(target), list(causes)
    A_pp = scm.block(target, target)
    A_pc = scm.block(target, causes)
    A_cc = scm.block(causes, causes)
    I_p = np.eye(len(target)) - A_pp
    I_c = np.eye(len(causes)) - A_cc
    tau_u0 = _solve(I_p, tau0_bar, transpose=True)  # (I - A_pp)^-T tau0_bar
    tau1 = A_pc.T @ tau_u0
    omega_unmasked = _solve(I_c, tau1, transpose=True)
    keep = np.isin(causes, list(intervened))
    omega1 = np.where(keep, omega_unmasked, 0.0)
    mu, var = scm.exo_mean, scm.exo_var
    return OracleSolution(
        tau1_bar=tau1,
        omega1_bar=omega1,
        alpha=1.0,
        beta=float(tau_u0 @ mu[target]),
        pi1=tuple(causes),
        pi0=tuple(target),
        mu_z=float(omega_unmasked @ mu[causes]),
        var_z=float(omega_unmasked**2 @ var[causes]),
        var_y_given_z=float(tau_u0**2 @ var[target]),
        tau_u0=tau_u0,
        tau_u1=omega_unmasked,
    )


def analytical_one_cause(scm):
    """Unique (up to scale) exact 1-cause reduction with pi(1) = Omega."""
    if scm.mediators:
        raise InvalidConfiguration(
            f"nodes {list(scm.mediators)} are neither target nor intervened; use nonidentifiable_pair"
        )
    if not scm.omega_set:
        raise InvalidConfiguration("the intervened set is empty")
    return _one_cause(scm, scm.pi0, scm.omega_set, scm.tau0_bar, scm.omega_set)


def chain_closed_form(coefficients):
    """Solution for the chain X_1 -> ... -> X_N = Y with ``coefficients[j]`` = A[j+1, j].

    tau puts all weight on the parent of Y; omega holds the products of the
    coefficients downstream of each node.
    """
    c = np.asarray(coefficients, dtype=float)
    if c.ndim != 1 or c.size < 1:
        raise InvalidConfiguration("a chain needs at least two nodes")
    tau1 = np.zeros(c.size)
    tau1[-1] = c[-1]
    omega1 = np.cumprod(c[::-1])[::-1].copy()
    return OracleSolution(tau1_bar=tau1, omega1_bar=omega1, alpha=1.0, beta=0.0, pi1=tuple(range(c.size)))


def path_effects(adjacency, target):
    """Total effect of every node on ``target`` by enumerating directed paths.

    Brute force (exponential in the worst case); meant as an independent check
    on small acyclic graphs.
    """
    A = np.asarray(adjacency, dtype=float)
    n = A.shape[0]
    effects = np.zeros(n)

    def walk(node, weight, visited):
        # extend the path backwards through the causes of ``node``
        for parent in np.flatnonzero(A[node]):
            if parent in visited:
                raise InvalidConfiguration("path enumeration requires an acyclic graph")
            w = weight * A[node, parent]
            effects[parent] += w
            walk(parent, w, visited | {parent})

    walk(target, 1.0, {target})
    return effects


def abstraction_maps(scm, sol, n_checks=100, seed=0, tol=1e-10):
    """Exogenous maps (tau_u0, tau_u1) making the reduction a constructive abstraction.

    Checks on ``n_checks`` random (u, i) that reducing the low-level solution
    equals the high-level model r -> (r0 + r1 + j, r1 + j) fed with the mapped
    exogenous values and j = omega1 . i.
    """
    P, C = list(sol.pi0 or scm.pi0), list(sol.pi1)
    I_p = np.eye(len(P)) - scm.block(P, P)
    I_c = np.eye(len(C)) - scm.block(C, C)
    tau0_bar = np.zeros(len(P))
    for k, idx in enumerate(scm.pi0):
        tau0_bar[P.index(idx)] = scm.tau0_bar[k]
    tau_u0 = _solve(I_p, tau0_bar, transpose=True)
    tau_u1 = _solve(I_c, sol.tau1_bar, transpose=True)

    rng = make_rng(seed)
    n = scm.n_vars
    tau0, tau1, omega1 = scm.tau0, sol.tau_full(n), sol.omega_full(n)
    for _ in range(n_checks):
        u = scm.exo_mean + np.sqrt(scm.exo_var) * rng.standard_normal(n)
        i = np.where(scm.omega_mask, rng.standard_normal(n), 0.0)
        x = scm.reduced_form @ (u + i)
        low = np.array([tau0 @ x, tau1 @ x])
        r0, r1, j = tau_u0 @ u[P], tau_u1 @ u[C], omega1 @ i
        high = np.array([r0 + r1 + j, r1 + j])
        scale = max(1.0, float(np.max(np.abs(low))))
        if np.max(np.abs(low - high)) > tol * scale:
            raise AbstractionViolated(f"reduction and abstraction disagree by {np.max(np.abs(low - high)):.3e}")
    return tau_u0, tau_u1


def nonidentifiable_pair(scm):
    """Two distinct exact 1-cause reductions when unintervened mediators S sit between Omega and pi0.

    Solution A aligns the cause with Omega u S; solution B moves S into the
    target block and aligns the cause with Omega only.
    """
    S = list(scm.mediators)
    omega = list(scm.omega_set)
    if not S:
        raise InvalidConfiguration("no unintervened mediators: the 1-cause solution is unique")
    if not omega:
        raise InvalidConfiguration("the intervened set is empty")
    if np.any(scm.block(omega, S + list(scm.pi0)) != 0):
        raise InvalidConfiguration("mediators and target must not feed back into the intervened set")
    sol_a = _one_cause(scm, scm.pi0, omega + S, scm.tau0_bar, omega)
    target_b = list(scm.pi0) + S
    tau0_b = np.concatenate([scm.tau0_bar, np.zeros(len(S))])
    sol_b = _one_cause(scm, target_b, omega, tau0_b, omega)
    return sol_a, sol_b


def fit_reduction(scm, tau):
    """Best 1-cause parameters for a given tau at zero intervention.

    omega is the shift tau^T (I - A)^-1 induces (masked to Omega); mean,
    variance and the regression of Y on Z are fitted to the unintervened
    population moments.
    """
    tau = np.asarray(tau, dtype=float)
    n = scm.n_vars
    omega = np.where(scm.omega_mask, scm.reduced_form.T @ tau, 0.0)
    m0 = population_moments(scm, np.zeros(n))
    t0 = scm.tau0
    var_z = float(tau @ m0.cov @ tau)
    c_zy = float(tau @ m0.cov @ t0)
    alpha = c_zy / var_z
    mu_z = float(tau @ m0.mean)
    s2 = float(t0 @ m0.cov @ t0) - c_zy**2 / var_z
    return ReductionParams(
        tau=tau[None, :],
        omega=omega[None, :],
        alpha=[alpha],
        beta=float(t0 @ m0.mean) - alpha * mu_z,
        log_var_y_given_z=np.log(max(s2, 1e-300)),
        mu_z=[mu_z],
        log_var_z=[np.log(var_z)],
        omega_mask=scm.omega_mask,
        tau_mask=~np.isin(np.arange(n), scm.pi0),
    )


def population_consistency(scm, params, interventions):
    """Per-intervention consistency loss evaluated with exact population moments."""
    pairs = [(i, pushforward_stats(params, scm.tau0, population_moments(scm, i))) for i in interventions]
    return per_intervention_consistency(params, pairs)


def verify_zero_loss(scm, sol, prior, n_interventions, seed=0):
    """Largest population consistency loss of ``sol`` over sampled interventions."""
    params = sol.to_params(scm)
    prior.validate(scm.omega_set)
    interventions = [sample_intervention(prior, seed + k) for k in range(n_interventions)]
    return max(float(np.max(population_consistency(scm, params, interventions))), 0.0)


def branch_solutions(scm, groups):
    """Per-branch 1-cause solutions for models whose branches feed the target independently.

    Each branch is treated as its own cause block; the n-cause ground truth is
    the list of the branch solutions (their supports are disjoint).
    """
    sols = []
    for g in groups:
        g = list(g)
        others = [k for k in scm.omega_set if k not in g]
        if others and np.any(scm.block(g, others) != 0):
            raise InvalidConfiguration("branches must not feed into each other")
        sols.append(_one_cause(scm, scm.pi0, g, scm.tau0_bar, g))
    return sols


def path_sum_check(scm, sol):
    """Largest componentwise relative gap between omega1 and the path-effect vector, after matching scale."""
    effects = path_effects(scm.adjacency, scm.pi0[0])[list(sol.pi1)] * scm.tau0_bar[0]
    omega = sol.omega1_bar
    scale = float(effects @ omega) / float(omega @ omega) if np.any(omega) else 1.0
    gap = np.abs(scale * omega - effects) / np.maximum(np.abs(effects), 1e-300)
    gap = np.where(np.abs(effects) == 0, np.abs(scale * omega), gap)
    return float(gap.max())
