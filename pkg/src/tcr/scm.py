"""Linear Gaussian structural causal models under shift interventions.

Convention: ``X := A X + U + i`` with ``A[j, k]`` the coefficient of ``X_k`` in
the structural equation of ``X_j`` (row = effect, column = cause). Indices are
0-based everywhere in the Python API and in serialized files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg

from tcr.errors import InvalidConfiguration, InvalidInput, ModelDegenerate
from tcr.rng import RNG_ALGORITHM, make_rng

SINGULAR_COND = 1e12
MIN_EXO_VAR = 1e-12
PSD_TOL = 1e-10

TOPOLOGIES = ("dense", "chain", "two-branch")


def _frozen(a, ndim, name):
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise InvalidConfiguration(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LinearScm:
    """Block-triangular linear Gaussian SCM with target block ``pi0``.

    Nodes outside ``pi0`` and ``omega_set`` are allowed; they are never
    intervened on and act as mediators between the two blocks.
    """

    adjacency: np.ndarray
    exo_mean: np.ndarray
    exo_var: np.ndarray
    pi0: tuple
    omega_set: tuple
    tau0_bar: np.ndarray

    def __post_init__(self):
        A = _frozen(self.adjacency, 2, "adjacency")
        n = A.shape[0]
        if A.shape != (n, n) or n < 1:
            raise InvalidConfiguration(f"adjacency must be square, got {A.shape}")
        mu = _frozen(self.exo_mean, 1, "exo_mean")
        var = _frozen(self.exo_var, 1, "exo_var")
        if mu.shape != (n,) or var.shape != (n,):
            raise InvalidConfiguration("exo_mean and exo_var must have length n_vars")
        if not np.all(np.isfinite(A)) or not np.all(np.isfinite(mu)) or not np.all(np.isfinite(var)):
            raise InvalidConfiguration("SCM parameters must be finite")
        if np.any(var < MIN_EXO_VAR):
            raise InvalidConfiguration(f"exogenous variances must exceed {MIN_EXO_VAR}")
        pi0 = tuple(int(k) for k in self.pi0)
        omega = tuple(int(k) for k in self.omega_set)
        for name, idx in (("pi0", pi0), ("omega_set", omega)):
            if len(set(idx)) != len(idx) or any(k < 0 or k >= n for k in idx):
                raise InvalidConfiguration(f"{name} must hold distinct indices in [0, {n})")
        if not pi0:
            raise InvalidConfiguration("pi0 must be non-empty")
        if set(pi0) & set(omega):
            raise InvalidConfiguration("pi0 and omega_set must be disjoint")
        tau0_bar = _frozen(self.tau0_bar, 1, "tau0_bar")
        if tau0_bar.shape != (len(pi0),):
            raise InvalidConfiguration("tau0_bar must have one entry per pi0 index")
        upstream = [k for k in range(n) if k not in pi0]
        if upstream and np.any(A[np.ix_(upstream, list(pi0))] != 0):
            raise InvalidConfiguration("no edges may point from the target block pi0 to other nodes")
        if np.linalg.cond(np.eye(n) - A) > SINGULAR_COND:
            raise ModelDegenerate("(I - A) is singular")
        object.__setattr__(self, "adjacency", A)
        object.__setattr__(self, "exo_mean", mu)
        object.__setattr__(self, "exo_var", var)
        object.__setattr__(self, "pi0", pi0)
        object.__setattr__(self, "omega_set", omega)
        object.__setattr__(self, "tau0_bar", tau0_bar)

    @property
    def n_vars(self):
        return self.adjacency.shape[0]

    @property
    def mediators(self):
        taken = set(self.pi0) | set(self.omega_set)
        return tuple(k for k in range(self.n_vars) if k not in taken)

    @property
    def tau0(self):
        """Target map as a full length-N vector."""
        t = np.zeros(self.n_vars)
        t[list(self.pi0)] = self.tau0_bar
        return t

    @property
    def omega_mask(self):
        m = np.zeros(self.n_vars, dtype=bool)
        m[list(self.omega_set)] = True
        return m

    @cached_property
    def _lu(self):
        return scipy.linalg.lu_factor(np.eye(self.n_vars) - self.adjacency)

    @cached_property
    def reduced_form(self):
        """(I - A)^-1, mapping exogenous values plus shifts to endogenous values."""
        M = scipy.linalg.lu_solve(self._lu, np.eye(self.n_vars))
        M.setflags(write=False)
        return M

    def block(self, rows, cols):
        return self.adjacency[np.ix_(list(rows), list(cols))]

    def to_dict(self):
        return {
            "n_vars": self.n_vars,
            "adjacency": self.adjacency.tolist(),
            "exo_mean": self.exo_mean.tolist(),
            "exo_var": self.exo_var.tolist(),
            "pi0": list(self.pi0),
            "omega_set": list(self.omega_set),
            "tau0_bar": self.tau0_bar.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        scm = cls(
            adjacency=d["adjacency"],
            exo_mean=d["exo_mean"],
            exo_var=d["exo_var"],
            pi0=d["pi0"],
            omega_set=d["omega_set"],
            tau0_bar=d["tau0_bar"],
        )
        if "n_vars" in d and d["n_vars"] != scm.n_vars:
            raise InvalidConfiguration("n_vars does not match adjacency shape")
        return scm

    def save(self, path):
        # json writes floats with repr(), i.e. round-trip exact doubles.
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class InterventionPrior:
    """Distribution over shift-intervention vectors.

    ``gaussian-iid`` draws component ``k`` from N(0, std[k]^2); ``finite-set``
    picks uniformly among ``finite_values``.
    """

    std: np.ndarray
    kind: str = "gaussian-iid"
    finite_values: tuple | None = None

    def __post_init__(self):
        std = _frozen(self.std, 1, "std")
        if np.any(std < 0) or not np.all(np.isfinite(std)):
            raise InvalidConfiguration("prior std must be finite and non-negative")
        object.__setattr__(self, "std", std)
        if self.kind not in ("gaussian-iid", "finite-set"):
            raise InvalidConfiguration(f"unknown prior kind {self.kind!r}")
        if self.kind == "finite-set":
            if not self.finite_values:
                raise InvalidConfiguration("finite-set prior needs at least one value")
            vals = tuple(_frozen(v, 1, "finite value") for v in self.finite_values)
            if any(v.shape != std.shape for v in vals):
                raise InvalidConfiguration("finite values must have the same length as std")
            object.__setattr__(self, "finite_values", vals)

    @classmethod
    def gaussian(cls, n_vars, omega_set, std=1.0):
        s = np.zeros(n_vars)
        s[list(omega_set)] = std
        return cls(std=s)

    @classmethod
    def finite(cls, values):
        values = [np.asarray(v, dtype=float) for v in values]
        return cls(std=np.zeros(len(values[0])), kind="finite-set", finite_values=tuple(values))

    @property
    def n_vars(self):
        return self.std.shape[0]

    @property
    def support(self):
        if self.kind == "gaussian-iid":
            return tuple(np.flatnonzero(self.std > 0))
        nz = np.any(np.stack(self.finite_values) != 0, axis=0)
        return tuple(np.flatnonzero(nz))

    def validate(self, omega_set):
        """Check the prior only reaches ``omega_set`` and, for finite sets, is rich enough."""
        omega = set(int(k) for k in omega_set)
        outside = set(int(k) for k in self.support) - omega
        if outside:
            raise InvalidConfiguration(f"prior puts mass on non-intervenable nodes {sorted(outside)}")
        if self.kind == "finite-set":
            vals = np.stack(self.finite_values)
            if not np.any(np.all(vals == 0, axis=1)):
                raise InvalidConfiguration("finite-set prior must contain the zero intervention")
            sub = vals[:, sorted(omega)]
            if np.linalg.matrix_rank(sub) < len(omega):
                raise InvalidConfiguration(
                    f"finite-set prior must span all {len(omega)} intervened coordinates"
                )


@dataclass(frozen=True, eq=False)
class SimulationBatch:
    intervention: np.ndarray
    x_samples: np.ndarray
    seed_record: int
    rng_algorithm: str = RNG_ALGORITHM

    def __post_init__(self):
        if self.x_samples.ndim != 2 or self.x_samples.shape[0] < 2:
            raise InvalidInput("a simulation batch needs at least two samples")

    @property
    def batch_size(self):
        return self.x_samples.shape[0]


@dataclass(frozen=True, eq=False)
class Moments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        cov = np.array(self.cov, dtype=np.float64)
        n = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (n, n):
            raise InvalidInput(f"inconsistent moment shapes {mean.shape} and {cov.shape}")
        cov = 0.5 * (cov + cov.T)
        scale = max(1.0, float(np.max(np.abs(np.diag(cov)), initial=0.0)))
        if n and np.linalg.eigvalsh(cov)[0] < -PSD_TOL * scale:
            raise InvalidInput("covariance is not positive semidefinite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def from_samples(cls, x_samples):
        """Empirical mean and (1/B-normalized) covariance of the rows."""
        x = np.asarray(x_samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise InvalidInput("need a B x N sample matrix with B >= 2")
        mean = x.mean(axis=0)
        xc = x - mean
        return cls(mean=mean, cov=xc.T @ xc / x.shape[0])


def sample_random_scm(topology, n_vars, seed):
    """Draw a random SCM with target ``X_N`` and every other node intervenable.

    Nonzero coefficients are uniform on [-1, 1]. ``two-branch`` builds two
    disjoint chains of length (N-1)/2 whose last nodes both feed the target.
    """
    if topology not in TOPOLOGIES:
        raise InvalidConfiguration(f"topology must be one of {TOPOLOGIES}, got {topology!r}")
    if n_vars < 2:
        raise InvalidConfiguration("n_vars must be at least 2")
    rng = make_rng(seed)
    n = n_vars
    mask = np.zeros((n, n), dtype=bool)
    if topology == "dense":
        mask[np.tril_indices(n, k=-1)] = True
    elif topology == "chain":
        mask[np.arange(1, n), np.arange(n - 1)] = True
    else:
        if (n - 1) % 2:
            raise InvalidConfiguration("two-branch topology needs an even number of non-target nodes")
        half = (n - 1) // 2
        for start in (0, half):
            for j in range(start, start + half - 1):
                mask[j + 1, j] = True
            mask[n - 1, start + half - 1] = True
    A = np.zeros((n, n))
    A[mask] = rng.uniform(-1.0, 1.0, size=int(mask.sum()))
    return LinearScm(
        adjacency=A,
        exo_mean=np.zeros(n),
        exo_var=np.ones(n),
        pi0=(n - 1,),
        omega_set=tuple(range(n - 1)),
        tau0_bar=np.ones(1),
    )


def two_branch_groups(n_vars):
    """Index sets of the two chains produced by ``sample_random_scm('two-branch', ...)``."""
    half = (n_vars - 1) // 2
    return tuple(range(half)), tuple(range(half, 2 * half))


def _check_intervention(scm, intervention):
    i = np.asarray(intervention, dtype=np.float64)
    if i.shape != (scm.n_vars,):
        raise InvalidInput(f"intervention must have length {scm.n_vars}")
    if np.any(i[~scm.omega_mask] != 0):
        raise InvalidInput("intervention is nonzero outside the intervenable set")
    return i


def simulate(scm, intervention, batch, seed):
    """Draw ``batch`` samples of X = (I - A)^-1 (U + i)."""
    i = _check_intervention(scm, intervention)
    if batch < 2:
        raise InvalidInput("batch must be at least 2")
    rng = make_rng(seed)
    u = scm.exo_mean + np.sqrt(scm.exo_var) * rng.standard_normal((batch, scm.n_vars))
    x = scipy.linalg.lu_solve(scm._lu, (u + i).T).T
    return SimulationBatch(intervention=i, x_samples=x, seed_record=int(seed))


def population_moments(scm, intervention):
    i = _check_intervention(scm, intervention)
    M = scm.reduced_form
    return Moments(mean=M @ (scm.exo_mean + i), cov=(M * scm.exo_var) @ M.T)


def sample_intervention(prior, seed):
    rng = make_rng(seed)
    if prior.kind == "finite-set":
        return np.array(prior.finite_values[int(rng.integers(len(prior.finite_values)))])
    return prior.std * rng.standard_normal(prior.n_vars)
