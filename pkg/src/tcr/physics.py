"""Intervenable physical simulators: a ball in a double well and a 2-D spring-mass system.

Both are integrated with fixed-step RK4 between the points of a time grid.
At every grid point the velocities receive an additive shift (the
intervention) plus, for the double well, intrinsic noise; integration then
restarts from the shifted state. Recorded velocities are post-shift.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tcr.errors import InvalidConfiguration, InvalidInput, SimulationDegenerate, SimulationDiverged
from tcr.rng import RNG_ALGORITHM, make_rng

MIN_SEPARATION = 1e-12


def _rk4(f, state, h, n_steps):
    for _ in range(n_steps):
        k1 = f(state)
        k2 = f(state + 0.5 * h * k1)
        k3 = f(state + 0.5 * h * k2)
        k4 = f(state + h * k3)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return state


def _check_grid(n_times, t_end, substeps):
    if n_times < 2 or not t_end > 0 or substeps < 1:
        raise InvalidConfiguration("need at least two grid points, t_end > 0 and substeps >= 1")


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    features: np.ndarray
    interventions_applied: np.ndarray
    target_value: float
    times: np.ndarray = field(default=None)


# ---------------------------------------------------------------------------
# double well


@dataclass(frozen=True)
class DoubleWellConfig:
    mass: float = 1.0
    friction: float = 5.0
    n_times: int = 101
    t_end: float = 10.0
    x0_center: float = -2.07414285
    x0_jitter: float = 5e-7
    v0: float = 11.0
    shift_std: float = 0.5
    intrinsic_noise_std: float = 0.2
    # multiplies the force 4x^3 - 8x; 0 gives free (or purely damped) motion
    potential_scale: float = 1.0
    substeps: int = 20
    # keep the causes off the slots the target reads
    mask_target: bool = False

    def __post_init__(self):
        _check_grid(self.n_times, self.t_end, self.substeps)
        if not self.mass > 0:
            raise InvalidConfiguration("mass must be positive")
        if self.friction < 0 or self.shift_std < 0 or self.intrinsic_noise_std < 0 or self.x0_jitter < 0:
            raise InvalidConfiguration("friction, jitter and noise levels must be non-negative")

    @property
    def times(self):
        return np.linspace(0.0, self.t_end, self.n_times)

    @property
    def n_features(self):
        return 2 * self.n_times

    @property
    def tau0(self):
        """Y is the final position."""
        t = np.zeros(self.n_features)
        t[position_slot(self.n_times - 1)] = 1.0
        return t

    @property
    def velocity_slots(self):
        return np.arange(1, self.n_features, 2)

    def energy(self, x, v):
        return 0.5 * self.mass * v**2 + self.potential_scale * (x**4 - 4.0 * x**2)


def position_slot(k):
    return 2 * k


def velocity_slot(k):
    return 2 * k + 1


def double_well_layout(config):
    rows = []
    for k, t in enumerate(config.times):
        rows.append({"index": position_slot(k), "quantity": "x", "time_index": k, "time": float(t)})
        rows.append({"index": velocity_slot(k), "quantity": "v", "time_index": k, "time": float(t)})
    return rows


def double_well_paths(config, shifts, seed):
    """Simulate a batch of paths; ``shifts`` is (B, n_times). Returns states (B, n_times, 2)."""
    shifts = np.asarray(shifts, dtype=float)
    if shifts.ndim != 2 or shifts.shape[1] != config.n_times:
        raise InvalidInput(f"shifts must be B x {config.n_times}")
    B = shifts.shape[0]
    rng = make_rng(seed)
    m, k, c = config.mass, config.friction, config.potential_scale
    h = (config.t_end / (config.n_times - 1)) / config.substeps

    def rhs(s):
        x, v = s[0], s[1]
        return np.stack([v, -(k * v + c * (4.0 * x * x * x - 8.0 * x)) / m])

    x0 = config.x0_center + config.x0_jitter * rng.uniform(-1.0, 1.0, B)
    noise = config.intrinsic_noise_std * rng.standard_normal((B, config.n_times))
    state = np.stack([x0, np.full(B, config.v0)])
    out = np.empty((B, config.n_times, 2))
    for step in range(config.n_times):
        if step > 0:
            state = _rk4(rhs, state, h, config.substeps)
        state[1] = state[1] + shifts[:, step] + noise[:, step]
        if not np.all(np.isfinite(state)):
            raise SimulationDiverged(f"non-finite double-well state at grid point {step}")
        out[:, step] = state.T
    return out


def simulate_double_well(config, intervention, seed):
    """One path under a velocity intervention of length ``n_times``."""
    i = np.asarray(intervention, dtype=float)
    if i.shape != (config.n_times,):
        raise InvalidInput(f"intervention must have length {config.n_times}")
    states = double_well_paths(config, i[None, :], seed)[0]
    features = states.reshape(-1)
    return Trajectory(
        states=states,
        features=features,
        interventions_applied=i.copy(),
        target_value=float(config.tau0 @ features),
        times=config.times,
    )


@dataclass(frozen=True, eq=False)
class DoubleWellSimulator:
    """Feature-space adapter for the trainer: interventions live on the velocity slots."""

    config: DoubleWellConfig = field(default_factory=DoubleWellConfig)

    @property
    def n_features(self):
        return self.config.n_features

    @property
    def tau0(self):
        return self.config.tau0

    @property
    def omega_mask(self):
        mask = np.zeros(self.n_features, dtype=bool)
        mask[self.config.velocity_slots] = True
        return mask

    @property
    def tau_mask(self):
        return self.config.tau0 == 0 if self.config.mask_target else None

    def sample(self, intervention, batch, seed):
        i = np.asarray(intervention, dtype=float)
        if i.shape != (self.n_features,):
            raise InvalidInput(f"intervention must have length {self.n_features}")
        shifts = np.broadcast_to(i[self.config.velocity_slots], (batch, self.config.n_times))
        return double_well_paths(self.config, shifts, seed).reshape(batch, -1)

    def layout(self):
        return double_well_layout(self.config)


# ---------------------------------------------------------------------------
# spring-mass


def square_layout():
    return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])


def square_springs():
    """Nearest-neighbour springs of the unit square (its four sides)."""
    A = np.zeros((4, 4), dtype=int)
    for i, j in ((0, 1), (0, 2), (1, 3), (2, 3)):
        A[i, j] = A[j, i] = 1
    return A


@dataclass(frozen=True, eq=False)
class SpringMassConfig:
    masses: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.83, 0.17, 1.5]))
    adjacency: np.ndarray = field(default_factory=square_springs)
    layout: np.ndarray = field(default_factory=square_layout)
    spring_constant: float = 1e-3
    rest_length: float = 1.0
    offset_std: float = 10.0
    init_velocity_std: float = 0.01
    shift_std: float = 0.005
    n_times: int = 21
    t_end: float = 100.0
    target_direction: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))
    substeps: int = 20
    # keep the causes off the slots the target reads
    mask_target: bool = False

    def __post_init__(self):
        _check_grid(self.n_times, self.t_end, self.substeps)
        masses = np.array(self.masses, dtype=float)
        A = np.array(self.adjacency, dtype=int)
        layout = np.array(self.layout, dtype=float)
        d = np.array(self.target_direction, dtype=float)
        M = masses.size
        if masses.ndim != 1 or M < 1 or np.any(masses <= 0):
            raise InvalidConfiguration("masses must be a non-empty vector of positive values")
        if A.shape != (M, M) or np.any(A != A.T) or np.any(np.diag(A) != 0) or not np.all(np.isin(A, (0, 1))):
            raise InvalidConfiguration("spring adjacency must be a symmetric 0/1 matrix with zero diagonal")
        if layout.shape != (M, 2):
            raise InvalidConfiguration("layout must give one 2-D position per mass")
        if d.shape != (2,) or np.linalg.norm(d) == 0:
            raise InvalidConfiguration("target direction must be a nonzero 2-vector")
        if not self.spring_constant > 0 or not self.rest_length > 0:
            raise InvalidConfiguration("spring constant and rest length must be positive")
        if min(self.offset_std, self.init_velocity_std, self.shift_std) < 0:
            raise InvalidConfiguration("standard deviations must be non-negative")
        for name, v in (("masses", masses), ("adjacency", A), ("layout", layout)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        unit = d / np.linalg.norm(d)
        unit.setflags(write=False)
        object.__setattr__(self, "target_direction", unit)

    @property
    def n_masses(self):
        return self.masses.size

    @property
    def times(self):
        return np.linspace(0.0, self.t_end, self.n_times)

    @property
    def n_features(self):
        return self.n_times * self.n_masses * 2

    @property
    def springs(self):
        i, j = np.nonzero(np.triu(self.adjacency))
        return i, j

    def slot(self, time_index, mass, component):
        return (time_index * self.n_masses + mass) * 2 + component

    @property
    def tau0(self):
        """Y = d . (sum_i m_i v_i / sum_i m_i) at the final time."""
        t = np.zeros(self.n_features)
        w = self.masses / self.masses.sum()
        for i in range(self.n_masses):
            for c in range(2):
                t[self.slot(self.n_times - 1, i, c)] = w[i] * self.target_direction[c]
        return t

    def to_dict(self):
        return {
            "masses": self.masses.tolist(),
            "adjacency": self.adjacency.tolist(),
            "layout": self.layout.tolist(),
            "spring_constant": self.spring_constant,
            "rest_length": self.rest_length,
            "offset_std": self.offset_std,
            "init_velocity_std": self.init_velocity_std,
            "shift_std": self.shift_std,
            "n_times": self.n_times,
            "t_end": self.t_end,
            "target_direction": self.target_direction.tolist(),
            "substeps": self.substeps,
            "mask_target": self.mask_target,
        }


def make_grouped_config(groups=2, masses_per_group=4, spacing=3.0, **overrides):
    """``groups`` unit-mass squares with springs only inside each group; target is the x-direction."""
    if masses_per_group != 4:
        raise InvalidConfiguration("groups are laid out as unit squares of four masses")
    if groups < 1:
        raise InvalidConfiguration("need at least one group")
    M = groups * masses_per_group
    A = np.zeros((M, M), dtype=int)
    layout = np.zeros((M, 2))
    for g in range(groups):
        sl = slice(g * 4, (g + 1) * 4)
        A[sl, sl] = square_springs()
        layout[sl] = square_layout() + np.array([spacing * g, 0.0])
    kw = dict(masses=np.ones(M), adjacency=A, layout=layout, target_direction=np.array([1.0, 0.0]))
    kw.update(overrides)
    return SpringMassConfig(**kw)


def group_slots(config, masses):
    """Feature indices (all times, both components) belonging to the given masses."""
    masses = list(masses)
    return np.array(
        sorted(config.slot(t, i, c) for t in range(config.n_times) for i in masses for c in range(2)), dtype=int
    )


def spring_mass_layout(config):
    rows = []
    for k, t in enumerate(config.times):
        for i in range(config.n_masses):
            for c, name in enumerate(("vx", "vy")):
                rows.append(
                    {
                        "index": config.slot(k, i, c),
                        "quantity": name,
                        "time_index": k,
                        "time": float(t),
                        "mass_index": i,
                        "mass": float(config.masses[i]),
                    }
                )
    return rows


def spring_forces(config, pos):
    """Spring forces for positions (B, M, 2)."""
    i, j = config.springs
    u = pos[:, i] - pos[:, j]
    dist = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(dist < MIN_SEPARATION):
        raise SimulationDegenerate("two connected masses coincide")
    f = -config.spring_constant * (dist - config.rest_length) * u / dist
    F = np.zeros_like(pos)
    np.add.at(F, (slice(None), i), f)
    np.add.at(F, (slice(None), j), -f)
    return F


def spring_mass_paths(config, shifts, seed, initial_state=None):
    """Batch simulation; ``shifts`` is (B, n_times, M, 2). Returns (positions, velocities), each (B, T, M, 2).

    ``initial_state = (pos, vel)`` with shapes (B, M, 2) replaces the random
    initial conditions.
    """
    shifts = np.asarray(shifts, dtype=float)
    M, T = config.n_masses, config.n_times
    if shifts.ndim != 4 or shifts.shape[1:] != (T, M, 2):
        raise InvalidInput(f"shifts must be B x {T} x {M} x 2")
    B = shifts.shape[0]
    if initial_state is None:
        rng = make_rng(seed)
        offset = config.offset_std * rng.standard_normal((B, 1, 2))
        pos = config.layout[None] + offset
        vel = config.init_velocity_std * rng.standard_normal((B, M, 2))
    else:
        pos, vel = (np.array(a, dtype=float).reshape(B, M, 2) for a in initial_state)
    inv_m = (1.0 / config.masses)[None, :, None]
    h = (config.t_end / (T - 1)) / config.substeps

    def rhs(s):
        return np.stack([s[1], spring_forces(config, s[0]) * inv_m])

    state = np.stack([pos, vel])
    out_pos = np.empty((B, T, M, 2))
    out_vel = np.empty((B, T, M, 2))
    for step in range(T):
        if step > 0:
            state = _rk4(rhs, state, h, config.substeps)
        state[1] = state[1] + shifts[:, step]
        if not np.all(np.isfinite(state)):
            raise SimulationDiverged(f"non-finite spring-mass state at grid point {step}")
        out_pos[:, step] = state[0]
        out_vel[:, step] = state[1]
    return out_pos, out_vel


def simulate_spring_mass(config, intervention, seed, initial_state=None):
    """One path under a velocity intervention over (time x mass x 2) slots."""
    i = np.asarray(intervention, dtype=float)
    if i.shape != (config.n_features,):
        raise InvalidInput(f"intervention must have length {config.n_features}")
    init = None if initial_state is None else tuple(np.asarray(a)[None] for a in initial_state)
    pos, vel = spring_mass_paths(config, i.reshape(1, config.n_times, config.n_masses, 2), seed, init)
    features = vel[0].reshape(-1)
    states = np.concatenate([pos[0].reshape(config.n_times, -1), vel[0].reshape(config.n_times, -1)], axis=1)
    return Trajectory(
        states=states,
        features=features,
        interventions_applied=i.copy(),
        target_value=float(config.tau0 @ features),
        times=config.times,
    )


@dataclass(frozen=True, eq=False)
class SpringMassSimulator:
    config: SpringMassConfig = field(default_factory=SpringMassConfig)

    @property
    def n_features(self):
        return self.config.n_features

    @property
    def tau0(self):
        return self.config.tau0

    @property
    def omega_mask(self):
        return np.ones(self.n_features, dtype=bool)

    @property
    def tau_mask(self):
        return self.config.tau0 == 0 if self.config.mask_target else None

    def sample(self, intervention, batch, seed):
        c = self.config
        i = np.asarray(intervention, dtype=float)
        if i.shape != (self.n_features,):
            raise InvalidInput(f"intervention must have length {self.n_features}")
        shifts = np.broadcast_to(i.reshape(1, c.n_times, c.n_masses, 2), (batch, c.n_times, c.n_masses, 2))
        _, vel = spring_mass_paths(c, shifts, seed)
        return vel.reshape(batch, -1)

    def layout(self):
        return spring_mass_layout(self.config)


# ---------------------------------------------------------------------------
# serialization


def _fmt(v):
    return f"{float(v):.17g}"


def write_trajectories(path, seeds, interventions, features, targets, layout, metadata=None):
    """Write one CSV row per sample plus a JSON sidecar with the slot layout."""
    path = Path(path)
    interventions = np.atleast_2d(np.asarray(interventions, dtype=float))
    features = np.atleast_2d(np.asarray(features, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(-1)
    n = features.shape[0]
    if interventions.shape[0] != n or targets.size != n or len(seeds) != n:
        raise InvalidInput("seeds, interventions, features and targets must have one row per sample")
    header = (
        ["seed"]
        + [f"i_{k}" for k in range(interventions.shape[1])]
        + [f"x_{k}" for k in range(features.shape[1])]
        + ["y"]
    )
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s, i, x, y in zip(seeds, interventions, features, targets):
            w.writerow([int(s)] + [_fmt(v) for v in i] + [_fmt(v) for v in x] + [_fmt(y)])
    sidecar = {"rng_algorithm": RNG_ALGORITHM, "n_features": int(features.shape[1]), "layout": layout}
    sidecar.update(metadata or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path


def read_trajectories(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_i = sum(h.startswith("i_") for h in header)
    data = np.array([[float(v) for v in r] for r in body]) if body else np.zeros((0, len(header)))
    sidecar = json.loads(path.with_suffix(".json").read_text())
    return {
        "seeds": data[:, 0].astype(np.int64),
        "interventions": data[:, 1 : 1 + n_i],
        "features": data[:, 1 + n_i : -1],
        "targets": data[:, -1],
        "sidecar": sidecar,
    }


def mass_profile(config, omega_row):
    """Mean over time of |d . omega| per mass, d being the target direction."""
    w = np.asarray(omega_row, dtype=float).reshape(config.n_times, config.n_masses, 2)
    return np.abs(w @ config.target_direction).mean(axis=0)


def pearson(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])
