"""Gradient-based learning of linear targeted causal reductions.

Data is simulated once up front: ``n_paths // B`` intervention groups of ``B``
paths each, split by group into train/val/test. Every epoch visits the train
groups in a seeded shuffled order, ``B_i`` groups per gradient step, and the
loss on each group is evaluated from that group's empirical moments.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
import torch

from tcr.errors import (
    DegenerateParameters,
    DivergedParameters,
    InsufficientData,
    InvalidConfiguration,
    InvalidInput,
    TCRError,
    TrainingFailed,
)
from tcr.losses import (
    BOUND_TOL,
    DTYPE,
    LossBreakdown,
    balancing_torch,
    overlap_torch,
    pushforward_torch,
    stats_terms,
)
from tcr.reduction import BLOCKS, ReductionParams
from tcr.rng import derive_seed, make_rng
from tcr.scm import simulate

SPLITS = ("train", "val", "test")
SCHEDULERS = ("constant", "cosine")
OPTIMIZERS = ("gd", "adam")
INIT_MARGINALS = ("zero", "data", "data-omega")
DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    scheduler: str = "constant"
    final_lr: float = 1e-5
    epochs: int = 100
    sim_batch: int = 128
    intervention_batch: int = 64
    n_paths: int = 10000
    restarts: int = 1
    eta_ov: float = 0.0
    eta_bal: float = 0.0
    split_fractions: tuple = (0.7, 0.15, 0.15)
    master_seed: int = 0
    optimizer: str = "gd"
    resimulate_per_epoch: bool = False
    # evaluate all splits every ``log_every`` epochs (and always at the last one)
    log_every: int = 1
    # tau/omega start as N(0, (init_scale^2) / N)
    init_scale: float = 1.0
    # "data": start alpha, beta, mu_z and the variances at their optimum for the initial tau/omega;
    # "data-omega": additionally replace the random omega by its least-squares fit first
    init_marginals: str = "zero"

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if not self.learning_rate > 0:
            raise InvalidConfiguration("learning_rate must be positive")
        if self.scheduler not in SCHEDULERS:
            raise InvalidConfiguration(f"scheduler must be one of {SCHEDULERS}")
        if self.scheduler == "cosine" and not 0 <= self.final_lr <= self.learning_rate:
            raise InvalidConfiguration("final_lr must lie in [0, learning_rate]")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidConfiguration(f"optimizer must be one of {OPTIMIZERS}")
        if self.epochs < 0 or self.restarts < 1 or self.intervention_batch < 1 or self.log_every < 1:
            raise InvalidConfiguration("epochs >= 0, restarts >= 1, intervention_batch >= 1, log_every >= 1")
        if self.sim_batch < 2:
            raise InvalidConfiguration("sim_batch must be at least 2")
        if self.n_paths < 1:
            raise InvalidConfiguration("n_paths must be positive")
        if self.eta_ov < 0 or self.eta_bal < 0:
            raise InvalidConfiguration("regularization weights must be non-negative")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise InvalidConfiguration("split fractions must be three positive numbers summing to 1")
        if self.master_seed < 0:
            raise InvalidConfiguration("master_seed must be non-negative")
        if not self.init_scale > 0:
            raise InvalidConfiguration("init_scale must be positive")
        if self.init_marginals not in INIT_MARGINALS:
            raise InvalidConfiguration(f"init_marginals must be one of {INIT_MARGINALS}")

    def lr_at(self, epoch):
        """Learning rate used during ``epoch`` (0-based)."""
        if self.scheduler == "constant" or self.epochs == 0:
            return self.learning_rate
        frac = epoch / self.epochs
        return self.final_lr + 0.5 * (self.learning_rate - self.final_lr) * (1.0 + math.cos(math.pi * frac))

    def to_dict(self):
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d


# ---------------------------------------------------------------------------
# simulators


@dataclass(frozen=True, eq=False)
class ScmSimulator:
    """Adapter exposing a LinearScm through the simulator interface used by the trainer.

    Every simulator provides ``n_features``, ``tau0``, ``omega_mask`` (the
    intervenable feature slots), ``tau_mask`` (slots the causes may read) and
    ``sample(intervention, batch, seed) -> B x N``.
    """

    scm: object

    @property
    def n_features(self):
        return self.scm.n_vars

    @property
    def tau0(self):
        return self.scm.tau0

    @property
    def omega_mask(self):
        return self.scm.omega_mask

    @property
    def tau_mask(self):
        return ~np.isin(np.arange(self.scm.n_vars), self.scm.pi0)

    def sample(self, intervention, batch, seed):
        return simulate(self.scm, intervention, batch, seed).x_samples


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True, eq=False)
class Dataset:
    interventions: np.ndarray  # (G, N)
    x: np.ndarray  # (G, B, N)
    seeds: np.ndarray  # (G,) simulation seed of each group
    split: np.ndarray  # (G,) split label of each group

    @property
    def n_groups(self):
        return self.x.shape[0]

    @property
    def batch_size(self):
        return self.x.shape[1]

    @property
    def n_features(self):
        return self.x.shape[2]

    def indices(self, split):
        if split not in SPLITS:
            raise InvalidInput(f"unknown split {split!r}")
        return np.flatnonzero(self.split == split)

    @cached_property
    def moments(self):
        """Per-group mean (G, N) and covariance (G, N, N), normalized by 1/B."""
        mean = self.x.mean(axis=1)
        xc = self.x - mean[:, None, :]
        cov = np.einsum("gbi,gbj->gij", xc, xc) / self.batch_size
        return mean, 0.5 * (cov + np.swapaxes(cov, 1, 2))


def split_sizes(n_groups, fractions=(0.7, 0.15, 0.15)):
    n_val = max(1, round(fractions[1] * n_groups))
    n_test = max(1, round(fractions[2] * n_groups))
    n_train = n_groups - n_val - n_test
    if n_train < 1:
        raise InsufficientData(f"{n_groups} intervention groups cannot populate three splits")
    return n_train, n_val, n_test


def _simulate_groups(simulator, interventions, B, seeds):
    return np.stack([np.asarray(simulator.sample(i, B, int(s)), dtype=float) for i, s in zip(interventions, seeds)])


def build_dataset(simulator, prior, n_paths, B, seed, fractions=(0.7, 0.15, 0.15)):
    """Pre-generate ``n_paths // B`` intervention groups and assign each whole group to a split."""
    from tcr.scm import sample_intervention

    if B < 2:
        raise InvalidConfiguration("simulation batch must be at least 2")
    if n_paths < 3 * B:
        raise InsufficientData(f"n_paths={n_paths} gives fewer than three groups of {B}")
    if prior.n_vars != simulator.n_features:
        raise InvalidInput("prior dimension does not match the simulator's feature count")
    prior.validate(tuple(np.flatnonzero(simulator.omega_mask)))
    G = n_paths // B
    sizes = split_sizes(G, fractions)
    interventions = np.stack([sample_intervention(prior, derive_seed(seed, 0, g)) for g in range(G)])
    seeds = np.array([derive_seed(seed, 1, g) for g in range(G)], dtype=np.int64)
    x = _simulate_groups(simulator, interventions, B, seeds)
    if not np.all(np.isfinite(x)):
        raise InvalidInput("simulator returned non-finite samples")
    perm = make_rng(seed, 2).permutation(G)
    split = np.empty(G, dtype=object)
    split[perm[: sizes[0]]] = "train"
    split[perm[sizes[0] : sizes[0] + sizes[1]]] = "val"
    split[perm[sizes[0] + sizes[1] :]] = "test"
    return Dataset(interventions=interventions, x=x, seeds=seeds, split=split.astype(str))


def resimulate(simulator, dataset, seed):
    """Fresh paths for the same interventions and split labels."""
    seeds = np.array([derive_seed(seed, g) for g in range(dataset.n_groups)], dtype=np.int64)
    x = _simulate_groups(simulator, dataset.interventions, dataset.batch_size, seeds)
    return Dataset(interventions=dataset.interventions, x=x, seeds=seeds, split=dataset.split)


# ---------------------------------------------------------------------------
# objective


def _tt(a):
    return torch.tensor(np.array(a, dtype=float), dtype=DTYPE)


class Objective:
    """Total loss over a subset of intervention groups, as a torch function of the parameters."""

    def __init__(self, dataset, tau0, eta_ov=0.0, eta_bal=0.0):
        mean, cov = dataset.moments
        self.mu = _tt(mean)
        self.cov = _tt(cov)
        self.ints = _tt(dataset.interventions)
        self.tau0 = _tt(tau0)
        self.eta_ov = float(eta_ov)
        self.eta_bal = float(eta_bal)
        if self.tau0.shape != (dataset.n_features,):
            raise InvalidInput("tau0 does not match the feature dimension")

    def terms(self, p, idx, masks):
        tau = p["tau"] * masks["tau"]
        omega = p["omega"] * masks["omega"]
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        pf = pushforward_torch(tau, self.tau0, self.mu[idx], self.cov[idx])
        shift = self.ints[idx] @ omega.T
        t = stats_terms(
            **pf,
            shift=shift,
            alpha=p["alpha"],
            beta=p["beta"],
            mu_z=p["mu_z"],
            log_var_z=p["log_var_z"],
            log_var_yz=p["log_var_y_given_z"],
        )
        return tau, omega, t

    def loss(self, p, idx, masks):
        tau, omega, t = self.terms(p, idx, masks)
        total = (t["cause"] + t["mechanism"]).mean()
        if self.eta_ov > 0:
            total = total + self.eta_ov * overlap_torch(tau, omega)
        if self.eta_bal > 0:
            total = total + self.eta_bal * balancing_torch(tau, omega, p["alpha"])
        return total

    def breakdown(self, p, idx, masks):
        with torch.no_grad():
            tau, omega, t = self.terms(p, idx, masks)
            cause = _mean(t["cause"])
            mech = _mean(t["mechanism"])
            out = LossBreakdown(
                cause_term=max(cause, 0.0),
                mechanism_term=max(mech, 0.0),
                consistency=max(cause, 0.0) + max(mech, 0.0),
                relevance=max(_mean(t["relevance"]), 0.0),
                clamped=t["clamped"],
                ridged=t["ridged"],
            )
            try:
                out.overlap = float(overlap_torch(tau, omega))
                out.balancing = float(balancing_torch(tau, omega, p["alpha"]))
            except TCRError:
                out.overlap = out.balancing = math.nan
            reg = self.eta_ov * out.overlap if self.eta_ov > 0 else 0.0
            reg += self.eta_bal * out.balancing if self.eta_bal > 0 else 0.0
            out.total = out.consistency + reg
        return out


def _mean(t):
    vals = t.detach().numpy().tolist()
    return math.fsum(vals) / len(vals)


def _masks(params):
    N = params.n_vars
    om = params.omega_mask if params.omega_mask is not None else np.ones(N, dtype=bool)
    tm = params.tau_mask if params.tau_mask is not None else np.ones(N, dtype=bool)
    return {"omega": _tt(om.astype(float)), "tau": _tt(tm.astype(float))}


def _to_torch(params, requires_grad=True):
    return {k: _tt(getattr(params, k)).requires_grad_(requires_grad) for k in BLOCKS}


def _to_params(p, template):
    values = {k: p[k].detach().numpy().copy() for k in BLOCKS}
    values["beta"] = float(values["beta"])
    values["log_var_y_given_z"] = float(values["log_var_y_given_z"])
    return template.replace(**values)


def _resolve_idx(dataset, subset):
    if subset is None:
        return dataset.indices("train")
    if isinstance(subset, str):
        return dataset.indices(subset)
    idx = np.asarray(subset, dtype=int)
    if idx.size == 0:
        raise InvalidInput("empty group selection")
    return idx


def loss_value(params, dataset, tau0, eta_ov=0.0, eta_bal=0.0, subset=None):
    obj = Objective(dataset, tau0, eta_ov, eta_bal)
    with torch.no_grad():
        return float(obj.loss(_to_torch(params, False), _resolve_idx(dataset, subset), _masks(params)))


def gradient(params, dataset, tau0, eta_ov=0.0, eta_bal=0.0, subset=None):
    """Exact gradient of the total loss per parameter block (masked coordinates are zero)."""
    obj = Objective(dataset, tau0, eta_ov, eta_bal)
    p = _to_torch(params)
    loss = obj.loss(p, _resolve_idx(dataset, subset), _masks(params))
    if not torch.isfinite(loss):
        raise DivergedParameters(f"loss is not finite ({float(loss)})")
    loss.backward()
    return {k: p[k].grad.numpy().copy() for k in BLOCKS}


@dataclass
class GradCheckReport:
    block_errors: dict
    tolerance: float

    @property
    def max_error(self):
        return max(self.block_errors.values())

    @property
    def passed(self):
        return self.max_error < self.tolerance

    @property
    def worst_block(self):
        return max(self.block_errors, key=self.block_errors.get)


def check_gradient_fd(params, dataset, tau0, tolerance=1e-5, eta_ov=0.0, eta_bal=0.0, subset=None, grad=None):
    """Compare an analytic gradient with central finite differences, coordinate by coordinate.

    The step is 1e-5 * max(|p|, 1); the error of a coordinate is
    |g - fd| / max(|g|, |fd|, 1). ``grad`` overrides the analytic gradient
    (used to test the checker itself). Masked coordinates are skipped. With
    the overlap term active, |tau| and |omega| have a kink at zero: the step
    is shrunk to |p| / 2 for entries closer to zero than the step, and exact
    zeros (no gradient, only a subgradient) are skipped.
    """
    if grad is None:
        grad = gradient(params, dataset, tau0, eta_ov, eta_bal, subset)
    obj = Objective(dataset, tau0, eta_ov, eta_bal)
    idx = _resolve_idx(dataset, subset)
    masks = _masks(params)
    base = _to_torch(params, False)
    errors = {}
    with torch.no_grad():
        for name in BLOCKS:
            flat = base[name].reshape(-1)
            g = np.asarray(grad[name], dtype=float).reshape(-1)
            active = np.ones(flat.numel(), dtype=bool)
            if name in ("tau", "omega"):
                active = np.broadcast_to(masks[name].numpy() > 0, base[name].shape).reshape(-1)
            worst = 0.0
            kinked = name in ("tau", "omega") and eta_ov > 0
            for j in np.flatnonzero(active):
                orig = float(flat[j])
                h = 1e-5 * max(abs(orig), 1.0)
                if kinked and abs(orig) < h:
                    if orig == 0.0:
                        continue
                    h = abs(orig) / 2
                flat[j] = orig + h
                up = float(obj.loss(base, idx, masks))
                flat[j] = orig - h
                down = float(obj.loss(base, idx, masks))
                flat[j] = orig
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(g[j] - fd) / max(abs(g[j]), abs(fd), 1.0))
            errors[name] = worst
    return GradCheckReport(block_errors=errors, tolerance=tolerance)


def fit_omega(params, dataset, subset=None):
    """Minimum-norm least-squares omega matching the cause means for fixed tau.

    With fewer intervention groups than intervenable slots the fit is
    underdetermined; the minimum-norm solution leaves no weight outside the
    span of the observed interventions.
    """
    idx = _resolve_idx(dataset, subset)
    mu_zh = dataset.moments[0][idx] @ params.tau.T
    cols = params.omega_mask if params.omega_mask is not None else np.ones(params.omega.shape[1], dtype=bool)
    ints = dataset.interventions[idx][:, cols]
    w, *_ = np.linalg.lstsq(ints - ints.mean(axis=0), mu_zh - mu_zh.mean(axis=0), rcond=None)
    omega = np.zeros_like(params.omega)
    omega[:, cols] = w.T
    return params.replace(omega=omega)


def fit_marginals(params, dataset, tau0, subset=None):
    """Closed-form optimum of (alpha, beta, mu_z, variances) for fixed tau and omega.

    The cause term is minimized by the mean and mean squared deviation of the
    shifted pushforward; the mechanism term is a least-squares problem in
    (alpha, beta) over the group means and regression slopes.
    """
    idx = _resolve_idx(dataset, subset)
    mean, cov = dataset.moments
    mean, cov = mean[idx], cov[idx]
    T, t0 = params.tau, np.asarray(tau0, dtype=float)
    mu_zh = mean @ T.T
    TS = np.einsum("kn,gnm->gkm", T, cov)
    sig = np.einsum("gkm,lm->gkl", TS, T)
    c_zy = TS @ t0
    mu_yh = mean @ t0
    var_yh = np.einsum("n,gnm,m->g", t0, cov, t0)
    shift = dataset.interventions[idx] @ params.omega.T
    mu_z = (mu_zh - shift).mean(axis=0)
    var_z = ((mu_z + shift - mu_zh) ** 2 + np.diagonal(sig, axis1=1, axis2=2)).mean(axis=0)
    if np.any(var_z <= 0):
        raise DegenerateParameters("initial causes have zero variance")
    a = np.linalg.solve(sig, c_zy[..., None])[..., 0]
    s2 = np.maximum(var_yh - np.einsum("gk,gk->g", c_zy, a), 1e-12)
    n = T.shape[0]
    H = np.zeros((n + 1, n + 1))
    rhs = np.zeros(n + 1)
    for m, S, y, ag in zip(mu_zh, sig, mu_yh, a):
        v = np.append(m, 1.0)
        H += np.outer(v, v)
        H[:n, :n] += S
        rhs += v * y
        rhs[:n] += S @ ag
    sol = np.linalg.solve(H, rhs)
    alpha, beta = sol[:n], float(sol[n])
    gap = (mu_zh @ alpha + beta - mu_yh) ** 2 + np.einsum("gk,gkl,gl->g", alpha - a, sig, alpha - a)
    return params.replace(
        alpha=alpha,
        beta=beta,
        mu_z=mu_z,
        log_var_z=np.log(var_z),
        log_var_y_given_z=float(np.log(np.mean(gap + s2))),
    )


# ---------------------------------------------------------------------------
# training


def initialize(n_causes, n_features, seed, omega_mask=None, tau_mask=None, init_scale=1.0):
    """Random starting point: tau, omega ~ N(0, s^2/N), alpha ~ N(0, 1), everything else zero."""
    if n_causes < 1:
        raise InvalidConfiguration("n_causes must be positive")
    rng = make_rng(seed)
    scale = init_scale / math.sqrt(n_features)
    tau = scale * rng.standard_normal((n_causes, n_features))
    omega = scale * rng.standard_normal((n_causes, n_features))
    alpha = rng.standard_normal(n_causes)
    return ReductionParams(
        tau=tau,
        omega=omega,
        alpha=alpha,
        beta=0.0,
        log_var_y_given_z=0.0,
        mu_z=np.zeros(n_causes),
        log_var_z=np.zeros(n_causes),
        omega_mask=omega_mask,
        tau_mask=tau_mask,
    )


@dataclass
class HistoryRow:
    restart: int
    epoch: int
    split: str
    lr: float
    loss: LossBreakdown

    def as_row(self):
        return {"restart": self.restart, "epoch": self.epoch, "split": self.split, "lr": self.lr, **self.loss.as_row()}


@dataclass
class TrainResult:
    best_params: ReductionParams
    history: list
    restart_val_losses: np.ndarray
    selected_restart: int
    restart_params: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    bound_violations: int = 0
    dataset: Dataset | None = None

    def history_of(self, restart=None, split=None):
        r = self.selected_restart if restart is None else restart
        return [h for h in self.history if h.restart == r and (split is None or h.split == split)]


def select_restart(val_losses):
    """Index of the smallest validation total; ties go to the lowest index."""
    vals = np.asarray(val_losses, dtype=float)
    order = sorted(range(len(vals)), key=lambda k: (math.inf if not np.isfinite(vals[k]) else vals[k], k))
    return order[0]


def _run_restart(r, simulator, dataset, tau0, n_causes, config, objective, record):
    p0 = initialize(
        n_causes,
        dataset.n_features,
        derive_seed(config.master_seed, 1, r),
        omega_mask=np.asarray(simulator.omega_mask, dtype=bool),
        tau_mask=None if simulator.tau_mask is None else np.asarray(simulator.tau_mask, dtype=bool),
        init_scale=config.init_scale,
    )
    if config.init_marginals == "data-omega":
        p0 = fit_omega(p0, dataset, "train")
    if config.init_marginals != "zero":
        p0 = fit_marginals(p0, dataset, tau0, "train")
    masks = _masks(p0)
    p = _to_torch(p0)
    opt_cls = torch.optim.SGD if config.optimizer == "gd" else torch.optim.Adam
    opt = opt_cls(list(p.values()), lr=config.learning_rate)
    train_idx = dataset.indices("train")
    split_idx = {s: dataset.indices(s) for s in SPLITS}
    obj = objective

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        if config.resimulate_per_epoch and epoch > 0:
            dataset = resimulate(simulator, dataset, derive_seed(config.master_seed, 3, r, epoch))
            obj = Objective(dataset, tau0, config.eta_ov, config.eta_bal)
        order = make_rng(config.master_seed, 2, r, epoch).permutation(train_idx)
        for start in range(0, len(order), config.intervention_batch):
            idx = order[start : start + config.intervention_batch]
            opt.zero_grad()
            loss = obj.loss(p, idx, masks)
            value = float(loss.detach())
            if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise DivergedParameters(f"loss {value} at epoch {epoch}")
            loss.backward()
            opt.step()
            with torch.no_grad():
                p["omega"].mul_(masks["omega"])
                p["tau"].mul_(masks["tau"])
        if (epoch + 1) % config.log_every == 0 or epoch + 1 == config.epochs:
            for s in SPLITS:
                record(HistoryRow(r, epoch + 1, s, lr, obj.breakdown(p, split_idx[s], masks)))

    params = _to_params(p, p0)
    val = Objective(dataset, tau0, config.eta_ov, config.eta_bal).breakdown(_to_torch(params, False), split_idx["val"], masks)
    return params, val.total


def train(simulator, prior, tau0, n_causes, config, dataset=None):
    """Fit an ``n_causes`` reduction; returns the restart with the best final validation total."""
    tau0 = np.asarray(tau0, dtype=float)
    if dataset is None:
        dataset = build_dataset(
            simulator, prior, config.n_paths, config.sim_batch, derive_seed(config.master_seed, 0), config.split_fractions
        )
    objective = Objective(dataset, tau0, config.eta_ov, config.eta_bal)
    history, diagnostics, params_list = [], [], []
    val_losses = np.full(config.restarts, math.inf)
    violations = 0

    for r in range(config.restarts):
        rows = []

        def record(row):
            rows.append(row)

        try:
            params, val = _run_restart(r, simulator, dataset, tau0, n_causes, config, objective, record)
        except TCRError as exc:
            diagnostics.append({"restart": r, "error": type(exc).__name__, "message": str(exc)})
            params_list.append(None)
            history.extend(rows)
            continue
        for row in rows:
            if row.loss.relevance > row.loss.consistency + BOUND_TOL:
                violations += 1
        history.extend(rows)
        params_list.append(params)
        val_losses[r] = val if math.isfinite(val) else math.inf

    if not np.any(np.isfinite(val_losses)):
        raise TrainingFailed("all restarts diverged", diagnostics=diagnostics)
    best = select_restart(val_losses)
    return TrainResult(
        best_params=params_list[best],
        history=history,
        restart_val_losses=val_losses,
        selected_restart=best,
        restart_params=params_list,
        diagnostics=diagnostics,
        bound_violations=violations,
        dataset=dataset,
    )
