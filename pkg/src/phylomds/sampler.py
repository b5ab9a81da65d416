"""Random-scan Metropolis-within-Gibbs sampler for the phylogenetic MDS posterior.

Each iteration updates one block, chosen at random by the schedule weights:

* ``x``      Hamiltonian Monte Carlo on the latent configuration
* ``sigma2`` random-walk Metropolis on ``log sigma^2``
* ``sigma``  conjugate Wishart draw of the diffusion precision
* ``tree``   Gibbs draw of the tree-mixture component

The driver is sequential; parallelism lives inside the likelihood engine.
"""

from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .core import DimensionError, DissimilarityData, _coords
from .engine import Engine, EngineConfig
from .prior import (
    DiffusionParams,
    PriorHyperparams,
    TreeCovariance,
    TreeSet,
    _as_treeset,
    build_tree_covariance,
    matrix_normal_logpdf_pruning,
    prior_gradient,
)

BLOCKS = ("x", "sigma2", "sigma", "tree")
DEFAULT_SCHEDULE = {"x": 0.8, "sigma2": 0.1, "sigma": 0.05, "tree": 0.05}
WISHART_CONVENTION = "precision ~ Wishart(d0, scale=inv(T0)); prior mean d0*inv(T0); T0 is a rate matrix"


class ConfigError(ValueError):
    """Invalid sampler configuration."""


class ChainError(RuntimeError):
    """A block update failed; carries where and the state just before it."""

    def __init__(self, message, iteration, snapshot):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.snapshot = snapshot


@dataclass(frozen=True)
class HmcConfig:
    """Step size, trajectory length and diagonal mass.

    ``mass`` is ``None`` for the identity, otherwise positive entries
    broadcastable to the N x D shape of X (a D-vector gives one mass per
    latent dimension). With ``jitter`` > 0 each transition draws its step
    size uniformly from ``step_size * (1 +/- jitter)``, which avoids
    periodic trajectories on near-Gaussian targets.
    """

    step_size: float
    leapfrog_steps: int
    mass: Optional[np.ndarray] = None
    jitter: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.step_size) and self.step_size > 0):
            raise ConfigError("step_size must be positive")
        if int(self.leapfrog_steps) != self.leapfrog_steps or self.leapfrog_steps < 1:
            raise ConfigError("leapfrog_steps must be an integer >= 1")
        if not 0.0 <= self.jitter < 1.0:
            raise ConfigError("jitter must lie in [0, 1)")
        if self.mass is not None:
            mass = np.asarray(self.mass, dtype=np.float64)
            if not np.all(np.isfinite(mass)) or np.any(mass <= 0):
                raise ConfigError("diagonal mass entries must be positive")
            object.__setattr__(self, "mass", mass)

    def mass_array(self, shape) -> np.ndarray:
        if self.mass is None:
            return np.ones(shape)
        try:
            return np.broadcast_to(self.mass, shape)
        except ValueError as exc:
            raise ConfigError(f"mass of shape {self.mass.shape} does not fit X of shape {shape}") from exc

    def inverse_mass(self, shape) -> np.ndarray:
        return 1.0 / self.mass_array(shape)


@dataclass
class SamplerState:
    x: np.ndarray
    sigma2: float
    sigma_mat: np.ndarray
    tree_index: int = 0
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    accepted: dict = field(default_factory=lambda: dict.fromkeys(BLOCKS, 0))
    attempted: dict = field(default_factory=lambda: dict.fromkeys(BLOCKS, 0))

    def snapshot(self) -> "SamplerState":
        return copy.deepcopy(self)

    def acceptance_rate(self, block: str) -> float:
        tried = self.attempted[block]
        return self.accepted[block] / tried if tried else float("nan")


class PosteriorModel:
    """Data, tree mixture, fixed hyperparameters and the likelihood engine.

    Parameters
    ----------
    data : DissimilarityData
        Observations; its mask selects the pairs that enter the likelihood.
    trees : sequence of TreeSet, or sequence of Phylogeny lists
        Mixture components. Each must cover all N items (tips plus
        unsequenced rows).
    mu0, tau0, tau_e : prior mean and variance scales of the diffusion.
    hyper : PriorHyperparams
    engine : Engine or EngineConfig, optional
    use_likelihood : bool
        When false the data term is dropped and the chain targets the prior.
    """

    def __init__(self, data: DissimilarityData, trees, mu0, tau0: float, tau_e: float, hyper: PriorHyperparams, engine=None, use_likelihood: bool = True, labels=None):
        self.data = data
        self.tau0 = float(tau0)
        self.tau_e = float(tau_e)
        self.hyper = hyper
        self.d = hyper.d
        self.mu0 = np.broadcast_to(np.asarray(mu0, dtype=np.float64), (self.d,)).copy()
        if isinstance(engine, EngineConfig) or engine is None:
            engine = Engine(engine or EngineConfig())
        self.engine = engine
        self.use_likelihood = use_likelihood
        self.components = self._components(trees, labels)
        for comp in self.components:
            if comp.n != data.n:
                raise DimensionError(f"a tree component covers {comp.n} items but the data has {data.n}")
        self._cov: dict[int, TreeCovariance] = {}

    def _components(self, trees, labels) -> list:
        if isinstance(trees, TreeSet):
            return [trees]
        trees = list(trees)
        if not trees:
            return [TreeSet.stacked([], self.data.n)]
        if labels is None:
            labels = self.data.labels
        out = []
        for comp in trees:
            if isinstance(comp, TreeSet):
                out.append(comp)
            elif labels is not None:
                out.append(_as_treeset(comp, labels=labels))
            else:
                comp_trees = [comp] if not isinstance(comp, (list, tuple)) else comp
                covered = sum(t.tip_count for t in comp_trees)
                out.append(_as_treeset(comp_trees, self.data.n - covered))
        return out

    @property
    def n_components(self) -> int:
        return len(self.components)

    def covariance(self, index: int) -> TreeCovariance:
        """V for a mixture component, factored once and reused."""
        cov = self._cov.get(index)
        if cov is None:
            cov = build_tree_covariance(self.components[index], self.tau0, self.tau_e)
            self._cov[index] = cov
        return cov

    def diffusion(self, sigma_mat) -> DiffusionParams:
        return DiffusionParams(sigma_mat, self.mu0, self.tau0, self.tau_e)

    def log_likelihood(self, x, sigma2) -> float:
        if not self.use_likelihood:
            return 0.0
        return self.engine.log_likelihood(self.data, x, sigma2)

    def log_prior_x(self, x, sigma_mat, tree_index, dp: Optional[DiffusionParams] = None) -> float:
        """Pass ``dp`` to reuse an already validated DiffusionParams for ``sigma_mat``."""
        return matrix_normal_logpdf_pruning(x, self.components[tree_index], dp or self.diffusion(sigma_mat))

    def log_prior_sigma2(self, sigma2) -> float:
        tau = 1.0 / sigma2
        return float(stats.gamma.logpdf(tau, self.hyper.s0, scale=1.0 / self.hyper.r0))

    def log_prior_sigma_mat(self, sigma_mat) -> float:
        precision = np.linalg.inv(sigma_mat)
        return float(stats.wishart.logpdf(precision, df=self.hyper.d0, scale=np.linalg.inv(self.hyper.t0_mat)))

    def gradient_x(self, x, sigma2, cov: TreeCovariance, dp: DiffusionParams, sigma_inv) -> np.ndarray:
        grad = prior_gradient(x, cov, dp, sigma_inv).values
        if self.use_likelihood:
            grad = grad + self.engine.gradient(self.data, x, sigma2).values
        return grad


def initial_state(model: PosteriorModel, x0, sigma2: float = 1.0, sigma_mat=None, tree_index: int = 0, seed=None) -> SamplerState:
    x0 = np.array(_coords(x0), dtype=np.float64)
    if x0.shape != (model.data.n, model.d):
        raise DimensionError(f"initial X must be {model.data.n} x {model.d}, got {x0.shape}")
    sigma_mat = np.eye(model.d) if sigma_mat is None else np.array(sigma_mat, dtype=np.float64)
    model.diffusion(sigma_mat)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return SamplerState(x0, float(sigma2), sigma_mat, int(tree_index), 0, rng)


def log_posterior_x(state: SamplerState, model: PosteriorModel) -> float:
    """log p(Y | X, sigma2) + log p(X | Sigma, G); the negative HMC potential."""
    return model.log_likelihood(state.x, state.sigma2) + model.log_prior_x(state.x, state.sigma_mat, state.tree_index)


def log_joint(state: SamplerState, model: PosteriorModel) -> tuple[float, float]:
    """Unnormalised log posterior of the whole state, and its likelihood part."""
    loglik = model.log_likelihood(state.x, state.sigma2)
    total = (
        loglik
        + model.log_prior_x(state.x, state.sigma_mat, state.tree_index)
        + model.log_prior_sigma2(state.sigma2)
        + model.log_prior_sigma_mat(state.sigma_mat)
    )
    return total, loglik


@dataclass
class Trajectory:
    x: np.ndarray
    momentum: np.ndarray
    delta_h: float
    divergent: bool


def leapfrog_trajectory(state: SamplerState, hmc: HmcConfig, model: PosteriorModel, momentum) -> Trajectory:
    """Integrate L leapfrog steps from ``(state.x, momentum)``.

    ``delta_h`` is H(end) - H(start) with H = -log pi(x) + p' M^-1 p / 2.
    Any non-finite energy or gradient marks the trajectory divergent.
    """
    if hmc.leapfrog_steps < 1:
        raise ConfigError("leapfrog_steps must be >= 1")
    cov = model.covariance(state.tree_index)
    dp = model.diffusion(state.sigma_mat)
    sigma_inv, _ = dp.precision()
    eps = hmc.step_size
    x = np.array(state.x, dtype=np.float64)
    p = np.array(momentum, dtype=np.float64)
    inv_mass = hmc.inverse_mass(x.shape)

    def hamiltonian(xx, pp):
        potential = -model.log_likelihood(xx, state.sigma2) - model.log_prior_x(xx, state.sigma_mat, state.tree_index, dp)
        return potential + 0.5 * float(np.sum(pp * pp * inv_mass))

    h0 = hamiltonian(x, p)
    if not math.isfinite(h0):
        raise FloatingPointError("current state has non-finite energy")
    with np.errstate(all="ignore"):
        grad = model.gradient_x(x, state.sigma2, cov, dp, sigma_inv)
        p += 0.5 * eps * grad
        for step in range(hmc.leapfrog_steps):
            x += eps * inv_mass * p
            if not np.all(np.isfinite(x)):
                return Trajectory(x, p, math.inf, True)
            grad = model.gradient_x(x, state.sigma2, cov, dp, sigma_inv)
            if not np.all(np.isfinite(grad)):
                return Trajectory(x, p, math.inf, True)
            p += (eps if step < hmc.leapfrog_steps - 1 else 0.5 * eps) * grad
    delta_h = hamiltonian(x, p) - h0
    divergent = not math.isfinite(delta_h)
    return Trajectory(x, p, math.inf if divergent else delta_h, divergent)


def draw_momentum(rng: np.random.Generator, hmc: HmcConfig, shape) -> np.ndarray:
    z = rng.standard_normal(shape)
    return z if hmc.mass is None else z * np.sqrt(hmc.mass_array(shape))


def hmc_transition(state: SamplerState, hmc: HmcConfig, model: PosteriorModel) -> tuple[SamplerState, float]:
    """One HMC update of X. Returns the state and the acceptance probability."""
    momentum = draw_momentum(state.rng, hmc, state.x.shape)
    if hmc.jitter > 0:
        hmc = replace(hmc, step_size=hmc.step_size * (1.0 + hmc.jitter * (2.0 * state.rng.random() - 1.0)))
    traj = leapfrog_trajectory(state, hmc, model, momentum)
    if traj.divergent:
        accept_prob = 0.0
    else:
        accept_prob = math.exp(-traj.delta_h) if traj.delta_h > 0 else 1.0
    state.attempted["x"] += 1
    if state.rng.random() < accept_prob:
        state.x = traj.x
        state.accepted["x"] += 1
    return state, accept_prob


def gibbs_sigma_mat(state: SamplerState, cov: TreeCovariance, model: PosteriorModel) -> SamplerState:
    """Draw Sigma from its conjugate full conditional.

    Sigma^-1 | X ~ Wishart(d0 + N, inv(T0 + S)), S = (X - mu0)' V^-1 (X - mu0).
    """
    hyper = model.hyper
    resid = state.x - model.mu0
    scatter = resid.T @ cov.solve(resid)
    state.sigma_mat = sample_sigma_mat(hyper, scatter, resid.shape[0], state.rng)
    state.attempted["sigma"] += 1
    state.accepted["sigma"] += 1
    return state


def sample_sigma_mat(hyper: PriorHyperparams, scatter, n: int, rng) -> np.ndarray:
    """Sigma drawn with precision ~ Wishart(d0 + n, inv(T0 + scatter))."""
    rate = hyper.t0_mat + np.atleast_2d(scatter)
    rate = 0.5 * (rate + rate.T)
    scale = np.linalg.inv(rate)
    precision = np.atleast_2d(stats.wishart.rvs(df=hyper.d0 + n, scale=0.5 * (scale + scale.T), random_state=rng))
    sigma_mat = np.linalg.inv(precision)
    return 0.5 * (sigma_mat + sigma_mat.T)


def log_sigma2_target(model: PosteriorModel, x, log_sigma2: float) -> float:
    """Log density of u = log sigma^2 given the rest, Jacobian included."""
    tau = math.exp(-log_sigma2)
    return model.log_likelihood(x, math.exp(log_sigma2)) + model.hyper.s0 * math.log(tau) - model.hyper.r0 * tau


def mh_sigma2(state: SamplerState, model: PosteriorModel, proposal_sd: float) -> SamplerState:
    """Random-walk Metropolis on ``log sigma^2``."""
    if not proposal_sd > 0:
        raise ConfigError("proposal_sd must be positive")
    u = math.log(state.sigma2)
    u_new = u + proposal_sd * state.rng.standard_normal()
    log_ratio = log_sigma2_target(model, state.x, u_new) - log_sigma2_target(model, state.x, u)
    state.attempted["sigma2"] += 1
    if math.log(state.rng.random()) < log_ratio:
        state.sigma2 = math.exp(u_new)
        state.accepted["sigma2"] += 1
    return state


def gibbs_tree_index(state: SamplerState, model: PosteriorModel) -> SamplerState:
    """Draw the mixture component from p(k | X, Sigma) with equal prior weights."""
    if model.n_components > 1:
        dp = model.diffusion(state.sigma_mat)
        logw = np.array([matrix_normal_logpdf_pruning(state.x, comp, dp) for comp in model.components])
        probs = np.exp(logw - logsumexp(logw))
        state.tree_index = int(state.rng.choice(model.n_components, p=probs / probs.sum()))
    state.attempted["tree"] += 1
    state.accepted["tree"] += 1
    return state


def _schedule_probs(schedule) -> np.ndarray:
    schedule = dict(DEFAULT_SCHEDULE if schedule is None else schedule)
    unknown = set(schedule) - set(BLOCKS)
    if unknown:
        raise ConfigError(f"unknown schedule blocks: {sorted(unknown)}")
    weights = np.array([float(schedule.get(b, 0.0)) for b in BLOCKS])
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ConfigError("schedule weights must be non-negative")
    if weights.sum() <= 0:
        raise ConfigError("at least one schedule weight must be positive")
    return weights / weights.sum()


@dataclass
class ChainLog:
    """Thinned record of a chain."""

    d: int
    rows: list = field(default_factory=list)
    x_snapshots: list = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        sig = [f"sigma_{a}_{b}" for a in range(1, self.d + 1) for b in range(1, self.d + 1)]
        return ["iteration", "block", "accepted", "log_posterior", "log_likelihood", "sigma2", "trace_sigma", *sig, "tree_index", "accept_rate_x", "accept_rate_sigma2"]

    def column(self, name) -> np.ndarray:
        idx = self.columns.index(name)
        return np.array([row[idx] for row in self.rows])

    @property
    def sigma2(self) -> np.ndarray:
        return self.column("sigma2").astype(float)

    @property
    def x(self) -> np.ndarray:
        return np.array(self.x_snapshots)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


def _record(log: ChainLog, state: SamplerState, model: PosteriorModel, block: str, accepted: bool):
    total, loglik = log_joint(state, model)
    log.rows.append(
        [
            state.iteration,
            block,
            int(accepted),
            float(total),
            float(loglik),
            float(state.sigma2),
            float(np.trace(state.sigma_mat)),
            *(float(v) for v in state.sigma_mat.ravel()),
            state.tree_index,
            float(state.acceptance_rate("x")),
            float(state.acceptance_rate("sigma2")),
        ]
    )
    log.x_snapshots.append(state.x.copy())


def step(state: SamplerState, model: PosteriorModel, hmc: HmcConfig, block: str, sigma2_proposal_sd: float) -> tuple[bool, float]:
    """Apply one block update in place; returns (accepted, HMC acceptance probability)."""
    before = state.accepted[block]
    prob = float("nan")
    if block == "x":
        _, prob = hmc_transition(state, hmc, model)
    elif block == "sigma2":
        mh_sigma2(state, model, sigma2_proposal_sd)
    elif block == "sigma":
        gibbs_sigma_mat(state, model.covariance(state.tree_index), model)
    else:
        gibbs_tree_index(state, model)
    return state.accepted[block] > before, prob


def run_chain(state: SamplerState, model: PosteriorModel, hmc: HmcConfig, n_iterations: int, schedule=None, thin: int = 1, sigma2_proposal_sd: float = 0.1) -> ChainLog:
    """Run ``n_iterations`` random-scan updates, recording every ``thin``-th state.

    The state is advanced in place. Errors inside a block are re-raised as
    ``ChainError`` carrying the iteration and the pre-update snapshot.
    """
    if n_iterations < 1:
        raise ConfigError("n_iterations must be >= 1")
    if thin < 1:
        raise ConfigError("thin must be >= 1")
    probs = _schedule_probs(schedule)
    log = ChainLog(model.d)
    for _ in range(n_iterations):
        block = BLOCKS[int(state.rng.choice(len(BLOCKS), p=probs))]
        try:
            accepted, _ = step(state, model, hmc, block, sigma2_proposal_sd)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            # block updates only assign on success, so the state is still the pre-update one
            raise ChainError(f"{block} update failed: {exc}", state.iteration + 1, state.snapshot()) from exc
        state.iteration += 1
        if state.iteration % thin == 0:
            _record(log, state, model, block, accepted)
    return log


@dataclass
class WarmupResult:
    hmc: HmcConfig
    accept_mean: float


def warmup(state: SamplerState, model: PosteriorModel, hmc: HmcConfig, n_iterations: int, schedule=None, target: float = 0.65, adapt_mass: bool = False, sigma2_proposal_sd: float = 0.1) -> WarmupResult:
    """Dual-averaging step-size adaptation; the samples are discarded.

    With ``adapt_mass`` the diagonal mass is set to the inverse of the X
    variance collected over the second half of warmup, and the step size is
    re-tuned from there.
    """
    probs = _schedule_probs(schedule)
    if not adapt_mass:
        tuned, _, acc = _dual_average(state, model, hmc, n_iterations, probs, target, sigma2_proposal_sd)
        return WarmupResult(tuned, acc)
    half = n_iterations // 2
    tuned, draws, _ = _dual_average(state, model, hmc, half, probs, target, sigma2_proposal_sd, collect=True)
    if len(draws) > 1:
        var = np.var(np.array(draws), axis=0)
        if np.all(var > 0):
            tuned = replace(tuned, mass=1.0 / var)
    tuned, _, acc = _dual_average(state, model, tuned, n_iterations - half, probs, target, sigma2_proposal_sd)
    return WarmupResult(tuned, acc)


def _dual_average(state, model, hmc, n_iterations, probs, target, sigma2_proposal_sd, collect=False):
    gamma, t0, kappa = 0.05, 10.0, 0.75
    mu = math.log(10.0 * hmc.step_size)
    h_bar, log_eps_bar, m = 0.0, 0.0, 0
    draws, accepts = [], []
    current = hmc
    for i in range(n_iterations):
        block = BLOCKS[int(state.rng.choice(len(BLOCKS), p=probs))]
        _, prob = step(state, model, current, block, sigma2_proposal_sd)
        if block == "x":
            m += 1
            accepts.append(prob)
            h_bar = (1 - 1 / (m + t0)) * h_bar + (target - prob) / (m + t0)
            log_eps = mu - math.sqrt(m) / gamma * h_bar
            weight = m ** (-kappa)
            log_eps_bar = weight * log_eps + (1 - weight) * log_eps_bar
            current = replace(current, step_size=math.exp(log_eps))
        if collect and i >= n_iterations // 2:
            draws.append(state.x.copy())
    tuned = replace(current, step_size=math.exp(log_eps_bar)) if m else current
    return tuned, draws, float(np.mean(accepts)) if accepts else float("nan")
