"""Programmatic versions of the simulate / fit / cross-validate workflows."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import DissimilarityData, LatentConfiguration
from .io import ModelConfig, RunConfig, SimulateConfig, _matrix
from .prior import DiffusionParams, PriorHyperparams, TreeSet, simulate_brownian_tips
from .sampler import (
    ChainLog,
    HmcConfig,
    PosteriorModel,
    SamplerState,
    WarmupResult,
    initial_state,
    run_chain,
    warmup,
)
from .selection import CvReport, FoldPlan, chain_draws, lpd_hat
from .tree import Phylogeny, random_coalescent_tree, read_newick_file


def draw_truncated_normal(delta, sigma2: float, rng: np.random.Generator, max_rounds: int = 200) -> np.ndarray:
    """Draw y ~ N(delta, sigma2) restricted to y > 0 by rejection.

    Since delta >= 0 each proposal is accepted with probability at least one
    half, so ``max_rounds`` is never reached in practice. ``sigma2 == 0``
    returns ``delta`` exactly.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if sigma2 < 0:
        raise ValueError("sigma2 cannot be negative")
    if np.any(delta < 0):
        raise ValueError("latent distances cannot be negative")
    if sigma2 == 0:
        return delta.copy()
    sigma = math.sqrt(sigma2)
    out = np.empty_like(delta)
    pending = np.arange(delta.size)
    flat_delta = delta.ravel()
    flat_out = out.reshape(-1)
    for _ in range(max_rounds):
        draw = flat_delta[pending] + sigma * rng.standard_normal(pending.size)
        ok = draw > 0
        flat_out[pending[ok]] = draw[ok]
        pending = pending[~ok]
        if pending.size == 0:
            return out
    raise RuntimeError(f"truncated-normal rejection stalled with {pending.size} draws outstanding")


@dataclass
class SimulatedData:
    data: DissimilarityData
    x: np.ndarray
    tree: Phylogeny
    sigma_mat: np.ndarray
    sigma2: float


def simulate_dataset(sim: SimulateConfig, model: ModelConfig) -> SimulatedData:
    """Latent locations along a tree, then truncated-normal dissimilarities."""
    rng = np.random.default_rng(sim.seed)
    d = model.latent_dim
    if sim.tree == "coalescent":
        n_seq = sim.n - sim.unsequenced
        width = len(str(sim.n))
        labels = [f"t{i + 1:0{width}d}" for i in range(sim.n)]
        tree = random_coalescent_tree(labels[:n_seq], rng, sim.tree_scale)
    else:
        tree = read_newick_file(sim.tree)[0]
        extra = [f"u{i + 1}" for i in range(sim.unsequenced)]
        labels = tree.tip_labels + extra
    sigma_mat = _matrix(sim.sigma_mat, d, "sigma_mat")
    dp = DiffusionParams(sigma_mat, model.mu0_vector(), model.tau0, model.tau_e)
    tips = simulate_brownian_tips(tree, dp, rng).coords
    loose = dp.mu0 + math.sqrt(dp.tau_e) * rng.standard_normal((len(labels) - tree.tip_count, d)) @ np.linalg.cholesky(sigma_mat).T
    x = np.vstack([tips, loose])
    n = x.shape[0]
    delta = LatentConfiguration(x).distances()
    lower = np.tril_indices(n, -1)
    y = np.zeros((n, n))
    y[lower] = draw_truncated_normal(delta[lower], sim.sigma2, rng)
    y = y + y.T
    mask = ~np.eye(n, dtype=bool)
    if sim.missing_fraction > 0:
        drop = rng.random(lower[0].size) < sim.missing_fraction
        mask[lower[0][drop], lower[1][drop]] = False
        mask[lower[1][drop], lower[0][drop]] = False
    return SimulatedData(DissimilarityData(y, mask, labels), x, tree, sigma_mat, sim.sigma2)


def classical_mds(data: DissimilarityData, d: int) -> np.ndarray:
    """Torgerson scaling; unobserved pairs take the mean observed value."""
    n = data.n
    if not data.mask.any():
        return np.zeros((n, d))
    filled = np.where(data.mask, data.values, data.values[data.mask].mean())
    np.fill_diagonal(filled, 0.0)
    centre = np.eye(n) - 1.0 / n
    b = -0.5 * centre @ (filled ** 2) @ centre
    vals, vecs = np.linalg.eigh(b)
    order = np.argsort(vals)[::-1][:d]
    coords = vecs[:, order] * np.sqrt(np.clip(vals[order], 1e-12, None))
    if coords.shape[1] < d:
        coords = np.hstack([coords, np.zeros((n, d - coords.shape[1]))])
    # fix the sign of each axis so the start does not depend on the eigensolver
    signs = np.sign(coords[np.argmax(np.abs(coords), axis=0), np.arange(d)])
    return coords * np.where(signs == 0, 1.0, signs)


def tree_components(trees: Optional[Sequence[Phylogeny]], data: DissimilarityData) -> list:
    """Mixture components over the items of ``data``; no trees means every
    item is unsequenced."""
    if not trees:
        return [TreeSet.stacked([], data.n)]
    if data.labels is None:
        return [TreeSet.stacked([tree], data.n - tree.tip_count) for tree in trees]
    return [TreeSet.from_labels([tree], data.labels) for tree in trees]


def build_model(cfg: RunConfig, data: DissimilarityData, trees=None, use_likelihood: bool = True) -> PosteriorModel:
    m = cfg.model
    hyper = PriorHyperparams(m.d0_value(), m.t0_matrix(), m.s0, m.r0)
    return PosteriorModel(data, tree_components(trees, data), m.mu0_vector(), m.tau0, m.tau_e, hyper, engine=cfg.engine, use_likelihood=use_likelihood)


@dataclass
class FitResult:
    log: ChainLog
    state: SamplerState
    hmc: HmcConfig
    warmup: Optional[WarmupResult]
    model: PosteriorModel


def fit_chain(cfg: RunConfig, data: DissimilarityData, trees=None, seed=None, x0=None) -> FitResult:
    """Warm up, then run the random-scan chain described by ``cfg``."""
    s = cfg.sampler
    model = build_model(cfg, data, trees)
    try:
        start = classical_mds(data, cfg.model.latent_dim) if x0 is None else x0
        state = initial_state(model, start, s.initial_sigma2, seed=s.seed if seed is None else seed)
        hmc = HmcConfig(s.step_size, s.leapfrog_steps)
        tuned = None
        if s.warmup > 0:
            tuned = warmup(state, model, hmc, s.warmup, s.schedule, adapt_mass=s.mass == "pilot", sigma2_proposal_sd=s.sigma2_proposal_sd)
            hmc = tuned.hmc
            state.iteration = 0
        log = run_chain(state, model, hmc, s.iterations, s.schedule, s.thin, s.sigma2_proposal_sd)
    finally:
        model.engine.close()
    return FitResult(log, state, hmc, tuned, model)


def load_trees(cfg: RunConfig):
    return read_newick_file(cfg.trees) if cfg.trees else None


def fold_seed(base: int, dim: int, fold: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([base, dim, fold]))


def _fit_fold(cfg: RunConfig, data: DissimilarityData, trees, plan: FoldPlan, dim: int, fold: int, burn_in: float):
    train = plan.training_data(data, fold)
    result = fit_chain(cfg.with_dim(dim), train, trees, seed=fold_seed(cfg.sampler.seed, dim, fold))
    return chain_draws(result.log, burn_in)


def cross_validate_config(cfg: RunConfig, data: DissimilarityData, trees, plan: FoldPlan, dims: Sequence[int], burn_in: float = 0.0, jobs: int = 1) -> CvReport:
    """Fit every (dimension, fold) from ``cfg`` and score held-out pairs."""
    tasks = [(d, f) for d in dims for f in range(plan.k)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {task: pool.submit(_fit_fold, cfg, data, trees, plan, task[0], task[1], burn_in) for task in tasks}
            draws = {task: fut.result() for task, fut in futures.items()}
    else:
        draws = {task: _fit_fold(cfg, data, trees, plan, task[0], task[1], burn_in) for task in tasks}
    report = CvReport()
    for d in dims:
        report.reports[d] = lpd_hat(plan, [draws[(d, f)] for f in range(plan.k)], data, d)
    return report


def posterior_mean_distances(log: ChainLog, burn_in: float = 0.0) -> np.ndarray:
    start = int(len(log.x_snapshots) * burn_in)
    acc = None
    for x in log.x_snapshots[start:]:
        dist = LatentConfiguration(x).distances()
        acc = dist if acc is None else acc + dist
    return acc / (len(log.x_snapshots) - start)

