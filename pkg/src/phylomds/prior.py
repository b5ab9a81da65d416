"""Matrix-normal Brownian-diffusion prior over latent locations.

Tips of each tree diffuse from a root drawn around ``mu0`` with variance
``tau0 * Sigma``; every branch of length t adds ``t * Sigma``. Items that sit
in no tree are independent draws with variance ``tau_e * Sigma``. Jointly X is
matrix normal with row covariance V (block diagonal, one block per tree) and
column covariance Sigma.

Two evaluation routes are provided: a dense O(N^3) factorisation of V, and a
post-order pruning pass that is linear in the number of tips.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy import linalg

from .core import GradientMatrix, LatentConfiguration, _coords
from .special import LOG_2PI
from .tree import Phylogeny


class NonSPDError(ValueError):
    """A matrix that must be symmetric positive definite is not."""


def _cholesky(matrix, what):
    try:
        return linalg.cho_factor(matrix, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NonSPDError(f"{what} is not symmetric positive definite") from exc


def _spd(matrix, what) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"{what} must be square")
    if not np.allclose(matrix, matrix.T, rtol=1e-12, atol=0.0):
        raise NonSPDError(f"{what} is not symmetric")
    _cholesky(matrix, what)
    return matrix


@dataclass(frozen=True)
class DiffusionParams:
    """Diffusion covariance, prior mean and root/unsequenced variance scales.

    ``tau0`` and ``tau_e`` may be zero only to express the deterministic limit
    in simulation; density evaluation then fails the SPD check.
    """

    sigma_mat: np.ndarray
    mu0: np.ndarray
    tau0: float = 1.0
    tau_e: float = 1.0

    def __post_init__(self):
        sigma_mat = _spd(self.sigma_mat, "diffusion covariance")
        mu0 = np.broadcast_to(np.asarray(self.mu0, dtype=np.float64), (sigma_mat.shape[0],)).copy()
        for name in ("tau0", "tau_e"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ValueError(f"{name} must be a non-negative finite number")
        object.__setattr__(self, "sigma_mat", sigma_mat)
        object.__setattr__(self, "mu0", mu0)

    @property
    def d(self) -> int:
        return self.sigma_mat.shape[0]

    def precision(self):
        """Sigma^-1 and log|Sigma|, computed on first use."""
        cached = self.__dict__.get("_precision")
        if cached is None:
            factor = _cholesky(self.sigma_mat, "diffusion covariance")
            inv = linalg.cho_solve(factor, np.eye(self.d))
            inv.setflags(write=False)
            cached = (inv, 2.0 * float(np.sum(np.log(np.diag(factor[0])))))
            object.__setattr__(self, "_precision", cached)
        return cached


@dataclass(frozen=True)
class PriorHyperparams:
    """Wishart(d0, T0) on Sigma^-1 (T0 a rate matrix) and Gamma(s0, r0) on sigma^-2."""

    d0: float
    t0_mat: np.ndarray
    s0: float
    r0: float

    def __post_init__(self):
        t0 = _spd(self.t0_mat, "Wishart rate matrix")
        object.__setattr__(self, "t0_mat", t0)
        if not self.d0 > t0.shape[0] - 1:
            raise ValueError("Wishart degrees of freedom must exceed D - 1")
        if not (self.s0 > 0 and self.r0 > 0):
            raise ValueError("Gamma shape and rate must be positive")

    @property
    def d(self) -> int:
        return self.t0_mat.shape[0]


@dataclass
class TreeSet:
    """Trees plus the rows of X their tips occupy.

    Rows covered by no tree are unsequenced items.
    """

    trees: list
    n: int
    tip_rows: list
    unsequenced_rows: np.ndarray

    @classmethod
    def stacked(cls, trees: Sequence[Phylogeny], unsequenced_count: int = 0) -> "TreeSet":
        """Tips of each tree in order, followed by the unsequenced items."""
        rows, start = [], 0
        for tree in trees:
            rows.append(np.arange(start, start + tree.tip_count))
            start += tree.tip_count
        return cls(list(trees), start + unsequenced_count, rows, np.arange(start, start + unsequenced_count))

    @classmethod
    def from_labels(cls, trees: Sequence[Phylogeny], labels: Sequence[str]) -> "TreeSet":
        index = {label: row for row, label in enumerate(labels)}
        if len(index) != len(labels):
            raise ValueError("item labels must be unique")
        covered = np.zeros(len(labels), dtype=bool)
        rows = []
        for tree in trees:
            missing = [label for label in tree.tip_labels if label not in index]
            if missing:
                raise ValueError(f"tree tips not among the items: {', '.join(missing[:5])}")
            tree_rows = np.array([index[label] for label in tree.tip_labels], dtype=np.int64)
            if np.any(covered[tree_rows]):
                raise ValueError("an item appears as a tip in more than one tree")
            covered[tree_rows] = True
            rows.append(tree_rows)
        return cls(list(trees), len(labels), rows, np.flatnonzero(~covered))


def _as_treeset(trees, unsequenced_count=0, labels=None) -> TreeSet:
    if isinstance(trees, TreeSet):
        return trees
    if isinstance(trees, Phylogeny):
        trees = [trees]
    if labels is not None:
        return TreeSet.from_labels(trees, labels)
    return TreeSet.stacked(trees, unsequenced_count)


_versions = itertools.count(1)


@dataclass(eq=False)
class TreeCovariance:
    """Row covariance V of the matrix-normal prior.

    Immutable once built; ``version`` identifies it so derived caches can tell
    when the tree mixture component has changed.
    """

    values: np.ndarray
    layout: Optional[TreeSet] = None
    version: int = field(default_factory=lambda: next(_versions))

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        self.values.setflags(write=False)
        self._factor = _cholesky(self.values, "tree covariance")
        self._inverse = None

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.cho_solve(self._factor, rhs, check_finite=False)

    def inverse(self) -> np.ndarray:
        """V^-1, formed on first use and kept for the life of this object."""
        if self._inverse is None:
            inv = self.solve(np.eye(self.n))
            self._inverse = 0.5 * (inv + inv.T)
            self._inverse.setflags(write=False)
        return self._inverse

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._factor[0]))))


def build_tree_covariance(trees, tau0: float, tau_e: float, unsequenced_count: int = 0, labels=None) -> TreeCovariance:
    """Block-diagonal V: shared root-to-MRCA time plus tau0, tau_e for unsequenced items."""
    layout = _as_treeset(trees, unsequenced_count, labels)
    v = np.zeros((layout.n, layout.n))
    for tree, rows in zip(layout.trees, layout.tip_rows):
        depth = tree.root_depths()
        tip_slot = tree.flat()[4]
        tips_below = {}
        for node in tree.postorder:
            kids = tree.children[node]
            if not kids:
                tips_below[node] = [rows[tip_slot[node]]]
                continue
            left, right = (tips_below.pop(k) for k in kids)
            v[np.ix_(left, right)] = depth[node]
            v[np.ix_(right, left)] = depth[node]
            tips_below[node] = left + right
        for slot, tip in enumerate(tree.tips):
            v[rows[slot], rows[slot]] = depth[tip]
        block = np.asarray(rows)
        v[np.ix_(block, block)] += tau0
    for row in layout.unsequenced_rows:
        v[row, row] = tau_e
    try:
        return TreeCovariance(v, layout)
    except NonSPDError as exc:
        raise NonSPDError("tree covariance failed to factor; check branch lengths and tau values") from exc


def matrix_normal_logpdf_dense(x, v: TreeCovariance, dp: DiffusionParams) -> float:
    """Matrix-normal log density via a dense factorisation of V."""
    coords = _coords(x)
    n, d = coords.shape
    if v.n != n or dp.d != d:
        raise ValueError(f"X is {n}x{d} but V is {v.n}x{v.n} and Sigma is {dp.d}x{dp.d}")
    resid = coords - dp.mu0
    sigma_inv, logdet_sigma = dp.precision()
    quad = float(np.sum((v.solve(resid) @ sigma_inv) * resid))
    return -0.5 * (n * d * LOG_2PI + n * logdet_sigma + d * v.logdet() + quad)


@njit(nogil=True, cache=True)
def _prune(coords, rows, postorder, left, right, lengths, tip_slot, sigma_inv, logdet_sigma, mu0, tau0):
    n_nodes = postorder.size
    d = coords.shape[1]
    means = np.empty((n_nodes, d))
    extra = np.zeros(n_nodes)
    diff = np.empty(d)
    logp = 0.0
    ops = 0
    for node in postorder:
        if left[node] < 0:
            row = rows[tip_slot[node]]
            for k in range(d):
                means[node, k] = coords[row, k]
            extra[node] = 0.0
            continue
        a = left[node]
        b = right[node]
        va = extra[a] + lengths[a]
        vb = extra[b] + lengths[b]
        s = va + vb
        for k in range(d):
            diff[k] = means[a, k] - means[b, k]
        quad = 0.0
        for k in range(d):
            for m in range(d):
                quad += diff[k] * sigma_inv[k, m] * diff[m]
        logp -= 0.5 * (d * LOG_2PI + d * math.log(s) + logdet_sigma + quad / s)
        extra[node] = va * vb / s
        for k in range(d):
            means[node, k] = (vb * means[a, k] + va * means[b, k]) / s
        ops += 1
    root = postorder[n_nodes - 1]
    s = extra[root] + tau0
    quad = 0.0
    for k in range(d):
        for m in range(d):
            quad += (means[root, k] - mu0[k]) * sigma_inv[k, m] * (means[root, m] - mu0[m])
    logp -= 0.5 * (d * LOG_2PI + d * math.log(s) + logdet_sigma + quad / s)
    return logp, ops + 1


def matrix_normal_logpdf_pruning(x, trees, dp: DiffusionParams, unsequenced_count: int = 0, labels=None, return_ops=False):
    """Same density as the dense route, by post-order pruning over each tree.

    With ``return_ops=True`` also returns the number of node merges and
    root/unsequenced closings performed, which is linear in the tip count.
    """
    coords = _coords(x)
    layout = _as_treeset(trees, unsequenced_count, labels)
    n, d = coords.shape
    if layout.n != n or dp.d != d:
        raise ValueError(f"X is {n}x{d} but the trees cover {layout.n} items and Sigma is {dp.d}x{dp.d}")
    if dp.tau0 <= 0.0 or (layout.unsequenced_rows.size and dp.tau_e <= 0.0):
        raise NonSPDError("tau0 and tau_e must be positive for a proper density")
    sigma_inv, logdet_sigma = dp.precision()
    total, ops = 0.0, 0
    for tree, rows in zip(layout.trees, layout.tip_rows):
        postorder, left, right, lengths, tip_slot = tree.flat()
        logp, count = _prune(coords, rows, postorder, left, right, lengths, tip_slot, sigma_inv, logdet_sigma, dp.mu0, dp.tau0)
        total += logp
        ops += count
    if layout.unsequenced_rows.size:
        resid = coords[layout.unsequenced_rows] - dp.mu0
        quad = float(np.sum((resid @ sigma_inv) * resid))
        m = resid.shape[0]
        total -= 0.5 * (m * (d * LOG_2PI + d * math.log(dp.tau_e) + logdet_sigma) + quad / dp.tau_e)
        ops += m
    return (total, ops) if return_ops else total


def prior_gradient(x, v: TreeCovariance, dp: DiffusionParams, sigma_inv=None) -> GradientMatrix:
    """Score of the matrix-normal prior, ``-V^-1 (X - mu0) Sigma^-1``."""
    coords = _coords(x)
    if v.n != coords.shape[0]:
        raise ValueError("X rows do not match the tree covariance")
    if sigma_inv is None:
        sigma_inv, _ = dp.precision()
    return GradientMatrix(-(v.inverse() @ ((coords - dp.mu0) @ sigma_inv)))


def simulate_brownian_tips(tree: Phylogeny, dp: DiffusionParams, seed=None) -> LatentConfiguration:
    """Draw tip locations by diffusing from the root down every branch.

    Rows follow ``tree.tips``. Zero variances give exact copies of the parent.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chol = np.linalg.cholesky(dp.sigma_mat)
    d = dp.d
    values = np.empty((tree.n_nodes, d))
    for node in reversed(tree.postorder):
        par = tree.parent[node]
        if par < 0:
            base, var = dp.mu0, dp.tau0
        else:
            base, var = values[par], tree.branch_length[node]
        step = chol @ rng.standard_normal(d)
        values[node] = base + math.sqrt(var) * step if var > 0.0 else base
    return LatentConfiguration(values[tree.tips])
