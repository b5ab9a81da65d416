"""K-fold cross-validation over observed dissimilarities.

Held-out pairs are scored by the log pointwise predictive density

    lpd = sum_f sum_{(i,j) in fold f} log( (1/S_f) sum_s p(y_ij | draw s) )

where draw s comes from a chain trained with fold f masked out. Larger lpd
is better; candidate latent dimensions are ranked by it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import DissimilarityData, _coords
from .special import LOG_2PI, log_ndtr, log_ndtr_ufunc


class FoldError(ValueError):
    pass


def assign_folds(count: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random partition of ``count`` items into ``k`` folds.

    Fold sizes differ by at most one: a random permutation is dealt out
    round-robin.
    """
    if k < 2:
        raise FoldError("at least two folds are needed")
    if count < k:
        raise FoldError(f"{count} observations cannot fill {k} folds")
    dtype = np.uint8 if k <= 255 else np.int32
    folds = np.empty(count, dtype=dtype)
    folds[rng.permutation(count)] = np.arange(count) % k
    return folds


@dataclass
class FoldPlan:
    """Assignment of every observed pair (i > j) to one fold.

    ``pairs`` lists the pairs in row-major order of the lower triangle and
    ``folds[p]`` is the fold of ``pairs[p]``.
    """

    k: int
    seed: int
    n: int
    pairs: np.ndarray
    folds: np.ndarray

    def sizes(self) -> np.ndarray:
        return np.bincount(self.folds, minlength=self.k)

    def held_out_pairs(self, fold: int) -> np.ndarray:
        self._check(fold)
        return self.pairs[self.folds == fold]

    def training_mask(self, fold: int, base_mask=None) -> np.ndarray:
        """Observation mask with fold ``fold`` removed."""
        self._check(fold)
        mask = np.zeros((self.n, self.n), dtype=bool)
        keep = self.pairs[self.folds != fold]
        mask[keep[:, 0], keep[:, 1]] = True
        mask[keep[:, 1], keep[:, 0]] = True
        if base_mask is not None:
            mask &= base_mask
        return mask

    def training_data(self, data: DissimilarityData, fold: int) -> DissimilarityData:
        return data.with_mask(self.training_mask(fold))

    def _check(self, fold):
        if not 0 <= fold < self.k:
            raise FoldError(f"fold {fold} out of range for k={self.k}")

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "seed": self.seed, "n": self.n, "pairs": self.pairs.tolist(), "folds": self.folds.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        raw = json.loads(text)
        pairs = np.asarray(raw["pairs"], dtype=np.int64).reshape(-1, 2)
        folds = np.asarray(raw["folds"], dtype=np.int64)
        if folds.size != pairs.shape[0]:
            raise FoldError("fold plan has mismatched pair and fold lists")
        return cls(int(raw["k"]), int(raw["seed"]), int(raw["n"]), pairs, folds)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text())

    def matches(self, data: DissimilarityData) -> bool:
        """True when this plan covers exactly the observed pairs of ``data``."""
        return self.n == data.n and np.array_equal(self.pairs, observed_pairs(data))


def observed_pairs(data: DissimilarityData) -> np.ndarray:
    i, j = np.nonzero(np.tril(data.mask, -1))
    return np.column_stack([i, j]).astype(np.int64)


def make_folds(data: DissimilarityData, k: int, seed: int) -> FoldPlan:
    pairs = observed_pairs(data)
    folds = assign_folds(pairs.shape[0], k, np.random.default_rng(seed))
    return FoldPlan(k, seed, data.n, pairs, folds)


def held_out_log_density(y: float, delta: float, sigma2: float) -> float:
    """Truncated-normal log density of one dissimilarity given its latent distance."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if y < 0:
        raise ValueError(f"dissimilarities are non-negative, got {y}")
    sigma = math.sqrt(sigma2)
    return -0.5 * (LOG_2PI + math.log(sigma2)) - (y - delta) ** 2 / (2 * sigma2) - log_ndtr(delta / sigma)


def held_out_log_densities(y, delta, sigma2: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if np.any(y < 0):
        raise ValueError("dissimilarities are non-negative")
    return -0.5 * (LOG_2PI + math.log(sigma2)) - (y - delta) ** 2 / (2 * sigma2) - log_ndtr_ufunc(delta / math.sqrt(sigma2))


def log_mean_exp(values, axis=0):
    values = np.asarray(values, dtype=np.float64)
    return logsumexp(values, axis=axis) - math.log(values.shape[axis])


@dataclass
class LpdReport:
    """Held-out log predictive density for one candidate model."""

    per_fold: list
    n_held_out: int
    dimension: int | None = None

    @property
    def total(self) -> float:
        return float(math.fsum(self.per_fold))

    @property
    def mean_per_pair(self) -> float:
        return self.total / self.n_held_out


def fold_lpd(data: DissimilarityData, pairs: np.ndarray, draws: Iterable) -> float:
    """Sum over held-out pairs of log-mean-exp across posterior draws.

    ``draws`` yields ``(x, sigma2)`` tuples.
    """
    y = data.values[pairs[:, 0], pairs[:, 1]]
    rows = []
    for x, sigma2 in draws:
        coords = _coords(x)
        diff = coords[pairs[:, 0]] - coords[pairs[:, 1]]
        rows.append(held_out_log_densities(y, np.sqrt(np.einsum("pk,pk->p", diff, diff)), float(sigma2)))
    if not rows:
        raise FoldError("a fold has no posterior draws")
    return float(math.fsum(log_mean_exp(np.array(rows), axis=0)))


def lpd_hat(plan: FoldPlan, draws_per_fold: Sequence[Iterable], data: DissimilarityData, dimension=None) -> LpdReport:
    if len(draws_per_fold) != plan.k:
        raise FoldError(f"expected draws for {plan.k} folds, got {len(draws_per_fold)}")
    per_fold = [fold_lpd(data, plan.held_out_pairs(f), draws) for f, draws in enumerate(draws_per_fold)]
    return LpdReport(per_fold, int(plan.pairs.shape[0]), dimension)


@dataclass
class CvReport:
    """lpd for every candidate dimension; the selected one maximises it."""

    reports: dict = field(default_factory=dict)

    @property
    def per_dimension(self) -> dict:
        return {d: r.total for d, r in sorted(self.reports.items())}

    @property
    def selected(self) -> int:
        return max(self.per_dimension.items(), key=lambda item: item[1])[0]

    def to_csv(self) -> str:
        k = max(len(r.per_fold) for r in self.reports.values())
        lines = ["dimension,lpd_hat,mean_per_pair,n_held_out," + ",".join(f"fold_{f}" for f in range(k))]
        for d, r in sorted(self.reports.items()):
            lines.append(",".join([str(d), repr(r.total), repr(r.mean_per_pair), str(r.n_held_out), *(repr(v) for v in r.per_fold)]))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        out = ["latent dimension   lpd_hat            per held-out pair"]
        for d, r in sorted(self.reports.items()):
            out.append(f"{d:>16d}   {r.total:<18.6f} {r.mean_per_pair:.6g}")
        out.append(f"selected dimension: {self.selected} (largest lpd_hat)")
        return "\n".join(out)


def cross_validate(data: DissimilarityData, plan: FoldPlan, dims: Sequence[int], fit: Callable[[DissimilarityData, int, int], Iterable]) -> CvReport:
    """Fit every (dimension, fold) and score held-out pairs.

    ``fit(training_data, dimension, fold)`` returns ``(x, sigma2)`` draws.
    Training data carries only the fold's training mask, so held-out values
    cannot reach the fit.
    """
    report = CvReport()
    for d in dims:
        draws = [fit(plan.training_data(data, f), d, f) for f in range(plan.k)]
        report.reports[d] = lpd_hat(plan, draws, data, d)
    return report


def chain_draws(log, burn_in_fraction: float = 0.0):
    """``(x, sigma2)`` pairs from a chain log, optionally dropping the start."""
    start = int(len(log.x_snapshots) * burn_in_fraction)
    return list(zip(log.x_snapshots[start:], log.sigma2[start:]))
