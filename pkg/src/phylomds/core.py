"""Truncated-normal MDS model: data types and the serial reference evaluation.

The serial functions here define the numbers every other engine is checked
against. They walk the strict lower triangle in a fixed i-major order so the
result is reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .special import LOG_2PI, inverse_mills, log_ndtr

# kernel modes: full pair term, squared residual only, truncation only
MODE_FULL = 0
MODE_NO_TRUNCATION = 1
MODE_TRUNCATION_ONLY = 2


class DimensionError(ValueError):
    """Inputs describe different item counts or latent dimensions."""


@dataclass
class DissimilarityData:
    """Observed symmetric dissimilarities with an observation mask.

    ``mask[i, j]`` is true where ``values[i, j]`` was observed. The diagonal is
    never observed. Entries of ``values`` outside the mask are ignored and
    stored as zero.
    """

    values: np.ndarray
    mask: np.ndarray
    labels: Optional[Sequence[str]] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, order="C")
        mask = np.array(self.mask, dtype=np.bool_, order="C")
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"dissimilarities must be square, got {values.shape}")
        if mask.shape != values.shape:
            raise ValueError("mask shape does not match dissimilarity shape")
        if np.any(np.diagonal(mask)):
            raise ValueError("diagonal entries cannot be observed")
        if not np.array_equal(mask, mask.T):
            raise ValueError("observation mask must be symmetric")
        values = np.where(mask, values, 0.0)
        if not np.all(np.isfinite(values)):
            raise ValueError("observed dissimilarities must be finite")
        if np.any(values < 0.0):
            raise ValueError("observed dissimilarities must be non-negative")
        if not np.array_equal(values, values.T):
            raise ValueError("dissimilarity matrix must be symmetric")
        if self.labels is not None:
            self.labels = [str(label) for label in self.labels]
            if len(self.labels) != values.shape[0]:
                raise ValueError("one label per item is required")
            if len(set(self.labels)) != len(self.labels):
                raise ValueError("item labels must be unique")
        self.values = values
        self.mask = mask

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def n_observed(self) -> int:
        """Observed pairs with i > j."""
        return int(np.count_nonzero(np.tril(self.mask, -1)))

    @classmethod
    def fully_observed(cls, values, labels=None) -> "DissimilarityData":
        values = np.asarray(values, dtype=np.float64)
        mask = ~np.eye(values.shape[0], dtype=bool)
        return cls(values, mask, labels)

    def with_mask(self, mask) -> "DissimilarityData":
        """Same observations restricted to ``mask & self.mask``."""
        return DissimilarityData(self.values, np.logical_and(self.mask, mask), self.labels)


@dataclass
class LatentConfiguration:
    """N x D latent locations, one row per item."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64, order="C")
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.ndim != 2:
            raise ValueError("latent coordinates must form an N x D matrix")
        if not np.all(np.isfinite(coords)):
            raise ValueError("latent coordinates must be finite")
        self.coords = coords

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    def distances(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


@dataclass(frozen=True)
class MdsParams:
    sigma2: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma2) and self.sigma2 > 0.0):
            raise ValueError(f"sigma2 must be positive and finite, got {self.sigma2}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


@dataclass
class GradientMatrix:
    """d log-likelihood / dX.

    ``singular_pairs`` counts observed pairs that sat at distance zero; their
    contribution is defined as zero because the direction is undefined.
    """

    values: np.ndarray
    singular_pairs: int = field(default=0)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def _coords(x) -> np.ndarray:
    if isinstance(x, LatentConfiguration):
        return x.coords
    return np.ascontiguousarray(x, dtype=np.float64)


def _sigma2(params) -> float:
    if isinstance(params, MdsParams):
        return params.sigma2
    return MdsParams(float(params)).sigma2


def check_dimensions(data: DissimilarityData, coords: np.ndarray):
    if coords.ndim != 2:
        raise DimensionError("latent coordinates must be two-dimensional")
    if data.n != coords.shape[0]:
        raise DimensionError(f"data has {data.n} items but X has {coords.shape[0]} rows")


def pair_term(y: float, delta: float, sigma2: float) -> float:
    """Negative log-likelihood contribution of one pair, without the constant.

    ``(y - delta)**2 / (2 sigma2) + log Phi(delta / sigma)``
    """
    for name, value in (("y", y), ("delta", delta), ("sigma2", sigma2)):
        if not math.isfinite(value):
            raise ValueError(f"{name} must be finite, got {value}")
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    if delta < 0.0:
        raise ValueError("delta is a distance and cannot be negative")
    resid = y - delta
    return resid * resid / (2.0 * sigma2) + log_ndtr(delta / math.sqrt(sigma2))


@njit(nogil=True, cache=True)
def _pair_distance(coords, i, j):
    acc = 0.0
    for k in range(coords.shape[1]):
        diff = coords[i, k] - coords[j, k]
        acc += diff * diff
    return math.sqrt(acc)


@njit(nogil=True, cache=True)
def _serial_sum(values, mask, coords, sigma, mode):
    """Sum of pair terms over observed i > j, plus the observed-pair count."""
    n = values.shape[0]
    inv_two_var = 0.5 / (sigma * sigma)
    total = 0.0
    count = 0
    for i in range(1, n):
        for j in range(i):
            if not mask[i, j]:
                continue
            delta = _pair_distance(coords, i, j)
            count += 1
            if mode == MODE_TRUNCATION_ONLY:
                total += log_ndtr(delta / sigma)
            else:
                resid = values[i, j] - delta
                term = resid * resid * inv_two_var
                if mode == MODE_FULL:
                    term += log_ndtr(delta / sigma)
                total += term
    return total, count


@njit(nogil=True, cache=True)
def _serial_gradient(values, mask, coords, sigma, out):
    """Each observed pair i > j is visited once and pushes equal and opposite
    contributions into rows i and j."""
    n, d = coords.shape
    inv_var = 1.0 / (sigma * sigma)
    singular = 0
    for i in range(n):
        for k in range(d):
            out[i, k] = 0.0
    for i in range(1, n):
        for j in range(i):
            if not mask[i, j]:
                continue
            delta = _pair_distance(coords, i, j)
            if delta == 0.0:
                singular += 1
                continue
            coef = (delta - values[i, j]) * inv_var + inverse_mills(delta / sigma) / sigma
            scale = coef / delta
            for k in range(d):
                step = scale * (coords[i, k] - coords[j, k])
                out[i, k] -= step
                out[j, k] += step
    return singular


def log_likelihood_from_sum(total: float, count: int, sigma2: float) -> float:
    return -0.5 * count * (LOG_2PI + math.log(sigma2)) - total


def log_likelihood_serial(data: DissimilarityData, x, params, truncation: bool = True) -> float:
    """Full log density of the observed dissimilarities, normalising constant included.

    With ``truncation=False`` the ``log Phi`` terms are dropped, which gives
    the ablated model used in benchmarks.
    """
    coords = _coords(x)
    check_dimensions(data, coords)
    sigma2 = _sigma2(params)
    mode = MODE_FULL if truncation else MODE_NO_TRUNCATION
    total, count = _serial_sum(data.values, data.mask, coords, math.sqrt(sigma2), mode)
    return log_likelihood_from_sum(total, count, sigma2)


def truncation_sum_serial(x, params, mask) -> float:
    """Sum of ``log Phi(delta_ij / sigma)`` over observed pairs i > j."""
    coords = _coords(x)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if mask.shape != (coords.shape[0], coords.shape[0]):
        raise DimensionError("mask must be N x N for N latent rows")
    sigma2 = _sigma2(params)
    total, _ = _serial_sum(zero_values(mask.shape), mask, coords, math.sqrt(sigma2), MODE_TRUNCATION_ONLY)
    return total


def zero_values(shape):
    """Read-only N x N view of zeros; truncation-only kernels never read values."""
    return np.lib.stride_tricks.as_strided(np.zeros(1), shape=shape, strides=(0, 0), writeable=False)


def log_likelihood_gradient_serial(data: DissimilarityData, x, params) -> GradientMatrix:
    coords = _coords(x)
    check_dimensions(data, coords)
    sigma2 = _sigma2(params)
    out = np.empty_like(coords)
    singular = _serial_gradient(data.values, data.mask, coords, math.sqrt(sigma2), out)
    return GradientMatrix(out, int(singular))
