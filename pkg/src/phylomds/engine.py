"""Interchangeable evaluation engines for the MDS likelihood and gradient.

Every backend evaluates the same fused transformation-reduction: pair terms
are accumulated straight into partial sums and no N x N intermediate is ever
written. Backends differ only in how the pair grid is partitioned:

``serial``
    delegates to :mod:`phylomds.core` (bit-identical reference).
``vectorized``
    one thread; distances and log Phi evaluated in packets of ``lane_width``
    with one partial sum per lane.
``threaded`` / ``threaded_vectorized``
    contiguous column blocks (likelihood) or row blocks (gradient) run on the
    engine's own worker pool; per-block partials are combined by a binary
    tree reduction.
``tiled_device``
    B x B work-groups with an in-group binary-tree reduction (likelihood) and
    B strided lanes per target row (gradient), dispatched over an emulated
    data-parallel device backed by the worker pool.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numba import njit

from . import core
from .core import (
    MODE_FULL,
    MODE_NO_TRUNCATION,
    MODE_TRUNCATION_ONLY,
    DissimilarityData,
    GradientMatrix,
    _pair_distance,
    check_dimensions,
    log_likelihood_from_sum,
    zero_values,
)
from .special import batched_inverse_mills, batched_log_ndtr, inverse_mills, log_ndtr


class Backend(str, Enum):
    SERIAL = "serial"
    VECTORIZED = "vectorized"
    THREADED = "threaded"
    THREADED_VECTORIZED = "threaded_vectorized"
    TILED_DEVICE = "tiled_device"


class CapabilityError(RuntimeError):
    """The requested backend cannot run on this host."""


LANE_WIDTHS = (1, 2, 4, 8)
TILE_SIZES = (8, 16, 32, 64, 128, 256)
DEVICES = ("emulated",)


@dataclass(frozen=True)
class EngineConfig:
    backend: Backend = Backend.SERIAL
    thread_count: int = 1
    lane_width: int = 4
    tile_size_b: int = 16
    gradient_tile_b: int = 128
    device: str = "emulated"

    def __post_init__(self):
        object.__setattr__(self, "backend", Backend(self.backend))
        if int(self.thread_count) < 1:
            raise ValueError("thread_count must be at least 1")
        object.__setattr__(self, "thread_count", int(self.thread_count))
        if self.lane_width not in LANE_WIDTHS:
            raise ValueError(f"lane_width must be one of {LANE_WIDTHS}")
        for name in ("tile_size_b", "gradient_tile_b"):
            if getattr(self, name) not in TILE_SIZES:
                raise ValueError(f"{name} must be one of {TILE_SIZES}")

    def describe(self) -> str:
        parts = [self.backend.value]
        if self.backend in (Backend.THREADED, Backend.THREADED_VECTORIZED, Backend.TILED_DEVICE):
            parts.append(f"threads={self.thread_count}")
        if self.backend in (Backend.VECTORIZED, Backend.THREADED_VECTORIZED):
            parts.append(f"lanes={self.lane_width}")
        if self.backend is Backend.TILED_DEVICE:
            parts.append(f"B={self.tile_size_b}/{self.gradient_tile_b}")
        return ",".join(parts)


class PaddedLatentBuffer:
    """Row-contiguous copy of X with each row zero-padded to a lane multiple."""

    def __init__(self, coords: np.ndarray, lane_width: int):
        n, d = coords.shape
        self.n = n
        self.d = d
        self.padded_d = -(-d // lane_width) * lane_width
        self.storage = np.zeros((n, self.padded_d))
        self.storage[:, :d] = coords

    def update(self, coords: np.ndarray):
        self.storage[:, : self.d] = coords

    @property
    def nbytes(self) -> int:
        return self.storage.nbytes


# ---------------------------------------------------------------------------
# kernels


@njit(nogil=True, cache=True)
def _tree_reduce(buf, size):
    # size is a power of two; reduces buf[:size] in place
    stride = size // 2
    while stride >= 1:
        for k in range(stride):
            buf[k] += buf[k + stride]
        stride //= 2
    return buf[0]


@njit(nogil=True, cache=True)
def _column_block(values, mask, coords, sigma, mode, j0, j1):
    # pairs (i, j) with i > j for j in [j0, j1); reads row j, which holds the
    # same observations as column j and is contiguous
    n = values.shape[0]
    inv_two_var = 0.5 / (sigma * sigma)
    total = 0.0
    count = 0
    for j in range(j0, j1):
        for i in range(j + 1, n):
            if not mask[j, i]:
                continue
            delta = _pair_distance(coords, i, j)
            count += 1
            if mode == MODE_TRUNCATION_ONLY:
                total += log_ndtr(delta / sigma)
            else:
                resid = values[j, i] - delta
                term = resid * resid * inv_two_var
                if mode == MODE_FULL:
                    term += log_ndtr(delta / sigma)
                total += term
    return total, count


@njit(nogil=True, cache=True)
def _column_block_packets(values, mask, xpad, sigma, mode, j0, j1, lane):
    n = values.shape[0]
    dpad = xpad.shape[1]
    inv_two_var = 0.5 / (sigma * sigma)
    z = np.zeros(lane)
    logphi = np.empty(lane)
    resid = np.zeros(lane)
    live = np.zeros(lane, dtype=np.bool_)
    lane_acc = np.zeros(lane)
    count = 0
    for j in range(j0, j1):
        i = j + 1
        while i < n:
            for l in range(lane):
                ii = i + l
                if ii < n and mask[j, ii]:
                    acc = 0.0
                    for k in range(dpad):
                        diff = xpad[ii, k] - xpad[j, k]
                        acc += diff * diff
                    delta = math.sqrt(acc)
                    z[l] = delta / sigma
                    resid[l] = values[j, ii] - delta
                    live[l] = True
                    count += 1
                else:
                    z[l] = 0.0
                    resid[l] = 0.0
                    live[l] = False
            if mode != MODE_NO_TRUNCATION:
                batched_log_ndtr(z, logphi)
            for l in range(lane):
                if live[l]:
                    if mode == MODE_TRUNCATION_ONLY:
                        lane_acc[l] += logphi[l]
                    elif mode == MODE_FULL:
                        lane_acc[l] += resid[l] * resid[l] * inv_two_var + logphi[l]
                    else:
                        lane_acc[l] += resid[l] * resid[l] * inv_two_var
            i += lane
    total = 0.0
    for l in range(lane):
        total += lane_acc[l]
    return total, count


@njit(nogil=True, cache=True)
def _gradient_rows(values, mask, coords, sigma, out, i0, i1):
    n, d = coords.shape
    inv_var = 1.0 / (sigma * sigma)
    singular = 0
    for i in range(i0, i1):
        for k in range(d):
            out[i, k] = 0.0
        for j in range(n):
            if j == i or not mask[i, j]:
                continue
            delta = _pair_distance(coords, i, j)
            if delta == 0.0:
                singular += 1
                continue
            coef = (delta - values[i, j]) * inv_var + inverse_mills(delta / sigma) / sigma
            scale = coef / delta
            for k in range(d):
                out[i, k] -= scale * (coords[i, k] - coords[j, k])
    return singular


@njit(nogil=True, cache=True)
def _gradient_rows_packets(values, mask, xpad, d, sigma, out, i0, i1, lane):
    n = values.shape[0]
    dpad = xpad.shape[1]
    inv_var = 1.0 / (sigma * sigma)
    z = np.zeros(lane)
    mills = np.empty(lane)
    deltas = np.zeros(lane)
    ys = np.zeros(lane)
    live = np.zeros(lane, dtype=np.bool_)
    lane_acc = np.zeros((lane, dpad))
    singular = 0
    for i in range(i0, i1):
        lane_acc[:, :] = 0.0
        j = 0
        while j < n:
            for l in range(lane):
                jj = j + l
                live[l] = False
                z[l] = 1.0
                if jj < n and jj != i and mask[i, jj]:
                    acc = 0.0
                    for k in range(dpad):
                        diff = xpad[i, k] - xpad[jj, k]
                        acc += diff * diff
                    delta = math.sqrt(acc)
                    if delta == 0.0:
                        singular += 1
                    else:
                        deltas[l] = delta
                        ys[l] = values[i, jj]
                        z[l] = delta / sigma
                        live[l] = True
            batched_inverse_mills(z, mills)
            for l in range(lane):
                if live[l]:
                    coef = (deltas[l] - ys[l]) * inv_var + mills[l] / sigma
                    scale = coef / deltas[l]
                    jj = j + l
                    for k in range(dpad):
                        lane_acc[l, k] -= scale * (xpad[i, k] - xpad[jj, k])
            j += lane
        for k in range(d):
            total = 0.0
            for l in range(lane):
                total += lane_acc[l, k]
            out[i, k] = total
    return singular


@njit(nogil=True, cache=True)
def _likelihood_work_groups(values, mask, coords, sigma, mode, b, row_partials, row_counts, g0, g1):
    # work-groups (I, J) for tile rows I in [g0, g1); the full grid is walked
    # and entries with i <= j or outside the matrix are zero inside the tile
    n = values.shape[0]
    n_tiles = (n + b - 1) // b
    inv_two_var = 0.5 / (sigma * sigma)
    tile = np.empty(b * b)
    tile_partials = np.empty(n_tiles)
    for big_i in range(g0, g1):
        row_count = 0
        for big_j in range(n_tiles):
            for li in range(b):
                i = big_i * b + li
                for lj in range(b):
                    j = big_j * b + lj
                    r = 0.0
                    if i < n and j < n and i > j and mask[i, j]:
                        delta = _pair_distance(coords, i, j)
                        row_count += 1
                        if mode == MODE_TRUNCATION_ONLY:
                            r = log_ndtr(delta / sigma)
                        else:
                            resid = values[i, j] - delta
                            r = resid * resid * inv_two_var
                            if mode == MODE_FULL:
                                r += log_ndtr(delta / sigma)
                    tile[li * b + lj] = r
            tile_partials[big_j] = _tree_reduce(tile, b * b)
        acc = 0.0
        for big_j in range(n_tiles):
            acc += tile_partials[big_j]
        row_partials[big_i] = acc
        row_counts[big_i] = row_count


@njit(nogil=True, cache=True)
def _gradient_work_groups(values, mask, coords, sigma, out, b, i0, i1):
    # one work-group of b lanes per target row; lane J strides j = J, J+b, ...
    n, d = coords.shape
    inv_var = 1.0 / (sigma * sigma)
    lanes = np.empty((d, b))
    singular = 0
    for i in range(i0, i1):
        lanes[:, :] = 0.0
        for lane in range(b):
            j = lane
            while j < n:
                if j != i and mask[i, j]:
                    delta = _pair_distance(coords, i, j)
                    if delta == 0.0:
                        singular += 1
                    else:
                        coef = (delta - values[i, j]) * inv_var + inverse_mills(delta / sigma) / sigma
                        scale = coef / delta
                        for k in range(d):
                            lanes[k, lane] -= scale * (coords[i, k] - coords[j, k])
                j += b
        for k in range(d):
            out[i, k] = _tree_reduce(lanes[k], b)
    return singular


# ---------------------------------------------------------------------------


def tiled_reduction(partials) -> float:
    """Pairwise binary-tree sum, zero-padding to the next power of two."""
    values = np.asarray(partials, dtype=np.float64).ravel()
    if values.size == 0:
        return 0.0
    size = 1 << (values.size - 1).bit_length()
    buf = np.zeros(size)
    buf[: values.size] = values
    return float(_tree_reduce(buf, size))


def _even_splits(n: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, n)) if n > 0 else 1
    bounds = np.linspace(0, n, parts + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _column_splits(n: int, parts: int) -> list[tuple[int, int]]:
    # column j carries n - 1 - j pairs; balance blocks by pair count
    if n < 2 or parts <= 1:
        return [(0, n)]
    per_column = np.arange(n - 1, -1, -1)
    cumulative = np.cumsum(per_column)
    targets = cumulative[-1] * np.arange(1, parts) / parts
    cuts = np.searchsorted(cumulative, targets, side="left") + 1
    bounds = np.unique(np.concatenate(([0], cuts, [n])))
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


class EmulatedDevice:
    """Data-parallel dispatch of work-groups onto a host thread pool."""

    def __init__(self, pool: ThreadPoolExecutor, workers: int):
        self.pool = pool
        self.workers = workers

    def launch(self, kernel, n_groups: int, *args):
        ranges = _even_splits(n_groups, self.workers)
        if len(ranges) == 1:
            return [kernel(*args, *ranges[0])]
        futures = [self.pool.submit(kernel, *args, g0, g1) for g0, g1 in ranges]
        return [f.result() for f in futures]


class Engine:
    """Likelihood, truncation and gradient evaluation on one backend.

    The engine owns its worker pool; calls block until the result is ready
    and may be issued concurrently on shared read-only inputs.
    """

    def __init__(self, cfg: EngineConfig | None = None):
        self.cfg = cfg or EngineConfig()
        if self.cfg.device not in DEVICES:
            raise CapabilityError(
                f"device {self.cfg.device!r} is not available on this host; "
                f"supported devices: {', '.join(DEVICES)}"
            )
        self._pool = None
        self.workspace_bytes = 0

    # pool management ----------------------------------------------------
    @property
    def threaded(self) -> bool:
        return self.cfg.backend in (Backend.THREADED, Backend.THREADED_VECTORIZED, Backend.TILED_DEVICE)

    def _executor(self) -> ThreadPoolExecutor:
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.cfg.thread_count, thread_name_prefix="mds-engine")
        return self._pool

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _map(self, fn, ranges):
        if len(ranges) == 1 or self.cfg.thread_count == 1:
            return [fn(a, b) for a, b in ranges]
        pool = self._executor()
        futures = [pool.submit(fn, a, b) for a, b in ranges]
        return [f.result() for f in futures]

    # core reductions ----------------------------------------------------
    def _pair_sum(self, values, mask, coords, sigma, mode):
        cfg = self.cfg
        backend = cfg.backend
        n = coords.shape[0]
        if backend is Backend.SERIAL:
            return core._serial_sum(values, mask, coords, sigma, mode)
        if backend is Backend.TILED_DEVICE:
            b = cfg.tile_size_b
            n_tiles = -(-n // b)
            row_partials = np.zeros(n_tiles)
            row_counts = np.zeros(n_tiles, dtype=np.int64)
            self.workspace_bytes = row_partials.nbytes + row_counts.nbytes + (b * b + n_tiles) * 8 * cfg.thread_count
            device = EmulatedDevice(self._executor(), cfg.thread_count)
            device.launch(_likelihood_work_groups, n_tiles, values, mask, coords, sigma, mode, b, row_partials, row_counts)
            total = 0.0
            for partial in row_partials:
                total += partial
            return total, int(row_counts.sum())

        ranges = _column_splits(n, cfg.thread_count if self.threaded else 1)
        if backend in (Backend.VECTORIZED, Backend.THREADED_VECTORIZED):
            buf = PaddedLatentBuffer(coords, cfg.lane_width)
            lane = cfg.lane_width
            self.workspace_bytes = buf.nbytes + 5 * lane * 8 * len(ranges)
            results = self._map(
                lambda a, b: _column_block_packets(values, mask, buf.storage, sigma, mode, a, b, lane), ranges
            )
        else:
            self.workspace_bytes = 0
            results = self._map(lambda a, b: _column_block(values, mask, coords, sigma, mode, a, b), ranges)
        partials = [r[0] for r in results]
        self.workspace_bytes += 8 * (1 << max(len(partials) - 1, 0).bit_length())
        return tiled_reduction(partials), sum(r[1] for r in results)

    # public evaluation --------------------------------------------------
    def log_likelihood(self, data: DissimilarityData, x, params, truncation: bool = True) -> float:
        coords = core._coords(x)
        check_dimensions(data, coords)
        sigma2 = core._sigma2(params)
        if self.cfg.backend is Backend.SERIAL:
            return core.log_likelihood_serial(data, coords, sigma2, truncation=truncation)
        mode = MODE_FULL if truncation else MODE_NO_TRUNCATION
        total, count = self._pair_sum(data.values, data.mask, coords, math.sqrt(sigma2), mode)
        return log_likelihood_from_sum(total, count, sigma2)

    def truncation_sum(self, x, params, mask) -> float:
        coords = core._coords(x)
        mask = np.ascontiguousarray(mask, dtype=np.bool_)
        if mask.shape != (coords.shape[0], coords.shape[0]):
            raise core.DimensionError("mask must be N x N for N latent rows")
        sigma2 = core._sigma2(params)
        if self.cfg.backend is Backend.SERIAL:
            return core.truncation_sum_serial(coords, sigma2, mask)
        total, _ = self._pair_sum(zero_values(mask.shape), mask, coords, math.sqrt(sigma2), MODE_TRUNCATION_ONLY)
        return total

    def gradient(self, data: DissimilarityData, x, params) -> GradientMatrix:
        coords = core._coords(x)
        check_dimensions(data, coords)
        sigma2 = core._sigma2(params)
        cfg = self.cfg
        if cfg.backend is Backend.SERIAL:
            return core.log_likelihood_gradient_serial(data, coords, sigma2)
        sigma = math.sqrt(sigma2)
        n, d = coords.shape
        out = np.empty((n, d))
        values, mask = data.values, data.mask
        if cfg.backend is Backend.TILED_DEVICE:
            b = cfg.gradient_tile_b
            self.workspace_bytes = out.nbytes + d * b * 8 * cfg.thread_count
            device = EmulatedDevice(self._executor(), cfg.thread_count)
            singular = device.launch(_gradient_work_groups, n, values, mask, coords, sigma, out, b)
        else:
            ranges = _even_splits(n, cfg.thread_count if self.threaded else 1)
            if cfg.backend in (Backend.VECTORIZED, Backend.THREADED_VECTORIZED):
                buf = PaddedLatentBuffer(coords, cfg.lane_width)
                lane = cfg.lane_width
                self.workspace_bytes = out.nbytes + buf.nbytes + (5 + buf.padded_d) * lane * 8 * len(ranges)
                singular = self._map(
                    lambda a, b: _gradient_rows_packets(values, mask, buf.storage, d, sigma, out, a, b, lane), ranges
                )
            else:
                self.workspace_bytes = out.nbytes
                singular = self._map(lambda a, b: _gradient_rows(values, mask, coords, sigma, out, a, b), ranges)
        # every singular pair is seen once from each end
        return GradientMatrix(out, int(sum(singular)) // 2)


def host_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def engine_log_likelihood(cfg: EngineConfig, data, x, params, truncation: bool = True) -> float:
    with Engine(cfg) as engine:
        return engine.log_likelihood(data, x, params, truncation=truncation)


def engine_gradient(cfg: EngineConfig, data, x, params) -> GradientMatrix:
    with Engine(cfg) as engine:
        return engine.gradient(data, x, params)


def engine_truncation_sum(cfg: EngineConfig, x, params, mask) -> float:
    with Engine(cfg) as engine:
        return engine.truncation_sum(x, params, mask)
