"""Timing harness for the likelihood engines.

Data are distances between standard-normal latent points; each engine is
timed on the likelihood, its gradient, and the likelihood without the
truncation term. Every row carries the host descriptor so numbers from
different machines are never compared by accident.
"""

from __future__ import annotations

import csv
import io
import math
import platform
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DissimilarityData, LatentConfiguration, MdsParams
from .engine import Backend, CapabilityError, Engine, EngineConfig, host_cores

# doubles per SIMD register for the widest instruction set the CPU reports
_LANE_FLAGS = (("avx512f", 8), ("avx2", 4), ("avx", 4), ("sse2", 2))


def host_lane_width(cpuinfo_path="/proc/cpuinfo") -> int:
    try:
        with open(cpuinfo_path) as fh:
            for line in fh:
                if line.startswith("flags"):
                    flags = set(line.split(":", 1)[1].split())
                    for flag, width in _LANE_FLAGS:
                        if flag in flags:
                            return width
                    break
    except OSError:
        pass
    return 1


def host_descriptor() -> dict:
    return {
        "host_cores": host_cores(),
        "host_lane_width": host_lane_width(),
        "host_machine": platform.machine(),
        "host_python": platform.python_version(),
    }


def synthetic_problem(n: int, d: int, seed: int = 0):
    """Distances between Gaussian points, evaluated at a second Gaussian draw."""
    if n < 2:
        raise ValueError("benchmark sizes must be at least 2")
    rng = np.random.default_rng(seed)
    truth = LatentConfiguration(rng.standard_normal((n, d)))
    data = DissimilarityData.fully_observed(truth.distances())
    x = rng.standard_normal((n, d))
    return data, x, MdsParams(1.0)


def time_call(fn, repeats: int) -> list[float]:
    fn()  # compile and warm caches outside the timed region
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return times


@dataclass
class Timing:
    mean: float
    sd: float

    @classmethod
    def of(cls, times):
        return cls(statistics.fmean(times), statistics.stdev(times) if len(times) > 1 else 0.0)


MEASUREMENTS = ("likelihood", "gradient", "no_truncation")


def time_engine(cfg: EngineConfig, data, x, params, repeats: int, kinds=MEASUREMENTS) -> dict:
    with Engine(cfg) as engine:
        calls = {
            "likelihood": lambda: engine.log_likelihood(data, x, params),
            "gradient": lambda: engine.gradient(data, x, params),
            "no_truncation": lambda: engine.log_likelihood(data, x, params, truncation=False),
        }
        return {kind: Timing.of(time_call(calls[kind], repeats)) for kind in kinds}


COLUMNS = [
    "host_cores", "host_lane_width", "host_machine", "host_python",
    "n", "d", "engine", "repeats",
    "likelihood_mean", "likelihood_sd", "gradient_mean", "gradient_sd",
    "no_truncation_mean", "no_truncation_sd", "truncation_fraction",
    "speedup_likelihood", "speedup_gradient", "speedup_no_truncation", "error",
]


def run_benchmark(sizes: Sequence[int], dims: Sequence[int], engines: Sequence[EngineConfig], repeats: int = 10, seed: int = 0) -> list[dict]:
    """One row per (N, D, engine). Speedups are relative to the serial engine,
    which is timed separately when it is not among ``engines``."""
    host = host_descriptor()
    rows = []
    for n in sizes:
        for d in dims:
            data, x, params = synthetic_problem(n, d, seed)
            results = []
            for cfg in engines:
                try:
                    results.append((cfg, time_engine(cfg, data, x, params, repeats), ""))
                except (CapabilityError, ValueError) as exc:
                    results.append((cfg, None, str(exc)))
            baseline = next((r for cfg, r, _ in results if r is not None and cfg.backend is Backend.SERIAL), None)
            if baseline is None and any(r is not None for _, r, _ in results):
                baseline = time_engine(EngineConfig(Backend.SERIAL), data, x, params, repeats)
            for cfg, result, error in results:
                row = dict(host, n=n, d=d, engine=cfg.describe(), repeats=repeats, error=error)
                if result is not None:
                    for key, timing in result.items():
                        row[f"{key}_mean"] = timing.mean
                        row[f"{key}_sd"] = timing.sd
                        row[f"speedup_{key}"] = baseline[key].mean / timing.mean
                    row["truncation_fraction"] = max(0.0, 1.0 - result["no_truncation"].mean / result["likelihood"].mean)
                rows.append(row)
    return rows


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n", restval="")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def loglog_slope(sizes, times) -> float:
    """Least-squares slope of log(time) against log(N)."""
    slope, _ = np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)), 1)
    return float(slope)


def thread_scaling(n: int, d: int, max_threads: int, repeats: int = 5, seed: int = 0) -> list[tuple[int, float]]:
    """Mean threaded likelihood time for k = 1 .. max_threads."""
    data, x, params = synthetic_problem(n, d, seed)
    out = []
    for k in range(1, max_threads + 1):
        timing = time_engine(EngineConfig(Backend.THREADED, thread_count=k), data, x, params, repeats, ("likelihood",))
        out.append((k, timing["likelihood"].mean))
    return out


def truncation_share(n: int, d: int, repeats: int = 5, seed: int = 0) -> float:
    """Fraction of serial likelihood time spent on the truncation term."""
    data, x, params = synthetic_problem(n, d, seed)
    result = time_engine(EngineConfig(Backend.SERIAL), data, x, params, repeats, ("likelihood", "no_truncation"))
    return 1.0 - result["no_truncation"].mean / result["likelihood"].mean


def serial_scaling(sizes: Sequence[int], d: int = 2, repeats: int = 5, seed: int = 0) -> tuple[list[float], float]:
    times = []
    for n in sizes:
        data, x, params = synthetic_problem(n, d, seed)
        times.append(time_engine(EngineConfig(Backend.SERIAL), data, x, params, repeats, ("likelihood",))["likelihood"].mean)
    return times, loglog_slope(sizes, times)


def is_monotone_decreasing(values) -> bool:
    return all(b < a for a, b in zip(values, values[1:])) and not any(math.isnan(v) for v in values)
