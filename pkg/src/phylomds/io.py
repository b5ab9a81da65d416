"""File formats and run configuration.

Distance matrices are headered CSV files: the first row lists item labels
after an empty corner cell, each following row starts with its item label,
and a blank cell marks an unobserved pair. The diagonal is written as 0 and
never counts as observed.

Run configuration is an INI file read with :mod:`configparser`; see
``RunConfig.from_file`` and the README for the keys and defaults.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import DissimilarityData
from .engine import EngineConfig
from .sampler import BLOCKS, DEFAULT_SCHEDULE, ConfigError


class FormatError(ValueError):
    """An input file is malformed."""


def read_distance_csv(path) -> DissimilarityData:
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]
    if not rows:
        raise FormatError(f"{path}: empty distance file")
    labels = [cell.strip() for cell in rows[0][1:]]
    n = len(labels)
    if n == 0:
        raise FormatError(f"{path}: header lists no items")
    if len(rows) - 1 != n:
        raise FormatError(f"{path}: header lists {n} items but there are {len(rows) - 1} data rows")
    values = np.zeros((n, n))
    mask = np.zeros((n, n), dtype=bool)
    for i, row in enumerate(rows[1:]):
        if row[0].strip() != labels[i]:
            raise FormatError(f"{path}: row {i + 2} is labelled {row[0]!r}, expected {labels[i]!r}")
        cells = row[1:]
        if len(cells) != n:
            raise FormatError(f"{path}: row {labels[i]!r} has {len(cells)} entries, expected {n}")
        for j, cell in enumerate(cells):
            cell = cell.strip()
            if not cell or i == j:
                continue
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise FormatError(f"{path}: entry ({labels[i]}, {labels[j]}) is not a number: {cell!r}") from None
            mask[i, j] = True
    if not np.array_equal(mask, mask.T) or not np.array_equal(values, values.T):
        bad = np.argwhere((mask != mask.T) | (values != values.T))
        i, j = bad[0]
        raise FormatError(f"{path}: matrix is not symmetric at ({labels[i]}, {labels[j]})")
    try:
        return DissimilarityData(values, mask, labels)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_distance_csv(path, data: DissimilarityData):
    labels = data.labels or [f"item{i + 1}" for i in range(data.n)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["", *labels])
        for i in range(data.n):
            cells = []
            for j in range(data.n):
                if i == j:
                    cells.append("0")
                elif data.mask[i, j]:
                    cells.append(repr(float(data.values[i, j])))
                else:
                    cells.append("")
            writer.writerow([labels[i], *cells])


def write_matrix_csv(path, matrix, row_labels, col_labels):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["", *col_labels])
        for label, row in zip(row_labels, np.asarray(matrix)):
            writer.writerow([label, *(repr(float(v)) for v in row)])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [r[0] for r in rows[1:]], np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def _floats(text: str) -> list[float]:
    return [float(tok) for tok in text.replace(",", " ").split()]


def _matrix(text: str, d: int, what: str) -> np.ndarray:
    """``identity``, a scalar multiple of I, or D*D row-major entries."""
    text = text.strip()
    if text == "identity":
        return np.eye(d)
    vals = _floats(text)
    if len(vals) == 1:
        return vals[0] * np.eye(d)
    if len(vals) != d * d:
        raise ConfigError(f"{what} needs 1 or {d * d} numbers, got {len(vals)}")
    return np.array(vals).reshape(d, d)


@dataclass
class ModelConfig:
    latent_dim: int = 2
    mu0: list = field(default_factory=lambda: [0.0])
    tau0: float = 1.0
    tau_e: float = 1.0
    d0: Optional[float] = None
    t0: str = "identity"
    s0: float = 1.0
    r0: float = 1.0

    def d0_value(self) -> float:
        # d0 = D + 2 with T0 = I gives prior mean E[Sigma] = I
        return float(self.latent_dim + 2) if self.d0 is None else float(self.d0)

    def t0_matrix(self) -> np.ndarray:
        return _matrix(self.t0, self.latent_dim, "t0")

    def mu0_vector(self) -> np.ndarray:
        mu = np.asarray(self.mu0, dtype=np.float64)
        if mu.size not in (1, self.latent_dim):
            raise ConfigError(f"mu0 needs 1 or {self.latent_dim} numbers")
        return np.broadcast_to(mu, (self.latent_dim,)).copy()


@dataclass
class SamplerConfig:
    iterations: int = 1000
    thin: int = 10
    seed: int = 1
    warmup: int = 500
    step_size: float = 0.01
    leapfrog_steps: int = 10
    mass: str = "identity"
    sigma2_proposal_sd: float = 0.1
    initial_sigma2: float = 1.0
    schedule: dict = field(default_factory=lambda: dict(DEFAULT_SCHEDULE))


@dataclass
class RunConfig:
    distances: Optional[str] = None
    trees: Optional[str] = None
    output: str = "output"
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)

    def validate(self, check_files: bool = True):
        if self.model.latent_dim < 1:
            raise ConfigError("latent_dim must be at least 1")
        if self.sampler.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if self.sampler.thin < 1 or self.sampler.warmup < 0:
            raise ConfigError("thin must be >= 1 and warmup >= 0")
        if self.sampler.mass not in ("identity", "pilot"):
            raise ConfigError("mass must be 'identity' or 'pilot'")
        self.model.mu0_vector()
        self.model.t0_matrix()
        if check_files:
            for what, path in (("distances", self.distances), ("trees", self.trees)):
                if path is not None and not Path(path).is_file():
                    raise FileNotFoundError(f"{what} file not found: {path}")
            if self.distances is None:
                raise ConfigError("[data] distances is required")
        return self

    def with_dim(self, d: int) -> "RunConfig":
        return replace(self, model=replace(self.model, latent_dim=d))

    def as_dict(self) -> dict:
        """Every setting, defaults resolved, in a JSON-friendly form."""
        out = {
            "data": {"distances": self.distances, "trees": self.trees},
            "output": self.output,
            "model": asdict(self.model),
            "sampler": asdict(self.sampler),
            "engine": {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(self.engine).items()},
        }
        out["model"]["d0"] = self.model.d0_value()
        out["model"]["t0_matrix"] = self.model.t0_matrix().tolist()
        out["model"]["mu0"] = self.model.mu0_vector().tolist()
        return out

    def digest(self) -> str:
        body = self.as_dict()
        body.pop("output")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return load_config(path)[0]

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser, base: Path = Path(".")) -> "RunConfig":
        known = {"data", "model", "sampler", "engine", "output", "simulate"}
        unknown = set(parser.sections()) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")

        def get(section, key, conv, default):
            if not parser.has_option(section, key):
                return default
            raw = parser.get(section, key)
            try:
                return conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None

        def path_of(section, key, default=None):
            raw = get(section, key, str, None)
            if raw is None:
                return default
            p = Path(raw)
            return str(p if p.is_absolute() else base / p)

        model = ModelConfig(
            latent_dim=get("model", "latent_dim", int, 2),
            mu0=get("model", "mu0", _floats, [0.0]),
            tau0=get("model", "tau0", float, 1.0),
            tau_e=get("model", "tau_e", float, 1.0),
            d0=get("model", "d0", float, None),
            t0=get("model", "t0", str, "identity"),
            s0=get("model", "s0", float, 1.0),
            r0=get("model", "r0", float, 1.0),
        )
        schedule = dict(DEFAULT_SCHEDULE)
        for block in BLOCKS:
            schedule[block] = get("sampler", f"scan_{block}", float, schedule[block])
        sampler = SamplerConfig(
            iterations=get("sampler", "iterations", int, 1000),
            thin=get("sampler", "thin", int, 10),
            seed=get("sampler", "seed", int, 1),
            warmup=get("sampler", "warmup", int, 500),
            step_size=get("sampler", "step_size", float, 0.01),
            leapfrog_steps=get("sampler", "leapfrog_steps", int, 10),
            mass=get("sampler", "mass", str, "identity"),
            sigma2_proposal_sd=get("sampler", "sigma2_proposal_sd", float, 0.1),
            initial_sigma2=get("sampler", "initial_sigma2", float, 1.0),
            schedule=schedule,
        )
        try:
            engine = EngineConfig(
                backend=get("engine", "backend", str, "serial"),
                thread_count=get("engine", "threads", int, 1),
                lane_width=get("engine", "lane_width", int, 4),
                tile_size_b=get("engine", "tile_size", int, 16),
                gradient_tile_b=get("engine", "gradient_tile", int, 128),
                device=get("engine", "device", str, "emulated"),
            )
        except ValueError as exc:
            raise ConfigError(f"[engine] {exc}") from None
        return cls(
            distances=path_of("data", "distances"),
            trees=path_of("data", "trees"),
            output=path_of("output", "directory", "output"),
            model=model,
            sampler=sampler,
            engine=engine,
        )


@dataclass
class SimulateConfig:
    """Settings for synthetic data generation (``[simulate]`` section)."""

    n: int = 50
    sigma2: float = 1.0
    sigma_mat: str = "identity"
    tree: str = "coalescent"
    tree_scale: float = 1.0
    unsequenced: int = 0
    missing_fraction: float = 0.0
    seed: int = 1

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser, base: Path = Path(".")) -> "SimulateConfig":
        section = parser["simulate"] if parser.has_section("simulate") else {}
        conv = {"n": int, "sigma2": float, "sigma_mat": str, "tree": str, "tree_scale": float, "unsequenced": int, "missing_fraction": float, "seed": int}
        kwargs = {}
        for key, raw in section.items():
            if key not in conv:
                raise ConfigError(f"[simulate] unknown key {key!r}")
            try:
                kwargs[key] = conv[key](raw)
            except ValueError as exc:
                raise ConfigError(f"[simulate] {key} = {raw!r}: {exc}") from None
        cfg = cls(**kwargs)
        if cfg.tree != "coalescent" and not Path(cfg.tree).is_absolute():
            cfg.tree = str(base / cfg.tree)
        if cfg.n < 2 or cfg.unsequenced < 0 or cfg.unsequenced > cfg.n - 1:
            raise ConfigError("[simulate] needs n >= 2 and 0 <= unsequenced < n")
        if cfg.sigma2 < 0 or not 0 <= cfg.missing_fraction < 1:
            raise ConfigError("[simulate] sigma2 must be >= 0 and missing_fraction in [0, 1)")
        return cfg


def load_config(path):
    """Parse a config file into ``(RunConfig, SimulateConfig)``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = Path(path).resolve().parent
    return RunConfig.from_parser(parser, base), SimulateConfig.from_parser(parser, base)


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")
