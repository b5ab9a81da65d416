"""Command-line entry point: ``phylomds {simulate,fit,cv,benchmark,effective-distance}``.

Exit codes: 0 success, 2 configuration error, 3 input/output error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import benchmark as bench
from .effective import AGGREGATES, NetworkError, effective_distance, read_edges_csv, read_groups_csv
from .engine import Backend, CapabilityError, EngineConfig
from .io import (
    FormatError,
    RunConfig,
    load_config,
    read_distance_csv,
    write_distance_csv,
    write_json,
    write_matrix_csv,
)
from .pipeline import cross_validate_config, fit_chain, load_trees, simulate_dataset
from .prior import NonSPDError
from .sampler import WISHART_CONVENTION, ChainError, ConfigError
from .selection import FoldPlan, make_folds
from .tree import NewickError, write_newick_file

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _version() -> str:
    try:
        return version("phylomds")
    except PackageNotFoundError:  # pragma: no cover - running from a checkout
        return "unknown"


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _quantiles(values) -> dict:
    values = np.asarray(values, dtype=float)
    q05, q50, q95 = np.quantile(values, [0.05, 0.5, 0.95])
    return {"mean": float(values.mean()), "q05": float(q05), "median": float(q50), "q95": float(q95)}


def cmd_simulate(cfg: RunConfig, sim) -> dict:
    """Write distances.csv, true_x.csv, tree.nwk and metadata.json."""
    result = simulate_dataset(sim, cfg.model)
    out = _outdir(cfg.output)
    write_distance_csv(out / "distances.csv", result.data)
    write_matrix_csv(out / "true_x.csv", result.x, result.data.labels, [f"dim{k + 1}" for k in range(result.x.shape[1])])
    write_newick_file(out / "tree.nwk", [result.tree])
    meta = {
        "command": "simulate",
        "version": _version(),
        "simulate": vars(sim),
        "model": cfg.as_dict()["model"],
        "sigma_mat": result.sigma_mat,
        "n_items": result.data.n,
        "n_observed_pairs": result.data.n_observed,
    }
    write_json(out / "metadata.json", meta)
    return {"output": str(out), "n": result.data.n}


def cmd_fit(cfg: RunConfig) -> dict:
    """Run one chain; write samples.csv, x_samples.npy, items.csv, summary.txt, metadata.json."""
    cfg.validate()
    data = read_distance_csv(cfg.distances)
    trees = load_trees(cfg)
    result = fit_chain(cfg, data, trees)
    out = _outdir(cfg.output)
    log = result.log
    (out / "samples.csv").write_text(log.to_csv())
    np.save(out / "x_samples.npy", log.x)

    xs = log.x
    labels = data.labels
    header = ["item"]
    for k in range(cfg.model.latent_dim):
        header += [f"dim{k + 1}_mean", f"dim{k + 1}_q05", f"dim{k + 1}_q95"]
    lines = [",".join(header)]
    for i, label in enumerate(labels):
        cells = [label]
        for k in range(cfg.model.latent_dim):
            q = _quantiles(xs[:, i, k])
            cells += [repr(q["mean"]), repr(q["q05"]), repr(q["q95"])]
        lines.append(",".join(cells))
    (out / "items.csv").write_text("\n".join(lines) + "\n")

    sigma2 = _quantiles(log.sigma2)
    trace = _quantiles(log.column("trace_sigma").astype(float))
    state = result.state
    summary = {
        "draws": len(log.rows),
        "sigma2": sigma2,
        "trace_sigma": trace,
        "acceptance": {b: state.acceptance_rate(b) for b in ("x", "sigma2")},
        "step_size": result.hmc.step_size,
    }
    text = [
        f"draws recorded: {summary['draws']}",
        "sigma2       mean {mean:.6g}  90% interval [{q05:.6g}, {q95:.6g}]".format(**sigma2),
        "tr(Sigma)    mean {mean:.6g}  90% interval [{q05:.6g}, {q95:.6g}]".format(**trace),
        f"HMC acceptance {summary['acceptance']['x']:.3f}, sigma2 acceptance {summary['acceptance']['sigma2']:.3f}",
        f"step size after warmup {result.hmc.step_size:.6g}",
        "per-item location summaries: items.csv",
    ]
    (out / "summary.txt").write_text("\n".join(text) + "\n")
    meta = {
        "command": "fit",
        "version": _version(),
        "seed": cfg.sampler.seed,
        "config_hash": cfg.digest(),
        "config": cfg.as_dict(),
        "engine": cfg.engine.describe(),
        "wishart_convention": WISHART_CONVENTION,
        "sigma2_prior": "precision 1/sigma2 ~ Gamma(shape=s0, rate=r0)",
        "hmc": {"step_size": result.hmc.step_size, "leapfrog_steps": result.hmc.leapfrog_steps, "mass": "identity" if result.hmc.mass is None else "diagonal from pilot"},
        "n_items": data.n,
        "n_observed_pairs": data.n_observed,
        "n_tree_components": result.model.n_components,
        "summary": summary,
    }
    write_json(out / "metadata.json", meta)
    return summary


def cmd_cv(cfg: RunConfig, k: int, dims, folds_path=None, burn_in: float = 0.0, jobs: int = 1) -> dict:
    """Cross-validate candidate dimensions; writes cv.csv, cv_summary.txt and the fold plan."""
    cfg.validate()
    data = read_distance_csv(cfg.distances)
    trees = load_trees(cfg)
    out = _outdir(cfg.output)
    folds_path = Path(folds_path) if folds_path else out / "folds.json"
    if folds_path.exists():
        plan = FoldPlan.load(folds_path)
        if not plan.matches(data) or plan.k != k:
            raise ConfigError(f"fold plan {folds_path} does not match the data or k={k}")
    else:
        plan = make_folds(data, k, cfg.sampler.seed)
        plan.save(folds_path)
    report = cross_validate_config(cfg, data, trees, plan, dims, burn_in, jobs)
    (out / "cv.csv").write_text(report.to_csv())
    (out / "cv_summary.txt").write_text(report.summary() + "\n")
    write_json(out / "cv_metadata.json", {"command": "cv", "version": _version(), "k": k, "dims": list(dims), "fold_plan": str(folds_path), "config_hash": cfg.digest(), "config": cfg.as_dict(), "wishart_convention": WISHART_CONVENTION, "selection_rule": "maximise lpd_hat", "burn_in_fraction": burn_in})
    return {"per_dimension": report.per_dimension, "selected": report.selected}


def parse_engine_spec(spec: str) -> EngineConfig:
    """``backend[:threads][:lanes]``, e.g. ``threaded:4`` or ``threaded_vectorized:4:8``."""
    parts = spec.split(":")
    try:
        backend = Backend(parts[0])
        threads = int(parts[1]) if len(parts) > 1 else 1
        lanes = int(parts[2]) if len(parts) > 2 else 4
        return EngineConfig(backend, thread_count=threads, lane_width=lanes)
    except ValueError as exc:
        raise ConfigError(f"bad engine spec {spec!r}: {exc}") from None


def cmd_benchmark(sizes, dims, engines, repeats: int, out=None, seed: int = 0) -> str:
    rows = bench.run_benchmark(sizes, dims, engines, repeats, seed)
    text = bench.to_csv(rows)
    if out:
        Path(out).write_text(text)
    return text


def cmd_effective_distance(edges, out, groups=None, aggregate="min"):
    network = read_edges_csv(edges)
    group_map = read_groups_csv(groups) if groups else None
    data = effective_distance(network, group_map, aggregate)
    write_distance_csv(out, data)
    return data


def _int_list(text):
    return [int(tok) for tok in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phylomds", description="Bayesian MDS with a phylogenetic diffusion prior.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic data set along a tree")
    p.add_argument("config")
    p.add_argument("--output", help="override [output] directory")
    p.add_argument("--seed", type=int, help="override [simulate] seed")

    p = sub.add_parser("fit", help="run the posterior sampler")
    p.add_argument("config")
    p.add_argument("--output")
    p.add_argument("--seed", type=int, help="override [sampler] seed")
    p.add_argument("--iterations", type=int)
    p.add_argument("--distances", help="override [data] distances")
    p.add_argument("--trees", help="override [data] trees")

    p = sub.add_parser("cv", help="cross-validate latent dimensions")
    p.add_argument("config")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--dims", type=_int_list, required=True, help="candidate dimensions, e.g. 2,3,4")
    p.add_argument("--fold-plan", help="fold plan JSON to reuse (created if missing)")
    p.add_argument("--burn-in", type=float, default=0.0, help="fraction of recorded draws to drop")
    p.add_argument("--jobs", type=int, default=1, help="fits to run in parallel processes")
    p.add_argument("--output")

    p = sub.add_parser("benchmark", help="time likelihood engines on synthetic data")
    p.add_argument("--sizes", type=_int_list, default=[256, 1024])
    p.add_argument("--dims", type=_int_list, default=[2])
    p.add_argument("--engines", nargs="+", default=["serial"], help="backend[:threads[:lanes]]")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="CSV path; stdout when omitted")

    p = sub.add_parser("effective-distance", help="distances from a travel network")
    p.add_argument("edges", help="CSV with source,target,probability")
    p.add_argument("--groups", help="CSV with node,group for aggregation")
    p.add_argument("--aggregate", choices=AGGREGATES, default="min")
    p.add_argument("--output", required=True)
    return parser


def _run_config(args) -> tuple:
    cfg, sim = load_config(args.config)
    if getattr(args, "output", None):
        cfg.output = args.output
    if getattr(args, "distances", None):
        cfg.distances = args.distances
    if getattr(args, "trees", None):
        cfg.trees = args.trees
    if getattr(args, "iterations", None):
        cfg.sampler.iterations = args.iterations
    if args.command == "simulate" and args.seed is not None:
        sim.seed = args.seed
    elif getattr(args, "seed", None) is not None:
        cfg.sampler.seed = args.seed
    return cfg, sim


def dispatch(args) -> int:
    if args.command == "simulate":
        cfg, sim = _run_config(args)
        info = cmd_simulate(cfg, sim)
        print(f"wrote {info['n']} items to {info['output']}")
    elif args.command == "fit":
        cfg, _ = _run_config(args)
        cmd_fit(cfg)
        print(Path(cfg.output, "summary.txt").read_text(), end="")
    elif args.command == "cv":
        cfg, _ = _run_config(args)
        cmd_cv(cfg, args.folds, args.dims, args.fold_plan, args.burn_in, args.jobs)
        print(Path(cfg.output, "cv_summary.txt").read_text(), end="")
    elif args.command == "benchmark":
        engines = [parse_engine_spec(spec) for spec in args.engines]
        text = cmd_benchmark(args.sizes, args.dims, engines, args.repeats, args.output, args.seed)
        if not args.output:
            print(text, end="")
    else:
        data = cmd_effective_distance(args.edges, args.output, args.groups, args.aggregate)
        print(f"wrote {data.n} x {data.n} effective distances to {args.output}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except (ChainError, NonSPDError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"phylomds: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, NewickError, NetworkError) as exc:
        print(f"phylomds: input/output error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, CapabilityError, ValueError) as exc:
        print(f"phylomds: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
