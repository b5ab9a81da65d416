import csv
import io
import json
import math

import numpy as np
import pytest

from phylomds import benchmark as bench
from phylomds.cli import EXIT_CONFIG, EXIT_IO, main, parse_engine_spec
from phylomds.core import DissimilarityData
from phylomds.engine import Backend, EngineConfig
from phylomds.io import ModelConfig, SimulateConfig, read_distance_csv
from phylomds.pipeline import classical_mds, draw_truncated_normal, simulate_dataset
from phylomds.sampler import ConfigError
from phylomds.selection import FoldPlan

SMOKE = """
[simulate]
n = 10
seed = 4
tree_scale = 0.5
[model]
latent_dim = 2
[sampler]
iterations = 100
thin = 5
warmup = 50
step_size = 0.05
leapfrog_steps = 5
seed = 11
[data]
distances = sim/distances.csv
trees = sim/tree.nwk
[output]
directory = fit
"""


@pytest.fixture
def workspace(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(SMOKE)
    assert main(["simulate", str(cfg), "--output", str(tmp_path / "sim")]) == 0
    return tmp_path, cfg


class TestSimulation:
    def test_half_normal_mean(self):
        rng = np.random.default_rng(21)
        y = draw_truncated_normal(np.zeros(100_000), 1.0, rng)
        se = y.std(ddof=1) / math.sqrt(y.size)
        assert abs(y.mean() - math.sqrt(2 / math.pi)) < 3 * se
        assert np.all(y > 0)

    def test_zero_noise_is_exact(self):
        delta = np.array([0.0, 0.5, 3.25])
        np.testing.assert_array_equal(draw_truncated_normal(delta, 0.0, np.random.default_rng(0)), delta)

    def test_seeded_dataset(self):
        a = simulate_dataset(SimulateConfig(n=12, seed=3, unsequenced=2, missing_fraction=0.2), ModelConfig(latent_dim=3))
        b = simulate_dataset(SimulateConfig(n=12, seed=3, unsequenced=2, missing_fraction=0.2), ModelConfig(latent_dim=3))
        np.testing.assert_array_equal(a.data.values, b.data.values)
        np.testing.assert_array_equal(a.data.mask, b.data.mask)
        assert a.x.shape == (12, 3) and a.tree.tip_count == 10
        assert 0 < a.data.n_observed < 66

    def test_zero_noise_dataset_matches_distances(self):
        sim = simulate_dataset(SimulateConfig(n=8, sigma2=0.0, seed=1), ModelConfig())
        diff = sim.x[:, None, :] - sim.x[None, :, :]
        np.testing.assert_allclose(sim.data.values, np.sqrt((diff ** 2).sum(-1)), rtol=1e-14)

    def test_classical_mds_recovers_configuration(self, rng):
        x = rng.standard_normal((15, 2))
        dist = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
        coords = classical_mds(DissimilarityData.fully_observed(dist), 2)
        np.testing.assert_allclose(np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1)), dist, atol=1e-9)


class TestCommands:
    def test_simulate_outputs(self, workspace):
        tmp_path, _ = workspace
        sim = tmp_path / "sim"
        assert {p.name for p in sim.iterdir()} == {"distances.csv", "true_x.csv", "tree.nwk", "metadata.json"}
        assert read_distance_csv(sim / "distances.csv").n == 10

    def test_fit_smoke_and_reproducible(self, workspace):
        tmp_path, cfg = workspace
        assert main(["fit", str(cfg), "--output", str(tmp_path / "a")]) == 0
        assert main(["fit", str(cfg), "--output", str(tmp_path / "b")]) == 0
        files = {"samples.csv", "x_samples.npy", "items.csv", "summary.txt", "metadata.json"}
        assert {p.name for p in (tmp_path / "a").iterdir()} == files
        for name in files - {"metadata.json"}:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        meta = json.loads((tmp_path / "a" / "metadata.json").read_text())
        assert meta["seed"] == 11 and len(meta["config_hash"]) == 64
        assert "Wishart" in meta["wishart_convention"]
        assert meta["config"]["model"]["d0"] == 4.0
        rows = list(csv.DictReader(io.StringIO((tmp_path / "a" / "samples.csv").read_text())))
        assert len(rows) == 20
        assert np.load(tmp_path / "a" / "x_samples.npy").shape == (20, 10, 2)

    def test_seed_override_changes_chain(self, workspace):
        tmp_path, cfg = workspace
        main(["fit", str(cfg), "--output", str(tmp_path / "a")])
        main(["fit", str(cfg), "--output", str(tmp_path / "c"), "--seed", "12"])
        assert (tmp_path / "a" / "samples.csv").read_bytes() != (tmp_path / "c" / "samples.csv").read_bytes()

    def test_cv_one_dimension_and_plan_reuse(self, workspace):
        tmp_path, cfg = workspace
        out = tmp_path / "cv"
        assert main(["cv", str(cfg), "--folds", "2", "--dims", "2", "--output", str(out)]) == 0
        lines = (out / "cv.csv").read_text().splitlines()
        assert len(lines) == 2 and lines[1].startswith("2,")
        plan = FoldPlan.load(out / "folds.json")
        assert main(["cv", str(cfg), "--folds", "2", "--dims", "2,3", "--output", str(out)]) == 0
        again = FoldPlan.load(out / "folds.json")
        np.testing.assert_array_equal(plan.folds, again.folds)
        assert len((out / "cv.csv").read_text().splitlines()) == 3
        assert main(["cv", str(cfg), "--folds", "3", "--dims", "2", "--output", str(out)]) == EXIT_CONFIG

    def test_effective_distance_command(self, tmp_path):
        edges = tmp_path / "edges.csv"
        edges.write_text("source,target,probability\na,b,1\nb,a,0.36787944117144233\n")
        out = tmp_path / "d.csv"
        assert main(["effective-distance", str(edges), "--output", str(out)]) == 0
        assert read_distance_csv(out).values[0, 1] == pytest.approx(1.5)

    def test_exit_codes(self, tmp_path, capsys):
        assert main(["fit", str(tmp_path / "missing.ini")]) == EXIT_IO
        bad = tmp_path / "bad.ini"
        bad.write_text("[model]\nlatent_dim = 0\n[data]\ndistances = x.csv\n")
        assert main(["fit", str(bad)]) == EXIT_CONFIG
        assert main(["benchmark", "--engines", "warp:2"]) == EXIT_CONFIG
        assert "configuration error" in capsys.readouterr().err
        nofile = tmp_path / "nofile.ini"
        nofile.write_text("[data]\ndistances = nowhere.csv\n")
        assert main(["fit", str(nofile)]) == EXIT_IO


class TestBenchmark:
    def test_engine_spec(self):
        cfg = parse_engine_spec("threaded_vectorized:3:8")
        assert (cfg.backend, cfg.thread_count, cfg.lane_width) == (Backend.THREADED_VECTORIZED, 3, 8)
        with pytest.raises(ConfigError):
            parse_engine_spec("threaded:x")

    def test_serial_only_speedups_are_one(self):
        rows = bench.run_benchmark([64], [2], [EngineConfig()], repeats=2)
        assert len(rows) == 1
        for key in ("speedup_likelihood", "speedup_gradient", "speedup_no_truncation"):
            assert rows[0][key] == 1.0

    def test_csv_has_host_fields(self, capsys):
        assert main(["benchmark", "--sizes", "32", "--engines", "serial", "vectorized:1:8", "--repeats", "2"]) == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert len(rows) == 2
        for row in rows:
            assert int(row["host_cores"]) >= 1
            assert int(row["host_lane_width"]) in (1, 2, 4, 8)

    def test_capability_error_is_per_row(self):
        rows = bench.run_benchmark([32], [2], [EngineConfig(Backend.TILED_DEVICE, device="cuda:0"), EngineConfig()], repeats=1)
        assert "not available" in rows[0]["error"]
        assert rows[1]["error"] == "" and rows[1]["speedup_likelihood"] == 1.0

    def test_loglog_slope(self):
        sizes = np.array([100, 200, 400, 800])
        assert bench.loglog_slope(sizes, 3e-9 * sizes ** 2) == pytest.approx(2.0, abs=1e-12)

    def test_monotone(self):
        assert bench.is_monotone_decreasing([4.0, 2.0, 1.0])
        assert not bench.is_monotone_decreasing([4.0, 4.0, 1.0])
