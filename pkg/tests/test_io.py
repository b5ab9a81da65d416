import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phylomds.core import DissimilarityData
from phylomds.engine import Backend
from phylomds.io import FormatError, RunConfig, load_config, read_distance_csv, write_distance_csv
from phylomds.sampler import DEFAULT_SCHEDULE, ConfigError


@st.composite
def dissimilarities(draw):
    n = draw(st.integers(1, 8))
    values = np.array(draw(st.lists(st.floats(0, 1e6, allow_subnormal=False), min_size=n * n, max_size=n * n))).reshape(n, n)
    keep = np.array(draw(st.lists(st.booleans(), min_size=n * n, max_size=n * n))).reshape(n, n)
    lower = np.tril(keep, -1)
    mask = lower | lower.T
    y = np.tril(values, -1)
    return DissimilarityData(y + y.T, mask, [f"item {i}" for i in range(n)])


class TestDistanceCsv:
    @given(dissimilarities())
    @settings(max_examples=60, deadline=None)
    def test_round_trip(self, tmp_path_factory, data):
        path = tmp_path_factory.mktemp("csv") / "d.csv"
        write_distance_csv(path, data)
        loaded = read_distance_csv(path)
        assert loaded.labels == data.labels
        np.testing.assert_array_equal(loaded.mask, data.mask)
        np.testing.assert_array_equal(loaded.values, data.values)
        write_distance_csv(path.with_suffix(".2.csv"), loaded)
        assert path.read_text() == path.with_suffix(".2.csv").read_text()

    def test_blank_is_unobserved(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text(",a,b,c\na,0,1.5,\nb,1.5,0,2\nc,,2,0\n")
        data = read_distance_csv(path)
        assert data.labels == ["a", "b", "c"]
        assert not data.mask[0, 2] and data.mask[1, 2]
        assert data.values[1, 2] == 2.0

    @pytest.mark.parametrize(
        "text,match",
        [
            ("", "empty"),
            (",a,b\na,0,1\n", "data rows"),
            (",a,b\na,0,1\nc,1,0\n", "labelled"),
            (",a,b\na,0,1\nb,2,0\n", "symmetric"),
            (",a,b\na,0,\nb,1,0\n", "symmetric"),
            (",a,b\na,0,x\nb,x,0\n", "not a number"),
            (",a,b\na,0,-1\nb,-1,0\n", "non-negative"),
            (",a,b\na,0\nb,1,0\n", "entries"),
        ],
    )
    def test_malformed(self, tmp_path, text, match):
        path = tmp_path / "bad.csv"
        path.write_text(text)
        with pytest.raises(FormatError, match=match):
            read_distance_csv(path)


class TestConfig:
    def write(self, tmp_path, text):
        path = tmp_path / "run.ini"
        path.write_text(text)
        return path

    def test_defaults(self, tmp_path):
        cfg, sim = load_config(self.write(tmp_path, "[data]\ndistances = d.csv\n"))
        assert cfg.model.latent_dim == 2
        assert cfg.model.d0_value() == 4.0
        np.testing.assert_array_equal(cfg.model.t0_matrix(), np.eye(2))
        np.testing.assert_array_equal(cfg.model.mu0_vector(), [0.0, 0.0])
        assert cfg.sampler.schedule == DEFAULT_SCHEDULE
        assert cfg.engine.backend is Backend.SERIAL
        assert cfg.distances == str(tmp_path / "d.csv")
        assert sim.n == 50

    def test_full(self, tmp_path):
        text = """
[data]
distances = /abs/d.csv
trees = trees.nwk
[model]
latent_dim = 3
mu0 = 1 2 3
t0 = 2
d0 = 7  ; inline comment
[sampler]
iterations = 20
scan_tree = 0
[engine]
backend = threaded_vectorized
threads = 2
lane_width = 8
[output]
directory = out
"""
        cfg, _ = load_config(self.write(tmp_path, text))
        assert cfg.distances == "/abs/d.csv"
        assert cfg.trees == str(tmp_path / "trees.nwk")
        np.testing.assert_array_equal(cfg.model.t0_matrix(), 2 * np.eye(3))
        np.testing.assert_array_equal(cfg.model.mu0_vector(), [1, 2, 3])
        assert cfg.model.d0_value() == 7.0
        assert cfg.sampler.schedule["tree"] == 0.0
        assert (cfg.engine.backend, cfg.engine.thread_count, cfg.engine.lane_width) == (Backend.THREADED_VECTORIZED, 2, 8)

    @pytest.mark.parametrize(
        "text,match",
        [
            ("[bogus]\nx = 1\n", "unknown config sections"),
            ("[model]\nlatent_dim = two\n", "latent_dim"),
            ("[engine]\nlane_width = 3\n", "engine"),
            ("[simulate]\ncolour = red\n", "unknown key"),
            ("[simulate]\nn = 1\n", "n >= 2"),
            ("no section header\n", "run.ini"),
        ],
    )
    def test_errors(self, tmp_path, text, match):
        with pytest.raises(ConfigError, match=match):
            load_config(self.write(tmp_path, text))

    def test_validate(self, tmp_path):
        cfg, _ = load_config(self.write(tmp_path, "[data]\ndistances = missing.csv\n"))
        with pytest.raises(FileNotFoundError):
            cfg.validate()
        cfg.validate(check_files=False)
        bad, _ = load_config(self.write(tmp_path, "[data]\ndistances = d.csv\n[sampler]\nmass = dense\n"))
        with pytest.raises(ConfigError):
            bad.validate(check_files=False)

    def test_t0_shape(self, tmp_path):
        cfg, _ = load_config(self.write(tmp_path, "[model]\nt0 = 1 2 3\n"))
        with pytest.raises(ConfigError):
            cfg.model.t0_matrix()

    def test_digest_tracks_content(self, tmp_path):
        a = RunConfig.from_file(self.write(tmp_path, "[data]\ndistances = d.csv\n"))
        b = RunConfig.from_file(self.write(tmp_path, "[data]\ndistances = d.csv\n[sampler]\nseed = 2\n"))
        assert a.digest() != b.digest()
        assert a.digest() == a.with_dim(2).digest()
        assert a.with_dim(3).model.latent_dim == 3
