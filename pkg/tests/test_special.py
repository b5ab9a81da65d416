import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from phylomds.special import batched_log_phi, erfcx, inverse_mills, log_ndtr

mpmath.mp.dps = 50


def mp_log_ndtr(z):
    return float(mpmath.log(mpmath.ncdf(z)))


def mp_inverse_mills(z):
    return float(mpmath.npdf(z) / mpmath.ncdf(z))


class TestErfcx:
    @pytest.mark.parametrize("t", [0.0, 0.5, 1.0, 2.9, 3.0, 3.1, 5.0, 10.0, 26.0, 100.0, 1e5])
    def test_matches_mpmath(self, t):
        ref = float(mpmath.exp(mpmath.mpf(t) ** 2) * mpmath.erfc(t))
        assert erfcx(t) == pytest.approx(ref, rel=1e-14)

    def test_agrees_with_scipy(self):
        ts = np.linspace(0, 50, 501)
        np.testing.assert_allclose([erfcx(t) for t in ts], special.erfcx(ts), rtol=1e-14)


class TestLogNdtr:
    @pytest.mark.parametrize("z", [-1e4, -300.0, -38.0, -30.0, -10.0, -1.0000001, -1.0, -0.5, 0.0, 0.5, 3.0, 8.0, 38.0])
    def test_matches_mpmath(self, z):
        ref = mp_log_ndtr(z)
        assert log_ndtr(z) == pytest.approx(ref, rel=1e-14, abs=1e-300)

    def test_deep_tail_values(self):
        # checked against 50-digit evaluation
        assert log_ndtr(-30.0) == pytest.approx(-454.3212439563, abs=1e-9)
        assert log_ndtr(-38.0) == pytest.approx(-726.5572162, abs=1e-6)

    def test_zero_is_log_half(self):
        assert log_ndtr(0.0) == pytest.approx(math.log(0.5), rel=1e-16)

    def test_finite_far_into_tail(self):
        assert math.isfinite(log_ndtr(-1e150))
        assert log_ndtr(1e150) == 0.0

    def test_dense_grid_against_scipy(self):
        zs = np.linspace(-60, 10, 7001)
        np.testing.assert_allclose([log_ndtr(z) for z in zs], special.log_ndtr(zs), rtol=1e-13)

    @given(st.floats(-1e6, 1e6))
    @settings(max_examples=300, deadline=None)
    def test_finite_and_non_positive(self, z):
        value = log_ndtr(z)
        assert math.isfinite(value)
        assert value <= 0.0

    @given(st.floats(-1e3, 40), st.floats(1e-6, 5))
    @settings(max_examples=200, deadline=None)
    def test_monotone(self, z, step):
        assert log_ndtr(z + step) >= log_ndtr(z)


class TestInverseMills:
    @pytest.mark.parametrize("z", [-200.0, -30.0, -5.0, -1.0, 0.0, 1.0, 5.0, 20.0])
    def test_matches_mpmath(self, z):
        assert inverse_mills(z) == pytest.approx(mp_inverse_mills(z), rel=1e-13, abs=1e-300)

    def test_at_one(self):
        assert inverse_mills(1.0) == pytest.approx(0.28759997093917836, rel=1e-14)

    def test_lower_tail_asymptote(self):
        # phi/Phi ~ -z for very negative z
        assert inverse_mills(-1e6) == pytest.approx(1e6, rel=1e-10)

    def test_is_derivative_of_log_ndtr(self):
        for z in (-20.0, -2.0, 0.3, 4.0):
            h = 1e-6
            fd = (log_ndtr(z + h) - log_ndtr(z - h)) / (2 * h)
            assert inverse_mills(z) == pytest.approx(fd, rel=1e-7)


class TestBatchedLogPhi:
    @pytest.mark.parametrize("lanes", [1, 2, 4, 8])
    def test_matches_scalar(self, lanes):
        packet = np.linspace(-40, 5, lanes)
        np.testing.assert_array_equal(batched_log_phi(packet), [log_ndtr(z) for z in packet])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            batched_log_phi([0.0, np.nan])

    def test_rejects_matrix(self):
        with pytest.raises(ValueError):
            batched_log_phi(np.zeros((2, 2)))
