"""Numerically stable standard-normal helpers shared by every evaluation path.

All scalar functions are numba-compiled with ``nogil`` so the threaded
engines can call them from worker threads without serialising on the GIL.
They are also directly callable from Python.
"""

import math

import numpy as np
from numba import njit, vectorize

SQRT2 = math.sqrt(2.0)
LOG_HALF = math.log(0.5)
INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
LOG_2PI = math.log(2.0 * math.pi)

# below this the product exp(t^2) * erfc(t) is exact to ~1 ulp; above it the
# continued fraction converges to machine precision in _CF_TERMS terms
_ERFCX_CF_THRESHOLD = 3.0
_CF_TERMS = 40


@njit(nogil=True, cache=True)
def erfcx(t):
    """Scaled complementary error function ``exp(t**2) * erfc(t)`` for t >= 0."""
    if t < _ERFCX_CF_THRESHOLD:
        return math.exp(t * t) * math.erfc(t)
    f = t
    for k in range(_CF_TERMS, 0, -1):
        f = t + (0.5 * k) / f
    return INV_SQRT_PI / f


@njit(nogil=True, cache=True)
def log_ndtr(z):
    """log of the standard normal CDF, finite down to z of about -1e150."""
    if z < -1.0:
        t = -z / SQRT2
        return LOG_HALF + math.log(erfcx(t)) - t * t
    if z < 0.0:
        return math.log(0.5 * math.erfc(-z / SQRT2))
    return math.log1p(-0.5 * math.erfc(z / SQRT2))


@njit(nogil=True, cache=True)
def inverse_mills(z):
    """phi(z) / Phi(z) without forming either factor in the lower tail."""
    if z < -1.0:
        return SQRT_2_OVER_PI / erfcx(-z / SQRT2)
    return INV_SQRT_2PI * math.exp(-0.5 * z * z) / (0.5 * math.erfc(-z / SQRT2))


@njit(nogil=True, cache=True)
def batched_log_ndtr(packet, out):
    # one packet of lane_width inputs; each lane falls back to the scalar path
    for lane in range(packet.shape[0]):
        out[lane] = log_ndtr(packet[lane])


@njit(nogil=True, cache=True)
def batched_inverse_mills(packet, out):
    for lane in range(packet.shape[0]):
        out[lane] = inverse_mills(packet[lane])


log_ndtr_ufunc = vectorize(["float64(float64)"], cache=True)(log_ndtr.py_func)
inverse_mills_ufunc = vectorize(["float64(float64)"], cache=True)(inverse_mills.py_func)


def batched_log_phi(inputs):
    """Element-wise log Phi over one packet of ``lane_width`` reals.

    Inputs must be finite; the result is finite for every finite input.

    >>> batched_log_phi([0.0, 0.0])
    array([-0.69314718, -0.69314718])
    """
    packet = np.ascontiguousarray(inputs, dtype=np.float64)
    if packet.ndim != 1:
        raise ValueError("a packet is a one-dimensional sequence of reals")
    if not np.all(np.isfinite(packet)):
        raise ValueError("packet entries must be finite")
    out = np.empty_like(packet)
    batched_log_ndtr(packet, out)
    return out
