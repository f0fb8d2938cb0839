"""Count log-densities shared by the particle filter and PAL.

Both filters call the same compiled functions so that, on models where they
coincide mathematically, they also agree bit for bit.
"""
import math

import numba
import numpy as np

# Above this size the lgamma difference loses digits; sum the log1p series.
_NB_SERIES_THETA = 1e6


@numba.njit(cache=True)
def pois_lp(y, mean):
    if mean < 0.0 or y < 0.0:
        return -math.inf
    if mean == 0.0:
        return 0.0 if y == 0.0 else -math.inf
    return y * math.log(mean) - mean - math.lgamma(y + 1.0)


@numba.njit(cache=True)
def pois_lp_const(y, mean, lfy):
    """``pois_lp`` with ``lgamma(y + 1)`` supplied."""
    if mean < 0.0 or y < 0.0:
        return -math.inf
    if mean == 0.0:
        return 0.0 if y == 0.0 else -math.inf
    return y * math.log(mean) - mean - lfy


@numba.njit(cache=True)
def lgamma_ratio(y, theta):
    """lgamma(y + theta) - lgamma(theta) - y * log(theta)."""
    if theta < _NB_SERIES_THETA:
        return math.lgamma(y + theta) - math.lgamma(theta) - y * math.log(theta)
    s = 0.0
    k = 0.0
    while k < y:
        s += math.log1p(k / theta)
        k += 1.0
    return s


@numba.njit(cache=True)
def nb_lp(y, mean, theta):
    """Negative binomial log-pmf with the given mean and size ``theta``."""
    return nb_lp_const(y, mean, theta, lgamma_ratio(y, theta) - math.lgamma(y + 1.0))


@numba.njit(cache=True)
def nb_lp_const(y, mean, theta, const):
    """``nb_lp`` with its mean-free part ``const`` precomputed."""
    if mean < 0.0 or y < 0.0:
        return -math.inf
    if mean == 0.0:
        return 0.0 if y == 0.0 else -math.inf
    r = math.log1p(mean / theta)
    return const - theta * r + y * (math.log(mean) - r)


@numba.vectorize(["float64(float64, float64)"], cache=True)
def poisson_logpmf(y, mean):
    return pois_lp(y, mean)


@numba.vectorize(["float64(float64, float64, float64)"], cache=True)
def nbinom_logpmf(y, mean, theta):
    return nb_lp(y, mean, theta)


def rnbinom(rng: np.random.Generator, mean, theta):
    mean = np.asarray(mean, dtype=float)
    return rng.negative_binomial(theta, theta / (theta + mean))
