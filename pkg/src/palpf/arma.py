"""Log-ARMA benchmark with the change-of-variables correction for log data.

The exact Gaussian ARMA likelihood is computed with a Kalman filter on the
Harvey state-space form. Fits profile out the innovation variance and the
mean (by generalized least squares) and search the remaining coefficients
with Nelder-Mead in partial-autocorrelation coordinates, where every point
is stationary and invertible.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numba
import numpy as np
from scipy.optimize import minimize

from .core import ObservationSeries, PompError, aic, parallel_map

_LOG2PI = math.log(2.0 * math.pi)
# radius kept strictly inside the unit interval for partial autocorrelations
_PACF_MAX = 0.999


@dataclass(frozen=True)
class ArmaSpec:
    p: int = 2
    q: int = 1
    include_mean: bool = True

    def __post_init__(self):
        if self.p < 0 or self.q < 0:
            raise PompError("ARMA orders must be >= 0")

    @property
    def n_params(self) -> int:
        return self.p + self.q + 1 + int(self.include_mean)


@dataclass(frozen=True)
class ArmaFit:
    spec: ArmaSpec
    ar: tuple[float, ...]
    ma: tuple[float, ...]
    mean: float
    variance: float
    loglik: float
    jacobian: float = 0.0

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    @property
    def loglik_natural(self) -> float:
        return self.loglik + self.jacobian


class ArmaFitError(PompError):
    def __init__(self, message: str, diagnostics: list | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


# ------------------------------------------------------------------ Kalman


def _state_space(ar, ma):
    r = max(len(ar), len(ma) + 1)
    T = np.zeros((r, r))
    T[: len(ar), 0] = ar
    T[np.arange(r - 1), np.arange(1, r)] = 1.0
    R = np.zeros(r)
    R[0] = 1.0
    R[1: len(ma) + 1] = ma
    return T, R


def _stationary_cov(T, R):
    r = len(R)
    A = np.eye(r * r) - np.kron(T, T)
    return np.linalg.solve(A, np.outer(R, R).ravel()).reshape(r, r)


@numba.njit(cache=True)
def _kalman(x, T, RR, P0):
    """Innovations of ``x`` and of a unit series, with their variances (sigma^2 = 1)."""
    n = x.shape[0]
    r = T.shape[0]
    a = np.zeros(r)
    b = np.zeros(r)
    a2 = np.zeros(r)
    b2 = np.zeros(r)
    k = np.zeros(r)
    P = P0.copy()
    Pu = np.zeros((r, r))
    TP = np.zeros((r, r))
    v = np.empty(n)
    w = np.empty(n)
    F = np.empty(n)
    for t in range(n):
        f = P[0, 0]
        F[t] = f
        vt = x[t] - a[0]
        wt = 1.0 - b[0]
        v[t] = vt
        w[t] = wt
        for i in range(r):
            k[i] = P[i, 0] / f
        for i in range(r):
            for j in range(r):
                Pu[i, j] = P[i, j] - k[i] * P[0, j]
        for i in range(r):
            sa = 0.0
            sb = 0.0
            for j in range(r):
                sa += T[i, j] * (a[j] + k[j] * vt)
                sb += T[i, j] * (b[j] + k[j] * wt)
            a2[i] = sa
            b2[i] = sb
        for i in range(r):
            a[i] = a2[i]
            b[i] = b2[i]
        for i in range(r):
            for j in range(r):
                acc = 0.0
                for m in range(r):
                    acc += T[i, m] * Pu[m, j]
                TP[i, j] = acc
        for i in range(r):
            for j in range(r):
                acc = RR[i, j]
                for m in range(r):
                    acc += TP[i, m] * T[j, m]
                P[i, j] = acc
    return v, w, F


def _check_roots(coefs, what):
    # companion eigenvalues are the reciprocal roots; np.roots overflows on tiny leading terms
    coefs = np.asarray(coefs, dtype=float)
    if len(coefs):
        companion = np.eye(len(coefs), k=-1)
        companion[0] = coefs
        if np.any(np.abs(np.linalg.eigvals(companion)) >= 1.0):
            raise PompError(f"{what} polynomial has a root on or inside the unit circle")


def _innovations(x, ar, ma):
    T, R = _state_space(np.asarray(ar, dtype=float), np.asarray(ma, dtype=float))
    return _kalman(np.ascontiguousarray(x, dtype=float), T, np.outer(R, R), _stationary_cov(T, R))


def arma_loglik(series, spec: ArmaSpec, ar, ma, mean: float, variance: float) -> float:
    """Exact Gaussian log-likelihood by the prediction-error decomposition."""
    x = np.asarray(series, dtype=float)
    if len(ar) != spec.p or len(ma) != spec.q:
        raise PompError(f"expected {spec.p} AR and {spec.q} MA coefficients")
    if x.size <= spec.p + spec.q:
        raise PompError("series must be longer than p + q")
    if not variance > 0:
        raise PompError("innovation variance must be > 0")
    _check_roots(ar, "AR")
    v, _, F = _innovations(x - (mean if spec.include_mean else 0.0), ar, ma)
    return float(-0.5 * np.sum(_LOG2PI + np.log(variance * F) + v * v / (variance * F)))


# ------------------------------------------------------------------ fitting


def pacf_to_coefs(u) -> np.ndarray:
    """Durbin-Levinson map from partial autocorrelations in (-1, 1) to AR coefficients."""
    phi = np.zeros(0)
    for r in np.asarray(u, dtype=float):
        phi = np.r_[phi - r * phi[::-1], r]
    return phi


def _unpack(z, spec):
    u = _PACF_MAX * np.tanh(z)
    ar = pacf_to_coefs(u[: spec.p])
    ma = -pacf_to_coefs(u[spec.p:])
    return ar, ma


def _profile(x, spec, ar, ma):
    """Mean (GLS) and variance profiled out; returns (loglik, mean, variance)."""
    v, w, F = _innovations(x, ar, ma)
    mean = 0.0
    if spec.include_mean:
        mean = float(np.sum(v * w / F) / np.sum(w * w / F))
        v = v - mean * w
    n = x.size
    s2 = float(np.sum(v * v / F) / n)
    if not s2 > 0:
        return -math.inf, mean, s2
    return float(-0.5 * (n * (_LOG2PI + math.log(s2) + 1.0) + np.sum(np.log(F)))), mean, s2


def _starts(k: int) -> np.ndarray:
    pts = np.zeros((8, k))
    if k:
        pts[1:] = np.random.default_rng(8).uniform(-1.5, 1.5, size=(7, k))
    return pts


def fit_arma(series, spec: ArmaSpec = ArmaSpec()) -> ArmaFit:
    """Maximum likelihood by Nelder-Mead from 8 fixed starts; the best fit wins."""
    x = np.asarray(series, dtype=float)
    if x.size < 20 or not np.all(np.isfinite(x)):
        raise PompError("fit_arma needs at least 20 finite values")
    if np.ptp(x) == 0:
        raise ArmaFitError("degenerate variance: the series is constant", [{"value": float(x[0])}])
    k = spec.p + spec.q

    def neg(z):
        ll = _profile(x, spec, *_unpack(z, spec))[0]
        return -ll if math.isfinite(ll) else 1e300

    best, diagnostics = None, []
    for z0 in _starts(k):
        if k:
            res = minimize(neg, z0, method="Nelder-Mead",
                           options={"xatol": 1e-7, "fatol": 1e-9, "maxiter": 400 * k, "maxfev": 600 * k})
            z, val, msg = res.x, res.fun, res.message
        else:
            z, val, msg = z0, neg(z0), "no coefficients"
        diagnostics.append({"start": z0.tolist(), "neg_loglik": float(val), "message": str(msg)})
        if val < 1e300 and (best is None or val < best[1]):
            best = (z, val)
    if best is None:
        raise ArmaFitError("every starting point failed", diagnostics)
    ar, ma = _unpack(best[0], spec)
    ll, mean, s2 = _profile(x, spec, ar, ma)
    return ArmaFit(spec, tuple(map(float, ar)), tuple(map(float, ma)), mean, s2, ll)


def refit_mean(series, fit: ArmaFit) -> ArmaFit:
    """Hold coefficients and variance of ``fit``; re-estimate only the mean by GLS."""
    x = np.asarray(series, dtype=float)
    mean = 0.0
    if fit.spec.include_mean:
        v, w, F = _innovations(x, fit.ar, fit.ma)
        mean = float(np.sum(v * w / F) / np.sum(w * w / F))
    ll = arma_loglik(x, fit.spec, fit.ar, fit.ma, mean, fit.variance)
    return replace(fit, mean=mean, loglik=ll, jacobian=0.0)


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchmarkResult:
    aic: float
    loglik: float
    n_params: int
    fits: list[ArmaFit]
    columns: list[str]

    def write_report(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["column", "loglik_transformed", "jacobian", "loglik_natural", "n_params"])
            for name, f in zip(self.columns, self.fits):
                w.writerow([name, repr(f.loglik), repr(f.jacobian), repr(f.loglik_natural), f.n_params])
            w.writerow(["AIC", "", "", repr(self.aic), self.n_params])


def benchmark_aic(obs: ObservationSeries, spec: ArmaSpec = ArmaSpec(), zero_shift: float | None = None,
                  fixed: list[ArmaFit] | None = None, workers: int = 1) -> BenchmarkResult:
    """Fit log(y + s) column by column and report the natural-scale likelihood and AIC.

    ``zero_shift`` (s) defaults to none, in which case every value must be
    positive. With ``fixed`` the coefficients and variance of the given fits
    are kept and only the means are re-estimated.
    """
    y = np.asarray(obs.values, dtype=float)
    s = 0.0 if zero_shift is None else float(zero_shift)
    if zero_shift is not None and not s > 0:
        raise PompError("zero shift must be > 0")
    if np.any(y + s <= 0):
        raise PompError("benchmark needs positive values; set a zero shift to handle zeros")
    if fixed is not None and len(fixed) != y.shape[1]:
        raise PompError("need one fixed fit per column")
    logs = np.log(y + s)

    def one(c):
        fit = refit_mean(logs[:, c], fixed[c]) if fixed is not None else fit_arma(logs[:, c], spec)
        return replace(fit, jacobian=-float(math.fsum(logs[:, c])))

    fits = parallel_map(one, y.shape[1], workers)
    total = math.fsum(f.loglik_natural for f in fits)
    k = sum(f.n_params for f in fits)
    return BenchmarkResult(aic(total, k), total, k, fits, list(obs.names))
