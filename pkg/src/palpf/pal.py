"""Poisson approximate likelihood (PAL) filter and its coordinate-descent maximizer.

The filtering distribution of compartment counts is approximated by
independent Poissons with rates ``belief``. Prediction pushes the rates
through the expected transition kernel; an observation of a thinned
transition count is scored with a Poisson (or negative binomial) marginal
and moves the destination compartment by ``y - rho * mu``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (LogLikResult, ModelDefinition, ObservationSeries, ParameterSet, PompError, Scale,
                   derive_seed, log_mean_exp)
from .dist import nbinom_logpmf, poisson_logpmf
from .pf import check_observations

INIT_DRAWS = 10_000


@dataclass(frozen=True)
class PalSettings:
    noise_draws: int = 25
    rate_floor: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if self.noise_draws < 1:
            raise PompError("noise_draws must be >= 1")
        if not self.rate_floor > 0:
            raise PompError("rate_floor must be > 0")


def pal_predict(belief, kernel, immigration) -> np.ndarray:
    belief = np.asarray(belief, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    if np.any(kernel < 0):
        raise PompError("transition kernel has a negative entry")
    if np.any(np.abs(kernel.sum(axis=1) - 1.0) > 1e-10):
        raise PompError("transition kernel rows must sum to 1")
    immigration = np.asarray(immigration, dtype=float)
    if np.any(immigration < 0):
        raise PompError("immigration rates must be nonnegative")
    return belief @ kernel + immigration


def _measure(y: float, mean: float, dispersion: float | None) -> float:
    if dispersion is None:
        return float(poisson_logpmf(y, mean))
    return float(nbinom_logpmf(y, mean, dispersion))


def _update(belief, mu, y, reporting, dispersion, destination, floor):
    ll = _measure(y, reporting * mu, dispersion)
    new = belief.copy()
    new[destination] += y - reporting * mu
    floored = new[destination] < floor
    if floored:
        new[destination] = floor
    return new, ll, floored


def pal_update(belief, predicted_flow_mean: float, y: float, reporting: float,
               dispersion: float | None, flow_destination: int,
               rate_floor: float = 1e-10) -> tuple[np.ndarray, float]:
    """Condition the belief on one thinned flow count.

    Returns the updated rates and log p(y | past) under the Poisson (or
    negative binomial, when ``dispersion`` is given) marginal of the reported
    count. Zero counts are ordinary inputs.
    """
    if not 0 < reporting <= 1:
        raise PompError("reporting probability must lie in (0, 1]")
    if dispersion is not None and not dispersion > 0:
        raise PompError("dispersion must be > 0")
    if predicted_flow_mean < 0 or y < 0 or y != round(y):
        raise PompError("need a nonnegative flow mean and a nonnegative integer count")
    belief = np.asarray(belief, dtype=float)
    new, ll, _ = _update(belief, predicted_flow_mean, float(y), reporting, dispersion,
                         flow_destination, rate_floor)
    return new, ll


def initial_belief(model: ModelDefinition, params: dict, seed: int, t0: float = 0.0) -> np.ndarray:
    """Mean of the stochastic initializer: analytic if the model offers it, else 10^4 draws."""
    if model.init_mean is not None:
        return np.asarray(model.init_mean(params), dtype=float)[: model.m]
    rng = np.random.default_rng(derive_seed(seed, "pal", "init"))
    draws = np.asarray(model.rinit(params, INIT_DRAWS, rng, t0), dtype=float)
    return draws[:, : model.m].mean(axis=0)


def _interval(model, belief, t_start, t_end, p, noise_rng, y_row, reporting, dispersion, floor):
    """Predict across one observation interval, then update; one noise path."""
    pal = model.pal
    n_sub, dt = model.substeps(t_start, t_end)
    mu = np.zeros(len(pal.flow_map))
    t = t_start
    for k in range(n_sub):
        if noise_rng is None:
            noise = None
        elif isinstance(noise_rng, float):
            noise = noise_rng
        else:
            noise = pal.noise_sampler(t, dt, p, noise_rng)
        K = pal.kernel(t, dt, p, belief, noise)
        for c, (src, dst) in enumerate(pal.flow_map):
            mu[c] += belief[src] * K[src, dst]
        belief = belief @ K + pal.immigration(t, dt, p)
        t = t_start + (k + 1) * dt
    ll = 0.0
    floors = 0
    for c, (src, dst) in enumerate(pal.flow_map):
        disp = None if dispersion is None else dispersion[c]
        belief, llc, fl = _update(belief, mu[c], y_row[c], reporting[c], disp, dst, floor)
        ll += llc
        floors += fl
    return belief, ll, floors


def pal_filter(model: ModelDefinition, obs: ObservationSeries, params: ParameterSet | dict,
               settings: PalSettings = PalSettings()) -> LogLikResult:
    """Deterministic (given the seed) PAL log-likelihood with per-time conditionals.

    With process noise, each interval is run under ``noise_draws`` independent
    noise paths (streams ``pal/<draw>``); the conditional is the log of the
    mean per-path likelihood and the next belief is the likelihood-weighted
    mean. A single draw uses the noise mean instead (plug-in scheme).
    """
    if model.pal is None:
        raise PompError(
            f"model {model.name!r} has no analytic PAL structure; PAL needs the expected transition "
            "kernel, whereas the particle filter only needs to simulate the process (plug-and-play)")
    check_observations(model, obs)
    pal = model.pal
    p = params.as_dict() if isinstance(params, ParameterSet) else dict(params)
    belief = initial_belief(model, p, settings.seed, obs.t0)
    values = np.round(obs.values) if obs.scale is Scale.RESCALED else obs.values
    dispersion = None if pal.dispersion is None else pal.dispersion(p)
    use_noise = pal.noise_sampler is not None
    R = settings.noise_draws if use_noise else 1
    rngs = [np.random.default_rng(derive_seed(settings.seed, "pal", r)) for r in range(R)] if R > 1 else None
    cond = np.empty(obs.n)
    floors = 0
    t_prev = obs.t0
    for n, t in enumerate(obs.times):
        reporting = pal.reporting(t, p)
        if R == 1:
            noise = float(pal.noise_mean) if use_noise else None
            belief, cond[n], fl = _interval(model, belief, t_prev, t, p, noise, values[n], reporting,
                                            dispersion, settings.rate_floor)
            floors += fl
        else:
            outs = [_interval(model, belief, t_prev, t, p, rngs[r], values[n], reporting, dispersion,
                              settings.rate_floor) for r in range(R)]
            lls = np.array([o[1] for o in outs])
            cond[n] = log_mean_exp(lls)
            if cond[n] == -math.inf:
                w = np.full(R, 1.0 / R)
            else:
                w = np.exp(lls - lls.max())
                w /= w.sum()
            belief = np.zeros_like(belief)
            for r in range(R):
                belief += w[r] * outs[r][0]
            floors += sum(o[2] for o in outs)
        t_prev = t
    return LogLikResult.from_conditionals(cond, times=obs.times,
                                          diagnostics={"floor_events": int(floors), "noise_draws": R})


# ------------------------------------------------------- coordinate descent


@dataclass(frozen=True)
class CgdSettings:
    step: float = 0.1
    shrink: float = 0.5
    fd_step: float = 1e-4
    max_halvings: int = 40
    max_sweeps: int = 50
    tolerance: float = 1e-3


@dataclass
class CgdResult:
    params: ParameterSet
    loglik: float
    start_loglik: float
    trace: list[dict] = field(default_factory=list)


def cgd_maximize(model: ModelDefinition | None, obs: ObservationSeries | None, start: ParameterSet,
                 free: Sequence[str], settings: CgdSettings = CgdSettings(),
                 pal_settings: PalSettings = PalSettings(),
                 objective: Callable[[ParameterSet], float] | None = None) -> CgdResult:
    """Coordinate-wise finite-difference gradient ascent on the estimation scale.

    Each coordinate takes a gradient step and halves it until the objective
    does not decrease; accepted steps double for the next sweep. Stops when a
    sweep gains less than ``tolerance``. ``objective`` defaults to the PAL
    log-likelihood.
    """
    if objective is None:
        def objective(theta):
            return pal_filter(model, obs, theta, pal_settings).total

    free = list(free)
    unknown = set(free) - set(start.names)
    if unknown:
        raise PompError(f"unknown free parameters: {sorted(unknown)}")

    def f(x):
        try:
            val = objective(start.from_estimation(x, free))
        except (PompError, FloatingPointError, OverflowError):
            return -math.inf
        return val if math.isfinite(val) else -math.inf

    f0 = objective(start)
    if not math.isfinite(f0):
        raise PompError(f"objective is not finite at the starting parameters ({f0})")
    x = start.to_estimation(free)
    best = f0
    moved = False
    steps = np.full(len(free), settings.step)
    trace = [{"sweep": 0, "loglik": best, **start.as_dict()}]
    if not free:
        trace.append({"sweep": 1, "loglik": best, **start.as_dict()})
        return CgdResult(start, best, f0, trace)
    for sweep in range(1, settings.max_sweeps + 1):
        sweep_start = best
        for i in range(len(free)):
            h = settings.fd_step
            up, down = x.copy(), x.copy()
            up[i] += h
            down[i] -= h
            g = (f(up) - f(down)) / (2 * h)
            if not math.isfinite(g) or g == 0:
                continue
            step = steps[i]
            for _ in range(settings.max_halvings):
                trial = x.copy()
                trial[i] += step * g
                val = f(trial)
                if val >= best:
                    x, best, moved = trial, val, True
                    steps[i] = step / settings.shrink
                    break
                step *= settings.shrink
            else:
                steps[i] = step
        theta = start.from_estimation(x, free)
        trace.append({"sweep": sweep, "loglik": best, **theta.as_dict()})
        if best - sweep_start < settings.tolerance:
            break
    # an unmoved search hands back ``start`` itself, not a transform round trip
    return CgdResult(start.from_estimation(x, free) if moved else start, best, f0, trace)
