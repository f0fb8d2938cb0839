"""Iterated filtering (IF2) maximization of the particle-filter likelihood.

Each particle carries its own copy of the perturbed parameters. The copies
take a Gaussian random-walk step on the estimation scale before every
observation interval and are resampled together with the latent states, so
the swarm concentrates near the maximum as the step size cools.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (ModelDefinition, ObservationSeries, ParameterSet, PompError, Transform, derive_seed,
                   parallel_map)
from .pf import PfSettings, _Weights, check_observations, pfilter, replicated_pfilter

# keeps inverse transforms strictly inside their open domains
_EST_BOUND = {Transform.LOG: 700.0, Transform.LOGIT: 36.0}


@dataclass(frozen=True)
class PerturbationSpec:
    """Random-walk sd per parameter (estimation scale), cooling factor, initial-value parameters."""

    rw_sd: Mapping[str, float]
    cooling: float = 0.97
    ivp_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0 < self.cooling <= 1:
            raise PompError("cooling factor must lie in (0, 1]")
        for name, sd in self.rw_sd.items():
            if not (math.isfinite(sd) and sd >= 0):
                raise PompError(f"rw_sd for {name!r} must be finite and >= 0")
        missing = set(self.ivp_names) - set(self.rw_sd)
        if missing:
            raise PompError(f"initial-value parameters without an rw_sd: {sorted(missing)}")
        object.__setattr__(self, "ivp_names", tuple(self.ivp_names))

    def active(self, params: ParameterSet) -> list[str]:
        unknown = set(self.rw_sd) - set(params.names)
        if unknown:
            raise PompError(f"rw_sd given for unknown parameters: {sorted(unknown)}")
        return [n for n in params.names if self.rw_sd.get(n, 0.0) > 0]


@dataclass
class MifTrace:
    names: list[str]
    iteration: list[int] = field(default_factory=list)
    cooling: list[float] = field(default_factory=list)
    loglik: list[float] = field(default_factory=list)
    params: list[dict] = field(default_factory=list)

    def append(self, m: int, cooling: float, loglik: float, params: ParameterSet) -> None:
        self.iteration.append(m)
        self.cooling.append(cooling)
        self.loglik.append(loglik)
        self.params.append(params.as_dict())

    def __len__(self) -> int:
        return len(self.iteration)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "cooling", "loglik", *self.names])
            for m, c, ll, p in zip(self.iteration, self.cooling, self.loglik, self.params):
                w.writerow([m, repr(c), repr(ll), *(repr(p[n]) for n in self.names)])


@dataclass
class MifResult:
    params: ParameterSet
    trace: MifTrace
    start_loglik: float = math.nan
    start_se: float = math.nan
    final_loglik: float = math.nan
    final_se: float = math.nan
    decreased: bool = False
    aborted: str | None = None


def _to_est(values: np.ndarray, tr: Transform) -> np.ndarray:
    if tr is Transform.LOG:
        return np.log(values)
    if tr is Transform.LOGIT:
        return np.log(values) - np.log1p(-values)
    return values


def _from_est(z: np.ndarray, tr: Transform) -> np.ndarray:
    if tr in _EST_BOUND:
        z = np.clip(z, -_EST_BOUND[tr], _EST_BOUND[tr])
    if tr is Transform.LOG:
        return np.exp(z)
    if tr is Transform.LOGIT:
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _perturbed_filter(model, obs, base: dict, swarm: dict, transforms, sd: dict, ivp: set,
                      J: int, threshold, rng) -> tuple[dict, float, bool]:
    """One pass of the perturbed filter. Returns the new swarm, its loglik and a collapse flag."""

    def kick(names):
        for n in names:
            z = _to_est(swarm[n], transforms[n]) + rng.normal(0.0, sd[n], J)
            swarm[n] = _from_est(z, transforms[n])

    kick(swarm)
    p = {**base, **swarm}
    states = np.asarray(model.rinit(p, J, rng, obs.t0), dtype=np.int64)
    weights = _Weights(J)
    total = 0.0
    collapsed = False
    t_prev = obs.t0
    for n, t in enumerate(obs.times):
        if n > 0:
            kick([k for k in swarm if k not in ivp])
        p = {**base, **swarm}
        states = model.advance(states, t_prev, t, p, rng)
        cond, ess, fail = weights.update(model.dmeasure(obs.values[n], states, t, p))
        total += cond
        if fail:
            collapsed = True
        elif weights.should_resample(ess, threshold):
            idx = weights.resample(rng)
            states = states[idx]
            swarm = {k: v[idx] for k, v in swarm.items()}
        t_prev = t
    if not weights.uniform:
        idx = weights.resample(rng)
        swarm = {k: v[idx] for k, v in swarm.items()}
    return swarm, total, collapsed


def _center(start: ParameterSet, swarm: dict) -> ParameterSet:
    new = {}
    for n, v in swarm.items():
        tr = start.transforms[n]
        new[n] = float(_from_est(np.mean(_to_est(v, tr)), tr))
    return start.with_values(**new)


def mif2(model: ModelDefinition, obs: ObservationSeries, start: ParameterSet, spec: PerturbationSpec,
         iterations: int, settings: PfSettings = PfSettings(J=2000, replicates=8), workers: int = 1,
         evaluate: bool = True) -> MifResult:
    """Run ``iterations`` rounds of IF2 from ``start``.

    Iteration ``m`` (counting from 0) uses sd ``rw_sd * cooling**m``; its trace
    record holds the swarm mean and a plain particle-filter total there. With
    ``evaluate`` the start and the result are both scored by
    ``replicated_pfilter`` and ``decreased`` flags a drop larger than three
    combined standard errors.
    """
    if iterations < 1:
        raise PompError("iterations must be >= 1")
    check_observations(model, obs)
    active = spec.active(start)
    ivp = set(spec.ivp_names)
    J = settings.J
    base = {k: v for k, v in start.as_dict().items() if k not in active}
    swarm = {n: np.full(J, start[n]) for n in active}
    center = start
    trace = MifTrace(start.names)
    aborted = None
    for m in range(iterations):
        cooling = spec.cooling ** m
        rng = np.random.default_rng(derive_seed(settings.seed, "mif", m))
        if active:
            sd = {n: spec.rw_sd[n] * cooling for n in active}
            swarm, _, collapsed = _perturbed_filter(model, obs, base, swarm, start.transforms, sd, ivp, J,
                                                    settings.ess_threshold, rng)
            if collapsed:
                aborted = f"all particle weights vanished during iteration {m}"
                break
            center = _center(start, swarm)
        ll = pfilter(model, obs, center, replace(settings, seed=derive_seed(settings.seed, "mif", m, "eval"))).total
        trace.append(m, cooling, ll, center)
    result = MifResult(center, trace, aborted=aborted)
    if evaluate and aborted is None:
        first = replicated_pfilter(model, obs, start, settings, workers)
        final = first if center is start else replicated_pfilter(model, obs, center, settings, workers)
        result.start_loglik, result.start_se = first.result.total, first.se
        result.final_loglik, result.final_se = final.result.total, final.se
        tol = 3.0 * math.hypot(np.nan_to_num(first.se), np.nan_to_num(final.se))
        result.decreased = bool(final.result.total < first.result.total - tol)
    return result


def mif2_multistart(model: ModelDefinition, obs: ObservationSeries, starts: Sequence[ParameterSet],
                    spec: PerturbationSpec, iterations: int, settings: PfSettings = PfSettings(J=2000, replicates=8),
                    workers: int = 1) -> list[MifResult]:
    """Independent searches, one per start, on seed streams ``start/<i>``."""
    return parallel_map(
        lambda i: mif2(model, obs, starts[i], spec, iterations,
                       replace(settings, seed=derive_seed(settings.seed, "start", i))),
        len(starts), workers)
