"""Bootstrap particle filter with systematic resampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import (LogLikResult, ModelDefinition, ObservationSeries, ParameterSet, PompError, Scale,
                   derive_seed, log_mean_exp, parallel_map)


@dataclass(frozen=True)
class PfSettings:
    """Particle count, replicate count and resampling policy.

    ``ess_threshold=None`` resamples at every observation; a fraction ``c``
    resamples whenever ESS <= c * J, so ``c = 1.0`` is equivalent to always.
    """

    J: int = 50_000
    replicates: int = 36
    ess_threshold: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.J < 1:
            raise PompError("particle count J must be >= 1")
        if self.replicates < 1:
            raise PompError("replicates must be >= 1")
        if self.ess_threshold is not None and not 0 < self.ess_threshold <= 1:
            raise PompError("ESS threshold must lie in (0, 1]")


def systematic_resample(weights, u: float) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise PompError("resampling weights must be nonnegative and sum to 1")
    if not 0 <= u < 1:
        raise PompError("u must lie in [0, 1)")
    J = w.size
    cum = np.cumsum(w)
    cum[-1] = 1.0
    idx = np.searchsorted(cum, (u + np.arange(J)) / J, side="right")
    return np.minimum(idx, J - 1)


def check_observations(model: ModelDefinition, obs: ObservationSeries) -> None:
    if obs.d != model.d:
        raise PompError(f"data has {obs.d} columns but model {model.name!r} measures {model.d}")
    if obs.scale is Scale.RAW and np.any(obs.values != np.round(obs.values)):
        raise PompError("raw-count data must be integer valued for a count measurement density")


class _Weights:
    """Normalised log-weights plus the per-step bookkeeping shared with mif."""

    def __init__(self, J: int):
        self.J = J
        self.logw = np.full(J, -math.log(J))
        self.uniform = True

    def update(self, loglik: np.ndarray) -> tuple[float, float, bool]:
        """Absorb measurement log-densities; return (cond loglik, ess, failed)."""
        loglik = np.where(np.isnan(loglik), -math.inf, loglik)
        top = loglik.max()
        if top == -math.inf:
            self.logw = np.full(self.J, -math.log(self.J))
            self.uniform = True
            return -math.inf, 1.0, True
        if self.uniform:
            cond = top + math.log(np.mean(np.exp(loglik - top)))
            new = loglik - top
        else:
            new = self.logw + loglik - top
            cond = top + math.log(np.sum(np.exp(new)))
        new -= new.max()
        new -= math.log(np.sum(np.exp(new)))
        self.logw = new
        self.uniform = False
        ess = 1.0 / np.sum(np.exp(2.0 * new))
        return cond, float(min(max(ess, 1.0), self.J)), False

    def should_resample(self, ess: float, threshold: float | None) -> bool:
        return threshold is None or ess <= threshold * self.J

    def resample(self, rng: np.random.Generator) -> np.ndarray:
        w = np.exp(self.logw)
        idx = systematic_resample(w / w.sum(), rng.random())
        self.logw = np.full(self.J, -math.log(self.J))
        self.uniform = True
        return idx


def pfilter(model: ModelDefinition, obs: ObservationSeries, params: ParameterSet | dict,
            settings: PfSettings) -> LogLikResult:
    check_observations(model, obs)
    p = params.as_dict() if isinstance(params, ParameterSet) else dict(params)
    rng = np.random.default_rng(settings.seed)
    J = settings.J
    states = np.asarray(model.rinit(p, J, rng, obs.t0), dtype=np.int64)
    weights = _Weights(J)
    cond = np.empty(obs.n)
    ess = np.empty(obs.n)
    failed = []
    t_prev = obs.t0
    for n, t in enumerate(obs.times):
        states = model.advance(states, t_prev, t, p, rng)
        cond[n], ess[n], fail = weights.update(model.dmeasure(obs.values[n], states, t, p))
        if fail:
            failed.append(n)
        elif weights.should_resample(ess[n], settings.ess_threshold):
            states = states[weights.resample(rng)]
        t_prev = t
    return LogLikResult.from_conditionals(cond, times=obs.times, ess=ess, failed=tuple(failed),
                                          diagnostics={"J": J, "seed": settings.seed})


@dataclass
class ReplicatedResult:
    result: LogLikResult
    totals: np.ndarray
    seeds: list[int]

    @property
    def mean_loglik(self) -> float:
        """Arithmetic mean of replicate log-likelihoods (reported alongside)."""
        return float(np.mean(self.totals))

    @property
    def se(self) -> float:
        """Delta-method standard error of the log-mean-exp combination."""
        r = len(self.totals)
        if r < 2 or not np.all(np.isfinite(self.totals)):
            return math.nan
        w = np.exp(self.totals - self.totals.max())
        return float(np.std(w, ddof=1) / math.sqrt(r) / np.mean(w))


def replicated_pfilter(model: ModelDefinition, obs: ObservationSeries, params,
                       settings: PfSettings, workers: int = 1) -> ReplicatedResult:
    """Independent filters on seed streams ``pf/<r>`` combined on the likelihood scale.

    Combined conditionals are successive differences of the log-mean-exp
    cumulative log-likelihood, so they telescope to the combined total.
    """
    seeds = [derive_seed(settings.seed, "pf", r) for r in range(settings.replicates)]
    results = parallel_map(lambda r: pfilter(model, obs, params, replace(settings, seed=seeds[r])),
                           settings.replicates, workers)
    totals = np.array([r.total for r in results])
    if len(results) == 1:
        return ReplicatedResult(results[0], totals, seeds)
    cum = np.cumsum(np.array([r.conditional for r in results]), axis=1)
    path = np.array([log_mean_exp(cum[:, n]) for n in range(obs.n)])
    prev = np.concatenate([[0.0], path[:-1]])
    with np.errstate(invalid="ignore"):
        cond = np.where(prev == -math.inf, -math.inf, path - prev)
    ess = np.mean([r.ess for r in results], axis=0)
    failed = tuple(sorted(set().union(*(r.failed for r in results))))
    combined = LogLikResult.from_conditionals(cond, times=obs.times, ess=ess, failed=failed,
                                              diagnostics={"J": settings.J, "replicates": settings.replicates})
    return ReplicatedResult(combined, totals, seeds)
