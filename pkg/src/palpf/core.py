"""POMP building blocks shared by every filter.

Particle ensembles are stored as integer arrays of shape ``(J, m + f)``: the
first ``m`` columns are compartment counts, the trailing ``f`` columns are
flow accumulators that are zeroed at the start of every observation interval.
``rinit(params, J, rng, t0)`` returns the ensemble at ``t0``. Model callables are vectorised over the leading particle axis, and parameter
values handed to them may be scalars or length-``J`` arrays (the perturbed
filter inside iterated filtering uses the latter).
"""
from __future__ import annotations

import csv
import enum
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np


class PompError(Exception):
    """Base class for errors raised by the toolkit."""


class NonFiniteRateError(PompError):
    pass


class Scale(str, enum.Enum):
    RAW = "raw"
    RESCALED = "rescaled"


class Transform(str, enum.Enum):
    IDENTITY = "identity"
    LOG = "log"
    LOGIT = "logit"


def _to_est(value: float, tr: Transform) -> float:
    if tr is Transform.LOG:
        return math.log(value)
    if tr is Transform.LOGIT:
        return math.log(value) - math.log1p(-value)
    return value


def _from_est(value, tr: Transform):
    if tr is Transform.LOG:
        return np.exp(value)
    if tr is Transform.LOGIT:
        return 1.0 / (1.0 + np.exp(-value))
    return value


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class ParameterSet:
    """Ordered named parameters with a per-parameter estimation transform."""

    entries: Mapping[str, float]
    transforms: Mapping[str, Transform] = field(default_factory=dict)

    def __post_init__(self):
        entries = {k: float(v) for k, v in self.entries.items()}
        transforms = {k: Transform(self.transforms.get(k, Transform.IDENTITY)) for k in entries}
        unknown = set(self.transforms) - set(entries)
        if unknown:
            raise PompError(f"transforms given for unknown parameters: {sorted(unknown)}")
        for name, value in entries.items():
            if not math.isfinite(value):
                raise PompError(f"parameter {name!r} is not finite")
            tr = transforms[name]
            if tr is Transform.LOG and value <= 0:
                raise PompError(f"parameter {name!r} has a log transform and must be > 0, got {value}")
            if tr is Transform.LOGIT and not 0 < value < 1:
                raise PompError(f"parameter {name!r} has a logit transform and must lie in (0,1), got {value}")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "transforms", transforms)

    @property
    def names(self) -> list[str]:
        return list(self.entries)

    def __getitem__(self, name: str) -> float:
        return self.entries[name]

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)

    def with_values(self, **values: float) -> "ParameterSet":
        unknown = set(values) - set(self.entries)
        if unknown:
            raise PompError(f"unknown parameters: {sorted(unknown)}")
        return replace(self, entries={**self.entries, **values})

    def to_estimation(self, names: Sequence[str] | None = None) -> np.ndarray:
        names = self.names if names is None else names
        return np.array([_to_est(self.entries[n], self.transforms[n]) for n in names])

    def from_estimation(self, values: Sequence[float], names: Sequence[str] | None = None) -> "ParameterSet":
        names = self.names if names is None else names
        new = {n: float(_from_est(v, self.transforms[n])) for n, v in zip(names, values)}
        return self.with_values(**new)

    def to_json(self) -> dict:
        return {"values": self.as_dict(), "transforms": {k: v.value for k, v in self.transforms.items()}}

    @classmethod
    def from_json(cls, data: Mapping) -> "ParameterSet":
        return cls(data["values"], data.get("transforms", {}))


# -------------------------------------------------------------- time and data


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    obs_times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.obs_times, dtype=float)
        if times.ndim != 1 or times.size == 0:
            raise PompError("obs_times must be a non-empty 1-d sequence")
        if np.any(np.diff(times) <= 0):
            raise PompError("obs_times must be strictly increasing")
        if self.t0 > times[0]:
            raise PompError(f"t0={self.t0} lies after the first observation time {times[0]}")
        times.setflags(write=False)
        object.__setattr__(self, "obs_times", times)

    @classmethod
    def weekly(cls, n: int, t0: float = 0.0) -> "TimeGrid":
        return cls(t0, t0 + np.arange(1, n + 1, dtype=float))

    def __len__(self) -> int:
        return len(self.obs_times)


@dataclass(frozen=True)
class ObservationSeries:
    times: np.ndarray
    values: np.ndarray
    scale: Scale = Scale.RAW
    reporting_rates: np.ndarray | None = None
    names: tuple[str, ...] | None = None
    t0: float | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        times = np.array(self.times, dtype=float)
        if values.ndim != 2 or values.shape[1] < 1:
            raise PompError("observation values must be an N x D matrix with D >= 1")
        if times.shape != (values.shape[0],):
            raise PompError("need one observation time per row")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise PompError("observation values must be finite and nonnegative")
        scale = Scale(self.scale)
        rates = self.reporting_rates
        if rates is not None:
            rates = np.array(rates, dtype=float)
            if rates.shape != values.shape:
                raise PompError("reporting-rate matrix must match the observation shape")
            rates.setflags(write=False)
        if scale is Scale.RESCALED and rates is None:
            raise PompError("rescaled observations must carry their reporting rates")
        names = self.names or tuple(f"stratum_{j + 1}" for j in range(values.shape[1]))
        for arr in (values, times):
            arr.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "reporting_rates", rates)
        object.__setattr__(self, "names", tuple(names))
        if self.t0 is None:
            # one observation interval before the first measurement
            step = times[1] - times[0] if len(times) > 1 else 1.0
            object.__setattr__(self, "t0", float(times[0] - step))
        elif self.t0 > times[0]:
            raise PompError("t0 lies after the first observation time")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def count_zeros(self) -> int:
        return int(np.sum(self.values == 0))


def rescale_dataset(obs: ObservationSeries, rates) -> ObservationSeries:
    """Divide raw counts by reporting rates, giving incidence-scale data."""
    if obs.scale is not Scale.RAW:
        raise PompError("only raw counts can be rescaled")
    rates = np.broadcast_to(np.asarray(rates, dtype=float), obs.values.shape)
    if np.any(rates <= 0) or np.any(rates > 1):
        raise PompError("reporting rates must lie in (0, 1]")
    return ObservationSeries(obs.times, obs.values / rates, Scale.RESCALED, rates.copy(), obs.names, obs.t0)


def write_observations(obs: ObservationSeries, path: str | Path, rates_path: str | Path | None = None) -> None:
    header = ["time", *obs.names]
    _write_matrix(path, header, obs.times, obs.values)
    if rates_path is not None and obs.reporting_rates is not None:
        _write_matrix(rates_path, header, obs.times, obs.reporting_rates)


def _write_matrix(path, header, times, values) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, row in zip(times, values):
            w.writerow([_fmt(t), *(_fmt(v) for v in row)])


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def _read_matrix(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "time":
        raise PompError(f"{path}: first column must be 'time'")
    body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    return rows[0][1:], body[:, 0], body[:, 1:]


def read_observations(path: str | Path, rates_path: str | Path | None = None,
                      scale: Scale | str = Scale.RAW) -> ObservationSeries:
    names, times, values = _read_matrix(path)
    rates = None
    if rates_path is not None:
        rnames, rtimes, rates = _read_matrix(rates_path)
        if rnames != names or not np.array_equal(rtimes, times):
            raise PompError("reporting-rate sidecar does not match the observation file")
    return ObservationSeries(times, values, Scale(scale), rates, tuple(names))


# ------------------------------------------------------------------- models


@dataclass(frozen=True)
class LatentState:
    compartments: np.ndarray
    flows: np.ndarray

    @classmethod
    def from_row(cls, row: np.ndarray, m: int) -> "LatentState":
        row = np.array(row, dtype=np.int64)
        return cls(row[:m], row[m:])


@dataclass(frozen=True)
class PalStructure:
    """Analytic structure that the Poisson approximate filter needs.

    ``kernel(t, dt, params, belief, noise)`` returns the m x m row-stochastic
    matrix of expected one-sub-step transitions, linearised at ``belief``.
    ``immigration(t, dt, params)`` is the expected number of arrivals per
    sub-step. ``flow_map[c]`` is the ``(source, destination)`` compartment pair
    whose transition count observed column ``c`` thins. ``reporting`` and
    ``dispersion`` give per-column reporting probabilities and negative
    binomial sizes (``None`` for Poisson measurement).
    """

    kernel: Callable
    immigration: Callable
    flow_map: Sequence[tuple[int, int]]
    reporting: Callable
    dispersion: Callable | None = None
    noise_sampler: Callable | None = None
    noise_mean: float = 1.0


@dataclass(frozen=True)
class ModelDefinition:
    name: str
    compartments: tuple[str, ...]
    flows: tuple[str, ...]
    obs_names: tuple[str, ...]
    rinit: Callable
    rstep: Callable
    rmeasure: Callable
    dmeasure: Callable
    dt: float = 1.0
    pal: PalStructure | None = None
    init_mean: Callable | None = None
    n_params: int | None = None
    scale: Scale = Scale.RAW
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.compartments)

    @property
    def d(self) -> int:
        return len(self.obs_names)

    def substeps(self, t_start: float, t_end: float) -> tuple[int, float]:
        n = max(1, int(round((t_end - t_start) / self.dt)))
        return n, (t_end - t_start) / n

    def advance(self, states: np.ndarray, t_start: float, t_end: float, params, rng) -> np.ndarray:
        """Zero the flows and run the process model across one interval."""
        states[:, self.m:] = 0
        n, dt = self.substeps(t_start, t_end)
        t = t_start
        for k in range(n):
            states = self.rstep(states, t, dt, params, rng)
            t = t_start + (k + 1) * dt
        return states


@dataclass
class LogLikResult:
    total: float
    conditional: np.ndarray
    times: np.ndarray | None = None
    ess: np.ndarray | None = None
    failed: tuple[int, ...] = ()
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.conditional = np.asarray(self.conditional, dtype=float)
        if np.isfinite(self.total) and abs(math.fsum(self.conditional) - self.total) > 1e-9:
            raise PompError("total log-likelihood does not match the conditional sum")

    @classmethod
    def from_conditionals(cls, cond, **kw) -> "LogLikResult":
        cond = np.asarray(cond, dtype=float)
        total = -math.inf if np.any(cond == -math.inf) else math.fsum(cond)
        return cls(total, cond, **kw)

    def write_diagnostics(self, path: str | Path) -> None:
        times = self.times if self.times is not None else np.arange(1, len(self.conditional) + 1)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "cond_loglik", "ess"])
            for i, (t, c) in enumerate(zip(times, self.conditional)):
                ess = "" if self.ess is None else repr(float(self.ess[i]))
                w.writerow([_fmt(t), repr(float(c)), ess])


def read_diagnostics(path: str | Path) -> LogLikResult:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    times = np.array([float(r["time"]) for r in rows])
    cond = np.array([float(r["cond_loglik"]) for r in rows])
    ess = None
    if rows and all(r["ess"] for r in rows):
        ess = np.array([float(r["ess"]) for r in rows])
    return LogLikResult.from_conditionals(cond, times=times, ess=ess)


# ----------------------------------------------------------- random streams


def derive_seed(seed: int, *keys) -> int:
    """64-bit seed for the named sub-stream ``seed/key1/key2/...``."""
    text = "/".join([str(int(seed)), *map(str, keys)]).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


def stream(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


# -------------------------------------------------------------- operations


def simulate(model: ModelDefinition, params: ParameterSet | Mapping, grid: TimeGrid,
             seed: int) -> tuple[list[LatentState], ObservationSeries]:
    """Draw one latent trajectory and one observation row per observation time."""
    p = params.as_dict() if isinstance(params, ParameterSet) else dict(params)
    rng = np.random.default_rng(seed)
    states = np.asarray(model.rinit(p, 1, rng, grid.t0), dtype=np.int64)
    path, rows = [], []
    t_prev = grid.t0
    for t in grid.obs_times:
        try:
            states = model.advance(states, t_prev, t, p, rng)
        except NonFiniteRateError as err:
            raise NonFiniteRateError(f"{err} (parameters: {p})") from None
        path.append(LatentState.from_row(states[0], model.m))
        rows.append(model.rmeasure(states, t, p, rng)[0])
        t_prev = t
    values = np.array(rows, dtype=float)
    # synthetic incidence-scale data carries unit reporting rates
    rates = np.ones_like(values) if model.scale is Scale.RESCALED else None
    obs = ObservationSeries(grid.obs_times, values, model.scale, rates, names=model.obs_names, t0=grid.t0)
    return path, obs


def aic(loglik: float, n_params: int) -> float:
    if n_params < 0:
        raise PompError("parameter count must be nonnegative")
    return 2.0 * n_params - 2.0 * loglik


def log_mean_exp(values) -> float:
    """Stable log of the mean of exponentials, independent of input order."""
    x = np.sort(np.asarray(values, dtype=float).ravel())[::-1]
    if x.size == 0:
        raise PompError("log_mean_exp needs at least one value")
    top = x[0]
    if top == -math.inf:
        return -math.inf
    if np.isnan(top) or top == math.inf:
        return float(top)
    return float(top + math.log(math.fsum(np.exp(x - top)) / x.size))


# ---------------------------------------------------------------- workers

_TASK: Callable | None = None


def _run_task(i):
    return _TASK(i)


def parallel_map(fn: Callable[[int], object], n: int, workers: int = 1) -> list:
    """``[fn(i) for i in range(n)]``, optionally fanned out over forked workers.

    Results come back in index order, so output never depends on scheduling.
    ``fn`` may be a closure: it reaches the children through fork, not pickle.
    """
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    import multiprocessing as mp

    global _TASK
    _TASK = fn
    try:
        with mp.get_context("fork").Pool(min(workers, n)) as pool:
            return pool.map(_run_task, range(n), chunksize=1)
    finally:
        _TASK = None
