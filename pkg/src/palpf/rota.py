"""rota3: a three-stratum rotavirus-type SIRS model with aging and seasonality.

Compartments are S, I, R for each age stratum plus an absorbing sink that
collects deaths (exits from the oldest stratum); flows count new infections
per stratum. Each sub-step is an Euler-multinomial draw with exit
probability ``1 - exp(-rate * dt)``. Process overdispersion multiplies the
force of infection by gamma noise of mean 1 and variance ``sigma_p**2 / dt``.
A constant ``iota`` imported infecteds join the local ones in the force of
infection, which keeps the infection endemic over long warm-ups.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numba
import numpy as np
from scipy import stats

from .core import (LatentState, LogLikResult, ModelDefinition, NonFiniteRateError, PalStructure,
                   ParameterSet, PompError, Scale)
from .dist import lgamma_ratio, nb_lp_const, pois_lp_const, rnbinom

WEEKS_PER_YEAR = 52.18
STRATA = 3
COMPARTMENTS = ("S1", "I1", "R1", "S2", "I2", "R2", "S3", "I3", "R3", "dead")
FLOWS = ("C1", "C2", "C3")
PARAM_NAMES = ("beta1", "beta2", "beta3", "amplitude", "phase", "gamma", "omega", "age1", "age2",
               "birth", "death", "rho1", "rho2", "rho3", "theta1", "theta2", "theta3", "sigma_p",
               "iota")
_IDX = {n: i for i, n in enumerate(PARAM_NAMES)}
_M = len(COMPARTMENTS)
_DEAD = 9


class Dispersion(str, enum.Enum):
    EQ = "Eq"
    OV = "Ov"


@dataclass(frozen=True)
class RotaVariant:
    process: Dispersion = Dispersion.OV
    measurement: Dispersion = Dispersion.OV

    def __post_init__(self):
        object.__setattr__(self, "process", Dispersion(self.process))
        object.__setattr__(self, "measurement", Dispersion(self.measurement))

    @classmethod
    def named(cls, name: str) -> "RotaVariant":
        if len(name) != 4:
            raise PompError(f"unknown variant {name!r}; expected EqEq, EqOv, OvOv (or OvEq)")
        return cls(Dispersion(name[:2]), Dispersion(name[2:]))

    @property
    def name(self) -> str:
        return self.process.value + self.measurement.value


@dataclass(frozen=True)
class FixedAtStart:
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != 3 * STRATA or any(v < 0 for v in self.values):
            raise PompError("FixedAtStart needs 9 nonnegative compartment values (S, I, R per stratum)")


@dataclass(frozen=True)
class Warmup:
    entry: tuple[float, ...]
    years: float = 6.0

    def __post_init__(self):
        if not self.years > 0:
            raise PompError("warm-up years must be > 0")
        if len(self.entry) != 3 * STRATA or any(v < 0 for v in self.entry):
            raise PompError("warm-up entry state needs 9 nonnegative compartment values")


InitStrategy = FixedAtStart | Warmup


# ------------------------------------------------------------- configuration

ROTA_TRANSFORMS = {**{n: "log" for n in PARAM_NAMES}, "amplitude": "logit", "phase": "identity",
                   "rho1": "logit", "rho2": "logit", "rho3": "logit"}


def default_config() -> dict:
    with resources.files("palpf.data").joinpath("rota3_default.json").open(encoding="utf-8") as fh:
        return json.load(fh)


def validate_params(values: dict) -> None:
    missing = [n for n in PARAM_NAMES if n not in values]
    if missing:
        raise PompError(f"missing rota3 parameters: {missing}")
    for name in PARAM_NAMES:
        v = values[name]
        if not isinstance(v, (int, float)) or not math.isfinite(v):
            raise PompError(f"parameter {name!r} must be a finite number")
        if name != "phase" and v < 0:
            raise PompError(f"parameter {name!r} must be nonnegative, got {v}")
    for name in ("rho1", "rho2", "rho3"):
        if not 0 < values[name] <= 1:
            raise PompError(f"parameter {name!r} must lie in (0, 1], got {values[name]}")
    if not values["amplitude"] < 1:
        raise PompError("parameter 'amplitude' must lie in [0, 1)")
    for name in ("theta1", "theta2", "theta3"):
        if not values[name] > 0:
            raise PompError(f"parameter {name!r} must be > 0")


def rota_params(values: dict | None = None, **overrides) -> ParameterSet:
    base = dict(default_config()["params"] if values is None else values)
    base.update(overrides)
    validate_params(base)
    transforms = {k: v for k, v in ROTA_TRANSFORMS.items() if k in base}
    # zero-valued or unit-valued entries cannot sit on a log/logit scale
    for k, tr in list(transforms.items()):
        v = base[k]
        if (tr == "log" and v <= 0) or (tr == "logit" and not 0 < v < 1):
            transforms[k] = "identity"
    return ParameterSet(base, transforms)


def init_from_config(cfg: dict) -> InitStrategy:
    kind = cfg.get("type", "fixed")
    if kind == "fixed":
        return FixedAtStart(tuple(float(v) for v in cfg["values"]))
    if kind == "warmup":
        return Warmup(tuple(float(v) for v in cfg["entry"]), float(cfg.get("years", 6.0)))
    raise PompError(f"unknown init strategy {kind!r}")


# ------------------------------------------------------------ compiled core


@numba.njit(cache=True)
def _exits(rng, n, rate_a, rate_b, dt):
    """Euler-multinomial exits from one compartment to two destinations."""
    r = rate_a + rate_b
    if n <= 0 or r <= 0.0:
        return 0, 0
    k = rng.binomial(n, -math.expm1(-r * dt))
    if k == 0:
        return 0, 0
    ka = rng.binomial(k, rate_a / r)
    return ka, k - ka


@numba.njit(cache=True)
def _step_kernel(x, t, dt, P, ov_process, rng):
    J = x.shape[0]
    shared = P.shape[0] == 1
    season_arg = 2.0 * math.pi * t / 52.18
    for j in range(J):
        q = P[0] if shared else P[j]
        n_live = 0
        n_inf = q[18]
        for c in range(9):
            n_live += x[j, c]
        for a in range(3):
            n_inf += x[j, 3 * a + 1]
        season = 1.0 + q[3] * math.cos(season_arg - q[4])
        noise = 1.0
        if ov_process and q[17] > 0.0:
            var = q[17] * q[17] / dt
            noise = rng.gamma(1.0 / var, var)
        scale = season * noise * n_inf / n_live if n_live > 0 else 0.0
        if not (math.isfinite(scale) and scale >= 0.0):
            return j + 1
        # exits are drawn from the start-of-step counts, so arrivals by aging wait a step
        aged_s = aged_i = aged_r = 0
        for a in range(3):
            foi = q[a] * scale
            out = q[7 + a] if a < 2 else q[10]
            s, i, r = 3 * a, 3 * a + 1, 3 * a + 2
            if not (math.isfinite(foi) and math.isfinite(out)):
                return j + 1
            inf, s_out = _exits(rng, x[j, s], foi, out, dt)
            rec, i_out = _exits(rng, x[j, i], q[5], out, dt)
            wane, r_out = _exits(rng, x[j, r], q[6], out, dt)
            x[j, s] += wane - inf - s_out + aged_s
            x[j, i] += inf - rec - i_out + aged_i
            x[j, r] += rec - wane - r_out + aged_r
            aged_s, aged_i, aged_r = s_out, i_out, r_out
            x[j, 10 + a] += inf
        x[j, 9] += aged_s + aged_i + aged_r
        if q[9] > 0.0:
            x[j, 0] += rng.poisson(q[9] * dt)
    return 0


@numba.njit(cache=True)
def _dmeasure_kernel(y, x, P, ov_meas, rescaled, out):
    J = x.shape[0]
    shared = P.shape[0] == 1
    const = np.empty(3)
    lfy = np.empty(3)
    for a in range(3):
        lfy[a] = math.lgamma(y[a] + 1.0)
        const[a] = lgamma_ratio(y[a], P[0, 14 + a]) - lfy[a]
    for j in range(J):
        q = P[0] if shared else P[j]
        total = 0.0
        for a in range(3):
            mean = float(x[j, 10 + a])
            if not rescaled:
                mean *= q[11 + a]
            if ov_meas:
                c = const[a] if shared else lgamma_ratio(y[a], q[14 + a]) - lfy[a]
                total += nb_lp_const(y[a], mean, q[14 + a], c)
            else:
                total += pois_lp_const(y[a], mean, lfy[a])
        out[j] = total


def _pack(p: dict, J: int) -> np.ndarray:
    vals = [np.asarray(p[n], dtype=float) for n in PARAM_NAMES]
    if all(v.ndim == 0 for v in vals):
        return np.array([[float(v) for v in vals]])
    P = np.empty((J, len(PARAM_NAMES)))
    for k, v in enumerate(vals):
        P[:, k] = v
    return P


# ----------------------------------------------------------------- model


def _mean_kernel(t, dt, p, belief, noise):
    """Expected one-sub-step transition matrix, force of infection taken at ``belief``."""
    live = belief[:9].sum()
    n_inf = belief[1] + belief[4] + belief[7] + p["iota"]
    season = 1.0 + p["amplitude"] * math.cos(2.0 * math.pi * t / WEEKS_PER_YEAR - p["phase"])
    scale = season * (1.0 if noise is None else noise) * n_inf / live if live > 0 else 0.0
    K = np.zeros((_M, _M))
    K[_DEAD, _DEAD] = 1.0
    for a in range(STRATA):
        out = p[f"age{a + 1}"] if a < 2 else p["death"]
        s, i, r = 3 * a, 3 * a + 1, 3 * a + 2
        out_of = (lambda c: c + 3) if a < 2 else (lambda c: _DEAD)
        for src, move, dst in ((s, p[f"beta{a + 1}"] * scale, i), (i, p["gamma"], r), (r, p["omega"], s)):
            total = move + out
            leave = -math.expm1(-total * dt)
            K[src, src] = 1.0 - leave
            if total > 0:
                K[src, dst] += leave * move / total
                K[src, out_of(src)] += leave * out / total
    return K


def build_rota_model(variant: RotaVariant = RotaVariant(), init: InitStrategy | None = None,
                     scale: Scale | str = Scale.RAW, substeps: int = 1) -> ModelDefinition:
    """Assemble rota3 for a dispersion variant, initialization strategy and data scale."""
    scale = Scale(scale)
    if init is None:
        init = init_from_config(default_config()["init"])
    if substeps < 1:
        raise PompError("substeps must be >= 1")
    ov_process = variant.process is Dispersion.OV
    ov_meas = variant.measurement is Dispersion.OV
    rescaled = scale is Scale.RESCALED
    dt = 1.0 / substeps

    def rstep(x, t, dt_, p, rng):
        status = _step_kernel(x, t, dt_, _pack(p, len(x)), ov_process, rng)
        if status:
            raise NonFiniteRateError(f"non-finite transition rate at t={t} (particle {status - 1})")
        return x

    def rinit(p, J, rng, t0=0.0):
        x = np.zeros((J, _M + len(FLOWS)), dtype=np.int64)
        if isinstance(init, FixedAtStart):
            x[:, :9] = np.rint(init.values).astype(np.int64)
            return x
        x[:, :9] = np.rint(init.entry).astype(np.int64)
        return _warm(x, p, init.years, t0, dt, ov_process, rng)

    def rmeasure(x, t, p, rng):
        flows = x[:, _M:].astype(float)
        if not rescaled:
            flows = flows * np.array([p["rho1"], p["rho2"], p["rho3"]])
        if ov_meas:
            return rnbinom(rng, flows, np.array([p["theta1"], p["theta2"], p["theta3"]])).astype(float)
        return rng.poisson(flows).astype(float)

    def dmeasure(y, x, t, p):
        y = np.round(np.asarray(y, dtype=float)) if rescaled else np.asarray(y, dtype=float)
        out = np.empty(len(x))
        _dmeasure_kernel(y, x, _pack(p, len(x)), ov_meas, rescaled, out)
        return out

    def noise_sampler(t, dt_, p, rng):
        sig = p["sigma_p"]
        if sig <= 0:
            return 1.0
        var = sig * sig / dt_
        return rng.gamma(1.0 / var, var)

    pal = PalStructure(
        kernel=_mean_kernel,
        immigration=lambda t, dt_, p: np.concatenate([[p["birth"] * dt_], np.zeros(_M - 1)]),
        flow_map=[(3 * a, 3 * a + 1) for a in range(STRATA)],
        reporting=(lambda t, p: np.ones(STRATA)) if rescaled else
                  (lambda t, p: np.array([p["rho1"], p["rho2"], p["rho3"]])),
        dispersion=(lambda p: np.array([p["theta1"], p["theta2"], p["theta3"]])) if ov_meas else None,
        noise_sampler=noise_sampler if ov_process else None,
    )
    init_mean = None
    if isinstance(init, FixedAtStart):
        init_mean = lambda p: np.concatenate([np.rint(init.values), [0.0]])  # noqa: E731
    return ModelDefinition(f"rota3-{variant.name}", COMPARTMENTS, FLOWS, ("stratum_1", "stratum_2", "stratum_3"),
                           rinit, rstep, rmeasure, dmeasure, dt=dt, pal=pal, init_mean=init_mean,
                           n_params=len(used_params(variant, scale)), scale=scale,
                           meta={"variant": variant, "init": init})


def used_params(variant: RotaVariant, scale: Scale | str = Scale.RAW) -> list[str]:
    """Parameters the variant actually reads (the AIC parameter count)."""
    skip = set()
    if variant.measurement is Dispersion.EQ:
        skip |= {"theta1", "theta2", "theta3"}
    if variant.process is Dispersion.EQ:
        skip.add("sigma_p")
    if Scale(scale) is Scale.RESCALED:
        skip |= {"rho1", "rho2", "rho3"}
    return [n for n in PARAM_NAMES if n not in skip]


def _warm(x, p, years, t0, dt, ov_process, rng):
    """Advance ``x`` in place for ``years`` so that it arrives at ``t0``."""
    steps = max(1, int(round(years * WEEKS_PER_YEAR / dt)))
    start = t0 - steps * dt
    P = _pack(p, len(x))
    for k in range(steps):
        status = _step_kernel(x, start + k * dt, dt, P, ov_process, rng)
        if status:
            raise NonFiniteRateError(f"non-finite transition rate during warm-up at t={start + k * dt}")
    x[:, _DEAD:] = 0
    return x


def mean_field_step(x: np.ndarray, t: float, dt: float, p: dict) -> np.ndarray:
    """Expected state after one sub-step from a given state (deterministic skeleton)."""
    x = np.asarray(x, dtype=float)
    nxt = x @ _mean_kernel(t, dt, p, x, None)
    nxt[0] += p["birth"] * dt
    return nxt


# -------------------------------------------------------------- warm-up


@dataclass
class WarmupResult:
    state: LatentState
    extinct: bool
    final_year_mean: np.ndarray


def warmup_init(model: ModelDefinition, params: ParameterSet | dict, years: float, seed: int,
                entry=None, t0: float = 0.0) -> WarmupResult:
    """Run the process from the equilibrium entry state for ``years`` and return the end state.

    Extinction of all infecteds is reported through ``extinct`` rather than
    raised; ``final_year_mean`` is the mean state over the last simulated
    year, a stationarity diagnostic.
    """
    if not years > 0:
        raise PompError("warm-up years must be > 0")
    p = params.as_dict() if isinstance(params, ParameterSet) else dict(params)
    if entry is None:
        strategy = model.meta.get("init")
        entry = strategy.entry if isinstance(strategy, Warmup) else default_config()["init_warmup"]["entry"]
    rng = np.random.default_rng(seed)
    x = np.zeros((1, _M + len(FLOWS)), dtype=np.int64)
    x[0, :9] = np.rint(entry).astype(np.int64)
    steps = max(1, int(round(years * WEEKS_PER_YEAR / model.dt)))
    year_steps = min(steps, int(round(WEEKS_PER_YEAR / model.dt)))
    tail = np.zeros(9)
    t = t0 - steps * model.dt
    for k in range(steps):
        model.rstep(x, t + k * model.dt, model.dt, p, rng)
        if k >= steps - year_steps:
            tail += x[0, :9]
    x[:, _DEAD:] = 0
    extinct = int(x[0, 1] + x[0, 4] + x[0, 7]) == 0
    return WarmupResult(LatentState.from_row(x[0], _M), extinct, tail / year_steps)


# ------------------------------------------------------ anomaly report


@dataclass
class AnomalyReport:
    flagged: list[int]
    threshold: float
    median: float
    mad: float
    window: int
    n_early: int
    expected_early: float
    p_value: float
    concentrated_early: bool

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def initial_condition_anomaly_report(result: LogLikResult, window: int, k: float = 5.0,
                                     alpha: float = 0.01) -> AnomalyReport:
    """Flag conditionals more than ``k`` MADs below the median; test for early clustering.

    ``p_value`` is the one-sided binomial probability of at least ``n_early``
    of the flags landing in the first ``window`` points under uniform
    placement. Flags count as concentrated early when that probability is
    below ``alpha`` or when every flag lies inside the window.
    """
    if window < 1:
        raise PompError("window must be >= 1")
    cond = np.asarray(result.conditional, dtype=float)
    finite = cond[np.isfinite(cond)]
    med = float(np.median(finite)) if finite.size else 0.0
    mad = float(np.median(np.abs(finite - med))) if finite.size else 0.0
    threshold = med - k * mad
    flagged = [int(i) for i in np.flatnonzero(~(cond >= threshold))]
    n = len(cond)
    w = min(window, n)
    n_early = sum(1 for i in flagged if i < w)
    share = w / n
    p = float(stats.binom.sf(n_early - 1, len(flagged), share)) if flagged else 1.0
    return AnomalyReport(flagged, threshold, med, mad, window, n_early, len(flagged) * share, p,
                         bool(flagged) and (p < alpha or n_early == len(flagged)))


# ------------------------------------------------------- config loading


def model_from_config(cfg: dict) -> tuple[ModelDefinition, ParameterSet]:
    """Build rota3 (and its parameters) from a configuration mapping."""
    variant = RotaVariant.named(cfg.get("variant", "OvOv"))
    init = init_from_config(cfg.get("init", default_config()["init"]))
    model = build_rota_model(variant, init, cfg.get("scale", "raw"), int(cfg.get("substeps", 1)))
    params = rota_params(cfg.get("params"))
    return model, params


def load_config(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
