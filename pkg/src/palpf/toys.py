"""Small models with known likelihoods, used for validation and CLI smoke runs."""
from __future__ import annotations

import numpy as np
from scipy import stats

from .core import ModelDefinition, PalStructure, ParameterSet, Transform
from .dist import poisson_logpmf


def _col(p, name, J=None):
    v = np.asarray(p[name], dtype=float)
    return v if J is None else np.broadcast_to(v, (J,))


# ------------------------------------------------------------ 2-state HMM


def hmm2_model() -> ModelDefinition:
    """Two hidden states, binary emissions.

    Parameters: ``p01``/``p10`` switching probabilities, ``e0``/``e1`` the
    probability of emitting 1 from each state, ``pi1`` initial P(z = 1).
    """

    def rinit(p, J, rng, t0=0.0):
        z = (rng.random(J) < _col(p, "pi1", J)).astype(np.int64)
        return z[:, None]

    def rstep(x, t, dt, p, rng):
        z = x[:, 0]
        u = rng.random(len(z))
        stay1 = u >= _col(p, "p10", len(z))
        go1 = u < _col(p, "p01", len(z))
        x[:, 0] = np.where(z == 1, stay1, go1)
        return x

    def emit_prob(x, p):
        z = x[:, 0]
        return np.where(z == 1, _col(p, "e1", len(z)), _col(p, "e0", len(z)))

    def rmeasure(x, t, p, rng):
        return (rng.random(len(x)) < emit_prob(x, p)).astype(float)[:, None]

    def dmeasure(y, x, t, p):
        e = emit_prob(x, p)
        with np.errstate(divide="ignore"):
            return np.log(e) if y[0] == 1 else np.log1p(-e)

    return ModelDefinition("hmm2", ("z",), (), ("y",), rinit, rstep, rmeasure, dmeasure, n_params=5)


def hmm2_params(**kw) -> ParameterSet:
    base = {"p01": 0.2, "p10": 0.3, "e0": 0.15, "e1": 0.8, "pi1": 0.5}
    base.update(kw)
    return ParameterSet(base, {k: Transform.LOGIT for k in base})


# ---------------------------------------------------- immigration-death


def immigration_death_model() -> ModelDefinition:
    """X -> Binomial(X, s) + Poisson(alpha) per step; deaths are reported with probability rho.

    Deaths move into an absorbing sink, so reported counts never feed back on
    the living population and the Poisson approximate filter is exact here.
    """

    def rinit(p, J, rng, t0=0.0):
        x = np.zeros((J, 3), dtype=np.int64)
        x[:, 0] = rng.poisson(_col(p, "lambda0", J))
        return x

    def rstep(x, t, dt, p, rng):
        J = len(x)
        surv = rng.binomial(x[:, 0], _col(p, "s", J))
        deaths = x[:, 0] - surv
        x[:, 0] = surv + rng.poisson(_col(p, "alpha", J))
        x[:, 1] += deaths
        x[:, 2] += deaths
        return x

    def rmeasure(x, t, p, rng):
        return rng.binomial(x[:, 2], _col(p, "rho", len(x))).astype(float)[:, None]

    def dmeasure(y, x, t, p):
        return stats.binom.logpmf(y[0], x[:, 2], _col(p, "rho", len(x)))

    pal = PalStructure(
        kernel=lambda t, dt, p, b, noise: np.array([[p["s"], 1.0 - p["s"]], [0.0, 1.0]]),
        immigration=lambda t, dt, p: np.array([p["alpha"], 0.0]),
        flow_map=[(0, 1)],
        reporting=lambda t, p: np.array([p["rho"]]),
    )
    return ModelDefinition("immigration_death", ("X", "dead"), ("deaths",), ("y",), rinit, rstep,
                           rmeasure, dmeasure, pal=pal,
                           init_mean=lambda p: np.array([p["lambda0"], 0.0]), n_params=4)


def immigration_death_params(**kw) -> ParameterSet:
    base = {"alpha": 4.0, "s": 0.6, "rho": 0.5, "lambda0": 6.0}
    base.update(kw)
    return ParameterSet(base, {"alpha": Transform.LOG, "s": Transform.LOGIT, "rho": Transform.LOGIT,
                               "lambda0": Transform.LOG})


# ------------------------------------------------ deterministic process


def deterministic_model() -> ModelDefinition:
    """Every step all ``X`` individuals leave (the observed flow) and ``a`` arrive.

    No process randomness, so any particle count yields the exact likelihood;
    with Poisson reporting PAL coincides with it as well.
    """

    def rinit(p, J, rng, t0=0.0):
        x = np.zeros((J, 3), dtype=np.int64)
        x[:, 0] = int(round(p["x0"]))
        return x

    def rstep(x, t, dt, p, rng):
        x[:, 1] += x[:, 0]
        x[:, 2] += x[:, 0]
        x[:, 0] = int(round(p["a"]))
        return x

    def rmeasure(x, t, p, rng):
        return rng.poisson(p["rho"] * x[:, 2].astype(float))[:, None].astype(float)

    def dmeasure(y, x, t, p):
        return poisson_logpmf(y[0], p["rho"] * x[:, 2].astype(float))

    pal = PalStructure(
        kernel=lambda t, dt, p, b, noise: np.array([[0.0, 1.0], [0.0, 1.0]]),
        immigration=lambda t, dt, p: np.array([float(round(p["a"])), 0.0]),
        flow_map=[(0, 1)],
        reporting=lambda t, p: np.array([p["rho"]]),
    )
    return ModelDefinition("deterministic", ("X", "out"), ("left",), ("y",), rinit, rstep, rmeasure,
                           dmeasure, pal=pal,
                           init_mean=lambda p: np.array([float(round(p["x0"])), 0.0]), n_params=3)


def deterministic_params(**kw) -> ParameterSet:
    base = {"a": 20.0, "x0": 15.0, "rho": 1.0}
    base.update(kw)
    return ParameterSet(base, {"a": Transform.LOG, "x0": Transform.LOG})
