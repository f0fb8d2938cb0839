"""Likelihood inference for partially observed Markov count models.

Bootstrap particle filtering, the Poisson approximate likelihood filter,
iterated filtering, coordinate gradient descent and a log-ARMA benchmark.
"""
from .core import (LatentState, LogLikResult, ModelDefinition, NonFiniteRateError, ObservationSeries,
                   PalStructure, ParameterSet, PompError, Scale, TimeGrid, Transform, aic, derive_seed,
                   log_mean_exp, read_observations, rescale_dataset, simulate, write_observations)
from .pal import CgdSettings, PalSettings, cgd_maximize, pal_filter, pal_update
from .pf import PfSettings, pfilter, replicated_pfilter

__version__ = "0.1.0"

__all__ = [
    "CgdSettings", "LatentState", "LogLikResult", "ModelDefinition", "NonFiniteRateError", "ObservationSeries",
    "PalSettings", "PalStructure", "ParameterSet", "PfSettings", "PompError", "Scale", "TimeGrid", "Transform",
    "aic", "cgd_maximize", "derive_seed", "log_mean_exp", "pal_filter", "pal_update", "pfilter",
    "read_observations", "replicated_pfilter", "rescale_dataset", "simulate", "write_observations",
]
