"""JSON model configurations: defaults, validation and model construction."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .core import ModelDefinition, ParameterSet, PompError, TimeGrid
from . import rota, toys


class ConfigError(PompError):
    """The configuration (or data/config pairing) is invalid."""


_TOYS = {
    "hmm2": (toys.hmm2_model, toys.hmm2_params, 20),
    "immigration_death": (toys.immigration_death_model, toys.immigration_death_params, 30),
    "deterministic": (toys.deterministic_model, toys.deterministic_params, 20),
}


def load(source: str | Path | dict) -> dict:
    """A config mapping from a dict, an inline JSON string or a file path."""
    if isinstance(source, dict):
        return copy.deepcopy(source)
    text = str(source)
    try:
        if text.lstrip().startswith("{"):
            return json.loads(text)
        with open(text, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {text[:80]!r}: {err}") from None


def resolve(cfg: dict) -> dict:
    """Fill in every default so the result fully determines the run."""
    cfg = copy.deepcopy(cfg)
    name = cfg.get("model", "rota3")
    if name == "rota3":
        base = rota.default_config()
        out = {"model": "rota3"}
        for key in ("variant", "scale", "substeps", "n_obs", "t0", "init"):
            out[key] = cfg.get(key, base[key])
        params = dict(base["params"])
        given = cfg.get("params", {})
        unknown = set(given) - set(rota.PARAM_NAMES)
        if unknown:
            raise ConfigError(f"unknown rota3 parameters: {sorted(unknown)}")
        params.update(given)
        out["params"] = params
    elif name in _TOYS:
        _, make_params, n_obs = _TOYS[name]
        defaults = make_params().as_dict()
        given = cfg.get("params", {})
        unknown = set(given) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown {name} parameters: {sorted(unknown)}")
        out = {"model": name, "n_obs": cfg.get("n_obs", n_obs), "t0": cfg.get("t0", 0.0),
               "params": {**defaults, **given}}
    else:
        raise ConfigError(f"unknown model {name!r}; choose rota3, {', '.join(_TOYS)}")
    extra = set(cfg) - set(out) - {"version", "init_warmup"}
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    return out


def build(cfg: dict) -> tuple[ModelDefinition, ParameterSet, TimeGrid]:
    """Model, parameters and observation grid for a (resolved or partial) config."""
    cfg = resolve(cfg)
    try:
        n_obs = int(cfg["n_obs"])
        grid = TimeGrid.weekly(n_obs, float(cfg["t0"]))
        if cfg["model"] == "rota3":
            model, params = rota.model_from_config(cfg)
        else:
            make_model, make_params, _ = _TOYS[cfg["model"]]
            model, params = make_model(), make_params(**cfg["params"])
    except ConfigError:
        raise
    except (PompError, ValueError, TypeError, KeyError) as err:
        raise ConfigError(str(err)) from None
    return model, params, grid
