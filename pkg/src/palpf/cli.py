"""Batch experiment driver.

Exit codes: 0 success, 2 configuration error, 3 numeric failure. Every
completed invocation appends one JSON record to the run log.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__, config
from .arma import ArmaSpec, benchmark_aic
from .config import ConfigError
from .core import (ObservationSeries, ParameterSet, PompError, Scale, aic, derive_seed, parallel_map,
                   read_diagnostics, read_observations, simulate, write_observations)
from .mif import PerturbationSpec, mif2
from .pal import CgdSettings, PalSettings, cgd_maximize, pal_filter
from .pf import PfSettings, replicated_pfilter
from .rota import initial_condition_anomaly_report

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def artifact_version() -> str:
    """Package version plus a digest of the installed sources."""
    h = hashlib.sha256()
    root = resources.files("palpf")
    for name in sorted(p.name for p in root.iterdir() if p.name.endswith(".py")):
        h.update(name.encode())
        h.update(root.joinpath(name).read_bytes())
    return f"{__version__}+g{h.hexdigest()[:10]}"


def _num(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


# ----------------------------------------------------------------- helpers


def _load_data(path: str, rates: str | None, model, cfg: dict) -> ObservationSeries:
    try:
        obs = read_observations(path, rates, Scale.RESCALED if rates else Scale.RAW)
    except (OSError, ValueError, IndexError) as err:
        raise ConfigError(f"cannot read data {path!r}: {err}") from None
    except PompError as err:
        raise ConfigError(str(err)) from None
    if obs.scale is not model.scale:
        raise ConfigError(f"model expects {model.scale.value} data; pass --rates for rescaled counts"
                          if model.scale is Scale.RESCALED else "model expects raw counts but --rates was given")
    if obs.d != model.d:
        raise ConfigError(f"data has {obs.d} columns but the model measures {model.d}")
    try:
        return replace(obs, t0=float(cfg["t0"]))
    except PompError as err:
        raise ConfigError(str(err)) from None


def _pf_settings(**kw) -> PfSettings:
    try:
        return PfSettings(**kw)
    except PompError as err:
        raise ConfigError(str(err)) from None


def _search(path: str) -> dict:
    return config.load(path)


def _params_json(params: ParameterSet, **extra) -> str:
    return json.dumps({**params.to_json(), **extra}, indent=2, sort_keys=True) + "\n"


def _report(loglik: float, n_params: int) -> dict:
    value = aic(loglik, n_params) if math.isfinite(loglik) else math.nan
    print(f"loglik={loglik!r} aic={value!r} n_params={n_params}")
    return {"loglik": _num(loglik), "aic": _num(value), "n_params": n_params}


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> dict:
    cfg = config.resolve(config.load(args.config))
    model, params, grid = config.build(cfg)
    _, obs = simulate(model, params, grid, derive_seed(args.seed, "simulate", 0))
    rates = args.rates_out
    if obs.scale is Scale.RESCALED and rates is None:
        rates = str(args.out) + ".rates.csv"
    write_observations(obs, args.out, rates)
    return {"config": cfg, "outputs": {"rows": obs.n, "columns": obs.d, "zeros": obs.count_zeros()}}


def cmd_filter(args) -> dict:
    cfg = config.resolve(config.load(args.config))
    model, params, _ = config.build(cfg)
    obs = _load_data(args.data, args.rates, model, cfg)
    if args.method == "pal":
        if model.pal is None:
            raise ConfigError(f"model {model.name!r} has no analytic PAL structure; PAL needs the expected "
                              "transition kernel, while PF needs only a simulator (plug-and-play)")
        if args.replicates not in (None, 1):
            print("warning: replication is unnecessary for PAL (its Monte Carlo variance is low); "
                  "running a single deterministic evaluation", file=sys.stderr)
        settings = {"method": "pal", "noise_draws": args.noise_draws}
        result = pal_filter(model, obs, params, PalSettings(noise_draws=args.noise_draws, seed=args.seed))
        extra = {}
    else:
        pfs = _pf_settings(J=args.particles, replicates=args.replicates or 36,
                           ess_threshold=args.ess_threshold, seed=args.seed)
        settings = {"method": "pf", "particles": pfs.J, "replicates": pfs.replicates,
                    "ess_threshold": pfs.ess_threshold}
        rep = replicated_pfilter(model, obs, params, pfs, args.workers)
        result = rep.result
        extra = {"se": _num(rep.se), "mean_replicate_loglik": _num(rep.mean_loglik)}
    if args.diagnostics:
        result.write_diagnostics(args.diagnostics)
    out = _report(result.total, model.n_params)
    if not math.isfinite(result.total):
        raise PompError(f"log-likelihood is {result.total} (zero-likelihood observations at indices "
                        f"{list(result.failed)[:10]})")
    return {"config": cfg, "settings": settings, "outputs": {**out, **extra}}


def _compare_one(model, params, grid, seed, J, R, draws, i):
    _, obs = simulate(model, params, grid, derive_seed(seed, "simulate", i))
    row = {"dataset": i, "pf_loglik": math.nan, "pal_loglik": math.nan, "failed": False,
           "zeros": obs.count_zeros()}
    sub = derive_seed(seed, "compare", i)
    try:
        row["pf_loglik"] = replicated_pfilter(model, obs, params, PfSettings(J=J, replicates=R, seed=sub)).result.total
        row["pal_loglik"] = pal_filter(model, obs, params, PalSettings(noise_draws=draws, seed=sub)).total
    except PompError as err:
        row["failed"] = True
        row["error"] = str(err)
    if not (math.isfinite(row["pf_loglik"]) and math.isfinite(row["pal_loglik"])):
        row["failed"] = True
    return row


def compare_summary(rows: list[dict]) -> dict:
    ok = [r for r in rows if not r["failed"]]
    gaps = np.array([r["pf_loglik"] - r["pal_loglik"] for r in ok])
    n_ge = int(np.sum(gaps >= 0))
    p = float(stats.binom.sf(n_ge - 1, len(ok), 0.5)) if ok else math.nan
    return {
        "n_datasets": len(rows),
        "n_included": len(ok),
        "mean_gap": _num(gaps.mean()) if ok else None,
        "n_pf_ge_pal": n_ge,
        "sign_test_p": _num(p),
        "disqualified": 0,
        "failed": [r["dataset"] for r in rows if r["failed"]],
        "datasets_with_zeros": sum(1 for r in rows if r["zeros"] > 0),
        "pairs": [{"dataset": r["dataset"], "pf_loglik": _num(r["pf_loglik"]),
                   "pal_loglik": _num(r["pal_loglik"])} for r in rows],
    }


def scatter_svg(rows: list[dict], size: int = 600) -> str:
    """PF (x) against PAL (y) with a red y = x reference line."""
    pts = [(r["pf_loglik"], r["pal_loglik"]) for r in rows
           if math.isfinite(r["pf_loglik"]) and math.isfinite(r["pal_loglik"])]
    vals = [v for p in pts for v in p] or [0.0, 1.0]
    lo, hi = min(vals), max(vals)
    span = hi - lo if hi > lo else 1.0
    lo, hi = lo - 0.05 * span, hi + 0.05 * span
    margin = 50.0
    scale = (size - 2 * margin) / (hi - lo)

    def sx(v):
        return margin + (v - lo) * scale

    def sy(v):
        return size - margin - (v - lo) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect x="{margin}" y="{margin}" width="{size - 2 * margin}" height="{size - 2 * margin}" '
           'fill="none" stroke="black"/>',
           f'<text x="{size / 2}" y="{size - 12}" text-anchor="middle" font-size="14">PF log-likelihood</text>',
           f'<text x="14" y="{size / 2}" text-anchor="middle" font-size="14" '
           f'transform="rotate(-90 14 {size / 2})">PAL log-likelihood</text>',
           f'<text x="{margin}" y="{size - margin + 16}" font-size="10">{lo:.1f}</text>',
           f'<text x="{size - margin}" y="{size - margin + 16}" text-anchor="end" font-size="10">{hi:.1f}</text>',
           f'<line x1="{sx(lo):.3f}" y1="{sy(lo):.3f}" x2="{sx(hi):.3f}" y2="{sy(hi):.3f}" stroke="red"/>']
    for x, y in pts:
        out.append(f'<circle cx="{sx(x):.3f}" cy="{sy(y):.3f}" r="3" fill="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_compare(args) -> dict:
    cfg = config.resolve(config.load(args.config))
    model, params, grid = config.build(cfg)
    if model.pal is None:
        raise ConfigError(f"model {model.name!r} has no PAL structure, so PF and PAL cannot be compared")
    if args.n_datasets < 1:
        raise ConfigError("--n-datasets must be >= 1")
    _pf_settings(J=args.particles, replicates=args.replicates)
    rows = parallel_map(lambda i: _compare_one(model, params, grid, args.seed, args.particles, args.replicates,
                                               args.noise_draws, i), args.n_datasets, args.workers)
    summary = compare_summary(rows)
    prefix = str(args.out)
    Path(prefix + ".json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    with open(prefix + ".csv", "w", encoding="utf-8") as fh:
        fh.write("dataset,pf_loglik,pal_loglik\n")
        for r in rows:
            fh.write(f"{r['dataset']},{r['pf_loglik']!r},{r['pal_loglik']!r}\n")
    Path(prefix + ".svg").write_text(scatter_svg(rows), encoding="utf-8")
    print(f"mean_gap={summary['mean_gap']!r} pf_ge_pal={summary['n_pf_ge_pal']}/{summary['n_included']} "
          f"sign_test_p={summary['sign_test_p']!r}")
    settings = {"particles": args.particles, "replicates": args.replicates, "noise_draws": args.noise_draws,
                "n_datasets": args.n_datasets}
    return {"config": cfg, "settings": settings,
            "outputs": {k: summary[k] for k in ("mean_gap", "n_pf_ge_pal", "n_included", "sign_test_p")}}


def _start_params(params: ParameterSet, values: dict | None) -> ParameterSet:
    if not values:
        return params
    try:
        return params.with_values(**values)
    except PompError as err:
        raise ConfigError(str(err)) from None


def cmd_mif(args) -> dict:
    cfg = config.resolve(config.load(args.config))
    model, params, _ = config.build(cfg)
    obs = _load_data(args.data, args.rates, model, cfg)
    search = _search(args.search)
    try:
        spec = PerturbationSpec(search.get("rw_sd", {}), float(search.get("cooling", 0.97)),
                                tuple(search.get("ivp_names", ())))
        spec.active(params)
        iterations = int(search.get("iterations", 30))
    except (PompError, ValueError, TypeError) as err:
        raise ConfigError(str(err)) from None
    pfs = _pf_settings(J=int(search.get("particles", 2000)), replicates=int(search.get("replicates", 8)),
                       ess_threshold=search.get("ess_threshold"), seed=args.seed)
    starts = [_start_params(params, s) for s in search.get("starts", [None])]
    results = parallel_map(
        lambda i: mif2(model, obs, starts[i], spec, iterations,
                       replace(pfs, seed=derive_seed(args.seed, "start", i)) if len(starts) > 1 else pfs),
        len(starts), args.workers if len(starts) > 1 else 1)
    prefix = str(args.out)
    for i, res in enumerate(results):
        res.trace.write_csv(prefix + (f".trace.{i}.csv" if len(starts) > 1 else ".trace.csv"))
    aborted = [r.aborted for r in results if r.aborted]
    if aborted:
        raise PompError("iterated filtering aborted: " + "; ".join(aborted))
    best = max(results, key=lambda r: r.final_loglik)
    Path(prefix + ".params.json").write_text(
        _params_json(best.params, final_loglik=_num(best.final_loglik), final_se=_num(best.final_se),
                     start_loglik=_num(best.start_loglik), decreased=best.decreased), encoding="utf-8")
    if best.decreased:
        print("warning: clean log-likelihood at the result is below the start by more than 3 SE", file=sys.stderr)
    out = _report(best.final_loglik, model.n_params)
    return {"config": cfg, "search": search,
            "outputs": {**out, "start_loglik": _num(best.start_loglik), "decreased": best.decreased,
                        "params": best.params.as_dict()}}


def cmd_cgd(args) -> dict:
    cfg = config.resolve(config.load(args.config))
    model, params, _ = config.build(cfg)
    obs = _load_data(args.data, args.rates, model, cfg)
    if model.pal is None:
        raise ConfigError(f"model {model.name!r} has no analytic PAL structure for coordinate descent")
    search = _search(args.search)
    keys = {"step", "shrink", "fd_step", "max_halvings", "max_sweeps", "tolerance"}
    try:
        cgd = CgdSettings(**{k: search[k] for k in keys if k in search})
        pal_settings = PalSettings(noise_draws=int(search.get("noise_draws", 25)), seed=args.seed)
        free = list(search.get("free", []))
        start = _start_params(params, search.get("start"))
        result = cgd_maximize(model, obs, start, free, cgd, pal_settings)
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from None
    except PompError as err:
        if "unknown free" in str(err):
            raise ConfigError(str(err)) from None
        raise
    final = pal_filter(model, obs, result.params, pal_settings).total
    prefix = str(args.out)
    names = result.params.names
    with open(prefix + ".trace.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(["sweep", "loglik", *names]) + "\n")
        for row in result.trace:
            fh.write(",".join([str(row["sweep"]), repr(row["loglik"]), *(repr(row[n]) for n in names)]) + "\n")
    Path(prefix + ".params.json").write_text(
        _params_json(result.params, final_loglik=_num(final), start_loglik=_num(result.start_loglik)),
        encoding="utf-8")
    out = _report(final, model.n_params)
    return {"config": cfg, "search": search, "outputs": {**out, "params": result.params.as_dict()}}


def cmd_benchmark(args) -> dict:
    try:
        obs = read_observations(args.data, args.rates, Scale.RESCALED if args.rates else Scale.RAW)
        p, q = (int(v) for v in args.orders.split(","))
        spec = ArmaSpec(p, q)
    except (OSError, ValueError) as err:
        raise ConfigError(f"bad benchmark input: {err}") from None
    except PompError as err:
        raise ConfigError(str(err)) from None
    if args.zero_shift is None and np.any(obs.values <= 0):
        raise ConfigError("data contain zeros; pass --zero-shift (for example 1) to benchmark log(y + s)")
    result = benchmark_aic(obs, spec, args.zero_shift, workers=args.workers)
    result.write_report(args.out)
    out = _report(result.loglik, result.n_params)
    return {"config": {"orders": [p, q], "zero_shift": args.zero_shift},
            "outputs": {**out, "columns": [{"column": c, "loglik_natural": f.loglik_natural,
                                            "ar": list(f.ar), "ma": list(f.ma), "mean": f.mean,
                                            "variance": f.variance} for c, f in zip(result.columns, result.fits)]}}


def cmd_anomaly(args) -> dict:
    try:
        diag = read_diagnostics(args.diagnostics)
    except (OSError, KeyError, ValueError) as err:
        raise ConfigError(f"cannot read diagnostics {args.diagnostics!r}: {err}") from None
    if args.window < 1:
        raise ConfigError("--window must be >= 1")
    report = initial_condition_anomaly_report(diag, args.window, args.k).to_json()
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return {"config": {"window": args.window, "k": args.k}, "outputs": report}


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="palpf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--runs", default="runs.jsonl", help="run log appended on completion")
        return p

    p = common(sub.add_parser("simulate", help="simulate one dataset from a config"))
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--rates-out")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("filter", help="log-likelihood by PF or PAL"))
    p.add_argument("data")
    p.add_argument("--config", required=True)
    p.add_argument("--rates", help="reporting-rate sidecar for rescaled data")
    p.add_argument("--method", choices=("pf", "pal"), default="pf")
    p.add_argument("--particles", type=int, default=50_000)
    p.add_argument("--replicates", type=int)
    p.add_argument("--noise-draws", type=int, default=25)
    p.add_argument("--ess-threshold", type=float)
    p.add_argument("--diagnostics")
    p.set_defaults(func=cmd_filter)

    p = common(sub.add_parser("compare", help="PF against PAL on simulated datasets"))
    p.add_argument("config")
    p.add_argument("--n-datasets", type=int, default=100)
    p.add_argument("--particles", type=int, default=5000)
    p.add_argument("--replicates", type=int, default=8)
    p.add_argument("--noise-draws", type=int, default=25)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_compare)

    for name, func, text in (("mif", cmd_mif, "iterated filtering"), ("cgd", cmd_cgd, "PAL coordinate descent")):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("data")
        p.add_argument("--config", required=True)
        p.add_argument("--search", required=True, help="search settings (JSON file or inline)")
        p.add_argument("--rates")
        p.add_argument("--out", required=True, help="output prefix")
        p.set_defaults(func=func)

    p = common(sub.add_parser("benchmark", help="log-ARMA benchmark AIC"))
    p.add_argument("data")
    p.add_argument("--rates")
    p.add_argument("--orders", default="2,1")
    p.add_argument("--zero-shift", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = common(sub.add_parser("anomaly", help="flag conditional log-likelihood anomalies"))
    p.add_argument("diagnostics")
    p.add_argument("--window", type=int, default=26)
    p.add_argument("--k", type=float, default=5.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_anomaly)
    return parser


def _inline_argv(argv: list[str], args) -> list[str]:
    """argv with config and search files replaced by inline JSON, for self-contained records."""
    out = list(argv)
    for flag, attr in (("--config", "config"), ("--search", "search")):
        value = getattr(args, attr, None)
        if value is None:
            continue
        inline = json.dumps(config.load(value), sort_keys=True)
        if flag in out:
            out[out.index(flag) + 1] = inline
        elif attr == "config" and value in out:
            out[out.index(value)] = inline
    return out


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    started = time.perf_counter()
    try:
        payload = args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (PompError, FloatingPointError, OverflowError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    record = {
        "subcommand": args.command,
        "argv": _inline_argv(argv, args),
        "seed": args.seed,
        "workers": args.workers,
        "version": artifact_version(),
        "wall_clock_s": round(time.perf_counter() - started, 6),
        **payload,
    }
    with open(args.runs, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")
    return 0


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


if __name__ == "__main__":
    sys.exit(main())
