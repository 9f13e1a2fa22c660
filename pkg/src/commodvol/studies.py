"""End-to-end pipelines driven by a :class:`RunConfig`.

These glue the library modules together for the CLI verbs and for the
reproduction runs shipped as presets.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import amerconv, synthlab
from .black import black_call_normalized, implied_vol
from .calibrate import (CalibResult, calibrate_online, calibrate_with_futures, descend, nodewise_relative_error,
                        surface_error)
from .config import RunConfig, merge_config
from .errors import ConfigurationError, DataError
from .grids import LocalVolSurface, Mesh, VolFamily, build_mesh, eval_surface
from .quotefile import QuoteRow, group_rows, quote_set_rows, rows_to_quote_set
from .quotes import QuoteSet, extend_to_horizon
from .tikhonov import select_alpha2

log = logging.getLogger(__name__)


def _grid(spec) -> np.ndarray:
    if isinstance(spec, dict):
        n = int(round((spec["stop"] - spec["start"]) / spec["step"]))
        return spec["start"] + spec["step"] * np.arange(n + 1)
    return np.asarray(spec, dtype=float)


def _trade_date(cfg: RunConfig) -> dt.date:
    try:
        return dt.date.fromisoformat(cfg.raw["trade_date"])
    except (TypeError, ValueError):
        raise ConfigurationError(f"trade_date {cfg.raw['trade_date']!r} is not an ISO date") from None


# -- synthetic data --------------------------------------------------------


@dataclass
class SynthOutput:
    files: list[list[QuoteRow]]
    datasets: list[QuoteSet] = field(default_factory=list)
    american: list[amerconv.AmericanQuote] = field(default_factory=list)
    truth: LocalVolSurface | None = None
    meta: dict = field(default_factory=dict)


def synthesize(cfg: RunConfig) -> SynthOutput:
    """Quotes described by the ``synth`` section, plus the truth on the calibration mesh."""
    s = cfg.section("synth")
    kind = s.get("kind", "dupire")
    mats = _grid(s["maturities"])
    ys = _grid(s["log_strikes"])
    day = _trade_date(cfg)
    r = float(cfg.raw["rates"]["r"])
    meta = {"kind": kind, "maturities": mats.tolist(), "log_strikes": ys.tolist(), "rate": r,
            "trade_date": day.isoformat()}
    if kind == "heston":
        p = synthlab.HestonParams(**s.get("heston", {}))
        qs = synthlab.heston_quotes(p, mats, ys)
        meta["heston"] = vars(p)
        return SynthOutput([quote_set_rows(qs, day, rate=p.r)], [qs], meta=meta)

    truth = synthlab.truth_surface(cfg.mesh_for(1))
    if kind == "american":
        sigma_ref = float(s.get("sigma_ref", 0.4))
        q = float(cfg.raw["rates"]["q"])
        F = float(s.get("futures", 1.0))
        tree = amerconv.TreeConfig(cfg.raw["conversion"].get("tree_steps"))
        quotes = []
        for t in mats:
            for y in ys:
                K = F * math.exp(y)
                price = amerconv.local_vol_tree_call(F, K, float(t), r, synthlab.truth_sigma, tree, sigma_ref)
                quotes.append(amerconv.AmericanQuote(F, K, float(t), price, r, q))
        rows = [QuoteRow(day, 0.0, day + dt.timedelta(days=round(q_.tau * 360)), q_.tau, q_.future, q_.strike,
                         q_.price, "A", r) for q_ in quotes]
        meta.update(futures=F, sigma_ref=sigma_ref)
        return SynthOutput([rows], american=quotes, truth=truth, meta=meta)
    if kind != "dupire":
        raise ConfigurationError(f"unknown synth kind {kind!r}")

    fm = s.get("fine_mesh", {"dtau": 0.005, "dy": 0.025})
    fine = build_mesh(cfg.mesh.tau_max, float(fm["dtau"]), float(fm["dy"]))
    if fine.dtau > cfg.mesh.dtau or fine.dy > cfg.mesh.dy:
        raise ConfigurationError("the data mesh must be at least as fine as the calibration mesh")
    fine_truth = synthlab.truth_surface(fine)
    delta = float(s.get("delta", 0.0))
    seed = int(cfg.raw["seed"])
    count = int(s.get("count", 1))
    meta.update(delta=delta, seed=seed, fine_mesh={"dtau": fine.dtau, "dy": fine.dy})
    if count > 1:
        ds = float(s["ds"])
        sets = synthlab.online_quotes(fine_truth, mats, ys, ds, count, float(s.get("s_start", 0.8)), delta, seed)
        meta.update(count=count, ds=ds, s_start=float(s.get("s_start", 0.8)))
    else:
        fut = s.get("futures", 1.0)
        true_f = synthlab.synth_futures_curve(mats) if fut == "curve" else np.full(mats.size, float(fut))
        qs = synthlab.make_synthetic_quotes(fine_truth, mats, ys, true_f, delta, seed)
        scale = float(s.get("futures_scale", 1.0))
        sets = [qs.with_futures(scale * true_f)]
        meta.update(futures_true=true_f.tolist(), futures_observed=(scale * true_f).tolist())
    files = [quote_set_rows(qs, day, rate=r) for qs in sets]
    return SynthOutput(files, sets, truth=truth, meta=meta)


# -- conversion ------------------------------------------------------------


def convert_rows(rows: Sequence[QuoteRow], cfg: RunConfig) -> tuple[list[QuoteRow], dict]:
    """American rows replaced by European equivalents; European rows pass through unchanged."""
    tree = amerconv.TreeConfig(cfg.raw["conversion"].get("tree_steps"))
    out: list[QuoteRow] = []
    report = {"groups": []}
    for group in group_rows(rows):
        quotes = [r.to_american() for r in group]
        conv = amerconv.americans_to_europeans(quotes, tree, index=group[0].index_value)
        for r, q, keep, sig in zip(group, quotes, conv.kept, conv.implied_vols):
            if not keep:
                continue
            if r.style == "E":
                out.append(r)
                continue
            price = q.future * black_call_normalized(q.tau, math.log(q.strike / q.future), sig) * math.exp(-q.rate * q.tau)
            out.append(replace(r, price=float(price), style="E", price_text=None))
        rep = conv.report()
        rep.update(trade_date=group[0].trade_date.isoformat(), index_value=group[0].index_value,
                   quotes=len(group))
        report["groups"].append(rep)
    report["kept"] = sum(g["kept"] for g in report["groups"])
    report["dropped"] = sum(len(g["dropped"]) for g in report["groups"])
    return out, report


# -- calibration -----------------------------------------------------------


def _index_step(datasets: Sequence[QuoteSet]) -> float:
    idx = np.array([d.index for d in datasets])
    steps = np.diff(idx)
    if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(1.0, abs(steps).max()):
        raise DataError(f"index values {idx.tolist()} are not equally spaced and increasing")
    return float(steps[0])


def _on_mesh(surface: LocalVolSurface, mesh: Mesh) -> np.ndarray:
    if surface.mesh.shape == mesh.shape and math.isclose(surface.mesh.dtau, mesh.dtau) \
            and math.isclose(surface.mesh.dy, mesh.dy):
        return surface.values
    tt, yy = np.meshgrid(mesh.taus, mesh.ys, indexing="ij")
    return eval_surface(surface.with_window(None), tt, yy)


def calibrate_datasets(cfg: RunConfig, datasets: Sequence[QuoteSet], online: bool = False,
                       adjust_futures: bool = False, truth: LocalVolSurface | None = None) -> tuple[CalibResult, dict]:
    datasets = sorted(datasets, key=lambda d: d.index)
    if len(datasets) > 1 and not online:
        raise ConfigurationError(f"{len(datasets)} quote sets need --online")
    ds = _index_step(datasets) if len(datasets) > 1 else None
    mesh = cfg.mesh_for(len(datasets), ds)
    prior = cfg.prior_surface(mesh, list(datasets))
    max_iters, rounds, workers = int(cfg.raw["max_iters"]), int(cfg.raw["rounds"]), int(cfg.raw["workers"])
    if len(datasets) > 1:
        horizon = max(float(d.maturities.max()) for d in datasets)
        datasets = [extend_to_horizon(d, horizon) for d in datasets]

    def run(alpha2=None):
        w = cfg.weights(mesh, prior, alpha2)
        if adjust_futures:
            if w.alpha4 == 0 and w.alpha5 == 0:
                raise ConfigurationError("--adjust-futures needs alpha4 or alpha5 > 0")
            init = VolFamily.broadcast(prior, len(datasets))
            return calibrate_with_futures(datasets, w, init, rounds, max_iters, workers=workers)
        if online:
            return calibrate_online(datasets, w, prior, max_iters, workers)
        return descend(prior, datasets, w, max_iters, workers)

    t0 = time.perf_counter()
    ladder = cfg.alpha2_ladder
    selection = None
    if ladder:
        choice = select_alpha2(run, ladder, tol=float(cfg.raw["weights"]["tol"]))
        result = choice.result
        selection = {"alpha2": choice.alpha2, "qualified": choice.qualified,
                     "tried": [{"alpha2": a, "misfit": r} for a, r in choice.tried]}
    else:
        result = run()
    report = {"config": cfg.name, "mode": "futures" if adjust_futures else ("online" if online else "single"),
              "datasets": [d.label for d in datasets], **result.report(), "alpha2_selection": selection,
              "runtime_seconds": time.perf_counter() - t0}
    if truth is not None:
        tv = _on_mesh(truth, mesh)
        ref = LocalVolSurface(mesh, tv, min(tv.min(), 1e-4), max(tv.max(), 2.0))
        window = cfg.window or result.window
        report["error"] = [surface_error(m, ref, window) for m in result.family]
        report["nodewise_error"] = [list(nodewise_relative_error(m, ref, window)) for m in result.family]
        report["error_window"] = window.as_dict()
    return result, report


# -- Asian options ---------------------------------------------------------


def implied_vol_at(qs: QuoteSet, tau: float, y: float) -> float:
    """Black implied volatility at ``(tau, y)`` from European quotes.

    Linear in ``y`` along each quoted maturity (flat beyond the strike
    range) and linear in total variance between maturities.
    """
    mats = qs.maturities
    order = np.argsort(mats)

    def at(m: int) -> float:
        sel = qs.maturity_index == m
        ys = qs.y[sel]
        ivs = np.array([implied_vol(v, mats[m], yy) for v, yy in zip(qs.v[sel], ys)])
        k = np.argsort(ys)
        return float(np.interp(y, ys[k], ivs[k]))

    sm = mats[order]
    if tau <= sm[0]:
        return at(int(order[0]))
    if tau >= sm[-1]:
        return at(int(order[-1]))
    hi = int(np.searchsorted(sm, tau))
    if math.isclose(sm[hi], tau):
        return at(int(order[hi]))
    lo = hi - 1
    t0, t1 = sm[lo], sm[hi]
    w0, w1 = at(int(order[lo])) ** 2 * t0, at(int(order[hi])) ** 2 * t1
    return math.sqrt((w0 + (w1 - w0) * (tau - t0) / (t1 - t0)) / tau)


def price_asians(cfg: RunConfig, surface: LocalVolSurface | None = None, implied: QuoteSet | None = None,
                 heston: bool = False, sigma: float | None = None) -> dict:
    """Asian call prices over the configured grid for every requested model."""
    a = cfg.section("asian")
    taus = _grid(a["taus"])
    ks = _grid(a["log_strikes"])
    r = float(cfg.raw["rates"]["r"])
    S0 = float(a.get("S0", 1.0))
    hp = None
    if heston:
        params = a.get("heston") or (cfg.raw.get("synth") or {}).get("heston") or {}
        hp = synthlab.HestonParams(**params)
    if hp is not None:
        S0, r = hp.S0, hp.r
    common = {"n_avg": int(a.get("n_avg", 100)), "n_paths": int(a.get("n_paths", 10_000)),
              "seed": int(cfg.raw["seed"]), "averaging": a.get("averaging", "sum_over_n")}
    models = {}
    if hp is not None:
        models["heston"] = lambda t, k: synthlab.HestonModel(hp)
    if surface is not None:
        models["local_vol"] = lambda t, k: synthlab.LocalVolModel(surface, S0, r)
    if implied is not None:
        models["black_scholes"] = lambda t, k: synthlab.BlackScholesModel(implied_vol_at(implied, t, k - r * t), S0, r)
    if sigma is not None:
        models["black_scholes"] = lambda t, k: synthlab.BlackScholesModel(sigma, S0, r)
    if not models:
        raise ConfigurationError("no pricing model selected")
    t0 = time.perf_counter()
    rows = []
    for t in taus:
        for k in ks:
            spec = synthlab.AsianSpec(S0 * math.exp(k), float(t), **common)
            row = {"tau": float(t), "log_moneyness": float(k)}
            for name, make in models.items():
                price, se = synthlab.mc_asian(make(float(t), float(k)), spec)
                row[name] = {"price": price, "se": se}
            rows.append(row)
    log.info("priced %d Asian calls under %d models in %.1f s", len(rows), len(models), time.perf_counter() - t0)
    report = {"config": cfg.name, "S0": S0, "rate": r, **common, "models": list(models), "prices": rows}
    if "heston" in models:
        ref = np.array([row["heston"]["price"] for row in rows])
        report["relative_errors"] = {}
        report["normalized_residual"] = {}
        for name in models:
            if name == "heston":
                continue
            p = np.array([row[name]["price"] for row in rows])
            report["relative_errors"][name] = (np.abs(p - ref) / ref).tolist()
            report["normalized_residual"][name] = float(np.linalg.norm(p - ref) / np.linalg.norm(ref))
        nr = report["normalized_residual"]
        if "local_vol" in nr and "black_scholes" in nr:
            report["residual_ratio"] = nr["local_vol"] / nr["black_scholes"]
    return report


# -- reproduction runs -----------------------------------------------------


def _check(name: str, value: float, lo: float | None = None, hi: float | None = None) -> dict:
    ok = (lo is None or value >= lo) and (hi is None or value <= hi)
    return {"name": name, "value": float(value), "lower": lo, "upper": hi, "passed": bool(ok)}


def study_american(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    syn = synthesize(cfg)
    rows, conv = convert_rows(syn.files[0], cfg)
    data = rows_to_quote_set(rows)
    result, rep = calibrate_datasets(cfg, [data], truth=syn.truth)
    targets = cfg.raw.get("targets") or {}
    checks = [_check("misfit", result.final_misfit, hi=float(cfg.raw["weights"]["tol"])),
              _check("surface_error", rep["error"][0], *targets.get("surface_error", (None, None)))]
    return {"study": "american_conversion", "conversion": conv, "calibration": rep, "checks": checks,
            "runtime_seconds": time.perf_counter() - t0}


def study_futures(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    syn = synthesize(cfg)
    result, rep = calibrate_datasets(cfg, syn.datasets, adjust_futures=True, truth=syn.truth)
    targets = cfg.raw.get("targets") or {}
    ref = np.asarray(targets.get("futures", syn.meta["futures_true"]), dtype=float)
    dev = float(np.abs(result.futures[0] - ref).max())
    checks = [_check("futures_max_deviation", dev, hi=float(targets.get("futures_tol", 0.005))),
              _check("nodewise_error", rep["nodewise_error"][0][0], *targets.get("nodewise_error", (None, None)))]
    return {"study": "futures_adjustment", "synth": syn.meta, "calibration": rep, "futures_reference": ref.tolist(),
            "checks": checks, "runtime_seconds": time.perf_counter() - t0}


def study_online(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    runs = cfg.raw.get("online_runs")
    if not runs:
        raise ConfigurationError("online study needs 'online_runs'")
    out = []
    w = cfg.raw["weights"]
    for run in runs:
        # alpha1 and alpha3 keep their ratios to alpha2.
        f = float(run["alpha2"]) / float(w["alpha2"])
        sub = RunConfig(merge_config(cfg.raw, {
            "synth": {"count": int(run["count"]), "ds": float(run["ds"])},
            "weights": {"alpha1": f * float(w["alpha1"]), "alpha2": float(run["alpha2"]),
                        "alpha3": f * float(w["alpha3"])},
            "max_iters": int(run.get("max_iters", cfg.raw["max_iters"])),
        }), cfg.base_dir)
        syn = synthesize(sub)
        result, rep = calibrate_datasets(sub, syn.datasets, online=True, truth=syn.truth)
        out.append({"count": run["count"], "ds": run["ds"], "alpha2": run["alpha2"],
                    "iterations": result.iterations, "stopping_reason": result.stopping_reason,
                    "final_misfit": result.final_misfit, "mean_error": float(np.mean(rep["error"])),
                    "errors": rep["error"], "runtime_seconds": rep["runtime_seconds"]})
    ratio = out[-1]["mean_error"] / out[0]["mean_error"]
    hi = float((cfg.raw.get("targets") or {}).get("error_ratio", 0.85))
    return {"study": "online_scaling", "runs": out, "checks": [_check("error_ratio", ratio, hi=hi)],
            "runtime_seconds": time.perf_counter() - t0}


def study_asian(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    syn = synthesize(cfg)
    data = syn.datasets[0]
    result, rep = calibrate_datasets(cfg, [data])
    prices = price_asians(cfg, surface=result.surface, implied=data, heston=True)
    targets = cfg.raw.get("targets") or {}
    checks = [_check("residual_ratio", prices["residual_ratio"], hi=float(targets.get("residual_ratio", 0.7)))]
    atm = targets.get("heston_atm")
    if atm:
        row = next(r for r in prices["prices"] if math.isclose(r["tau"], atm["tau"]) and r["log_moneyness"] == 0)
        z = abs(row["heston"]["price"] - atm["price"]) / row["heston"]["se"]
        checks.append(_check("heston_atm_standard_errors", z, hi=float(atm.get("max_se", 3.0))))
    return {"study": "asian_pricing", "calibration": rep, "asian": prices, "checks": checks,
            "runtime_seconds": time.perf_counter() - t0}


STUDIES = {
    "american_conversion": study_american,
    "futures_adjustment": study_futures,
    "online_scaling": study_online,
    "asian_pricing": study_asian,
}


def run_study(cfg: RunConfig) -> dict:
    name = cfg.raw.get("study")
    if name not in STUDIES:
        raise ConfigurationError(f"config {cfg.name!r} names no known study ({', '.join(STUDIES)})")
    return STUDIES[name](cfg)
