"""Command-line interface.

Exit codes: 0 success, 1 reproduction checks failed, 2 configuration
error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import studies
from .config import RunConfig, load_config, preset_names
from .errors import CommodvolError, ConfigurationError, DataError
from .grids import read_surface_csv, write_surface_csv
from .parametric import Theta, fit_parametric
from .quotefile import group_rows, read_quote_rows, rows_to_quote_set, write_quote_rows

log = logging.getLogger("commodvol")

DEFAULT_THETA = "0.1,0.4,0.2,0,0.5"


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def write_json(path: Path, obj) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    except OSError as exc:
        raise ConfigurationError(f"cannot write {path}: {exc.strerror}") from None


def _out_dir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {p}: {exc.strerror}") from None
    return p


def _read_rows(paths):
    rows = []
    for p in paths:
        try:
            rows.extend(read_quote_rows(p))
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc.strerror}") from None
    return rows


def _config(args) -> RunConfig:
    return load_config(args.config, args.set or ())


# -- verbs -----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    syn = studies.synthesize(cfg)
    names = ["quotes.csv"] if len(syn.files) == 1 else [f"quotes_{l:03d}.csv" for l in range(len(syn.files))]
    for name, rows in zip(names, syn.files):
        write_quote_rows(out / name, rows)
    sidecar = {"config": cfg.name, "generation": syn.meta, "quote_files": names, "truth_surface": None}
    if syn.truth is not None:
        write_surface_csv(out / "truth_surface.csv", syn.truth)
        sidecar["truth_surface"] = "truth_surface.csv"
    write_json(out / "synth.json", sidecar)
    print(f"wrote {len(names)} quote file(s) to {out}")
    return 0


def cmd_convert(args) -> int:
    cfg = _config(args)
    rows = _read_rows([args.quotes])
    converted, report = studies.convert_rows(rows, cfg)
    write_quote_rows(args.out, converted)
    report["input"] = str(args.quotes)
    report["output"] = str(args.out)
    if args.report:
        write_json(Path(args.report), report)
    print(f"kept {report['kept']} quote(s), dropped {report['dropped']}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    rows = _read_rows(args.quotes)
    conversion = None
    if any(r.style == "A" for r in rows):
        log.info("converting American quotes before calibration")
        rows, conversion = studies.convert_rows(rows, cfg)
    datasets = [rows_to_quote_set(g) for g in group_rows(rows)]
    truth = read_surface_csv(args.truth) if args.truth else None
    result, report = studies.calibrate_datasets(cfg, datasets, online=args.online,
                                                adjust_futures=args.adjust_futures, truth=truth)
    report["conversion"] = conversion
    out = _out_dir(args.out)
    files = []
    for l, surface in enumerate(result.family):
        name = f"surface_{l:03d}.csv"
        write_surface_csv(out / name, surface)
        files.append(name)
    report["surface_files"] = files
    write_json(out / "report.json", report)
    line = f"R={result.final_misfit:.6g} after {result.iterations} iterations ({result.stopping_reason})"
    if report.get("error"):
        line += f", E={np.mean(report['error']):.4f}"
    print(line)
    return 0


def cmd_fit_parametric(args) -> int:
    cfg = _config(args)
    rows = _read_rows([args.quotes])
    groups = group_rows(rows)
    if len(groups) != 1:
        raise DataError("fit-parametric takes quotes for a single trade date and index value")
    data = rows_to_quote_set(groups[0])
    try:
        init = Theta.from_array([float(x) for x in args.init.split(",")])
    except (TypeError, ValueError):
        raise ConfigurationError(f"--init needs five comma-separated numbers, got {args.init!r}") from None
    fit = fit_parametric(data, init, cfg.mesh_for(1), max_evals=args.max_evals)
    report = {"config": cfg.name, "initial": init.as_dict(), **fit.report()}
    write_json(Path(args.out), report)
    print(json.dumps(fit.theta.as_dict()))
    return 0


def _format_table(report: dict) -> str:
    models = report["models"]
    lines = ["tau    log(K/S0)  " + "  ".join(f"{m:>13}" for m in models)]
    for row in report["prices"]:
        lines.append(f"{row['tau']:<6g} {row['log_moneyness']:>9g}  "
                     + "  ".join(f"{row[m]['price']:13.4f}" for m in models))
    for name, errs in report.get("relative_errors", {}).items():
        lines.append(f"relative errors ({name}): " + " ".join(f"{e:.4f}" for e in errs))
    for name, r in report.get("normalized_residual", {}).items():
        lines.append(f"normalized residual ({name}): {r:.4f}")
    return "\n".join(lines)


def cmd_price_asian(args) -> int:
    cfg = _config(args)
    surface = read_surface_csv(args.surface) if args.surface else None
    implied = None
    if args.implied_vols:
        groups = group_rows(_read_rows([args.implied_vols]))
        if len(groups) != 1:
            raise DataError("the implied-volatility quote file must hold a single quote set")
        implied = rows_to_quote_set(groups[0])
    report = studies.price_asians(cfg, surface=surface, implied=implied, heston=args.heston, sigma=args.sigma)
    write_json(Path(args.out), report)
    print(_format_table(report))
    return 0


def cmd_reproduce(args) -> int:
    cfg = _config(args)
    report = studies.run_study(cfg)
    write_json(Path(args.out), report)
    ok = True
    for c in report["checks"]:
        bounds = f"[{c['lower'] if c['lower'] is not None else '-inf'}, {c['upper'] if c['upper'] is not None else 'inf'}]"
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} = {c['value']:.6g} in {bounds}")
        ok &= c["passed"]
    return 0 if ok else 1


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help=f"config file or preset name ({', '.join(preset_names())})")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. weights.alpha2=1e-3 (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="commodvol", description="Local volatility calibration for futures options.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic quote files")
    s.add_argument("-o", "--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("convert", parents=[common], help="convert American quotes to European ones")
    s.add_argument("quotes")
    s.add_argument("-o", "--out", required=True, help="output quote file")
    s.add_argument("--report", help="JSON report of kept and dropped quotes")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("calibrate", parents=[common], help="calibrate local volatility surfaces")
    s.add_argument("quotes", nargs="+")
    s.add_argument("-o", "--out", required=True, help="output directory")
    s.add_argument("--online", action="store_true", help="one coupled surface per index value")
    s.add_argument("--adjust-futures", action="store_true", help="treat futures prices as unknowns")
    s.add_argument("--truth", help="surface CSV to report the reconstruction error against")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("fit-parametric", parents=[common], help="fit the five-parameter surface")
    s.add_argument("quotes")
    s.add_argument("-o", "--out", required=True, help="output JSON")
    s.add_argument("--init", default=DEFAULT_THETA, help="a,b,c,d,e (default %(default)s)")
    s.add_argument("--max-evals", type=int, default=2000)
    s.set_defaults(func=cmd_fit_parametric)

    s = sub.add_parser("price-asian", parents=[common], help="Monte Carlo prices of Asian calls")
    s.add_argument("-o", "--out", required=True, help="output JSON")
    s.add_argument("--heston", action="store_true", help="price under the configured Heston model")
    s.add_argument("--surface", help="local volatility surface CSV")
    s.add_argument("--implied-vols", help="European quote file giving Black-Scholes implied volatilities")
    s.add_argument("--sigma", type=float, help="constant Black-Scholes volatility")
    s.set_defaults(func=cmd_price_asian)

    s = sub.add_parser("reproduce", parents=[common], help="run a preset study and check its targets")
    s.add_argument("-o", "--out", required=True, help="output JSON")
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommodvolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
