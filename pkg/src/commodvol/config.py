"""Run configuration: JSON files, shipped presets and ``key=value`` overrides."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .black import implied_vol
from .errors import ConfigurationError
from .grids import LocalVolSurface, Mesh, Window, build_mesh, read_surface_csv
from .parametric import Theta, sample_parametric
from .quotes import QuoteSet
from .tikhonov import RegWeights

log = logging.getLogger(__name__)

DEFAULTS: dict[str, Any] = {
    "name": "custom",
    "study": None,
    "targets": None,
    "mesh": {"tau_max": 0.5, "dtau": 0.01, "dy": 0.05, "ds": 0.0},
    "bounds": {"lower": 1e-4, "upper": 2.0},
    "weights": {
        "alpha1": 1e-7, "alpha2": 1e-4, "alpha3": 5e-5, "alpha4": 0.0, "alpha5": 0.0, "alpha6": None,
        "alpha6_c": 0.01, "tol": 0.01, "alpha2_ladder": None,
        "scaled_differences": True, "futures_norm": "absolute",
    },
    "prior": {"kind": "constant", "value": 0.08},
    "rates": {"r": 0.0, "q": 0.0},
    "conversion": {"tree_steps": None},
    "rounds": 10,
    "max_iters": 1000,
    "workers": 1,
    "seed": 0,
    "trade_date": "2000-01-03",
    "window": None,
    "synth": None,
    "online_runs": None,
    "asian": None,
}


def merge_config(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("commodvol.presets").iterdir() if p.name.endswith(".json"))


def _load_raw(source: str | Path) -> tuple[dict, Path | None]:
    path = Path(source)
    if path.is_file():
        text, base = path.read_text(), path.parent
    else:
        res = resources.files("commodvol.presets").joinpath(f"{source}.json")
        if not res.is_file():
            raise ConfigurationError(f"no config file or preset named {str(source)!r} (presets: {', '.join(preset_names())})")
        text, base = res.read_text(), None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{source}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{source}: top level must be an object")
    return raw, base


def apply_override(raw: dict, item: str) -> None:
    """Apply ``dotted.key=value``; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} must look like key=value")
    key, text = item.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path | None = None
    mesh: Mesh = field(init=False)

    def __post_init__(self):
        m = self.raw["mesh"]
        try:
            self.mesh = build_mesh(float(m["tau_max"]), float(m["dtau"]), float(m["dy"]), float(m.get("ds", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad mesh section: {exc}") from None
        w = self.raw["weights"]
        if w.get("tol") is None or not float(w["tol"]) > 0:
            raise ConfigurationError("weights.tol must be positive")
        for k in range(1, 7):
            v = w.get(f"alpha{k}")
            if v is not None and float(v) < 0:
                raise ConfigurationError(f"weights.alpha{k} must be non-negative")
        prior = self.raw["prior"]
        if prior.get("kind") == "surface" and not self.resolve(prior.get("path", "")).is_file():
            raise ConfigurationError(f"prior surface file {prior.get('path')!r} does not exist")

    @property
    def name(self) -> str:
        return self.raw["name"]

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() or self.base_dir is None else self.base_dir / p

    def section(self, key: str) -> dict:
        sec = self.raw.get(key)
        if not isinstance(sec, dict):
            raise ConfigurationError(f"config {self.name!r} has no {key!r} section")
        return sec

    @property
    def bounds(self) -> tuple[float, float]:
        b = self.raw["bounds"]
        return float(b["lower"]), float(b["upper"])

    @property
    def window(self) -> Window | None:
        w = self.raw.get("window")
        return None if w is None else Window(*map(float, w))

    def mesh_for(self, count: int = 1, ds: float | None = None) -> Mesh:
        """The calibration mesh, with ``count - 1`` index steps of size ``ds``."""
        m = self.mesh
        if count <= 1:
            return build_mesh(m.tau_max, m.dtau, m.dy)
        ds = float(ds if ds is not None else m.ds)
        if ds <= 0:
            raise ConfigurationError("several datasets need mesh.ds > 0")
        return build_mesh(m.tau_max, m.dtau, m.dy, ds=ds, L=count - 1)

    def prior_surface(self, mesh: Mesh, data: list[QuoteSet] | None = None) -> LocalVolSurface:
        lower, upper = self.bounds
        p = self.raw["prior"]
        kind = p.get("kind")
        if kind == "constant":
            return LocalVolSurface.constant(mesh, float(p["value"]), lower=lower, upper=upper)
        if kind == "parametric":
            theta = Theta(**p["theta"]) if isinstance(p["theta"], dict) else Theta.from_array(p["theta"])
            return sample_parametric(theta.check(mesh.tau_max), mesh, lower=lower, upper=upper)
        if kind == "surface":
            s = read_surface_csv(self.resolve(p["path"]), lower, upper)
            if s.mesh.shape != mesh.shape or abs(s.mesh.dtau - mesh.dtau) > 1e-12 or abs(s.mesh.dy - mesh.dy) > 1e-12:
                raise ConfigurationError("prior surface file does not match the calibration mesh")
            return LocalVolSurface(mesh, s.values, lower, upper)
        if kind == "implied_mean":
            if not data:
                raise ConfigurationError("prior kind 'implied_mean' needs quote data")
            ivs = [implied_vol(v, t, y) for d in data for v, t, y in zip(d.v, d.taus, d.y)]
            a0 = float(np.mean(np.square(ivs)) / 2.0)
            log.info("prior from mean implied variance: a0=%.6g", a0)
            return LocalVolSurface.constant(mesh, a0, lower=lower, upper=upper)
        raise ConfigurationError(f"unknown prior kind {kind!r}")

    def weights(self, mesh: Mesh, prior: LocalVolSurface, alpha2: float | None = None) -> RegWeights:
        w = self.raw["weights"]
        a2 = float(alpha2 if alpha2 is not None else w["alpha2"])
        base = float(w["alpha2"]) if w["alpha2"] else 1.0
        # alpha1 and alpha3 keep their ratio to alpha2 when alpha2 comes from the ladder.
        ratio = a2 / base if w["alpha2"] else 1.0
        if w.get("alpha6") is not None:
            a6 = float(w["alpha6"])
        else:
            a6 = float(w.get("alpha6_c") or 0.0) * mesh.ds**2 / mesh.dy**2 * a2 if mesh.L > 0 else 0.0
        return RegWeights(
            alpha1=float(w["alpha1"]) * ratio,
            alpha2=a2,
            alpha3=float(w["alpha3"]) * ratio,
            alpha4=float(w["alpha4"]),
            alpha5=float(w["alpha5"]),
            alpha6=a6,
            a0=prior.values if np.ptp(prior.values) > 0 else float(prior.values.flat[0]),
            tol=float(w["tol"]),
            scaled_differences=bool(w.get("scaled_differences", True)),
            futures_norm=w.get("futures_norm", "absolute"),
        )

    @property
    def alpha2_ladder(self) -> list[float] | None:
        lad = self.raw["weights"].get("alpha2_ladder")
        return None if lad is None else [float(x) for x in lad]


def load_config(source: str | Path | None = None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    """Defaults, then the file or preset ``source``, then each override in order."""
    raw: dict = copy.deepcopy(DEFAULTS)
    base = None
    if source is not None:
        extra, base = _load_raw(source)
        unknown = set(extra) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        raw = merge_config(raw, extra)
    for item in overrides:
        apply_override(raw, item)
    return RunConfig(raw, base)
