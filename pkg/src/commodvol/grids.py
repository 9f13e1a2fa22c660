"""Discretization lattice, surface containers and finite-difference operators.

Log-moneyness is truncated to ``[-5, 5]``; nodes are ``y_j = j*dy`` for
``j = -J..J`` with ``J = 5/dy`` and ``tau_i = i*dtau`` for ``i = 0..I``.
Surfaces store the diffusion ``a = sigma_loc**2 / 2`` on that lattice.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, DataError, DimensionError

Y_MAX = 5.0
_INTEGRAL_TOL = 1e-9

DiffKind = Literal["d_y_forward", "d_tau_forward", "d_y_centered", "d_yy_centered"]


@dataclass(frozen=True)
class Mesh:
    tau_max: float
    dtau: float
    dy: float
    ds: float = 0.0
    I: int = 0
    J: int = 0
    L: int = 0

    @property
    def beta(self) -> float:
        return self.dtau / self.dy

    @property
    def eta(self) -> float:
        return self.dtau / self.dy**2

    @property
    def taus(self) -> np.ndarray:
        return np.arange(self.I + 1) * self.dtau

    @property
    def ys(self) -> np.ndarray:
        return np.arange(-self.J, self.J + 1) * self.dy

    @property
    def shape(self) -> tuple[int, int]:
        return (self.I + 1, 2 * self.J + 1)

    def index_values(self, s0: float = 0.0) -> np.ndarray:
        return s0 + np.arange(self.L + 1) * self.ds


def build_mesh(tau_max: float, dtau: float, dy: float, ds: float = 0.0, L: int = 0) -> Mesh:
    """Build the lattice; ``I`` and ``J`` are derived, never supplied."""
    if not (tau_max > 0 and dtau > 0 and dy > 0):
        raise ConfigurationError(
            f"mesh steps must be positive (tau_max={tau_max}, dtau={dtau}, dy={dy})"
        )
    if ds < 0 or L < 0:
        raise ConfigurationError(f"ds and L must be non-negative (ds={ds}, L={L})")
    if L > 0 and ds <= 0:
        raise ConfigurationError("ds must be positive when L > 0")
    ratio = Y_MAX / dy
    J = int(round(ratio))
    if J < 2 or abs(ratio - J) > _INTEGRAL_TOL * max(1.0, ratio):
        raise ConfigurationError(f"5/dy must be an integer >= 2, got 5/{dy} = {ratio:.12g}")
    I = int(round(tau_max / dtau))
    if I < 1 or abs(I * dtau - tau_max) > 1e-9 * max(1.0, tau_max):
        raise ConfigurationError(
            f"tau_max/dtau must be an integer >= 1, got {tau_max}/{dtau} = {tau_max / dtau:.12g}"
        )
    return Mesh(tau_max=I * dtau, dtau=dtau, dy=dy, ds=ds, I=I, J=J, L=L)


@dataclass(frozen=True)
class Window:
    """Rectangle of quoted data; surfaces are extended flat outside it."""

    tau_lo: float
    tau_hi: float
    y_lo: float
    y_hi: float

    def as_dict(self) -> dict:
        return {"tau_lo": self.tau_lo, "tau_hi": self.tau_hi, "y_lo": self.y_lo, "y_hi": self.y_hi}


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LocalVolSurface:
    mesh: Mesh
    values: np.ndarray
    lower: float = 1e-4
    upper: float = 2.0
    window: Window | None = None

    def __post_init__(self):
        values = _readonly(self.values)
        if values.shape != self.mesh.shape:
            raise DimensionError(f"surface shape {values.shape} does not match mesh {self.mesh.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("surface values must be finite")
        if not (0 < self.lower <= self.upper < math.inf):
            raise ConfigurationError(f"need 0 < a1 <= a2 < inf, got a1={self.lower}, a2={self.upper}")
        if values.min() < self.lower - 1e-15 or values.max() > self.upper + 1e-15:
            raise ConfigurationError(
                f"surface values [{values.min():.6g}, {values.max():.6g}] outside box "
                f"[{self.lower}, {self.upper}]"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, mesh: Mesh, value: float, **kw) -> "LocalVolSurface":
        return cls(mesh, np.full(mesh.shape, float(value)), **kw)

    @classmethod
    def from_function(cls, mesh: Mesh, sigma, **kw) -> "LocalVolSurface":
        """Sample a local *volatility* ``sigma(tau, y)`` and store ``sigma**2/2``."""
        tt, yy = np.meshgrid(mesh.taus, mesh.ys, indexing="ij")
        return cls(mesh, 0.5 * np.asarray(sigma(tt, yy), dtype=float) ** 2, **kw)

    def with_values(self, values: np.ndarray) -> "LocalVolSurface":
        return LocalVolSurface(self.mesh, values, self.lower, self.upper, self.window)

    def with_window(self, window: Window | None) -> "LocalVolSurface":
        return LocalVolSurface(self.mesh, self.values, self.lower, self.upper, window)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(2.0 * self.values)


@dataclass(frozen=True, eq=False)
class VolFamily:
    surfaces: tuple[LocalVolSurface, ...]

    def __post_init__(self):
        surfaces = tuple(self.surfaces)
        if not surfaces:
            raise DimensionError("a family needs at least one surface")
        mesh = surfaces[0].mesh
        for s in surfaces[1:]:
            if s.mesh != mesh:
                raise DimensionError("all family members must share one mesh")
        object.__setattr__(self, "surfaces", surfaces)

    @property
    def mesh(self) -> Mesh:
        return self.surfaces[0].mesh

    @property
    def lower(self) -> float:
        return self.surfaces[0].lower

    @property
    def upper(self) -> float:
        return self.surfaces[0].upper

    def __len__(self) -> int:
        return len(self.surfaces)

    def __getitem__(self, l: int) -> LocalVolSurface:
        return self.surfaces[l]

    def stack(self) -> np.ndarray:
        """Values as an ``(L+1, I+1, 2J+1)`` array."""
        return np.stack([s.values for s in self.surfaces])

    def with_stack(self, values: np.ndarray) -> "VolFamily":
        return VolFamily(tuple(s.with_values(v) for s, v in zip(self.surfaces, values)))

    @classmethod
    def broadcast(cls, surface: LocalVolSurface, n: int) -> "VolFamily":
        return cls(tuple(surface for _ in range(n)))


@dataclass(frozen=True, eq=False)
class PriceSurface:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        values = _readonly(self.values)
        if values.shape != self.mesh.shape:
            raise DimensionError(f"price grid shape {values.shape} does not match mesh {self.mesh.shape}")
        object.__setattr__(self, "values", values)


# -- interpolation ---------------------------------------------------------


def _bilinear(grid: np.ndarray, t0: float, dt: float, y0: float, dy: float, tau, y):
    n_t, n_y = grid.shape
    ft = np.clip((np.asarray(tau, dtype=float) - t0) / dt, 0.0, n_t - 1)
    fy = np.clip((np.asarray(y, dtype=float) - y0) / dy, 0.0, n_y - 1)
    i = np.minimum(np.floor(ft).astype(int), n_t - 2)
    j = np.minimum(np.floor(fy).astype(int), n_y - 2)
    wt = ft - i
    wy = fy - j
    return (
        (1 - wt) * (1 - wy) * grid[i, j]
        + (1 - wt) * wy * grid[i, j + 1]
        + wt * (1 - wy) * grid[i + 1, j]
        + wt * wy * grid[i + 1, j + 1]
    )


def eval_surface(a: LocalVolSurface, tau, y, window: Window | None = None):
    """Evaluate ``a`` off-grid with flat extension outside the data window.

    For ``tau`` below the window the surface is frozen at the first quoted
    maturity; ``y`` is clamped to the quoted log-moneyness range; beyond
    ``tau_max`` the last level is used.  Without a window only the mesh
    clamps apply.  Accepts scalars or broadcastable arrays.
    """
    window = window if window is not None else a.window
    tau = np.asarray(tau, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(tau < 0):
        raise DataError("tau must be non-negative")
    if window is not None:
        tau = np.maximum(tau, window.tau_lo)
        y = np.clip(y, window.y_lo, window.y_hi)
    mesh = a.mesh
    tau = np.minimum(tau, mesh.tau_max)
    y = np.clip(y, -mesh.J * mesh.dy, mesh.J * mesh.dy)
    out = _bilinear(a.values, 0.0, mesh.dtau, -mesh.J * mesh.dy, mesh.dy, tau, y)
    return float(out) if out.ndim == 0 else out


# -- difference operators --------------------------------------------------


def _forward(n: int, h: float) -> sp.csr_matrix:
    m = sp.diags([-np.ones(n), np.ones(n - 1)], [0, 1], shape=(n, n), format="lil")
    m[n - 1, n - 2] = -1.0
    m[n - 1, n - 1] = 1.0
    return sp.csr_matrix(m) / h


def _centered(n: int, h: float) -> sp.csr_matrix:
    m = sp.diags([-0.5 * np.ones(n - 1), 0.5 * np.ones(n - 1)], [-1, 1], shape=(n, n), format="lil")
    m[0, :3] = [-1.5, 2.0, -0.5]
    m[n - 1, n - 3 :] = [0.5, -2.0, 1.5]
    return sp.csr_matrix(m) / h


def _centered2(n: int, h: float) -> sp.csr_matrix:
    m = sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], shape=(n, n), format="lil")
    m[0, :4] = [2.0, -5.0, 4.0, -1.0]
    m[n - 1, n - 4 :] = [-1.0, 4.0, -5.0, 2.0]
    return sp.csr_matrix(m) / h**2


@dataclass(frozen=True, eq=False)
class DiffOps:
    """Square difference matrices on the full ``y`` row and ``tau`` column.

    Boundary rows are one-sided with the truncation order of the interior
    stencil.  The Tikhonov penalty uses the rectangular variants from
    :func:`forward_difference` instead.
    """

    d_y_forward: sp.csr_matrix
    d_tau_forward: sp.csr_matrix
    d_y_centered: sp.csr_matrix
    d_yy_centered: sp.csr_matrix

    @classmethod
    def for_mesh(cls, mesh: Mesh) -> "DiffOps":
        ny, nt = 2 * mesh.J + 1, mesh.I + 1
        return cls(
            d_y_forward=_forward(ny, mesh.dy),
            d_tau_forward=_forward(nt, mesh.dtau) if nt >= 2 else sp.csr_matrix((nt, nt)),
            d_y_centered=_centered(ny, mesh.dy),
            d_yy_centered=_centered2(ny, mesh.dy),
        )


def apply_diff(ops: DiffOps, kind: DiffKind, g) -> np.ndarray:
    """Apply one of the four stencils to a grid row (or column for ``d_tau_forward``)."""
    try:
        mat = getattr(ops, kind)
    except AttributeError:
        raise ConfigurationError(f"unknown difference operator {kind!r}") from None
    g = np.asarray(g, dtype=float)
    if g.shape[0] != mat.shape[1]:
        raise DimensionError(f"{kind} expects length {mat.shape[1]}, got {g.shape[0]}")
    return mat @ g


def forward_difference(n: int, h: float = 1.0) -> sp.csr_matrix:
    """``(n-1) x n`` matrix mapping ``g`` to ``(g[k+1] - g[k]) / h``."""
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr") / h


# -- surface CSV -----------------------------------------------------------


def write_surface_csv(path: str | Path, surface: LocalVolSurface | PriceSurface) -> None:
    mesh = surface.mesh
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau\\y"] + [f"{y:.17e}" for y in mesh.ys])
        for tau, row in zip(mesh.taus, surface.values):
            w.writerow([f"{tau:.17e}"] + [f"{v:.17e}" for v in row])


def read_surface_csv(path: str | Path, lower: float = 1e-4, upper: float = 2.0) -> LocalVolSurface:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or not rows[0][0].startswith("tau"):
        raise DataError(f"{path}: missing 'tau\\y' header")
    try:
        ys = np.array([float(x) for x in rows[0][1:]])
        body = np.array([[float(x) for x in r] for r in rows[1:]])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from None
    if body.ndim != 2 or body.shape[1] != ys.size + 1 or body.shape[0] < 2:
        raise DataError(f"{path}: ragged or empty surface table")
    taus = body[:, 0]
    dy = ys[1] - ys[0]
    dtau = taus[1] - taus[0]
    mesh = build_mesh(taus[-1], dtau, dy)
    if mesh.shape != body[:, 1:].shape:
        raise DataError(f"{path}: grid does not span [-5, 5] x [0, tau_max] uniformly")
    return LocalVolSurface(mesh, body[:, 1:], lower=min(lower, body[:, 1:].min()), upper=max(upper, body[:, 1:].max()))


def relative_error(a: np.ndarray, truth: np.ndarray) -> float:
    """Normalized 2-norm error ``||a - truth|| / ||truth||``."""
    return float(np.linalg.norm(np.ravel(a) - np.ravel(truth)) / np.linalg.norm(np.ravel(truth)))


def window_mask(mesh: Mesh, window: Window) -> np.ndarray:
    tt, yy = np.meshgrid(mesh.taus, mesh.ys, indexing="ij")
    eps = 1e-12
    return (
        (tt >= window.tau_lo - eps)
        & (tt <= window.tau_hi + eps)
        & (yy >= window.y_lo - eps)
        & (yy <= window.y_hi + eps)
    )


def stack_of(surfaces: Sequence[LocalVolSurface]) -> np.ndarray:
    return np.stack([s.values for s in surfaces])
