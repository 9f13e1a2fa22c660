"""Tikhonov penalty over a family of surfaces and the futures vector.

    psi = a1 sum_l ||a_l - a0_l||^2 + a2 sum_l ||Dy a_l||^2 + a3 sum_l ||Dtau a_l||^2
        + a4 sum_l ||q(F_l) - q(Fhat_l)||^2 + a5 ||F - Fhat||^2
        + a6 / ds^2 sum_{l>=1} ||a_l - a_{l-1}||^2

Norms are plain sums over lattice nodes.  ``Dy`` and ``Dtau`` are
rectangular forward differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .grids import Y_MAX, Mesh, VolFamily

log = logging.getLogger(__name__)

FD_STEP_FUTURES = 1e-6


@dataclass(frozen=True, eq=False)
class RegWeights:
    alpha1: float = 0.0
    alpha2: float = 0.0
    alpha3: float = 0.0
    alpha4: float = 0.0
    alpha5: float = 0.0
    alpha6: float = 0.0
    a0: float | np.ndarray = 0.08
    F_hat: Sequence[np.ndarray] | None = None
    tol: float = 0.01
    # Divide forward differences by the step (derivative approximation) or not.
    scaled_differences: bool = True
    # "absolute" uses the plain squared norms of the futures terms; "relative"
    # divides each by the squared norm of its prior value.
    futures_norm: str = "absolute"

    def __post_init__(self):
        if min(self.alphas) < 0:
            raise ConfigurationError(f"weights must be non-negative, got {self.alphas}")
        if not self.tol > 0:
            raise ConfigurationError(f"tol must be positive, got {self.tol}")
        if self.futures_norm not in ("absolute", "relative"):
            raise ConfigurationError(f"futures_norm must be 'absolute' or 'relative', got {self.futures_norm!r}")

    @property
    def alphas(self) -> tuple[float, ...]:
        return (self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.alpha5, self.alpha6)

    def scaled(self, factor: float) -> "RegWeights":
        return replace(self, **{f"alpha{k + 1}": factor * a for k, a in enumerate(self.alphas)})

    def prior_stack(self, shape: tuple[int, ...]) -> np.ndarray:
        a0 = np.asarray(self.a0, dtype=float)
        try:
            return np.broadcast_to(a0, shape)
        except ValueError:
            raise DimensionError(f"prior of shape {a0.shape} does not broadcast to family {shape}") from None

    def as_dict(self) -> dict:
        a0 = np.asarray(self.a0)
        return {
            **{f"alpha{k + 1}": a for k, a in enumerate(self.alphas)},
            "a0": float(a0) if a0.ndim == 0 else "surface",
            "F_hat": None if self.F_hat is None else [list(map(float, f)) for f in self.F_hat],
            "tol": self.tol,
            "scaled_differences": self.scaled_differences,
            "futures_norm": self.futures_norm,
        }


def default_weights(alpha2: float = 1e-4, *, a0: float = 0.08, alpha1_ratio: float = 0.01,
                    alpha3_ratio: float = 0.1, c6: float = 0.01, ds: float = 0.0, dy: float = 0.05,
                    adjust_futures: bool = False, tol: float = 0.01) -> RegWeights:
    """Weights following the usual heuristics.

    ``alpha1`` and ``alpha3`` are fractions of ``alpha2``;
    ``alpha6 = c6 * ds^2 / dy^2 * alpha2``; ``alpha4 = alpha5 = 1`` when the
    futures are adjusted.
    """
    return RegWeights(
        alpha1=alpha1_ratio * alpha2,
        alpha2=alpha2,
        alpha3=alpha3_ratio * alpha2,
        alpha4=1.0 if adjust_futures else 0.0,
        alpha5=1.0 if adjust_futures else 0.0,
        alpha6=c6 * ds**2 / dy**2 * alpha2,
        a0=a0,
        tol=tol,
    )


ALPHA2_LADDER = (1e-2, 1e-3, 1e-4)
ALPHA1_RATIOS = (0.1, 0.01)
ALPHA3_RATIOS = (0.5, 0.1, 0.02, 0.01)
ALPHA6_C = (0.01, 0.1)


@dataclass(frozen=True)
class BoundaryData:
    """Dirichlet data of the re-normalized problem at the truncation strikes.

    The computational strikes ``K = F_hat * exp(+-y_max)`` are fixed by the
    prior futures.  Re-normalizing by a candidate ``F`` moves them to
    log-moneyness ``log(K / F)``, where the boundary values are
    ``max(0, 1 - K / F)``.  ``q(F, l)`` stacks both ends per maturity.
    """

    F_hat: tuple[np.ndarray, ...]
    y_max: float = Y_MAX

    @classmethod
    def from_prior(cls, F_hat, y_max: float = Y_MAX) -> "BoundaryData":
        return cls(tuple(np.asarray(f, dtype=float) for f in F_hat), y_max)

    def q(self, F: np.ndarray, l: int) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        k = self.F_hat[l][:, None] * np.exp([-self.y_max, self.y_max])[None, :]
        return np.maximum(0.0, 1.0 - k / F[:, None]).ravel()


# -- helpers ---------------------------------------------------------------


def _diff_norm2(a: np.ndarray, axis: int, h: float) -> float:
    d = np.diff(a, axis=axis) / h
    return float(np.sum(d * d))


def _diff_grad(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Gradient of ``||D a||^2`` along ``axis``: ``2 D^T D a``."""
    d = np.diff(a, axis=axis) / (h * h)
    g = np.zeros_like(a)
    n = a.shape[axis]
    lead = [slice(None)] * a.ndim
    tail = [slice(None)] * a.ndim
    lead[axis] = slice(0, n - 1)
    tail[axis] = slice(1, n)
    g[tuple(lead)] -= d
    g[tuple(tail)] += d
    return 2.0 * g


def _steps(mesh: Mesh, w: RegWeights) -> tuple[float, float]:
    if w.scaled_differences:
        return mesh.dy, mesh.dtau
    return 1.0, 1.0


def _as_stack(family) -> tuple[np.ndarray, Mesh]:
    if isinstance(family, VolFamily):
        return family.stack(), family.mesh
    raise DimensionError("expected a VolFamily")


def _check_futures(F, w: RegWeights, n: int):
    if w.alpha4 == 0 and w.alpha5 == 0:
        return None, None
    if F is None or w.F_hat is None:
        raise ConfigurationError("alpha4/alpha5 need both a futures vector and F_hat")
    F = [np.asarray(f, dtype=float) for f in F]
    F_hat = [np.asarray(f, dtype=float) for f in w.F_hat]
    if len(F) != n or len(F_hat) != n or any(f.shape != g.shape for f, g in zip(F, F_hat)):
        raise DimensionError("futures vector and F_hat must match the family layout")
    return F, F_hat


# -- value and gradient ----------------------------------------------------


def penalty_lipschitz(mesh: Mesh, w: RegWeights, members: int = 1) -> float:
    """Upper bound on the largest eigenvalue of the surface-penalty Hessian.

    Each squared forward-difference term contributes at most ``8 alpha / h^2``
    (the spectrum of ``2 D^T D`` lies in ``[0, 8 / h^2]``).
    """
    hy, ht = _steps(mesh, w)
    lip = 2.0 * w.alpha1 + 8.0 * w.alpha2 / hy**2
    if mesh.I >= 1:
        lip += 8.0 * w.alpha3 / ht**2
    if members > 1:
        lip += 8.0 * w.alpha6 / mesh.ds**2
    return lip


def surface_terms(stack: np.ndarray, mesh: Mesh, w: RegWeights) -> np.ndarray:
    """The four surface terms ``(alpha1, alpha2, alpha3, alpha6)`` unweighted."""
    hy, ht = _steps(mesh, w)
    prior = w.prior_stack(stack.shape)
    t1 = float(np.sum((stack - prior) ** 2))
    t2 = _diff_norm2(stack, 2, hy)
    t3 = _diff_norm2(stack, 1, ht) if stack.shape[1] > 1 else 0.0
    t6 = _diff_norm2(stack, 0, mesh.ds) if stack.shape[0] > 1 else 0.0
    return np.array([t1, t2, t3, t6])


def psi_surface(stack: np.ndarray, mesh: Mesh, w: RegWeights) -> float:
    t = surface_terms(stack, mesh, w)
    return float(w.alpha1 * t[0] + w.alpha2 * t[1] + w.alpha3 * t[2] + w.alpha6 * t[3])


def psi_surface_gradient(stack: np.ndarray, mesh: Mesh, w: RegWeights) -> np.ndarray:
    hy, ht = _steps(mesh, w)
    g = np.zeros_like(stack)
    if w.alpha1:
        g += 2.0 * w.alpha1 * (stack - w.prior_stack(stack.shape))
    if w.alpha2:
        g += w.alpha2 * _diff_grad(stack, 2, hy)
    if w.alpha3 and stack.shape[1] > 1:
        g += w.alpha3 * _diff_grad(stack, 1, ht)
    if w.alpha6 and stack.shape[0] > 1:
        g += w.alpha6 * _diff_grad(stack, 0, mesh.ds)
    return g


def psi_futures(F, w: RegWeights, bdata: BoundaryData | None = None) -> float:
    """The ``alpha4`` and ``alpha5`` terms for futures ``F`` (one array per index)."""
    n = len(F) if F is not None else 0
    F, F_hat = _check_futures(F, w, n)
    if F is None:
        return 0.0
    relative = w.futures_norm == "relative"
    total = 0.0
    if w.alpha4:
        bdata = bdata if bdata is not None else BoundaryData.from_prior(F_hat)
        q_hat = [bdata.q(fh, l) for l, fh in enumerate(F_hat)]
        t4 = sum(float(np.sum((bdata.q(f, l) - qh) ** 2)) for l, (f, qh) in enumerate(zip(F, q_hat)))
        if relative:
            t4 /= sum(float(qh @ qh) for qh in q_hat)
        total += w.alpha4 * t4
    if w.alpha5:
        t5 = sum(float(np.sum((f - fh) ** 2)) for f, fh in zip(F, F_hat))
        if relative:
            t5 /= sum(float(fh @ fh) for fh in F_hat)
        total += w.alpha5 * t5
    return total


def psi_value(family: VolFamily, F, w: RegWeights, bdata: BoundaryData | None = None) -> float:
    """Exact discrete penalty for ``family`` and futures ``F`` (one array per index)."""
    stack, mesh = _as_stack(family)
    return psi_surface(stack, mesh, w) + psi_futures(F, w, bdata)


def psi_futures_gradient(F, w: RegWeights, bdata: BoundaryData | None = None) -> list[np.ndarray] | None:
    """Gradient of :func:`psi_futures`; the ``alpha4`` part by central differences."""
    n = len(F) if F is not None else 0
    F, F_hat = _check_futures(F, w, n)
    if F is None:
        return None
    relative = w.futures_norm == "relative"
    c5 = 1.0 / sum(float(fh @ fh) for fh in F_hat) if relative else 1.0
    grads = [2.0 * w.alpha5 * c5 * (f - fh) for f, fh in zip(F, F_hat)]
    if w.alpha4:
        only4 = replace(w, alpha5=0.0)
        for l, f in enumerate(F):
            for m in range(f.size):
                h = FD_STEP_FUTURES * max(1.0, abs(f[m]))
                up = [x.copy() for x in F]
                dn = [x.copy() for x in F]
                up[l][m] += h
                dn[l][m] -= h
                grads[l][m] += (psi_futures(up, only4, bdata) - psi_futures(dn, only4, bdata)) / (2 * h)
    return grads


def psi_gradient(family: VolFamily, F, w: RegWeights, bdata: BoundaryData | None = None):
    """``(surface_gradient_stack, futures_gradient_list_or_None)``."""
    stack, mesh = _as_stack(family)
    return psi_surface_gradient(stack, mesh, w), psi_futures_gradient(F, w, bdata)


# -- alpha2 selection ------------------------------------------------------


@dataclass
class Alpha2Choice:
    alpha2: float
    result: object
    qualified: bool
    tried: list = field(default_factory=list)


def select_alpha2(runner: Callable[[float], object], ladder: Sequence[float] = ALPHA2_LADDER,
                  tol: float = 0.02) -> Alpha2Choice:
    """Largest ``alpha2`` in a descending ladder whose run reaches ``R <= tol``.

    ``runner(alpha2)`` must return an object with a ``final_misfit``
    attribute.  When no rung qualifies, the smallest is returned flagged.
    """
    ladder = list(ladder)
    if not ladder:
        raise ConfigurationError("alpha2 ladder is empty")
    if any(b > a for a, b in zip(ladder, ladder[1:])):
        raise ConfigurationError("alpha2 ladder must be descending")
    tried = []
    result = None
    for alpha2 in ladder:
        result = runner(alpha2)
        tried.append((alpha2, result.final_misfit))
        if result.final_misfit <= tol:
            return Alpha2Choice(alpha2, result, True, tried)
    log.warning("no alpha2 in %s reached R <= %g; using %g", ladder, tol, ladder[-1])
    return Alpha2Choice(ladder[-1], result, False, tried)


def select_tolerance(runner: Callable[[float], object], tol: float = 0.01, growth: float = 1.25,
                     max_tol: float = 0.05) -> tuple[float, object]:
    """Raise the misfit tolerance until a run stops on it rather than stalling.

    ``runner(tol)`` returns a result with ``final_misfit`` and
    ``stopping_reason``; runs that stall (relative misfit change below
    1e-6) trigger an increase of ``tol`` by ``growth``.
    """
    while True:
        result = runner(tol)
        if result.final_misfit <= tol or tol * growth > max_tol:
            return tol, result
        tol *= growth
