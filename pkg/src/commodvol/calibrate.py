"""Misfit, projected gradient descent and the futures alternation.

The objective for a family ``A = (a_0, ..., a_L)`` is

    J(A) = sum_l ||P_l v(a_l) - v_l||^2,      F(A) = J(A) + psi(A; F)

and each step is ``A <- clip(A - lam * grad F, a1, a2)`` with
``lam = min(2.5, J / (2 ||grad J||^2), 1 / L_psi)``, where ``L_psi`` is the
Lipschitz constant of the penalty gradient.  The last cap keeps the
explicit penalty step stable on fine meshes with small steps ``dtau``, ``dy``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from . import dupire
from .errors import ConfigurationError, DataError, DescentError, DimensionError
from .grids import LocalVolSurface, Mesh, VolFamily, Window, window_mask
from .quotes import QuoteSet, extend_to_horizon
from .tikhonov import BoundaryData, RegWeights, penalty_lipschitz, psi_futures, psi_surface, psi_surface_gradient

log = logging.getLogger(__name__)

STEP_CAP = 2.5
STALL_RTOL = 1e-6
DIVERGENCE_RUN = 10
FUTURES_SPAN = 0.2
FUTURES_SCAN = 81


@dataclass
class CalibResult:
    family: VolFamily
    futures: list[np.ndarray]
    iterations: int
    misfit_history: list[float]
    final_misfit: float
    stopping_reason: str
    window: Window | None = None
    error: float | None = None
    futures_history: list[list[np.ndarray]] = field(default_factory=list)
    weights: RegWeights | None = None

    @property
    def surface(self) -> LocalVolSurface:
        return self.family[0]

    def report(self) -> dict:
        return {
            "weights": None if self.weights is None else self.weights.as_dict(),
            "iterations": self.iterations,
            "stopping_reason": self.stopping_reason,
            "misfit_history": [float(r) for r in self.misfit_history],
            "final_misfit": float(self.final_misfit),
            "error": None if self.error is None else float(self.error),
            "futures_before": [list(map(float, f)) for f in self.futures_history[0]]
            if self.futures_history else [list(map(float, f)) for f in self.futures],
            "futures_after": [list(map(float, f)) for f in self.futures],
            "core_window": None if self.window is None else self.window.as_dict(),
        }


# -- misfit and gradient ---------------------------------------------------


class _Problem:
    """Observation operators and data for a list of quote sets on one mesh."""

    def __init__(self, mesh: Mesh, data: Sequence[QuoteSet], workers: int = 1):
        self.mesh = mesh
        self.data = list(data)
        self.workers = workers
        self.P = [dupire.observation_matrix(mesh, d.taus, d.y) for d in self.data]
        self.obs = [d.v for d in self.data]
        self.data_norm = math.sqrt(sum(float(o @ o) for o in self.obs))
        if self.data_norm == 0:
            raise DataError("empty quote data")
        self.v0 = dupire.initial_condition(mesh)

    def _one(self, a: np.ndarray, l: int, gradient: bool):
        m = self.mesh
        v, bad = dupire._cn_forward(a, self.v0, m.eta, m.beta)
        if bad >= 0:
            raise dupire.SolverInstabilityError(f"forward solve failed at level {bad} for index {l}", level=bad)
        r = self.P[l] @ v.ravel() - self.obs[l]
        J = float(r @ r)
        if not gradient:
            return J, None
        spikes = (2.0 * (self.P[l].T @ r)).reshape(m.shape)
        u, bad = dupire._cn_adjoint(a, spikes, m.eta, m.beta)
        if bad >= 0:
            raise dupire.SolverInstabilityError(f"adjoint sweep failed at level {bad} for index {l}", level=bad)
        return J, dupire._assemble_gradient(v, u, m.eta, m.beta)

    def evaluate(self, stack: np.ndarray, gradient: bool = True):
        """``(J, grad J stack or None)``; per-index terms summed in index order."""
        n = stack.shape[0]
        if n != len(self.data):
            raise DimensionError(f"{n} surfaces but {len(self.data)} quote sets")
        arrays = [np.ascontiguousarray(stack[l]) for l in range(n)]
        if self.workers > 1 and n > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                parts = list(pool.map(lambda l: self._one(arrays[l], l, gradient), range(n)))
        else:
            parts = [self._one(arrays[l], l, gradient) for l in range(n)]
        J = 0.0
        for p in parts:
            J += p[0]
        grad = np.stack([p[1] for p in parts]) if gradient else None
        return J, grad

    def R(self, J: float) -> float:
        return math.sqrt(J) / self.data_norm


def _as_family(family) -> VolFamily:
    if isinstance(family, LocalVolSurface):
        return VolFamily((family,))
    return family


def misfit_J(family, data: Sequence[QuoteSet]) -> float:
    """Sum of squared differences between interpolated model prices and quotes."""
    family = _as_family(family)
    J, _ = _Problem(family.mesh, data).evaluate(family.stack(), gradient=False)
    return J


def misfit_R(family, data: Sequence[QuoteSet]) -> float:
    """Normalized misfit ``||Pv - v_data|| / ||v_data||``."""
    family = _as_family(family)
    prob = _Problem(family.mesh, data)
    J, _ = prob.evaluate(family.stack(), gradient=False)
    return prob.R(J)


def gradient_J(family, data: Sequence[QuoteSet]) -> tuple[float, np.ndarray]:
    family = _as_family(family)
    return _Problem(family.mesh, data).evaluate(family.stack())


def step_length(J: float, grad_J_norm2: float) -> float:
    if grad_J_norm2 <= 0 or not math.isfinite(grad_J_norm2):
        return STEP_CAP
    return min(STEP_CAP, J / (2.0 * grad_J_norm2))


def data_window(data: Sequence[QuoteSet]) -> Window:
    """Smallest rectangle holding every quote (the extrapolation core)."""
    taus = np.concatenate([d.taus for d in data])
    ys = np.concatenate([d.y for d in data])
    return Window(float(taus.min()), float(taus.max()), float(ys.min()), float(ys.max()))


# -- descent ---------------------------------------------------------------


def _descend(family: VolFamily, data: Sequence[QuoteSet], w: RegWeights, max_iters: int,
             workers: int = 1) -> CalibResult:
    mesh = family.mesh
    if len(data) != len(family):
        raise DimensionError(f"{len(family)} surfaces but {len(data)} quote sets")
    lo, hi = family.lower, family.upper
    prob = _Problem(mesh, data, workers)
    stack = np.array(family.stack())
    J, gJ = prob.evaluate(stack)
    R = prob.R(J)
    # The explicit step is unstable on the penalty once lam exceeds 2 / L_psi.
    lip = penalty_lipschitz(mesh, w, len(family))
    lam_cap = 1.0 / lip if lip > 0 else STEP_CAP
    history = [R]
    obj = J + psi_surface(stack, mesh, w)
    reason = "max_iters"
    rising = 0
    k = 0
    while True:
        if R <= w.tol:
            reason = "tolerance"
            break
        if k >= max_iters:
            break
        gF = gJ + psi_surface_gradient(stack, mesh, w)
        lam = min(step_length(J, float(np.sum(gJ * gJ))), lam_cap)
        stack = np.clip(stack - lam * gF, lo, hi)
        J, gJ = prob.evaluate(stack)
        R_new = prob.R(J)
        history.append(R_new)
        k += 1
        if not math.isfinite(R_new):
            raise DescentError("misfit became non-finite", history)
        # The penalty may legitimately trade misfit for smoothness, so
        # divergence is judged on the full objective.
        obj_new = J + psi_surface(stack, mesh, w)
        rising = rising + 1 if obj_new > obj else 0
        obj = obj_new
        if rising >= DIVERGENCE_RUN:
            raise DescentError(f"objective grew for {DIVERGENCE_RUN} consecutive steps", history)
        change = abs(R_new - R) / R if R > 0 else 0.0
        R = R_new
        if change < STALL_RTOL:
            reason = "stalled" if R > w.tol else "tolerance"
            break
    log.info("descent stopped after %d iterations (%s): R=%.6g, psi=%.6g", k, reason, R,
             psi_surface(stack, mesh, w))
    window = data_window(data)
    out = family.with_stack(stack)
    out = VolFamily(tuple(s.with_window(window) for s in out.surfaces))
    return CalibResult(
        family=out,
        futures=[np.array(d.futures) for d in data],
        iterations=k,
        misfit_history=history,
        final_misfit=R,
        stopping_reason=reason,
        window=window,
        weights=w,
    )


def descend(family, data, w: RegWeights, max_iters: int = 500, workers: int = 1) -> CalibResult:
    """Projected gradient descent on ``J + psi`` with futures held fixed.

    ``family`` may be a single :class:`LocalVolSurface` with one quote set.
    Stops on ``R <= w.tol``, on a relative change of ``R`` below 1e-6, or
    after ``max_iters`` steps.
    """
    if isinstance(data, QuoteSet):
        data = [data]
    return _descend(_as_family(family), list(data), w, max_iters, workers)


def calibrate_online(datasets: Sequence[QuoteSet], w: RegWeights, init, max_iters: int = 500,
                     workers: int = 1) -> CalibResult:
    """Joint calibration of one surface per index value, coupled in the index.

    Datasets must be sorted by index value.  Maturity ladders shorter than
    the longest one are padded by repeating their last maturity.
    """
    datasets = list(datasets)
    family = _as_family(init)
    if len(family) == 1 and len(datasets) > 1:
        family = VolFamily.broadcast(family[0], len(datasets))
    if len(family) != len(datasets):
        raise ConfigurationError(f"{len(family)} initial surfaces for {len(datasets)} datasets")
    index = [d.index for d in datasets]
    if any(b < a for a, b in zip(index, index[1:])):
        raise ConfigurationError("datasets must be sorted by ascending index value")
    if len(datasets) > 1:
        if family.mesh.ds <= 0:
            raise ConfigurationError("online calibration over several indices needs mesh.ds > 0")
        horizon = max(float(d.maturities.max()) for d in datasets)
        datasets = [extend_to_horizon(d, horizon) for d in datasets]
    return _descend(family, datasets, w, max_iters, workers)


# -- futures adjustment ----------------------------------------------------


def _price_row(v: np.ndarray, mesh: Mesh, tau: float) -> np.ndarray:
    ft = min(max(tau / mesh.dtau, 0.0), mesh.I)
    i = min(int(math.floor(ft + 1e-9)), mesh.I - 1)
    wt = min(max(ft - i, 0.0), 1.0)
    return (1 - wt) * v[i] + wt * v[i + 1]


def _data_term(row, ys, strikes, prices):
    def term(f: float) -> float:
        r = np.interp(np.log(strikes / f), ys, row) - prices / f
        return float(r @ r)

    return term


def adjust_futures(family, data: Sequence[QuoteSet], w: RegWeights, span: float = FUTURES_SPAN) -> list[np.ndarray]:
    """Minimize misfit plus the futures penalty over the futures, surfaces fixed.

    Each maturity's quotes and penalty entries depend on one futures value
    only, so the problem splits into scalar minimizations on
    ``[(1-span), (1+span)] * F_hat``: a coarse scan followed by bounded
    Brent refinement around the best scan point.
    """
    family = _as_family(family)
    data = list(data)
    if len(data) != len(family):
        raise DimensionError(f"{len(family)} surfaces but {len(data)} quote sets")
    if w.F_hat is None:
        w = replace(w, F_hat=tuple(np.array(d.futures) for d in data))
    if len(w.F_hat) != len(data):
        raise DimensionError("F_hat must hold one futures vector per quote set")
    bdata = BoundaryData.from_prior(w.F_hat)
    mesh = family.mesh
    F = [np.array(d.futures, dtype=float) for d in data]
    for l, (a, d) in enumerate(zip(family, data)):
        v = dupire.solve_dupire(a).values
        fh = np.asarray(w.F_hat[l], dtype=float)
        if fh.shape != d.futures.shape:
            raise DimensionError("F_hat and futures vectors differ in length")
        for m in range(d.maturities.size):
            sel = d.maturity_index == m
            row = _price_row(v, mesh, float(d.maturities[m]))
            fit = _data_term(row, mesh.ys, d.strikes[sel], d.prices[sel]) if np.any(sel) else (lambda f: 0.0)

            def objective(f: float) -> float:
                F[l][m] = f
                return fit(f) + psi_futures(F, w, bdata)

            current = float(F[l][m])
            lo, hi = (1 - span) * fh[m], (1 + span) * fh[m]
            grid = np.linspace(lo, hi, FUTURES_SCAN)
            vals = np.array([objective(f) for f in grid])
            k = int(np.argmin(vals))
            best = minimize_scalar(objective, bounds=(grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]),
                                   method="bounded", options={"xatol": 1e-10 * fh[m]})
            f, val = (float(best.x), float(best.fun)) if best.fun <= vals[k] else (float(grid[k]), float(vals[k]))
            if lo <= current <= hi and objective(current) <= val:
                f = current
            if f <= lo * (1 + 1e-9) or f >= hi * (1 - 1e-9):
                log.warning("futures entry %d of index %d pinned at the +-%g bound", m, l, span)
            F[l][m] = f
    return F


def calibrate_with_futures(data: Sequence[QuoteSet], w: RegWeights, init, rounds: int = 10,
                           max_iters: int = 500, restart: bool = True, workers: int = 1) -> CalibResult:
    """Alternate surface descent and futures adjustment.

    Each round descends with futures fixed and, unless the tolerance is met,
    re-fits the futures with the surfaces fixed.  With ``restart`` every
    descent starts from ``init`` so that distortions absorbed while the
    futures were wrong do not persist.  Without futures weights
    (``alpha4 = alpha5 = 0``) this is plain :func:`descend`.
    """
    if rounds < 1:
        raise ConfigurationError("rounds must be at least 1")
    if isinstance(data, QuoteSet):
        data = [data]
    data = list(data)
    init = _as_family(init)
    if w.alpha4 == 0 and w.alpha5 == 0:
        return _descend(init, data, w, max_iters, workers)
    if w.F_hat is None:
        w = replace(w, F_hat=tuple(np.array(d.futures) for d in data))
    history: list[float] = []
    futures_history = [[np.array(d.futures) for d in data]]
    iterations = 0
    family = init
    result = None
    for rnd in range(1, rounds + 1):
        result = _descend(init if restart else family, data, w, max_iters, workers)
        family = result.family
        iterations += result.iterations
        history.extend(result.misfit_history)
        log.info("round %d: R=%.6g after %d iterations", rnd, result.final_misfit, result.iterations)
        if result.final_misfit <= w.tol:
            break
        F = adjust_futures(family, data, w)
        data = [d.with_futures(f) for d, f in zip(data, F)]
        futures_history.append([np.array(f) for f in F])
        history.append(misfit_R(family, data))
    return CalibResult(
        family=family,
        futures=[np.array(d.futures) for d in data],
        iterations=iterations,
        misfit_history=history,
        final_misfit=history[-1],
        stopping_reason=result.stopping_reason if history[-1] == result.final_misfit else "rounds",
        window=data_window(data),
        futures_history=futures_history,
        weights=w,
    )


# -- reconstruction error --------------------------------------------------


def _values(x) -> np.ndarray:
    if isinstance(x, VolFamily):
        return x.stack()
    if isinstance(x, LocalVolSurface):
        return x.values
    return np.asarray(x, dtype=float)


def _mask(mesh: Mesh | None, window: Window | None, shape) -> np.ndarray:
    if window is None:
        return np.ones(shape, dtype=bool)
    if mesh is None:
        raise ConfigurationError("a window needs surfaces that carry their mesh")
    return np.broadcast_to(window_mask(mesh, window), shape)


def _mesh_of(*xs) -> Mesh | None:
    for x in xs:
        if isinstance(x, (VolFamily, LocalVolSurface)):
            return x.mesh
    return None


def surface_error(estimate, truth, window: Window | None = None) -> float:
    """``||a - a_true|| / ||a_true||`` over the nodes inside ``window``."""
    est = _values(estimate)
    tru = np.broadcast_to(_values(truth), est.shape)
    m = _mask(_mesh_of(estimate, truth), window, est.shape)
    return float(np.linalg.norm(est[m] - tru[m]) / np.linalg.norm(tru[m]))


def nodewise_relative_error(estimate, truth, window: Window | None = None) -> tuple[float, float]:
    """Mean and standard deviation of ``|a - a_true| / a_true`` over ``window``."""
    est = _values(estimate)
    tru = np.broadcast_to(_values(truth), est.shape)
    m = _mask(_mesh_of(estimate, truth), window, est.shape)
    rel = np.abs(est[m] - tru[m]) / tru[m]
    return float(rel.mean()), float(rel.std())
