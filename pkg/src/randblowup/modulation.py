"""Modulation decomposition ``a = (1/lam)(Q~_b + eps)((x - x_c)/lam) e^{-i gamma}``.

The five parameters (lam, b, x_1, x_2, gamma) are fixed by the
orthogonality conditions ``Re int eps conj(h) dy = 0`` for

    h = |y|^2 Q~_b,  y_1 Q~_b,  y_2 Q~_b,  i Lambda Q~_b,  i Lambda^2 Q~_b,

with ``Lambda g = g + y.grad g``. Pairings are evaluated on the simulation
grid: the node ``x_j`` maps to ``y_j = (x_j - x_c)/lam`` and ``dy = dx^2/lam^2``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize_scalar

from .profiles import (C_DEFAULT, ETA_DEFAULT, ProfileTable, estimate_Gamma_b, make_Qb_tilde,
                       make_zeta_tilde, solve_zeta_b, continuation)
from .radial import RadialProfile
from .spectral import ComplexField, Grid2D, gradient

N_COND = 5
COND_NAMES = ("r2", "y1", "y2", "iLambda", "iLambda2")


class DecompositionError(RuntimeError):
    def __init__(self, msg: str, best_residual: float = np.inf):
        super().__init__(msg)
        self.best_residual = best_residual


@dataclass(frozen=True, eq=False)
class ModulationState:
    """Parameters, residual field and the five orthogonality values.

    ``eps`` lives on ``Grid2D(n, L/lam)``; its node ``j`` is the rescaled
    point ``y_j = (x_j - x_c)/lam``. ``residuals`` are the pairings divided
    by ``||h||_2``.
    """

    lam: float
    b: float
    x_c: tuple[float, float]
    gamma: float
    eps: Optional[ComplexField] = dc_field(default=None, repr=False)
    residuals: tuple = ()
    iterations: int = 0
    converged: bool = True

    def params(self) -> np.ndarray:
        return np.array([self.lam, self.b, self.x_c[0], self.x_c[1], self.gamma])

    @classmethod
    def from_params(cls, p, **kw) -> "ModulationState":
        return cls(float(p[0]), float(p[1]), (float(p[2]), float(p[3])), float(p[4]), **kw)


class _Frame:
    """Rescaled coordinates of the grid points inside the profile support."""

    def __init__(self, grid: Grid2D, lam: float, x_c, r_sup: float):
        X, Y = grid.mesh
        y1 = (X - x_c[0]) / lam
        y2 = (Y - x_c[1]) / lam
        r = np.hypot(y1, y2)
        self.sel = r <= r_sup
        self.y1, self.y2, self.r = y1[self.sel], y2[self.sel], r[self.sel]
        self.dy = grid.cell_area / lam**2


def _support(table: ProfileTable, b: float) -> float:
    """Largest radius among the profiles entering the interpolation at b."""
    k = abs(b) / table.db
    lo = max(int(np.floor(k)) - 2, 0)
    hi = min(int(np.floor(k)) + 3, len(table.profiles) - 1)
    return max(p.r_max for p in table.profiles[lo:hi + 1])


def _directions(table: ProfileTable, b: float, fr: _Frame) -> tuple[np.ndarray, np.ndarray]:
    """(Q~_b, H) with H[i] the five pairing directions at the frame points."""
    r = fr.r
    q = table.evaluate(b, r)
    dq = table.evaluate(b, r, 1)
    ddq = table.evaluate(b, r, 2)
    lam1 = q + r * dq
    lam2 = q + 3 * r * dq + r * r * ddq
    H = np.stack([r * r * q, fr.y1 * q, fr.y2 * q, 1j * lam1, 1j * lam2])
    return q, H


def _field_at(a: np.ndarray, fr: _Frame) -> np.ndarray:
    return a[fr.sel]


def _conditions(a: np.ndarray, grid: Grid2D, table: ProfileTable, p: np.ndarray,
                r_sup: float) -> tuple[np.ndarray, np.ndarray]:
    lam, b, x1, x2, gam = p
    fr = _Frame(grid, lam, (x1, x2), r_sup)
    q, H = _directions(table, b, fr)
    eps = lam * _field_at(a, fr) * np.exp(1j * gam) - q
    c = fr.dy * np.real(H.conj() @ eps)
    hn = np.sqrt(fr.dy * np.sum(np.abs(H) ** 2, axis=1))
    return c, hn


def construct_ansatz(grid: Grid2D, table: ProfileTable, lam: float, b: float, x_c,
                     gamma: float, eps: Optional[Callable] = None) -> ComplexField:
    """``(1/lam)(Q~_b + eps)((x - x_c)/lam) e^{-i gamma}`` on ``grid``.

    ``eps`` is an optional callable of the rescaled coordinates (y1, y2).
    """
    X, Y = grid.mesh
    y1, y2 = (X - x_c[0]) / lam, (Y - x_c[1]) / lam
    v = table.evaluate(b, np.hypot(y1, y2))
    if eps is not None:
        v = v + eps(y1, y2)
    return ComplexField(grid, v * np.exp(-1j * gamma) / lam)


def cold_start(field: ComplexField, table: ProfileTable, b0: float = 0.05) -> ModulationState:
    """Deterministic first guess: lam from the gradient ratio, x_c from the
    |u|^2 centroid, gamma from the phase of the overlap with the ansatz."""
    grid = field.grid
    u = field.physical().values
    w = grid.cell_area
    kin = w * np.sum(grid.ksq * np.abs(field.spectral().values) ** 2)
    if not kin > 0:
        raise DecompositionError("field has no gradient; nothing to decompose", np.inf)
    qgrad = np.sqrt(2 * np.pi * _radial_grad_sq(table.q))
    lam = float(qgrad / np.sqrt(kin))
    X, Y = grid.mesh
    dens = np.abs(u) ** 2
    m = np.sum(dens)
    xc = (float(np.sum(X * dens) / m), float(np.sum(Y * dens) / m))
    gamma = _overlap_phase(field, table, (lam, b0, xc[0], xc[1], 0.0))
    return ModulationState(lam, b0, xc, gamma)


def _overlap_phase(field: ComplexField, table: ProfileTable, p) -> float:
    """gamma maximizing the overlap of the field with the ansatz at the other parameters."""
    ans = construct_ansatz(field.grid, table, p[0], p[1], (p[2], p[3]), 0.0).values
    return float(-np.angle(np.vdot(ans, field.physical().values)))


def _radial_grad_sq(q: RadialProfile) -> float:
    r, wq = q.quadrature()
    return float(np.sum(wq * r * np.abs(q.evaluate(r, 1)) ** 2))


def decompose(field: ComplexField, guess: Optional[ModulationState], table: ProfileTable,
              rel_step: float = 1e-6, max_iter: int = 50, max_halvings: int = 8,
              tol: float = 1e-12) -> ModulationState:
    """Solve the five orthogonality conditions for (lam, b, x_c, gamma) by
    damped Newton with a forward-difference Jacobian.

    Iteration stops when the normalized residual falls below ``tol`` or
    stops decreasing. Raises :class:`DecompositionError` on divergence and
    ``ValueError`` if the solution leaves the tabulated b range.
    """
    grid = field.grid
    a = field.physical().values
    if guess is None:
        guess = cold_start(field, table)
    p = guess.params().astype(float)
    bmax = table.b_max
    if abs(p[1]) > bmax:
        p[1] = np.sign(p[1]) * bmax
    p[4] = _unwrap_to(p[4], _overlap_phase(field, table, p))

    def F(p):
        if not p[0] > 0 or abs(p[1]) > bmax:
            return None
        c, hn = _conditions(a, grid, table, p, _support(table, p[1]))
        return c / hn

    f = F(p)
    if f is None:
        raise ValueError(f"initial guess outside the admissible range (b={p[1]:.4g}, lam={p[0]:.4g})")
    fn = float(np.max(np.abs(f)))
    it = 0
    for it in range(1, max_iter + 1):
        if fn < tol:
            break
        J = np.empty((N_COND, 5))
        for j in range(5):
            h = rel_step * max(abs(p[j]), p[0] if j in (2, 3) else 1.0) if j != 0 else rel_step * p[0]
            if j == 1 and abs(p[1] + h) > bmax:
                h = -h
            q = p.copy()
            q[j] += h
            fq = F(q)
            J[:, j] = (fq - f) / h
        try:
            dp = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            raise DecompositionError("singular Jacobian", fn)
        t = 1.0
        for _ in range(max_halvings + 1):
            pt = p + t * dp
            ft = F(pt)
            if ft is not None and np.max(np.abs(ft)) < fn:
                break
            t *= 0.5
        else:
            if fn < 1e3 * tol:
                break  # stagnated at round-off
            raise DecompositionError(f"Newton stalled at residual {fn:.3e}", fn)
        p, f = pt, ft
        fn = float(np.max(np.abs(f)))
        if np.max(np.abs(t * dp) / np.maximum(np.abs(p), 1e-3)) < 1e-15:
            break
    else:
        if fn > 1e-8:
            raise DecompositionError(f"no convergence in {max_iter} iterations", fn)
    if abs(p[1]) > bmax:
        raise ValueError(f"b={p[1]:.4g} outside the solved profile range")
    eps = residual_field(field, table, p)
    return ModulationState.from_params(p, eps=eps, residuals=tuple(float(v) for v in f),
                                       iterations=it, converged=fn <= 1e-8)


def residual_field(field: ComplexField, table: ProfileTable, p) -> ComplexField:
    """``eps(y_j) = lam a(x_j) e^{i gamma} - Q~_b(y_j)`` on ``Grid2D(n, L/lam)``."""
    lam, b, x1, x2, gam = p
    grid = field.grid
    X, Y = grid.mesh
    r = np.hypot(X - x1, Y - x2) / lam
    v = lam * field.physical().values * np.exp(1j * gam) - table.evaluate(b, r)
    return ComplexField(Grid2D(grid.n, grid.L / lam), v)


def state_norms(state: ModulationState) -> tuple[float, float]:
    """``||eps||_2`` and the spectral ``||grad eps||_2`` (periodic proxy)."""
    e = state.eps
    gx, gy = gradient(e.values, e.grid)
    return e.norm(), float(np.sqrt(e.grid.cell_area * np.sum(np.abs(gx) ** 2 + np.abs(gy) ** 2)))


# Tails and Gamma_b over b ---------------------------------------------------------

class TailTable:
    """zeta~_b and Gamma_b on a b grid, for f_1 and the virial monitor.

    Below ``b_values[0]`` the tail is treated as zero and ``log Gamma_b`` is
    extrapolated linearly in 1/b.
    """

    def __init__(self, b_values: Sequence[float], tails: Sequence[RadialProfile],
                 gammas: Sequence[float]):
        self.b_values = np.asarray(b_values, dtype=float)
        self.tails = list(tails)
        self.gammas = np.asarray(gammas, dtype=float)

    @classmethod
    def build(cls, table: ProfileTable, b_values: Sequence[float] = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3),
              a: float = 0.1, eta: float = ETA_DEFAULT) -> "TailTable":
        qbs = continuation(list(b_values), eta, table.q, table.db)
        tails, gammas = [], []
        for b in b_values:
            # the solve radius must cover the cutoff radius e^{a pi / b}
            z = solve_zeta_b(qbs[b], eta, r_factor=max(20.0, 1.25 * b * np.exp(a * np.pi / b)))
            psi = make_Qb_tilde(qbs[b], eta)[1]
            tails.append(make_zeta_tilde(z, psi, a)[0])
            gammas.append(estimate_Gamma_b(z).gamma)
        return cls(b_values, tails, gammas)

    def log_gamma(self, b) -> np.ndarray:
        x = 1.0 / np.maximum(np.abs(np.asarray(b, dtype=float)), 1e-6)
        xs = 1.0 / self.b_values[::-1]
        ys = np.log(self.gammas[::-1])
        out = np.interp(x, xs, ys)
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        return np.where(x > xs[-1], ys[-1] + slope * (x - xs[-1]), out)

    def tail_terms(self, b: float) -> tuple[Optional[RadialProfile], Optional[RadialProfile], float]:
        """Bracketing tails and the linear weight of the upper one."""
        bb = abs(b)
        if bb < self.b_values[0]:
            return None, None, 0.0
        k = int(np.searchsorted(self.b_values, bb))
        if k >= len(self.b_values):
            return self.tails[-1], None, 0.0
        if self.b_values[k] == bb:
            return self.tails[k], None, 0.0
        w = (bb - self.b_values[k - 1]) / (self.b_values[k] - self.b_values[k - 1])
        return self.tails[k - 1], self.tails[k], float(w)


def lyapunov_f1(state: ModulationState, table: ProfileTable, tails: Optional[TailTable]) -> float:
    """``f_1 = (b/4)||y Q~_b||^2 + (1/2) Im int y.grad(z) conj(z)
    + (eps_2, Lambda Re z) - (eps_1, Lambda Im z)`` with ``z = zeta~_b``.

    The tail is interpolated linearly in b between tabulated values; for
    negative b it is conjugated. Raises if no tail table is given.
    """
    if tails is None:
        raise ValueError("lyapunov_f1 needs a tail table")
    b = state.b
    # ||y Q~_b||^2 on a composite Gauss rule covering the support
    rmax = _support(table, b)
    x, w = np.polynomial.legendre.leggauss(400)
    edges = np.linspace(0.0, rmax, 9)
    rr = np.concatenate([lo + (hi - lo) * (x + 1) / 2 for lo, hi in zip(edges[:-1], edges[1:])])
    ww = np.concatenate([w * (hi - lo) / 2 for lo, hi in zip(edges[:-1], edges[1:])])
    qv = table.evaluate(b, rr)
    moment = 2 * np.pi * float(np.sum(ww * rr**3 * np.abs(qv) ** 2))
    f1 = 0.25 * b * moment
    z0, z1, wt = tails.tail_terms(b)
    if z0 is None:
        return f1
    conj = b < 0

    def zeval(r, nu=0):
        v = (1 - wt) * z0.evaluate(r, nu)
        if z1 is not None:
            v = v + wt * z1.evaluate(r, nu)
        return np.conj(v) if conj else v

    rz, wz = (z1 or z0).quadrature()
    zv, dzv = zeval(rz), zeval(rz, 1)
    f1 += 0.5 * 2 * np.pi * float(np.sum(wz * rz * rz * np.imag(dzv * np.conj(zv))))
    if state.eps is not None:
        e = state.eps
        X, Y = e.grid.mesh
        # eps node j sits at y_j = (x_j - x_c)/lam, i.e. the grid shifted by -x_c/lam
        r = np.hypot(X - state.x_c[0] / state.lam, Y - state.x_c[1] / state.lam)
        inside = r <= (z1 or z0).r_max
        lz = zeval(r[inside]) + r[inside] * zeval(r[inside], 1)
        ev = e.values[inside]
        f1 += e.grid.cell_area * float(np.sum(ev.imag * lz.real) - np.sum(ev.real * lz.imag))
    return f1


# Series -------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModulationSeries:
    t: np.ndarray
    s: np.ndarray
    states: tuple = dc_field(repr=False)
    event: str = "completed"

    @property
    def lam(self) -> np.ndarray:
        return np.array([st.lam for st in self.states])

    @property
    def b(self) -> np.ndarray:
        return np.array([st.b for st in self.states])

    @property
    def gamma(self) -> np.ndarray:
        return np.array([st.gamma for st in self.states])

    @property
    def x_c(self) -> np.ndarray:
        return np.array([st.x_c for st in self.states])

    @property
    def b_s(self) -> np.ndarray:
        return _ds(self.b, self.s)

    @property
    def lam_s_over_lam(self) -> np.ndarray:
        return _ds(np.log(self.lam), self.s)

    @property
    def gamma_s(self) -> np.ndarray:
        return _ds(self.gamma, self.s)


def _ds(v: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Second-order centered differences on the non-uniform s grid."""
    if len(s) < 3:
        return np.full(len(s), np.nan)
    return np.gradient(v, s)


def rescaled_time(t: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """``s(t) = int dt / lam^2`` by the trapezoid rule, ``s(t_0) = 0``."""
    g = 1.0 / lam**2
    return np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * np.diff(t))])


def _unwrap_to(prev: float, g: float) -> float:
    return prev + (g - prev + np.pi) % (2 * np.pi) - np.pi


def build_series(times: Sequence[float], fields: Sequence[ComplexField], table: ProfileTable,
                 guess: Optional[ModulationState] = None) -> ModulationSeries:
    """Decompose each snapshot, warm-starting from the previous state.

    A failure truncates the series and records the event.
    """
    states, ts = [], []
    event = "completed"
    g = guess
    for t, f in zip(times, fields):
        try:
            try:
                st = decompose(f, g, table)
            except DecompositionError:
                if g is None:
                    raise
                st = decompose(f, None, table)
        except (DecompositionError, ValueError) as exc:
            event = f"decomposition-failed at t={t:.6g}: {exc}"
            break
        if states:
            gam = _unwrap_to(states[-1].gamma, st.gamma)
            st = ModulationState(st.lam, st.b, st.x_c, gam, st.eps, st.residuals, st.iterations, st.converged)
        states.append(st)
        ts.append(float(t))
        g = st
    t = np.array(ts)
    lam = np.array([st.lam for st in states])
    s = rescaled_time(t, lam) if len(t) else t
    return ModulationSeries(t, s, tuple(states), event)


SERIES_COLUMNS = ("t", "s", "lambda", "b", "x1", "x2", "gamma", "res_r2", "res_y1", "res_y2",
                  "res_iLambda", "res_iLambda2", "eps_l2", "grad_eps_l2", "f1")


def series_rows(series: ModulationSeries, table: ProfileTable, tails: Optional[TailTable]) -> list:
    rows = []
    for t, s, st in zip(series.t, series.s, series.states):
        en, gn = state_norms(st)
        f1 = lyapunov_f1(st, table, tails) if tails is not None else float("nan")
        rows.append([t, s, st.lam, st.b, st.x_c[0], st.x_c[1], st.gamma, *st.residuals, en, gn, f1])
    return rows


def save_series(series: ModulationSeries, path: Union[str, Path], table: ProfileTable,
                tails: Optional[TailTable] = None) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SERIES_COLUMNS)
        for row in series_rows(series, table, tails):
            wr.writerow([repr(float(v)) for v in row])


def load_series_table(path: Union[str, Path]) -> dict:
    """Columns of a saved series CSV as arrays."""
    tab = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {name: tab[:, i] for i, name in enumerate(SERIES_COLUMNS)}


# Fits and monitors ----------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    T: float
    scale: float
    residual: float  # RMS of log(lam_model / lam)
    n: int


@dataclass(frozen=True)
class LogLogFit:
    loglog: RateFit
    sqrt_law: RateFit
    preferred: str
    window: tuple = ()


def _loglog_shape(tau: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(tau / np.log(np.abs(np.log(tau))))


def _fit_rate(t: np.ndarray, lam: np.ndarray, shape: Callable, T_lo: float, T_hi: float) -> RateFit:
    logl = np.log(lam)

    def resid(T):
        tau = T - t
        g = shape(tau)
        if not np.all(np.isfinite(g)) or np.any(g <= 0):
            return None
        c = float(np.mean(logl - np.log(g)))
        return logl - c - np.log(g), c

    def obj(T):
        r = resid(T)
        return 1e300 if r is None else float(np.sum(r[0] ** 2))

    # coarse scan then bounded refinement (the objective can be multi-modal)
    Ts = np.linspace(T_lo, T_hi, 401)[1:]
    vals = np.array([obj(T) for T in Ts])
    k = int(np.argmin(vals))
    lo, hi = Ts[max(k - 1, 0)] if k > 0 else T_lo, Ts[min(k + 1, len(Ts) - 1)]
    res = minimize_scalar(obj, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    T = float(res.x)
    r = resid(T)
    if r is None:
        T = float(Ts[k])
        r = resid(T)
    return RateFit(T, float(np.exp(r[1])), float(np.sqrt(np.mean(r[0] ** 2))), len(t))


def fit_loglog(t, lam, window: Optional[tuple[float, float]] = None, T_max: Optional[float] = None) -> LogLogFit:
    """Fit ``lam = c sqrt((T-t)/ln|ln(T-t)|)`` and ``lam = c sqrt(T-t)`` with T free.

    The log-log model is only defined where ``0 < T - t < 1/e``; T is
    searched in ``(t_last, T_max]`` with ``T_max`` defaulting to
    ``t_last + span``. Without an explicit window, samples older than
    ``0.8/e`` before the last one are dropped so that the model is defined.
    """
    t = np.asarray(t, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if window is None and len(t) and t[-1] - t[0] >= 0.8 * np.exp(-1.0):
        window = (t[-1] - 0.8 * np.exp(-1.0), t[-1])
    if window is not None:
        keep = (t >= window[0]) & (t <= window[1])
        t, lam = t[keep], lam[keep]
    if len(t) < 20:
        raise ValueError(f"need at least 20 samples in the window, got {len(t)}")
    span = t[-1] - t[0]
    if not span > 0 or np.ptp(lam) == 0:
        raise ValueError("degenerate window")
    t_last = t[-1]
    T_hi = T_max if T_max is not None else t_last + span
    ll = _fit_rate(t, lam, _loglog_shape, t_last, min(T_hi, t[0] + np.exp(-1.0)))
    sq = _fit_rate(t, lam, np.sqrt, t_last, T_hi)
    return LogLogFit(ll, sq, "loglog" if ll.residual < sq.residual else "sqrt", (float(t[0]), float(t_last)))


@dataclass(frozen=True)
class VirialReport:
    margin: np.ndarray
    violation_fraction: float
    n: int


def virial_check(series: ModulationSeries, tails: TailTable, C: float = C_DEFAULT,
                 eta: float = ETA_DEFAULT, b_s: Optional[np.ndarray] = None) -> VirialReport:
    """Margin ``b_s + Gamma_b^{1 - C eta}`` per sample and the violation fraction."""
    bs = series.b_s if b_s is None else np.asarray(b_s)
    lg = tails.log_gamma(series.b)
    margin = bs + np.exp((1 - C * eta) * lg)
    ok = np.isfinite(margin)
    frac = float(np.mean(margin[ok] < 0)) if np.any(ok) else float("nan")
    return VirialReport(margin, frac, int(np.sum(ok)))
