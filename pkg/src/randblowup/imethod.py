"""I-method multiplier and the monitored modified quantities.

``m_N(xi) = m(|xi|/N)`` with ``m = 1`` on [0, 1] and ``m(rho) = rho^{s-1}``
for rho >= 2. On [1, 2] the logarithm ``g = ln m`` is the quintic in
``tau = ln rho`` that matches value, slope and curvature of both branches:
``g = (s-1) ln2 * h(tau/ln2)`` with ``h(u) = 6u^3 - 8u^4 + 3u^5``. Since
``h'(u) = u^2 (18 - 32u + 15u^2) > 0`` the blend is monotone.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import stats

from .evolve import conserved
from .spectral import ComplexField, Grid2D, apply_multiplier

S_DEFAULT = 0.1
DELTA_DEFAULT = 0.05
# sup of m_N <xi> / (N^{1-s} <xi>^s) over xi for N >= 1 is (<N>/N)^{1-s} <= 2^{(1-s)/2}
UPPER_CONST = float(np.sqrt(2.0))


@dataclass(frozen=True)
class IMultiplierSpec:
    N: float
    s: float = S_DEFAULT

    def __post_init__(self):
        if not self.N >= 1:
            raise ValueError("N must be at least 1")
        if not 0 < self.s < 1:
            raise ValueError("s must lie in (0, 1)")

    def m(self, absxi) -> np.ndarray:
        rho = np.asarray(absxi, dtype=float) / self.N
        T = np.log(2.0)
        tau = np.log(np.clip(rho, 1.0, 2.0))
        u = tau / T
        g_blend = (self.s - 1) * T * u**3 * (6 - 8 * u + 3 * u * u)
        out = np.exp(g_blend)
        hi = rho >= 2
        out = np.where(hi, np.power(np.where(hi, rho, 1.0), self.s - 1), out)
        return np.where(rho <= 1, 1.0, out)

    def multiplier(self, grid: Grid2D) -> np.ndarray:
        return self.m(np.sqrt(grid.ksq))


def _check_resolved(grid: Grid2D, spec: IMultiplierSpec) -> None:
    if 2 * spec.N > grid.k_nyquist:
        raise ValueError(f"grid does not resolve 2N = {2 * spec.N:.4g} (Nyquist {grid.k_nyquist:.4g})")


def apply_I(field: ComplexField, spec: IMultiplierSpec) -> ComplexField:
    _check_resolved(field.grid, spec)
    return apply_multiplier(field, spec.multiplier(field.grid))


def apply_J(field: ComplexField, spec: IMultiplierSpec) -> ComplexField:
    """``J_N = Id - I_N``."""
    _check_resolved(field.grid, spec)
    return apply_multiplier(field, 1.0 - spec.multiplier(field.grid))


@dataclass(frozen=True)
class NormEquivalence:
    lhs: float  # ||f||_{H^s}
    mid: float  # ||I_N <D> f||_2
    rhs: float  # N^{1-s} ||f||_{H^s}
    holds: bool


def norm_equivalence(field: ComplexField, spec: IMultiplierSpec) -> NormEquivalence:
    """``||f||_{H^s} <= ||I_N <D> f||_2 <= C N^{1-s} ||f||_{H^s}`` with C = sqrt(2)."""
    _check_resolved(field.grid, spec)
    grid = field.grid
    fh2 = np.abs(field.spectral().values) ** 2
    jap = np.sqrt(1.0 + grid.ksq)
    w = grid.cell_area
    lhs = float(np.sqrt(w * np.sum(jap ** (2 * spec.s) * fh2)))
    mid = float(np.sqrt(w * np.sum((spec.multiplier(grid) * jap) ** 2 * fh2)))
    rhs = spec.N ** (1 - spec.s) * lhs
    tol = 1e-12 * max(rhs, 1e-300)
    return NormEquivalence(lhs, mid, rhs, lhs <= mid + tol and mid <= UPPER_CONST * rhs + tol)


def modified_energy(field: ComplexField, spec: IMultiplierSpec):
    """``E(I_N f)`` as a :class:`Conserved` record (kinetic and potential exposed)."""
    return conserved(apply_I(field, spec))


def modified_momentum(field: ComplexField, spec: IMultiplierSpec) -> tuple[float, float]:
    return conserved(apply_I(field, spec)).P


def xi_quantity(a0: ComplexField, lam: float, spec: IMultiplierSpec) -> float:
    """``Xi = (lam^2/2) ||grad J_N a0||_2^2``."""
    _check_resolved(a0.grid, spec)
    grid = a0.grid
    jm = 1.0 - spec.multiplier(grid)
    g2 = grid.cell_area * float(np.sum(grid.ksq * np.abs(jm * a0.spectral().values) ** 2))
    return 0.5 * lam**2 * g2


def N_policy(lam: float, delta: float = DELTA_DEFAULT) -> float:
    """``N(t) = lam(t)^{-(1+delta)}``, floored at 1."""
    return max(1.0, float(lam) ** (-(1.0 + delta)))


# Report -------------------------------------------------------------------------------

@dataclass(frozen=True)
class ExponentFit:
    exponent: float
    ci_low: float
    ci_high: float
    r2: float
    n: int
    ok: Optional[bool]  # exponent below the target; None when the fit is skipped
    note: str = ""


@dataclass(frozen=True)
class AlmostConservationReport:
    t: np.ndarray
    lam: np.ndarray
    N: np.ndarray
    E_I: np.ndarray
    xi_over_lam2: np.ndarray
    P_I: np.ndarray
    energy_fit: ExponentFit
    momentum_fit: ExponentFit
    s: float
    delta: float

    def summary(self) -> dict:
        return {"s": self.s, "delta": self.delta, "n": int(len(self.t)),
                "lambda_range": [float(np.min(self.lam)), float(np.max(self.lam))] if len(self.lam) else None,
                "energy": asdict(self.energy_fit), "momentum": asdict(self.momentum_fit),
                "alpha1_energy": 2 - self.energy_fit.exponent if self.energy_fit.ok is not None else None,
                "alpha1_momentum": 1 - self.momentum_fit.exponent if self.momentum_fit.ok is not None else None}


def _fit_exponent(inv_lam: np.ndarray, q: np.ndarray, target: float, min_range: float,
                  floor: float = 0.0) -> ExponentFit:
    """Log-log regression of ``q`` on ``1/lam``; samples at or below ``floor`` are dropped.

    When every sample is below the floor the quantity is roundoff and the
    bound holds for any exponent, which is reported with ``ok=True``.
    """
    fin = np.isfinite(q)
    if np.all(fin) and len(q) and np.max(q) <= floor:
        return ExponentFit(float("nan"), float("nan"), float("nan"), float("nan"), 0, True,
                           f"below roundoff floor {floor:.3g}")
    ok = (q > floor) & fin
    x, y = np.log(inv_lam[ok]), np.log(q[ok])
    if len(x) < 3 or np.ptp(x) < np.log(min_range):
        return ExponentFit(float("nan"), float("nan"), float("nan"), float("nan"), int(len(x)), None,
                           "insufficient range in lambda")
    fit = stats.linregress(x, y)
    half = stats.t.ppf(0.975, len(x) - 2) * fit.stderr
    return ExponentFit(float(fit.slope), float(fit.slope - half), float(fit.slope + half),
                       float(fit.rvalue**2), int(len(x)), bool(fit.slope < target))


def almost_conservation_report(times: Sequence[float], lams: Sequence[float], a_fields: Sequence[ComplexField],
                               a0: ComplexField, s: float = S_DEFAULT, delta: float = DELTA_DEFAULT,
                               min_range: float = 1.5, rel_floor: float = 1e-10) -> AlmostConservationReport:
    """Per-sample ``E(I_N a) + Xi/lam^2`` and ``P(I_N a)`` with ``N = lam^{-(1+delta)}``,
    and log-log regressions against ``1/lam``.

    Fits are skipped (``ok=None``) when ``max(1/lam)/min(1/lam) < min_range``.
    Samples below ``rel_floor * M(a0)`` are treated as roundoff.
    """
    t = np.asarray(times, dtype=float)
    lam = np.asarray(lams, dtype=float)
    Ns, E, X, P = [], [], [], []
    for lm, a in zip(lam, a_fields):
        spec = IMultiplierSpec(N_policy(lm, delta), s)
        c = modified_energy(a, spec)
        Ns.append(spec.N)
        E.append(c.E)
        X.append(xi_quantity(a0, lm, spec) / lm**2)
        P.append(c.P)
    E, X, P = np.array(E), np.array(X), np.array(P).reshape(-1, 2)
    inv = 1.0 / lam
    floor = rel_floor * a0.norm() ** 2
    efit = _fit_exponent(inv, np.abs(E + X), 2.0, min_range, floor)
    pfit = _fit_exponent(inv, np.hypot(P[:, 0], P[:, 1]), 1.0, min_range, floor)
    return AlmostConservationReport(t, lam, np.array(Ns), E, X, P, efit, pfit, s, delta)


def save_report(rep: AlmostConservationReport, outdir: Union[str, Path], stem: str = "imethod") -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("t", "lambda", "N", "E_IN_a", "Xi_over_lambda2", "P_x", "P_y"))
        for i in range(len(rep.t)):
            wr.writerow([repr(float(v)) for v in
                         (rep.t[i], rep.lam[i], rep.N[i], rep.E_I[i], rep.xi_over_lam2[i], rep.P_I[i, 0], rep.P_I[i, 1])])
    (out / f"{stem}.json").write_text(json.dumps(rep.summary(), indent=2, sort_keys=True))
