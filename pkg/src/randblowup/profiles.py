"""Radial elliptic profiles: Q, Q_b, the cut-off profile and its residual,
the radiative tail zeta_b, its truncation and the flux constant Gamma_b.

Conventions
-----------
* ``Lambda f = f + r f'`` is the L2-scaling generator in two dimensions and
  ``Lambda^2 f = f + 3 r f' + r^2 f''`` for radial f.
* ``Q_b = P_b exp(-i b r^2 / 4)`` with ``P_b`` real. Substituting into
  ``Delta Q_b - Q_b + i b Lambda Q_b + |Q_b|^2 Q_b = 0`` gives the real
  equation ``P'' + P'/r - (1 - b^2 r^2 / 4) P + P^3 = 0``, which is what the
  continuation solves.
* The tail equation is ``Delta z - z + i b Lambda z = Psi_b``; its outgoing
  solution behaves like ``r^mu``, ``mu = -1 - i/b``, so ``r^2 |z|^2`` has a
  finite limit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.integrate import solve_ivp
from scipy.optimize import brentq
from scipy.special import k0, k1

from .radial import (
    RadialProfile,
    Segment,
    folded_grid,
    interval_grid,
    radial_cutoff,
    radial_l2sq,
)

log = logging.getLogger(__name__)

ETA_DEFAULT = 0.01
C_DEFAULT = 10.0
A_CUTOFF_DEFAULT = 0.1
DB_DEFAULT = 0.01
DB_FLOOR = 1e-4
# Positive nodes of the folded grid; the underlying Chebyshev-Lobatto grid on
# [-R, R] then has 2 * NODES_DEFAULT = 1024 points.
NODES_DEFAULT = 512
# Below this b the Q_b domain is capped where theta(b r)/b reaches the value
# below (the profile is ~e^-40 there and is padded with zeros beyond).
CAP_DECAY = 40.0


class ProfileError(RuntimeError):
    """Base class for profile solver failures."""


class ShootingBracketError(ProfileError):
    pass


class ConvergenceError(ProfileError):
    def __init__(self, msg: str, last_good_b: Optional[float] = None):
        super().__init__(msg)
        self.last_good_b = last_good_b


class PositivityError(ProfileError):
    def __init__(self, msg: str, radius: float):
        super().__init__(msg)
        self.radius = radius


class IllConditionedError(ProfileError):
    def __init__(self, msg: str, rcond: float):
        super().__init__(msg)
        self.rcond = rcond


class NoPlateauError(ProfileError):
    pass


class GammaBracketError(ProfileError):
    def __init__(self, msg: str, gamma: float, bracket: tuple[float, float]):
        super().__init__(msg)
        self.gamma = gamma
        self.bracket = bracket


# theta weight -----------------------------------------------------------------

def theta_weight(r):
    """``theta(r) = int_0^r sqrt(1 - z^2/4) dz`` for r <= 2, ``(pi/4) r`` beyond."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("theta_weight needs r >= 0")
    rc = np.minimum(r, 2.0)
    # closed form of the integral: (z/2) sqrt(1 - z^2/4) + arcsin(z/2)
    inner = 0.5 * rc * np.sqrt(np.clip(1 - rc**2 / 4, 0, None)) + np.arcsin(rc / 2)
    out = np.where(r <= 2.0, inner, (np.pi / 4) * r)
    return out if out.ndim else float(out)


def R_b(b: float, eta: float = ETA_DEFAULT) -> float:
    return 2.0 * np.sqrt(1.0 - eta) / abs(b)


def R_b_minus(b: float, eta: float = ETA_DEFAULT) -> float:
    return np.sqrt(1.0 - eta) * R_b(b, eta)


# ground state -----------------------------------------------------------------

def _shoot(q0: float, r_stop: float = 20.0, dense: bool = False):
    """Integrate Q'' + Q'/r - Q + Q^3 = 0 from a series start near r = 0.

    Stops when Q crosses zero (overshoot) or Q' turns positive while Q > 0
    (undershoot).
    """
    r0 = 1e-6
    c = (q0 - q0**3) / 4.0

    def rhs(r, y):
        return [y[1], -y[1] / r + y[0] - y[0] ** 3]

    def cross(r, y):
        return y[0]
    cross.terminal = True
    cross.direction = -1

    def turn(r, y):
        return y[1]
    turn.terminal = True
    turn.direction = 1

    return solve_ivp(rhs, (r0, r_stop), [q0 + c * r0**2, 2 * c * r0], method="DOP853",
                     rtol=1e-12, atol=1e-14, events=(cross, turn), dense_output=dense)


def _shoot_q0(lo: float = 2.0, hi: float = 2.5, tol: float = 1e-13) -> float:
    def overshoots(q0):
        sol = _shoot(q0)
        if len(sol.t_events[0]):
            return True
        if len(sol.t_events[1]):
            return False
        raise ShootingBracketError(f"shooting from Q(0)={q0} neither crossed nor turned")

    if overshoots(lo) or not overshoots(hi):
        raise ShootingBracketError(f"Q(0) not bracketed by [{lo}, {hi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if overshoots(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def solve_ground_state(tol: float = 1e-10, m: int = NODES_DEFAULT, R: float = 24.0,
                       max_iter: int = 30) -> RadialProfile:
    """Townes profile: bisection shooting on Q(0), then Newton collocation.

    The outer boundary carries the Robin condition of the decaying Bessel
    tail, ``Q'/Q = -K1(R)/K0(R)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    q0 = _shoot_q0()
    r_match = 10.0
    sol = _shoot(q0, r_stop=r_match + 1e-9, dense=True)
    r, D1, D2 = folded_grid(m, R)
    Lop = D2 + D1 / r[:, None]
    amp = sol.sol(r_match)[0] / k0(r_match)
    q = np.where(r < r_match, sol.sol(np.minimum(r, r_match))[0], amp * k0(r))
    kap = -k1(R) / k0(R)
    I = np.eye(m)

    def residual(q):
        return Lop @ q - q + q**3

    res = np.inf
    for it in range(max_iter):
        F = residual(q)
        J = Lop - I + np.diag(3 * q**2)
        F[0] = D1[0] @ q - kap * q[0]
        J[0] = D1[0]
        J[0, 0] -= kap
        dq = np.linalg.solve(J, -F)
        q = q + dq
        res = np.max(np.abs(residual(q)))
        if np.max(np.abs(dq)) < 1e-14 * q.max() or res < 0.01 * tol:
            break
    if not res < tol:
        raise ConvergenceError(f"ground state residual {res:.2e} did not reach tol {tol:.1e}")
    if np.any(q <= 0) or np.any(np.diff(q[::-1]) >= 0):
        raise ProfileError("ground state is not positive and decreasing")
    return RadialProfile("Q", (Segment(0.0, R, q, folded=True),),
                         {"b": 0.0, "tol": tol, "nodes": m, "R": R,
                          "residual": float(res), "shoot_q0": q0})


def ground_state_residual(q: RadialProfile) -> np.ndarray:
    """Pointwise ``Delta Q - Q + Q^3`` at every collocation node."""
    seg = q.segments[0]
    r, D1, D2 = folded_grid(seg.size, seg.b)
    v = seg.values.real
    return D2 @ v + (D1 @ v) / r - v + v**3


# Q_b continuation ---------------------------------------------------------------

def _domain_radius(b: float, eta: float) -> float:
    Rb = R_b(b, eta)
    if theta_weight(min(b * Rb, 2.0)) / b <= CAP_DECAY:
        return Rb
    return brentq(lambda r: theta_weight(b * r) / b - CAP_DECAY, 1e-9, Rb)


def _solve_P(b: float, eta: float, guess, m: int, max_iter: int = 30):
    Rd = _domain_radius(b, eta)
    r, D1, D2 = folded_grid(m, Rd)
    Lop = D2 + D1 / r[:, None]
    V = 1.0 - b * b * r * r / 4.0
    p = guess(r)
    for it in range(max_iter):
        F = Lop @ p - V * p + p**3
        J = Lop - np.diag(V) + np.diag(3 * p**2)
        F[0] = p[0]
        J[0] = 0.0
        J[0, 0] = 1.0
        dp = np.linalg.solve(J, -F)
        p = p + dp
        if not np.all(np.isfinite(p)):
            return None
        if np.max(np.abs(dp)) < 1e-12 * np.max(np.abs(p)):
            res = np.max(np.abs((Lop @ p - V * p + p**3)[1:]))
            return r, p, Rd, res, it + 1
    return None


def _P_profile(b, eta, r, p, Rd, res, m) -> RadialProfile:
    Rb = R_b(b, eta)
    segs = [Segment(0.0, Rd, p * np.exp(-1j * b * r * r / 4), folded=True)]
    if Rd < Rb:
        segs.append(Segment(Rd, Rb, np.zeros(2)))
    return RadialProfile("Qb", tuple(segs), {"b": float(b), "eta": float(eta), "nodes": m,
                                              "R_b": Rb, "R_domain": Rd, "residual": float(res)})


def P_of(qb: RadialProfile, r, nu: int = 0) -> np.ndarray:
    """Real amplitude ``P_b = Q_b e^{i b r^2/4}`` (and derivatives up to 2)."""
    b = qb.b
    r = np.asarray(r, dtype=float)
    seg = qb.segments[0]
    inside = r <= seg.b
    out = np.zeros(r.shape)
    if not np.any(inside):
        return out
    # the folded segment stores Q_b; strip the phase on the nodes first
    rn = seg.nodes
    pseg = Segment(0.0, seg.b, (seg.values * np.exp(1j * b * rn * rn / 4)).real, folded=True)
    out[inside] = pseg.evaluate(r[inside], nu).real
    return out


def _check_positive(b, r, p):
    floor = 1e-12 * np.max(np.abs(p))
    bad = np.nonzero(p[1:] < -floor)[0]
    if bad.size:
        rad = float(np.min(r[1:][bad]))
        raise PositivityError(f"P_b changes sign at r={rad:.4g} for b={b}", rad)


def continuation(b_targets: Sequence[float], eta: float = ETA_DEFAULT, q: Optional[RadialProfile] = None,
                 db: float = DB_DEFAULT, m: int = NODES_DEFAULT) -> dict[float, RadialProfile]:
    """Continue Q_b from b = 0 through every target value (sorted ascending).

    Steps of ``db`` are halved on Newton failure down to ``DB_FLOOR``.
    """
    if not 0 < eta <= 0.1:
        raise ValueError("eta must lie in (0, 0.1]")
    targets = sorted(float(t) for t in b_targets)
    if targets and (targets[0] <= 0 or targets[-1] > 0.3):
        raise ValueError("b must lie in (0, 0.3]")
    if q is None:
        q = solve_ground_state()
    prev = q
    b_prev = 0.0
    out: dict[float, RadialProfile] = {}

    def guess_from(prof):
        R = prof.segments[0].b
        bb = prof.b or 0.0

        def g(r):
            inner = np.minimum(r, R)
            val = P_of(prof, inner) if bb else prof.evaluate(inner).real
            return np.where(r <= R, val, 0.0)
        return g

    for tgt in targets:
        while b_prev < tgt - 1e-15:
            step = min(db, tgt - b_prev)
            while True:
                b_new = b_prev + step
                sol = _solve_P(b_new, eta, guess_from(prev), m)
                if sol is not None:
                    break
                step /= 2
                if step < DB_FLOOR:
                    raise ConvergenceError(f"continuation failed beyond b={b_prev}", last_good_b=b_prev)
            r, p, Rd, res, _ = sol
            _check_positive(b_new, r, p)
            prev = _P_profile(b_new, eta, r, p, Rd, res, m)
            b_prev = b_new
        out[tgt] = prev
    return out


def solve_Qb(b: float, eta: float = ETA_DEFAULT, q: Optional[RadialProfile] = None,
             db: float = DB_DEFAULT, m: int = NODES_DEFAULT) -> RadialProfile:
    """Q_b by continuation in b from the ground state."""
    if not 0 < b <= 0.3:
        raise ValueError("b must lie in (0, 0.3]")
    return continuation([b], eta, q, db, m)[float(b)]


def make_Qb_tilde(qb: RadialProfile, eta: float = ETA_DEFAULT,
                  m_inner: int = 0, m_ring: int = 96) -> tuple[RadialProfile, RadialProfile]:
    """Cut-off profile ``phi_b Q_b`` and its residual ``Psi_b``.

    Both are re-represented on [0, R_b^-] (folded) and [R_b^-, R_b] so that
    the cutoff edges fall on segment boundaries.
    """
    b = qb.b
    if qb.kind != "Qb" or not b:
        raise ValueError("make_Qb_tilde needs a Qb profile with b > 0")
    eta = qb.meta.get("eta", eta)
    Rb, Rm = R_b(b, eta), R_b_minus(b, eta)
    Rd = qb.meta["R_domain"]
    m_inner = m_inner or qb.segments[0].size
    r0 = folded_grid(m_inner, Rm)[0]
    r1 = interval_grid(Rm, Rb, m_ring)[0]

    def parts(r):
        rr = np.minimum(r, Rd)
        P = np.where(r <= Rd, P_of(qb, rr), 0.0)
        dP = np.where(r <= Rd, P_of(qb, rr, 1), 0.0)
        phi, dphi, ddphi = radial_cutoff(r, Rm, Rb)
        ph = np.exp(-1j * b * r * r / 4)
        qt = phi * P * ph
        psi = -ph * (2 * dphi * dP + (ddphi + dphi / r) * P + (phi**3 - phi) * P**3)
        return qt, psi

    q0, psi0 = parts(r0)
    q1, psi1 = parts(r1)
    meta = dict(qb.meta, R_b_minus=Rm)
    qt = RadialProfile("QbTilde", (Segment(0.0, Rm, q0, True), Segment(Rm, Rb, q1)), meta)
    psi = RadialProfile("Psi_b", (Segment(0.0, Rm, psi0, True), Segment(Rm, Rb, psi1)), meta)
    return qt, psi


def direct_residual(qt: RadialProfile) -> RadialProfile:
    """``-(Delta Q~ - Q~ + i b Lambda Q~ + |Q~|^2 Q~)`` by collocation on each segment."""
    b = qt.b
    segs = []
    for s in qt.segments:
        r, D1, D2 = folded_grid(s.size, s.b) if s.folded else interval_grid(s.a, s.b, s.size)
        v = s.values
        dv = D1 @ v
        res = D2 @ v + dv / r - v + 1j * b * (v + r * dv) + np.abs(v) ** 2 * v
        segs.append(Segment(s.a, s.b, -res, s.folded))
    return RadialProfile("Psi_b", tuple(segs), dict(qt.meta))


# tail zeta_b -----------------------------------------------------------------------

def _asymptotic_kappa(b: float, R: float, K: int = 40) -> complex:
    """Log-derivative u'/u at R of the outgoing series r^mu sum a_k r^{-2k}."""
    mu = (1 - 1j * b) / (1j * b)
    a = [1.0 + 0j]
    for k in range(1, K):
        a.append(a[-1] * (mu - 2 * k + 2) ** 2 / (2j * b * k))
    a = np.array(a)
    ks = np.arange(K)
    terms = a * R ** (-2.0 * ks)
    kk = int(np.argmin(np.abs(terms[1:]))) + 1  # optimal truncation
    u = np.sum(terms[:kk])
    du = np.sum(a[:kk] * (mu - 2 * ks[:kk]) * R ** (-2.0 * ks[:kk])) / R
    return complex(du / u)


def solve_zeta_b(qb: RadialProfile, eta: float = ETA_DEFAULT, r_factor: float = 20.0,
                 sizes: tuple[int, int, int, int] = (400, 96, 300, 300),
                 rcond_min: float = 1e-14) -> RadialProfile:
    """Outgoing radial solution of ``Delta z - z + i b Lambda z = Psi_b``.

    Multi-domain Chebyshev collocation on [0, R_b^-], [R_b^-, R_b] and two
    outer intervals up to ``R_solve = r_factor / b``; a Robin condition from
    the asymptotic series closes the system at ``R_solve``.
    """
    b = qb.b
    if qb.kind != "Qb" or not b:
        raise ValueError("solve_zeta_b needs a Qb profile with b > 0")
    eta = qb.meta.get("eta", eta)
    Rb, Rm = R_b(b, eta), R_b_minus(b, eta)
    Rs = r_factor / b
    if Rs < 10 / b:
        raise ValueError("R_solve must be at least 10/b")
    _, psi = make_Qb_tilde(qb, eta, m_ring=sizes[1])
    edges = [0.0, Rm, Rb, Rb + 0.3 * (Rs - Rb), Rs]
    doms = [folded_grid(sizes[0], Rm)]
    for i in range(1, 4):
        doms.append(interval_grid(edges[i], edges[i + 1], sizes[i]))
    nsz = [len(d[0]) for d in doms]
    off = np.concatenate([[0], np.cumsum(nsz)])
    A = np.zeros((off[-1], off[-1]), complex)
    f = np.zeros(off[-1], complex)
    for i, (r, D1, D2) in enumerate(doms):
        sl = slice(off[i], off[i + 1])
        A[sl, sl] = D2 + (1 / r + 1j * b * r)[:, None] * D1 + (1j * b - 1) * np.eye(len(r))
        if i == 1:
            f[sl] = psi.segments[1].values
    # node 0 of each domain is its right end, node -1 its left end
    for i in range(3):
        rowL, rowR = off[i], off[i + 2] - 1
        D1L, D1R = doms[i][1], doms[i + 1][1]
        A[rowL] = 0
        A[rowL, off[i]] = 1
        A[rowL, off[i + 2] - 1] = -1
        f[rowL] = 0
        A[rowR] = 0
        A[rowR, off[i]:off[i + 1]] = D1L[0]
        A[rowR, off[i + 1]:off[i + 2]] -= D1R[-1]
        f[rowR] = 0
    kap = _asymptotic_kappa(b, Rs)
    row = off[3]
    A[row] = 0
    A[row, off[3]:off[4]] = doms[3][1][0]
    A[row, off[3]] -= kap
    f[row] = 0
    lu, piv = sla.lu_factor(A)
    anorm = np.linalg.norm(A, 1)
    rcond, _ = sla.lapack.zgecon(lu, anorm, norm="1")
    if rcond < rcond_min:
        raise IllConditionedError(f"tail system ill-conditioned, rcond={rcond:.2e}", rcond)
    u = sla.lu_solve((lu, piv), f)
    segs = tuple(Segment(edges[i], edges[i + 1], u[off[i]:off[i + 1]], i == 0) for i in range(4))
    meta = dict(qb.meta, R_solve=Rs, R_b_minus=Rm, rcond=float(rcond), kappa=[kap.real, kap.imag])
    return RadialProfile("Zeta", segs, meta)


def gamma_bracket(b: float, C: float = C_DEFAULT, eta: float = ETA_DEFAULT) -> tuple[float, float]:
    """``(e^{-(1+C eta) pi/b}, e^{-(1-C eta) pi/b})``."""
    return float(np.exp(-(1 + C * eta) * np.pi / b)), float(np.exp(-(1 - C * eta) * np.pi / b))


@dataclass(frozen=True)
class GammaEstimate:
    gamma: float
    plateau_variation: float
    window: tuple[float, float]
    bracket: tuple[float, float]
    in_bracket: bool


def estimate_Gamma_b(zeta: RadialProfile, C: float = C_DEFAULT, eta: Optional[float] = None,
                     max_variation: float = 0.05, npts: int = 401) -> GammaEstimate:
    """Median of ``r^2 |zeta|^2`` over [0.5, 0.9] R_solve, without raising on the bracket."""
    b = zeta.b
    eta = zeta.meta.get("eta", ETA_DEFAULT) if eta is None else eta
    Rs = zeta.meta["R_solve"]
    win = (0.5 * Rs, 0.9 * Rs)
    r = np.linspace(*win, npts)
    g = r * r * np.abs(zeta.evaluate(r)) ** 2
    med = float(np.median(g))
    var = float((g.max() - g.min()) / med) if med > 0 else np.inf
    if not var < max_variation:
        raise NoPlateauError(f"no plateau: relative variation {var:.3g} over {win}")
    br = gamma_bracket(b, C, eta)
    return GammaEstimate(med, var, win, br, br[0] <= med <= br[1])


def compute_Gamma_b(zeta: RadialProfile, C: float = C_DEFAULT, eta: Optional[float] = None,
                    strict: bool = True) -> float:
    """Gamma_b from the plateau of ``r^2 |zeta_b|^2``.

    With ``strict`` (the default) a value outside the two-sided exponential
    bracket raises :class:`GammaBracketError`.
    """
    est = estimate_Gamma_b(zeta, C, eta)
    if strict and not est.in_bracket:
        raise GammaBracketError(
            f"Gamma_b={est.gamma:.4e} (log {np.log(est.gamma):.3f}) outside bracket "
            f"[{np.log(est.bracket[0]):.3f}, {np.log(est.bracket[1]):.3f}] in log", est.gamma, est.bracket)
    return est.gamma


def make_zeta_tilde(zeta: RadialProfile, psi: RadialProfile, a: float = A_CUTOFF_DEFAULT,
                    ring_nodes: int = 128) -> tuple[RadialProfile, RadialProfile]:
    """Truncated tail ``psi_A zeta`` with ``A = e^{a pi / b}`` and its residual F_b.

    ``psi_A(r) = psi(r / A)`` with psi equal to 1 on [0, 1/2] and 0 beyond 1.
    ``F_b`` is obtained from the commutator of the cutoff with the linear
    operator, using the tail equation satisfied by ``zeta``.
    """
    b = zeta.b
    A = float(np.exp(a * np.pi / b))
    Rs = zeta.meta["R_solve"]
    if A > Rs:
        raise ValueError(f"A={A:.4g} exceeds R_solve={Rs:.4g}")
    zb = [s.b for s in zeta.segments]
    cuts = sorted({x for x in zb if x < A} | {A / 2, A})
    edges = [0.0] + cuts
    pieces = []
    for i in range(len(edges) - 1):
        lo, hi = edges[i], edges[i + 1]
        if hi - lo < 1e-12:
            continue
        if lo == 0.0:
            r = folded_grid(zeta.segments[0].size, hi)[0]
        else:
            r = interval_grid(lo, hi, ring_nodes)[0]
        pieces.append((lo, hi, r))

    def parts(r):
        z = zeta.evaluate(r)
        dz = zeta.evaluate(r, 1)
        c, dc, ddc = radial_cutoff(r, A / 2, A)
        zt = c * z
        F = ddc * z + dc * z / r + 2 * dc * dz + 1j * b * r * dc * z + (c - 1) * psi.evaluate(r)
        return zt, F

    zsegs, fsegs = [], []
    for lo, hi, r in pieces:
        zt, F = parts(r)
        zsegs.append(Segment(lo, hi, zt, lo == 0.0))
        fsegs.append(Segment(lo, hi, F, lo == 0.0))
    meta = dict(zeta.meta, a=a, A=A)
    return RadialProfile("ZetaTilde", tuple(zsegs), meta), RadialProfile("F_b", tuple(fsegs), meta)


def radial_pair(f: RadialProfile, g: RadialProfile, f_op=None, g_op=None) -> float:
    """``Re int f conj(g) dx`` over R^2 on the quadrature of ``f``'s segments."""
    r, w = f.quadrature()
    fv = f_op(f, r) if f_op else f.evaluate(r)
    gv = g_op(g, r) if g_op else g.evaluate(r)
    return float(2 * np.pi * np.sum(w * r * np.real(fv * np.conj(gv))))


def Lambda(prof: RadialProfile, r) -> np.ndarray:
    return prof.evaluate(r) + r * prof.evaluate(r, 1)


def flux(zeta_tilde: RadialProfile, F: RadialProfile) -> float:
    """``-Re(zeta~, Lambda F_b)``, evaluated as ``Re(Lambda zeta~, F_b)``.

    The two forms agree because Lambda is anti-self-adjoint in two
    dimensions; the second avoids differentiating F_b.
    """
    return radial_pair(zeta_tilde, F, f_op=Lambda)


def flux_direct(zeta_tilde: RadialProfile, F: RadialProfile) -> float:
    return -radial_pair(zeta_tilde, F, g_op=Lambda)


# diagnostics --------------------------------------------------------------------

def radial_energy(prof: RadialProfile) -> float:
    """``E = 1/2 int |grad f|^2 - 1/4 int |f|^4`` for a radial profile."""
    r, w = prof.quadrature()
    f = prof.evaluate(r)
    df = prof.evaluate(r, 1)
    return float(2 * np.pi * np.sum(w * r * (0.5 * np.abs(df) ** 2 - 0.25 * np.abs(f) ** 4)))


def radial_mass(prof: RadialProfile) -> float:
    return radial_l2sq(prof)


def radial_gradient_sq(prof: RadialProfile) -> float:
    r, w = prof.quadrature()
    return float(2 * np.pi * np.sum(w * r * np.abs(prof.evaluate(r, 1)) ** 2))


def sampled_momentum(prof: RadialProfile, n: int = 256, L: Optional[float] = None) -> np.ndarray:
    """Momentum ``Im int u grad conj(u)`` of the profile sampled on a 2D grid."""
    from .spectral import make_grid, gradient
    grid = make_grid(n, L or prof.r_max + 2.0)
    u = prof.sample(np.sqrt(grid.rsq))
    gx, gy = gradient(u, grid)
    return np.array([np.imag(np.sum(u * np.conj(gx))), np.imag(np.sum(u * np.conj(gy)))]) * grid.cell_area


@dataclass(frozen=True)
class ProfileDiagnostics:
    b: float
    mass: float
    energy: float
    momentum: tuple[float, float]
    mass_excess: float
    gamma_b: float
    gamma_in_bracket: bool
    plateau_variation: float
    flux: float
    flux_constant: float
    zeta_tilde_l2sq: float
    grad_zeta_l2: float


def profile_diagnostics(qb_tilde: RadialProfile, zeta_tilde: RadialProfile, q: RadialProfile,
                        zeta: RadialProfile, F: RadialProfile, C: float = C_DEFAULT) -> ProfileDiagnostics:
    """Mass, energy, momentum, mass excess, Gamma_b and flux for one b."""
    mq = radial_mass(q)
    m = radial_mass(qb_tilde)
    est = estimate_Gamma_b(zeta, C)
    fl = flux(zeta_tilde, F)
    mom = sampled_momentum(qb_tilde)
    return ProfileDiagnostics(
        b=float(qb_tilde.b), mass=m, energy=radial_energy(qb_tilde),
        momentum=(float(mom[0]), float(mom[1])), mass_excess=m - mq,
        gamma_b=est.gamma, gamma_in_bracket=est.in_bracket, plateau_variation=est.plateau_variation,
        flux=fl, flux_constant=fl / est.gamma, zeta_tilde_l2sq=radial_mass(zeta_tilde),
        grad_zeta_l2=float(np.sqrt(radial_gradient_sq(zeta))))


def bclose_error(qb: RadialProfile, q: RadialProfile, eta: float = ETA_DEFAULT,
                 max_log_weight: float = 18.0, npts: int = 2001) -> float:
    """Weighted sup of ``|P_b - Q|`` with weight ``e^{(1-eta) theta(b r)/b}``.

    The sup is taken where the weight stays below ``e^{max_log_weight}``;
    beyond that both profiles are below double-precision resolution relative
    to their peak and the weighted difference only measures round-off.
    """
    b = qb.b
    rmax = min(qb.meta["R_domain"], q.r_max)
    r = np.linspace(0.0, rmax, npts)
    logw = (1 - eta) * theta_weight(b * r) / b
    keep = logw <= max_log_weight
    diff = np.abs(P_of(qb, r[keep]) - q.evaluate(r[keep]).real)
    return float(np.max(np.exp(logw[keep]) * diff))


# b-table for modulation --------------------------------------------------------

class ProfileTable:
    """Cut-off profiles on a uniform b grid with cubic interpolation in b.

    Negative b uses ``Q~_{-b} = conj(Q~_b)``; b = 0 is the ground state.
    """

    def __init__(self, q: RadialProfile, tilde: dict[float, RadialProfile], db: float,
                 eta: float = ETA_DEFAULT):
        self.q = q
        self.db = db
        self.eta = eta
        self.b_values = np.array(sorted(tilde))
        self.profiles = [q] + [tilde[b] for b in self.b_values]
        self.b_max = float(self.b_values[-1])

    @classmethod
    def build(cls, b_max: float = 0.3, db: float = DB_DEFAULT, eta: float = ETA_DEFAULT,
              q: Optional[RadialProfile] = None, m: int = NODES_DEFAULT) -> "ProfileTable":
        q = q or solve_ground_state()
        nb = int(round(b_max / db))
        targets = [round(db * k, 12) for k in range(1, nb + 1)]
        qbs = continuation(targets, eta, q, db, m)
        tilde = {b: make_Qb_tilde(qbs[b], eta)[0] for b in targets}
        return cls(q, tilde, db, eta)

    def _node(self, k: int, rho: np.ndarray, nu: int) -> np.ndarray:
        v = self.profiles[abs(k)].sample(rho, nu)
        return np.conj(v) if k < 0 else v

    def evaluate(self, b: float, rho: np.ndarray, nu: int = 0) -> np.ndarray:
        """Q~_b(rho) (or its nu-th radial derivative) by 4-point Lagrange in b."""
        if abs(b) > self.b_max:
            raise ValueError(f"b={b} outside the solved range [-{self.b_max}, {self.b_max}]")
        t = b / self.db
        nmax = len(self.b_values)
        k0 = int(np.floor(t)) - 1
        k0 = max(-nmax, min(k0, nmax - 3))
        ks = np.arange(k0, k0 + 4)
        out = np.zeros(np.shape(rho), dtype=np.complex128)
        for j, kj in enumerate(ks):
            w = np.prod([(t - km) / (kj - km) for km in ks if km != kj])
            if w != 0.0:
                out += w * self._node(int(kj), rho, nu)
        return out
