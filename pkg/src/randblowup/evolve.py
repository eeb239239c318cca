"""Strang-split pseudospectral integration of ``i u_t + Lap u = -|u|^2 u``.

One step is: half nonlinear phase ``u e^{i|u|^2 dt/2}``, the exact free
propagator ``e^{-i|xi|^2 dt}`` in Fourier space (with the 2/3 mask when
dealiasing), and a second half phase. Both substeps preserve the discrete
mass, the phase because it does not change ``|u|`` and the propagator by
unitarity.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .radial import RadialProfile
from .spectral import ComplexField, Grid2D, fft2, ifft2, save_field, load_field

# ||grad Q||_2^2 = ||Q||_2^2 for the Townes profile (Pohozaev identities in 2D);
# numerical value from the ground-state solver.
TOWNES_MASS = 11.70089652455787

EVENT_BLOWUP = "blowup-stop"
EVENT_BOUNDARY = "boundary-abort"
EVENT_COMPLETED = "completed"


class NonFiniteError(FloatingPointError):
    """Raised when a step produces NaN/inf (the run is under-resolved)."""


@dataclass(frozen=True)
class SolverConfig:
    """Adaptive stepping controls.

    ``lambda_floor`` is in units of ``dx``; ``t_max`` is the run duration
    measured from the initial time.
    """

    dt_safety: float = 0.005
    dealias: bool = True
    max_steps: int = 200_000
    lambda_floor: float = 4.0
    boundary_mass_cap: float = 1e-6
    t_max: float = float("inf")
    dt_max: float = 1e-2
    snapshot_stride: int = 10
    grad_q_norm: float = float(np.sqrt(TOWNES_MASS))

    def __post_init__(self):
        if not 0 < self.dt_safety <= 1:
            raise ValueError("dt_safety must lie in (0, 1]")
        if self.lambda_floor < 2:
            raise ValueError("lambda_floor must be at least 2 grid spacings")
        if self.max_steps < 1 or self.snapshot_stride < 1:
            raise ValueError("max_steps and snapshot_stride must be positive")
        if not self.boundary_mass_cap > 0 or not self.dt_max > 0 or not self.t_max > 0:
            raise ValueError("boundary_mass_cap, dt_max and t_max must be positive")


@dataclass(frozen=True)
class Conserved:
    M: float
    P: tuple[float, float]
    E: float
    kinetic: float  # (1/2) int |grad u|^2
    potential: float  # (1/4) int |u|^4


def _conserved_arrays(u: np.ndarray, uh: np.ndarray, grid: Grid2D) -> Conserved:
    w = grid.cell_area
    p2 = np.abs(uh) ** 2
    kx, ky = grid.dmesh
    M = w * float(np.sum(p2))
    # P = Im int u grad(conj u) = -sum xi |u^|^2 dx^2
    P = (-w * float(np.sum(kx * p2)), -w * float(np.sum(ky * p2)))
    kin = 0.5 * w * float(np.sum(grid.ksq * p2))
    pot = 0.25 * w * float(np.sum(np.abs(u) ** 4))
    return Conserved(M, P, kin - pot, kin, pot)


def conserved(field: ComplexField) -> Conserved:
    """Mass, momentum and energy by spectral differentiation and the rectangle rule."""
    u = field.physical().values
    return _conserved_arrays(u, field.spectral().values, field.grid)


def _phase(u: np.ndarray, h: float, inplace: bool = False) -> np.ndarray:
    """``u e^{i h |u|^2}``; cos/sin into a buffer is faster than complex exp."""
    th = u.real**2
    th += u.imag**2
    th *= h
    ph = np.empty_like(u)
    np.cos(th, out=ph.real)
    np.sin(th, out=ph.imag)
    if inplace:
        u *= ph
        return u
    ph *= u
    return ph


def _linear(grid: Grid2D, dt: float, dealias: bool) -> np.ndarray:
    lin = np.exp(-1j * dt * grid.ksq)
    return lin * grid.dealias_mask if dealias else lin


def _strang(u: np.ndarray, dt: float, lin: np.ndarray) -> np.ndarray:
    u = _phase(u, 0.5 * dt)
    u = ifft2(fft2(u, overwrite_x=True) * lin, overwrite_x=True)
    u = _phase(u, 0.5 * dt, True)
    if not np.all(np.isfinite(u)):
        raise NonFiniteError("non-finite values after a step; the field is under-resolved")
    return u


def step(field: ComplexField, dt: float, dealias: bool = True) -> ComplexField:
    """One Strang step of size ``dt > 0``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = _strang(field.physical().values, dt, _linear(field.grid, dt, dealias))
    return ComplexField(field.grid, u)


def propagate(field: ComplexField, duration: float, nsteps: int, dealias: bool = True) -> ComplexField:
    """``nsteps`` fixed Strang steps covering ``duration`` (either sign).

    Consecutive half phases are fused into one full phase, which is exact
    because the phase does not change ``|u|``.
    """
    if nsteps < 1:
        raise ValueError("nsteps must be positive")
    dt = duration / nsteps
    lin = _linear(field.grid, dt, dealias)
    u = _phase(field.physical().values, 0.5 * dt)
    for i in range(nsteps):
        u = ifft2(fft2(u, overwrite_x=True) * lin, overwrite_x=True)
        u = _phase(u, dt if i < nsteps - 1 else 0.5 * dt, True)
    if not np.all(np.isfinite(u)):
        raise NonFiniteError("non-finite values after propagation")
    return ComplexField(field.grid, u)


def fixed_step_run(field: ComplexField, duration: float, nsteps: int, record_every: int = 1,
                   dealias: bool = True, t0: float = 0.0) -> "Trajectory":
    """Fixed-step run recording M, P, E every ``record_every`` steps.

    Only the initial and final fields are kept as snapshots.
    """
    if nsteps < 1 or record_every < 1:
        raise ValueError("nsteps and record_every must be positive")
    grid = field.grid
    dt = duration / nsteps
    u = np.array(field.physical().values)
    rows = []

    def record(t, u):
        uh = fft2(u)
        c = _conserved_arrays(u, uh, grid)
        rows.append((t, c.M, c.P[0], c.P[1], c.E, _a_scale(uh, grid, np.sqrt(TOWNES_MASS))))

    record(0.0, u)
    done = 0
    while done < nsteps:
        k = min(record_every, nsteps - done)
        u = propagate(ComplexField(grid, u), k * dt, k, dealias).values
        done += k
        record(done * dt, u)
    tab = np.array(rows)
    cfg = SolverConfig(dealias=dealias, max_steps=nsteps, t_max=abs(duration), dt_max=abs(dt))
    return Trajectory(grid, cfg, t0, tab[:, 0], tab[:, 1], tab[:, 2], tab[:, 3], tab[:, 4], tab[:, 5],
                      np.array([0.0, duration]), (field.physical(), ComplexField(grid, u)))


def exact_S(t: float, grid: Grid2D, q: RadialProfile) -> ComplexField:
    """Explicit minimal-mass blowup solution ``(1/t) Q(x/t) e^{-i/t + i|x|^2/(4t)}``."""
    if t == 0:
        raise ValueError("S is singular at t = 0")
    rsq = grid.rsq
    amp = q.sample(np.sqrt(rsq) / abs(t)).real / t
    return ComplexField(grid, amp * np.exp(-1j / t + 1j * rsq / (4 * t)))


# Adaptive runs ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    """Per-step diagnostics plus decimated snapshots.

    In forced runs the diagnostic scale ``lam`` and the boundary check refer
    to ``a = u - F``; ``M, P, E`` always refer to the full solution ``u``.
    """

    grid: Grid2D
    config: SolverConfig
    t0: float
    times: np.ndarray
    M: np.ndarray
    Px: np.ndarray
    Py: np.ndarray
    E: np.ndarray
    lam: np.ndarray
    snap_times: np.ndarray
    snapshots: tuple = dc_field(repr=False)
    event: str = EVENT_COMPLETED
    F_snapshots: Optional[tuple] = dc_field(default=None, repr=False)
    mass_a: Optional[np.ndarray] = dc_field(default=None, repr=False)
    forcing_rate: Optional[np.ndarray] = dc_field(default=None, repr=False)

    @property
    def forced(self) -> bool:
        return self.F_snapshots is not None

    def a_snapshots(self) -> tuple:
        """``a = u - F`` at snapshot times (``u`` itself when unforced)."""
        if not self.forced:
            return self.snapshots
        return tuple(u - F for u, F in zip(self.snapshots, self.F_snapshots))

    def drift(self) -> dict:
        """Relative drifts of M, |P| and E against their initial values."""
        M0 = self.M[0]
        P0 = np.hypot(self.Px[0], self.Py[0])
        dP = np.max(np.hypot(self.Px - self.Px[0], self.Py - self.Py[0]))
        Escale = max(abs(self.E[0]), 1e-300)
        return {"mass": float(np.max(np.abs(self.M / M0 - 1))),
                "momentum_abs": float(dP),
                "momentum": float(dP / max(P0, M0)),
                "energy_abs": float(np.max(np.abs(self.E - self.E[0]))),
                "energy": float(np.max(np.abs(self.E - self.E[0])) / Escale)}

    def blowup_time_estimate(self, fraction: float = 0.5) -> float:
        """Zero of a linear fit of ``lam(t)`` over the last ``fraction`` of the run."""
        t = self.t0 + self.times
        k = int(len(t) * (1 - fraction))
        c = np.polyfit(t[k:], self.lam[k:], 1)
        return float(-c[1] / c[0])


def _a_scale(ah: np.ndarray, grid: Grid2D, grad_q: float) -> float:
    g2 = grid.cell_area * float(np.sum(grid.ksq * np.abs(ah) ** 2))
    return grad_q / np.sqrt(g2) if g2 > 0 else np.inf


def _run(u0: ComplexField, config: SolverConfig, f0: Optional[ComplexField], t0: float) -> Trajectory:
    grid = u0.grid
    u = np.array(u0.physical().values)
    if not np.all(np.isfinite(u)):
        raise NonFiniteError("initial data are not finite")
    mask = grid.dealias_mask if config.dealias else 1.0
    outside = grid.rsq > (0.9 * grid.L) ** 2
    w = grid.cell_area
    forced = f0 is not None
    Fh = np.array(f0.spectral().values) if forced else None
    F = np.array(f0.physical().values) if forced else None

    rows, snaps, fsnaps, snap_t, amass, frate = [], [], [], [], [], []

    def record(t, u, uh):
        c = _conserved_arrays(u, uh, grid)
        if forced:
            a, ah = u - F, uh - Fh
            lam = _a_scale(ah, grid, config.grad_q_norm)
            ma = w * float(np.sum(np.abs(a) ** 2))
            nl = np.abs(u) ** 2 * u - np.abs(a) ** 2 * a
            amass.append(ma)
            # d/dt M(a) = -2 Im int conj(a) (|u|^2 u - |a|^2 a)
            frate.append(-2 * w * float(np.imag(np.vdot(a, nl))))
            bm = w * float(np.sum(np.abs(a[outside]) ** 2)) / max(ma, 1e-300)
        else:
            lam = _a_scale(uh, grid, config.grad_q_norm)
            bm = w * float(np.sum(np.abs(u[outside]) ** 2)) / max(c.M, 1e-300)
        rows.append((t, c.M, c.P[0], c.P[1], c.E, lam))
        return lam, bm

    def snapshot(t, u):
        snap_t.append(t)
        snaps.append(ComplexField(grid, u))
        if forced:
            fsnaps.append(ComplexField(grid, F))

    t = 0.0
    lam, bm = record(t, u, fft2(u))
    snapshot(t, u)
    event = EVENT_COMPLETED
    for k in range(config.max_steps):
        if lam < config.lambda_floor * grid.dx:
            event = EVENT_BLOWUP
            break
        if bm > config.boundary_mass_cap:
            event = EVENT_BOUNDARY
            break
        if t >= config.t_max * (1 - 1e-14):
            break
        dt = min(config.dt_safety * lam**2, config.dt_max, config.t_max - t)
        lin = np.exp(-1j * dt * grid.ksq)
        u = _strang(u, dt, lin * mask)
        t += dt
        if forced:
            Fh = Fh * lin
            F = ifft2(Fh)
        uh = fft2(u)
        lam, bm = record(t, u, uh)
        if (k + 1) % config.snapshot_stride == 0:
            snapshot(t, u)
    if snap_t[-1] != t:
        snapshot(t, u)

    tab = np.array(rows)
    return Trajectory(grid, config, t0, tab[:, 0], tab[:, 1], tab[:, 2], tab[:, 3], tab[:, 4], tab[:, 5],
                      np.array(snap_t), tuple(snaps), event,
                      tuple(fsnaps) if forced else None,
                      np.array(amass) if forced else None,
                      np.array(frate) if forced else None)


def evolve_adaptive(u0: ComplexField, config: SolverConfig = SolverConfig(), t0: float = 0.0) -> Trajectory:
    """Integrate with ``dt = tau lam_est^2``, ``lam_est = ||grad Q|| / ||grad u||``.

    Stops on the resolution floor (``blowup-stop``), on boundary mass above
    the cap (``boundary-abort``), at ``t_max`` or after ``max_steps``.
    ``t0`` only labels the physical start time; stored times are relative.
    """
    return _run(u0, config, None, t0)


def forced_difference_evolve(u0_total: ComplexField, f_sample: ComplexField,
                             config: SolverConfig = SolverConfig(), t0: float = 0.0) -> Trajectory:
    """Evolve ``u`` together with the exact free flow ``F = e^{it Lap} f``.

    Snapshots of ``a = u - F`` (the part that solves the forced equation)
    are available through :meth:`Trajectory.a_snapshots`.
    """
    if f_sample.grid != u0_total.grid:
        raise ValueError("u0 and f live on different grids")
    return _run(u0_total, config, f_sample, t0)


# Persistence -------------------------------------------------------------------------

CSV_COLUMNS = ("t", "M", "P_x", "P_y", "E", "lambda_est")


def save_trajectory(traj: Trajectory, outdir: Union[str, Path], manifest: Optional[dict] = None) -> Path:
    """Write manifest.json, conserved.csv and snapshot containers under ``outdir``."""
    out = Path(outdir)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    cfg = asdict(traj.config)
    cfg["t_max"] = None if np.isinf(cfg["t_max"]) else cfg["t_max"]
    man = {"grid": {"n": traj.grid.n, "L": traj.grid.L}, "solver": cfg, "t0": traj.t0,
           "event": traj.event, "steps": int(len(traj.times) - 1),
           "t_end": float(traj.times[-1]), "drift": traj.drift(), "snapshots": []}
    with open(out / "conserved.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_COLUMNS + (("M_a", "dMa_dt") if traj.forced else ()))
        for i in range(len(traj.times)):
            row = [traj.times[i], traj.M[i], traj.Px[i], traj.Py[i], traj.E[i], traj.lam[i]]
            if traj.forced:
                row += [traj.mass_a[i], traj.forcing_rate[i]]
            wr.writerow([repr(float(v)) for v in row])
    for i, (t, u) in enumerate(zip(traj.snap_times, traj.snapshots)):
        name = f"snapshots/u_{i:05d}.bin"
        save_field(u, out / name)
        entry = {"t": float(t), "u": name}
        if traj.forced:
            fname = f"snapshots/F_{i:05d}.bin"
            save_field(traj.F_snapshots[i], out / fname)
            entry["F"] = fname
        man["snapshots"].append(entry)
    if manifest:
        man.update(manifest)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True))
    return out


def load_trajectory(outdir: Union[str, Path]) -> Trajectory:
    out = Path(outdir)
    man = json.loads((out / "manifest.json").read_text())
    tab = np.loadtxt(out / "conserved.csv", delimiter=",", skiprows=1, ndmin=2)
    cfg = dict(man["solver"])
    if cfg.get("t_max") is None:
        cfg["t_max"] = float("inf")
    snaps = tuple(load_field(out / s["u"]) for s in man["snapshots"])
    forced = "F" in man["snapshots"][0]
    fs = tuple(load_field(out / s["F"]) for s in man["snapshots"]) if forced else None
    return Trajectory(Grid2D(man["grid"]["n"], man["grid"]["L"]), SolverConfig(**cfg), man["t0"],
                      tab[:, 0], tab[:, 1], tab[:, 2], tab[:, 3], tab[:, 4], tab[:, 5],
                      np.array([s["t"] for s in man["snapshots"]]), snaps, man["event"], fs,
                      tab[:, 6] if forced else None, tab[:, 7] if forced else None)
