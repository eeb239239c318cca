"""Monte Carlo layer: ensembles over seeds, tail fits and norm statistics."""
from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special, stats

from .randomize import RandomDataSpec, gaussian_grid, gaussians, lp_norm, realize, ring_order
from .spectral import ComplexField, Grid2D, ifft2

N_TIMES_DEFAULT = 64


# Mixed norms ----------------------------------------------------------------------

def gauss_times(window: tuple[float, float], n_times: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n_times)
    a, b = window
    return a + (b - a) * (x + 1) / 2, w * (b - a) / 2


def free_evolutions(f: ComplexField, times: np.ndarray, chunk: int = 16):
    """Yield ``e^{it Lap} f`` (physical samples) at each time."""
    fh = f.spectral().values
    ksq = f.grid.ksq
    for i in range(0, len(times), chunk):
        ts = times[i:i + chunk]
        batch = np.exp(-1j * ts[:, None, None] * ksq[None]) * fh[None]
        yield from ifft2(batch, overwrite_x=True)


def strichartz_norm(f: ComplexField, q: float, r: float, window: tuple[float, float] = (0.0, 1.0),
                    n_times: int = N_TIMES_DEFAULT) -> float:
    """Discrete ``L^q_t L^r_x`` norm of ``F = e^{it Lap} f`` with Gauss-Legendre in t."""
    if not (2 <= q < np.inf and 2 <= r < np.inf):
        raise ValueError("need 2 <= q, r < inf")
    if not 0 <= window[0] < window[1] <= 1:
        raise ValueError("window must be a subinterval of [0, 1]")
    t, w = gauss_times(window, n_times)
    norms = np.array([lp_norm(v, f.grid, r) for v in free_evolutions(f, t)])
    return float(np.sum(w * norms**q) ** (1.0 / q))


# Tail fits -------------------------------------------------------------------------

@dataclass(frozen=True)
class TailFit:
    """``log P(X > K) ~ log C - c K^p`` fitted on the empirical exceedance curve."""

    K: np.ndarray = dc_field(repr=False)
    P_hat: np.ndarray = dc_field(repr=False)
    C: float = float("nan")
    c: float = float("nan")
    p: float = float("nan")
    r2: float = float("nan")
    model: str = ""
    alternatives: dict = dc_field(default_factory=dict)
    n_samples: int = 0
    degenerate: bool = False

    def summary(self) -> dict:
        return {"C": self.C, "c": self.c, "p": self.p, "r2": self.r2, "model": self.model,
                "alternatives": self.alternatives, "n_samples": self.n_samples,
                "degenerate": self.degenerate, "n_K": int(len(self.K))}


TAIL_MODELS = {"K2": 2.0, "K2/3": 2.0 / 3.0}


def exceedance(samples: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Empirical ``P(X > K)``; non-increasing in K by construction."""
    xs = np.sort(samples)
    return 1.0 - np.searchsorted(xs, K, side="right") / len(xs)


def default_K_grid(samples: np.ndarray, n_K: int = 25, q_lo: float = 0.5, min_exceed: int = 10) -> np.ndarray:
    """K from the ``q_lo`` quantile up to the value still exceeded ``min_exceed`` times."""
    xs = np.sort(samples)
    hi = xs[max(len(xs) - min_exceed - 1, 0)]
    lo = np.quantile(xs, q_lo)
    return np.linspace(lo, hi, n_K)


def tail_fit(samples: Sequence[float], K_grid: Optional[np.ndarray] = None,
             models: Sequence[str] = ("K2", "K2/3"), min_exceed: int = 10) -> TailFit:
    """Regress ``log P_hat`` on ``K^p`` for each model power; keep the best R^2.

    Grid points with fewer than ``min_exceed`` exceedances are dropped.
    """
    x = np.asarray(samples, dtype=float)
    if len(x) < 100:
        raise ValueError("tail fits need at least 100 samples")
    if np.ptp(x) <= 1e-12 * max(np.max(np.abs(x)), 1e-300):
        return TailFit(np.array([]), np.array([]), n_samples=len(x), degenerate=True, model="degenerate")
    K = default_K_grid(x, min_exceed=min_exceed) if K_grid is None else np.asarray(K_grid, dtype=float)
    P = exceedance(x, K)
    keep = P * len(x) >= min_exceed
    K, P = K[keep], P[keep]
    if len(np.unique(K)) < 3:
        return TailFit(K, P, n_samples=len(x), degenerate=True, model="degenerate")
    fits = {}
    for name in models:
        p = TAIL_MODELS[name]
        res = stats.linregress(K**p, np.log(P))
        fits[name] = {"C": float(np.exp(res.intercept)), "c": float(-res.slope), "p": p,
                      "r2": float(res.rvalue**2)}
    best = max(fits, key=lambda k: fits[k]["r2"])
    b = fits[best]
    return TailFit(K, P, b["C"], b["c"], b["p"], b["r2"], best, fits, len(x))


def linf_gaussian_check(gauss: np.ndarray, n_index: np.ndarray, eps: float,
                        K_grid: Optional[np.ndarray] = None) -> tuple[TailFit, np.ndarray]:
    """Tail of ``max_n <n>^{-eps} |g_n|`` over seeds.

    ``gauss`` has shape (seeds, indices); ``n_index`` holds ``|n|`` per index.
    Returns the K^2 fit and the per-seed maxima.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    wts = (1.0 + np.asarray(n_index, dtype=float) ** 2) ** (-eps / 2)
    X = np.max(np.abs(gauss) * wts[None, :], axis=1)
    return tail_fit(X, K_grid, models=("K2",)), X


def lattice_gaussians(seeds: Sequence[int], K: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian draws on [-K, K]^2 for each seed (ring order) and the ``|n|`` of each index."""
    pts = ring_order(K)
    g = np.stack([gaussians(int(s), len(pts)) for s in seeds])
    return g, np.hypot(pts[:, 0], pts[:, 1])


def trilinear_statistic(gauss: np.ndarray, coeff: np.ndarray) -> np.ndarray:
    """``G = sum_{i,j,k} c_ijk g_i conj(g_j) g_k`` per row of ``gauss``."""
    return np.einsum("ijk,si,sj,sk->s", coeff, gauss, np.conj(gauss), gauss)


def large_dev_moments(c: np.ndarray, rhos: Sequence[float], n_samples: int, seed: int = 0) -> dict:
    """Empirical ``||sum c_n g_n||_{L^rho_omega}`` and the log-log growth exponent in rho.

    The exact value for complex Gaussians, ``Gamma(1 + rho/2)^{1/rho} ||c||_2``,
    is returned alongside as the oracle.
    """
    c = np.asarray(c, dtype=complex)
    g = gaussians(seed, n_samples * len(c)).reshape(n_samples, len(c))
    X = np.abs(g @ c)
    rhos = np.asarray(rhos, dtype=float)
    emp = np.array([np.mean(X**r) ** (1 / r) for r in rhos])
    cn = float(np.linalg.norm(c))
    exact = np.exp(special.gammaln(1 + rhos / 2) / rhos) * cn
    fe = stats.linregress(np.log(rhos), np.log(emp))
    fx = stats.linregress(np.log(rhos), np.log(exact))
    return {"rho": rhos.tolist(), "empirical": emp.tolist(), "exact": exact.tolist(),
            "exponent_empirical": float(fe.slope), "exponent_exact": float(fx.slope),
            "max_ratio_to_sqrt_rho": float(np.max(emp / (np.sqrt(rhos) * cn)))}


# Bilinear scan -----------------------------------------------------------------------

def annulus_project(f: ComplexField, N: float) -> ComplexField:
    """Sharp dyadic projector onto ``N <= |xi| < 2N``."""
    k = np.sqrt(f.grid.ksq)
    m = (k >= N) & (k < 2 * N)
    if not np.any(m):
        raise ValueError(f"empty annulus [{N}, {2 * N}) on this grid")
    if 2 * N > f.grid.k_nyquist:
        raise ValueError(f"annulus [{N}, {2 * N}) exceeds the grid's Nyquist wavenumber")
    return ComplexField(f.grid, ifft2(np.where(m, f.spectral().values, 0)))


def bilinear_norm(f1: ComplexField, f2: ComplexField, window: tuple[float, float], n_times: int) -> float:
    """``||(e^{it Lap} f1)(e^{it Lap} f2)||_{L^2_{t,x}}`` over the window."""
    t, w = gauss_times(window, n_times)
    acc = 0.0
    for wi, u, v in zip(w, free_evolutions(f1, t), free_evolutions(f2, t)):
        acc += wi * f1.grid.cell_area * float(np.sum(np.abs(u * v) ** 2))
    return float(np.sqrt(acc))


@dataclass(frozen=True)
class BilinearRow:
    N: float
    M: float
    value: float
    ratio: float


def bilinear_ratio_scan(f1: ComplexField, f2: ComplexField, N_list: Sequence[float], M_list: Sequence[float],
                        window: tuple[float, float] = (0.0, 1.0), n_times: int = N_TIMES_DEFAULT) -> list:
    """``R(N, M) = ||e^{itL}P_N f1 e^{itL}P_M f2|| / ((M/N)^{1/2} ||P_N f1|| ||P_M f2||)`` for M <= N."""
    rows = []
    for N in N_list:
        pn = annulus_project(f1, N)
        for M in M_list:
            if M > N:
                continue
            pm = annulus_project(f2, M)
            den = np.sqrt(M / N) * pn.norm() * pm.norm()
            if den == 0:
                raise ZeroDivisionError(f"P_N f1 or P_M f2 vanishes at N={N}, M={M}")
            val = bilinear_norm(pn, pm, window, n_times)
            rows.append(BilinearRow(float(N), float(M), val, val / den))
    return rows


def bilinear_slope(rows: Sequence[BilinearRow]) -> float:
    """Slope of ``log sup_{N/M} R`` against ``log(N/M)`` over ratios N/M > 1."""
    by = {}
    for r in rows:
        k = r.N / r.M
        if k > 1:
            by[k] = max(by.get(k, 0.0), r.ratio)
    ks = np.array(sorted(by))
    if len(ks) < 2:
        raise ValueError("need at least two distinct ratios N/M > 1")
    return float(stats.linregress(np.log(ks), np.log([by[k] for k in ks])).slope)


# Ensembles -----------------------------------------------------------------------------

OBSERVABLES = ("l2sq", "linf", "strichartz", "linf_weighted_g")


@dataclass(frozen=True, eq=False)
class EnsembleConfig:
    spec: RandomDataSpec
    grid: Grid2D
    n_samples: int = 2000
    seed_base: int = 0
    observables: tuple = ("l2sq",)
    T_obs: float = 1.0
    n_times: int = N_TIMES_DEFAULT
    q: float = 4.0
    r: float = 4.0
    eps: float = 0.1

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if not self.T_obs > 0:
            raise ValueError("T_obs must be positive")
        bad = set(self.observables) - set(OBSERVABLES)
        if bad:
            raise ValueError(f"unknown observables {sorted(bad)}")
        object.__setattr__(self, "observables", tuple(self.observables))

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "grid": {"n": self.grid.n, "L": self.grid.L},
                "n_samples": self.n_samples, "seed_base": self.seed_base,
                "observables": list(self.observables), "T_obs": self.T_obs, "n_times": self.n_times,
                "q": self.q, "r": self.r, "eps": self.eps}

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class EnsembleResult:
    config: EnsembleConfig
    seeds: np.ndarray
    values: dict  # observable -> array over samples (nan on failure)
    errors: dict  # seed -> message
    nu: float

    def stats(self, name: str) -> dict:
        v = self.values[name]
        v = v[np.isfinite(v)]
        return {"mean": float(np.mean(v)), "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0,
                "se": float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0, "n": int(len(v))}


def _observe(cfg: EnsembleConfig, seed: int) -> dict:
    K = cfg.spec.K_max
    g = gaussian_grid(seed, K)
    f = realize(cfg.spec, g, cfg.grid)
    out = {}
    for name in cfg.observables:
        if name == "l2sq":
            out[name] = f.norm() ** 2
        elif name == "linf":
            out[name] = float(np.max(np.abs(f.values)))
        elif name == "strichartz":
            out[name] = strichartz_norm(f, cfg.q, cfg.r, (0.0, min(cfg.T_obs, 1.0)), cfg.n_times)
        elif name == "linf_weighted_g":
            ks = np.arange(-K, K + 1)
            n2 = ks[:, None] ** 2 + ks[None, :] ** 2
            out[name] = float(np.max(np.abs(g) * (1.0 + n2) ** (-cfg.eps / 2)))
    return out


def run_ensemble(cfg: EnsembleConfig, workers: int = 1) -> EnsembleResult:
    """Evaluate every observable on each seed ``seed_base + i`` (mod 2^64).

    Results are collected in seed order, so the output does not depend on
    ``workers``. An exception on one sample is recorded and yields NaN.
    """
    seeds = (np.uint64(cfg.seed_base) + np.arange(cfg.n_samples, dtype=np.uint64)).astype(np.uint64)

    def one(s):
        try:
            return _observe(cfg, int(s)), None
        except Exception as exc:  # recorded per sample, not fatal
            return None, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            res = list(ex.map(one, seeds))
    else:
        res = [one(s) for s in seeds]
    values = {name: np.full(cfg.n_samples, np.nan) for name in cfg.observables}
    errors = {}
    for i, (obs, err) in enumerate(res):
        if err is not None:
            errors[int(seeds[i])] = err
            continue
        for name, v in obs.items():
            values[name][i] = v
    return EnsembleResult(cfg, seeds, values, errors, cfg.spec.nu(cfg.grid))


def save_ensemble(result: EnsembleResult, root: Union[str, Path], fits: Optional[dict] = None) -> Path:
    """Write samples.csv and summary.json under ``root/ensemble_<config hash>``."""
    cfg = result.config
    out = Path(root) / f"ensemble_{cfg.config_hash()}"
    out.mkdir(parents=True, exist_ok=True)
    names = list(cfg.observables)
    with open(out / "samples.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["seed"] + names)
        for i, s in enumerate(result.seeds):
            wr.writerow([str(int(s))] + [repr(float(result.values[n][i])) for n in names])
    summary = {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "nu": result.nu,
               "stats": {n: result.stats(n) for n in names}, "errors": {str(k): v for k, v in result.errors.items()},
               "fits": fits or {}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return out
