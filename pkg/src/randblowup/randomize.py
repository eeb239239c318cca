"""Unit-scale Wiener randomization of Fourier data.

The window is a tensor product ``psi(xi) = chi(xi_1) chi(xi_2)`` of a 1D
smoothstep plateau, so its integer translates form an exact partition of
unity. Random data are ``f^w = sum_k g_k f_k psi(. - k)`` in Fourier space
with i.i.d. standard complex Gaussians ``g_k`` (E|g|^2 = 1).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from typing import Optional

import numpy as np

from .radial import smoothstep
from .spectral import ComplexField, Grid2D, apply_multiplier, ifft2

SHAPES = ("log-corrected", "pure-inverse")


@dataclass(frozen=True)
class Window:
    """Plateau window: 1 on |t| <= (1-o)/2, 0 on |t| >= (1+o)/2 per axis."""

    kind: str = "quintic"
    overlap: float = 0.5

    def __post_init__(self):
        if self.kind != "quintic":
            raise ValueError(f"unsupported window kind {self.kind!r}")
        if not 0 < self.overlap <= 1:
            raise ValueError("overlap must lie in (0, 1]")

    @property
    def half_support(self) -> float:
        return 0.5 * (1 + self.overlap)

    def chi(self, t) -> np.ndarray:
        u = (self.half_support - np.abs(np.asarray(t, dtype=float))) / self.overlap
        return smoothstep(u)

    def __call__(self, xi1, xi2) -> np.ndarray:
        return self.chi(xi1) * self.chi(xi2)


def make_window(kind: str = "quintic", overlap: float = 0.5) -> Window:
    return Window(kind, overlap)


def ring_order(K: int) -> np.ndarray:
    """Lattice points of [-K, K]^2 sorted by ring max(|k1|,|k2|), then lexicographically.

    Enlarging K appends points, so per-index random draws are stable.
    """
    k1, k2 = np.meshgrid(np.arange(-K, K + 1), np.arange(-K, K + 1), indexing="ij")
    k1, k2 = k1.ravel(), k2.ravel()
    ring = np.maximum(np.abs(k1), np.abs(k2))
    order = np.lexsort((k2, k1, ring))
    return np.stack([k1[order], k2[order]], axis=1)


@dataclass(frozen=True, eq=False)
class RandomDataSpec:
    """Amplitudes ``f_k`` on [-K_max, K_max]^2 (array index [k1+K, k2+K])."""

    window: Window
    amplitudes: np.ndarray = dc_field(repr=False)
    K_max: int = 0
    decay_constant: float = 0.0
    shape: str = "pure-inverse"
    normalized: bool = True
    log_power: float = 2.0

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=np.complex128).copy()
        if a.shape != (2 * self.K_max + 1,) * 2:
            raise ValueError("amplitude array does not match K_max")
        a.flags.writeable = False
        object.__setattr__(self, "amplitudes", a)

    def l2sum(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def nu(self, grid: Grid2D) -> float:
        """Exact mean of ``||f^w||_2^2``: ``sum_k |f_k|^2 sum_xi psi(xi-k)^2 dxi^2``."""
        X = _window_matrix(grid.xi.tobytes(), self.K_max, self.window)
        dxi = np.pi / grid.L
        w1 = np.sum(X**2, axis=1) * dxi  # per-axis sums, separable
        return float(np.sum(np.abs(self.amplitudes) ** 2 * np.outer(w1, w1)))

    def to_dict(self, grid: Optional[Grid2D] = None) -> dict:
        d = {"window": {"kind": self.window.kind, "overlap": self.window.overlap},
             "shape": self.shape, "K_max": self.K_max, "C": self.decay_constant,
             "normalized": self.normalized, "log_power": self.log_power}
        if grid is not None:
            d["nu"] = self.nu(grid)
            d["grid"] = {"n": grid.n, "L": grid.L}
        return d

    def to_text(self, grid: Optional[Grid2D] = None) -> str:
        return json.dumps(self.to_dict(grid), indent=2, sort_keys=True)


def spec_from_text(text: str) -> RandomDataSpec:
    d = json.loads(text)
    return make_profile(d["shape"], d["K_max"], d["normalized"],
                        window=Window(**d["window"]), log_power=d.get("log_power", 2.0))


def default_K_max(grid: Grid2D) -> int:
    """Grid-resolvability truncation ``n pi / (4 L)`` (half the Nyquist wavenumber)."""
    return int(np.floor(grid.n * np.pi / (4 * grid.L)))


def make_profile(shape: str = "log-corrected", K_max: int = 16, normalize: bool = True,
                 window: Optional[Window] = None, log_power: float = 2.0) -> RandomDataSpec:
    """Amplitude profile ``1/|k|`` or ``1/(|k| ln^p(e|k|))`` with ``|k| -> max(|k|, 1)``."""
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}")
    if K_max < 4:
        raise ValueError("K_max must be at least 4")
    ks = np.arange(-K_max, K_max + 1)
    k1, k2 = np.meshgrid(ks, ks, indexing="ij")
    kk = np.maximum(np.hypot(k1, k2), 1.0)
    f = 1.0 / kk
    if shape == "log-corrected":
        f = f / np.log(np.e * kk) ** log_power
    if normalize:
        f = f / np.sqrt(np.sum(f**2))
    nz = (k1 != 0) | (k2 != 0)
    C = float(np.max(np.abs(f[nz]) * np.hypot(k1, k2)[nz]))
    return RandomDataSpec(window or Window(), f, K_max, C, shape, normalize, log_power)


def zero_spec(K_max: int = 8, window: Optional[Window] = None) -> RandomDataSpec:
    n = 2 * K_max + 1
    return RandomDataSpec(window or Window(), np.zeros((n, n)), K_max, 0.0, "pure-inverse", False)


def hs_partial_sum(spec: RandomDataSpec, s: float) -> float:
    """``sum_k |k|^{2s} |f_k|^2`` (H^s proxy of the amplitude sequence)."""
    ks = np.arange(-spec.K_max, spec.K_max + 1)
    k1, k2 = np.meshgrid(ks, ks, indexing="ij")
    return float(np.sum(np.hypot(k1, k2) ** (2 * s) * np.abs(spec.amplitudes) ** 2))


# Gaussians --------------------------------------------------------------------

def gaussians(seed: int, count: int) -> np.ndarray:
    """``count`` standard complex Gaussians keyed by (seed, index).

    Philox is counter-based: output word j depends only on the key and j,
    so index i always receives the same value whatever ``count`` is. Two
    words per index are mapped by Box-Muller to ``sqrt(-ln U1) e^{2 pi i U2}``,
    which has independent N(0, 1/2) real and imaginary parts.
    """
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    bg = np.random.Philox(key=seed)
    raw = bg.random_raw(2 * count).reshape(count, 2)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return np.sqrt(-np.log(u[:, 0])) * np.exp(2j * np.pi * u[:, 1])


def gaussian_grid(seed: int, K: int) -> np.ndarray:
    """Gaussians arranged on [-K, K]^2 (index [k1+K, k2+K]) in ring order."""
    pts = ring_order(K)
    g = gaussians(seed, len(pts))
    out = np.empty((2 * K + 1, 2 * K + 1), dtype=np.complex128)
    out[pts[:, 0] + K, pts[:, 1] + K] = g
    return out


@lru_cache(maxsize=16)
def _window_matrix_cached(xi_bytes: bytes, K: int, kind: str, overlap: float) -> np.ndarray:
    xi = np.frombuffer(xi_bytes, dtype=np.float64)
    w = Window(kind, overlap)
    ks = np.arange(-K, K + 1)
    X = w.chi(xi[None, :] - ks[:, None])
    X.flags.writeable = False
    return X


def _window_matrix(xi_bytes: bytes, K: int, window: Window) -> np.ndarray:
    """``X[k, j] = chi(xi_j - k)`` for the 1D grid wavenumbers."""
    return _window_matrix_cached(xi_bytes, K, window.kind, window.overlap)


@dataclass(frozen=True, eq=False)
class RandomSample:
    spec: RandomDataSpec
    seed: int
    gaussians: np.ndarray = dc_field(repr=False)
    field: ComplexField = dc_field(repr=False)


def _check_resolvable(grid: Grid2D, K: int, window: Window) -> None:
    if K + window.half_support > grid.k_nyquist:
        raise ValueError(f"K_max={K} is not resolvable: need K + {window.half_support} <= "
                         f"Nyquist {grid.k_nyquist:.3f}")


def realize(spec: RandomDataSpec, g: np.ndarray, grid: Grid2D) -> ComplexField:
    """Field with continuum Fourier transform ``sum_k g_k f_k psi(xi - k)``.

    The unitary DFT coefficient at ``xi_j`` is ``(n/2pi) dxi^2 (-1)^{j1+j2}``
    times the continuum transform (the sign accounts for the grid starting
    at -L), which makes ``||f||_2^2 = dxi^2 sum_j |fhat(xi_j)|^2``.
    """
    K = spec.K_max
    _check_resolvable(grid, K, spec.window)
    X = _window_matrix(grid.xi.tobytes(), K, spec.window)
    fhat = X.T @ (g * spec.amplitudes) @ X
    dxi = np.pi / grid.L
    sign = (-1.0) ** grid.mode_index
    coeff = fhat * (grid.n / (2 * np.pi) * dxi**2) * np.outer(sign, sign)
    return ComplexField(grid, ifft2(coeff))


def sample(spec: RandomDataSpec, seed: int, grid: Grid2D) -> RandomSample:
    """Deterministic draw of ``f^w`` for ``seed`` on ``grid``."""
    g = gaussian_grid(seed, spec.K_max)
    return RandomSample(spec, seed, g, realize(spec, g, grid))


# projections and Bernstein ratios ------------------------------------------------

def project_unit(f: ComplexField, k, window: Optional[Window] = None) -> ComplexField:
    """``P_k f``: Fourier multiplier ``psi(xi - k)``."""
    window = window or Window()
    k1, k2 = int(k[0]), int(k[1])
    if max(abs(k1), abs(k2)) + window.half_support > f.grid.k_nyquist:
        raise ValueError(f"k={k} is outside the resolvable range of the grid")
    return apply_multiplier(f, lambda a, b: window(a - k1, b - k2))


def lp_norm(u: np.ndarray, grid: Grid2D, p: float) -> float:
    """Discrete Lebesgue norm ``(dx^2 sum |u|^p)^{1/p}``; ``p = inf`` gives max."""
    a = np.abs(u)
    if np.isinf(p):
        return float(a.max())
    return float((grid.cell_area * np.sum(a**p)) ** (1.0 / p))


def bernstein_ratio(f: ComplexField, k, r1: float, r2: float, window: Optional[Window] = None) -> float:
    """``||P_k f||_{r2} / ||P_k f||_{r1}`` for 1 <= r1 <= r2 <= inf."""
    if not 1 <= r1 <= r2:
        raise ValueError("need 1 <= r1 <= r2")
    u = project_unit(f, k, window).values
    den = lp_norm(u, f.grid, r1)
    if den == 0:
        raise ZeroDivisionError("P_k f vanishes")
    return lp_norm(u, f.grid, r2) / den
