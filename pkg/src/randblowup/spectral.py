"""Periodic pseudospectral substrate on the square box [-L, L)^2.

Spectral coefficients are kept in the standard FFT (``fftfreq``) layout and
use the unitary ("ortho") normalization, so the discrete Plancherel identity
holds exactly and the same quadrature weight ``dx**2`` applies to inner
products in either space.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from functools import cached_property
from pathlib import Path
from typing import Callable, Union

import numpy as np
import scipy.fft as sfft

PHYSICAL = "physical"
SPECTRAL = "spectral"

# Number of FFT worker threads; set once by the CLI (--threads).
_FFT_WORKERS = 1


def set_fft_workers(n: int) -> None:
    """Set the number of threads used by every transform in the package."""
    global _FFT_WORKERS
    if n < 1:
        raise ValueError("thread count must be positive")
    _FFT_WORKERS = int(n)


def fft2(a: np.ndarray, overwrite_x: bool = False) -> np.ndarray:
    return sfft.fft2(a, norm="ortho", workers=_FFT_WORKERS, overwrite_x=overwrite_x)


def ifft2(a: np.ndarray, overwrite_x: bool = False) -> np.ndarray:
    return sfft.ifft2(a, norm="ortho", workers=_FFT_WORKERS, overwrite_x=overwrite_x)


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid2D:
    """Uniform periodic grid with ``n`` points per axis on [-L, L)^2.

    Wavenumbers are ``xi_j = (pi / L) j`` with ``j`` in ``{-n/2, ..., n/2-1}``.
    """

    n: int
    L: float

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or not _is_pow2(int(self.n)) or self.n < 8:
            raise ValueError(f"n must be a power of two >= 8, got {self.n!r}")
        if not np.isfinite(self.L) or self.L <= 0:
            raise ValueError(f"L must be positive, got {self.L!r}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "L", float(self.L))

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def cell_area(self) -> float:
        return self.dx * self.dx

    @cached_property
    def x(self) -> np.ndarray:
        """1D node coordinates ``-L + j dx``."""
        return -self.L + self.dx * np.arange(self.n)

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical coordinates (X, Y), indexed [i, j] = (x_i, x_j)."""
        return np.meshgrid(self.x, self.x, indexing="ij")

    @cached_property
    def xi(self) -> np.ndarray:
        """1D wavenumbers in FFT layout."""
        return (np.pi / self.L) * self.mode_index

    @cached_property
    def mode_index(self) -> np.ndarray:
        """Integer mode numbers j in FFT layout."""
        return np.fft.fftfreq(self.n, d=1.0 / self.n).round().astype(np.int64)

    @cached_property
    def kmesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xi, self.xi, indexing="ij")

    @cached_property
    def dmesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Wavenumbers for first derivatives: the unpaired Nyquist mode is zeroed."""
        d = np.where(self.mode_index == -self.n // 2, 0.0, self.xi)
        return np.meshgrid(d, d, indexing="ij")

    @cached_property
    def ksq(self) -> np.ndarray:
        kx, ky = self.kmesh
        return kx * kx + ky * ky

    @cached_property
    def rsq(self) -> np.ndarray:
        X, Y = self.mesh
        return X * X + Y * Y

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Square 2/3-rule mask: keep modes with max(|j_x|, |j_y|) <= n/3."""
        keep = np.abs(self.mode_index) <= self.n // 3
        return np.logical_and.outer(keep, keep)

    @property
    def k_nyquist(self) -> float:
        return np.pi * self.n / (2.0 * self.L)


def make_grid(n: int, L: float) -> Grid2D:
    """Build a :class:`Grid2D`; raises ``ValueError`` on invalid input."""
    return Grid2D(n, L)


@dataclass(frozen=True, eq=False)
class ComplexField:
    """Samples (physical) or unitary DFT coefficients (spectral) on a grid.

    The value array is stored read-only; operations return new fields.
    """

    grid: Grid2D
    values: np.ndarray = dc_field(repr=False)
    space: str = PHYSICAL

    def __post_init__(self):
        if self.space not in (PHYSICAL, SPECTRAL):
            raise ValueError(f"unknown space tag {self.space!r}")
        v = np.asarray(self.values, dtype=np.complex128)
        if v.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"values shape {v.shape} does not match grid n={self.grid.n}")
        if v.flags.writeable:
            v = v.copy()
            v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def physical(self) -> "ComplexField":
        return self if self.space == PHYSICAL else transform(self)

    def spectral(self) -> "ComplexField":
        return self if self.space == SPECTRAL else transform(self)

    def norm(self) -> float:
        """Discrete L2 norm; identical in either space by unitarity."""
        return float(np.sqrt(self.grid.cell_area * np.sum(np.abs(self.values) ** 2)))

    def __add__(self, other: "ComplexField") -> "ComplexField":
        _check_same(self, other)
        o = other if other.space == self.space else transform(other)
        return ComplexField(self.grid, self.values + o.values, self.space)

    def __sub__(self, other: "ComplexField") -> "ComplexField":
        _check_same(self, other)
        o = other if other.space == self.space else transform(other)
        return ComplexField(self.grid, self.values - o.values, self.space)

    def scale(self, alpha: complex) -> "ComplexField":
        return ComplexField(self.grid, alpha * self.values, self.space)


def _check_same(f: ComplexField, g: ComplexField) -> None:
    if f.grid != g.grid:
        raise ValueError("fields live on different grids")


def field_from_function(grid: Grid2D, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> ComplexField:
    X, Y = grid.mesh
    return ComplexField(grid, fn(X, Y), PHYSICAL)


def transform(field: ComplexField) -> ComplexField:
    """Switch between physical and spectral representation (unitary DFT)."""
    if field.space == PHYSICAL:
        return ComplexField(field.grid, fft2(field.values), SPECTRAL)
    return ComplexField(field.grid, ifft2(field.values), PHYSICAL)


Multiplier = Union[np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def multiplier_values(grid: Grid2D, m: Multiplier) -> np.ndarray:
    """Evaluate a multiplier on the grid wavenumbers (FFT layout)."""
    if callable(m):
        kx, ky = grid.kmesh
        vals = np.asarray(m(kx, ky))
    else:
        vals = np.asarray(m)
    vals = np.broadcast_to(vals, (grid.n, grid.n))
    if not np.all(np.isfinite(vals)):
        raise ValueError("multiplier is not finite on every grid wavenumber")
    return vals


def apply_multiplier(field: ComplexField, m: Multiplier) -> ComplexField:
    """Return the physical-space field with coefficients multiplied by ``m(xi)``."""
    mv = multiplier_values(field.grid, m)
    return ComplexField(field.grid, ifft2(mv * field.spectral().values), PHYSICAL)


def free_propagate(field: ComplexField, t: float) -> ComplexField:
    """Apply the free Schroedinger group ``exp(i t Laplacian)``."""
    if t == 0:
        return field.physical()
    return apply_multiplier(field, np.exp(-1j * t * field.grid.ksq))


def pair_real(f: ComplexField, g: ComplexField) -> float:
    """Real L2 pairing ``Re int f conj(g)`` by the rectangle rule."""
    _check_same(f, g)
    if f.space != g.space:
        g = transform(g)
    return float(f.grid.cell_area * np.real(np.vdot(g.values, f.values)))


def gradient(u: np.ndarray, grid: Grid2D) -> tuple[np.ndarray, np.ndarray]:
    """Spectral gradient of physical samples ``u``."""
    uh = fft2(u)
    kx, ky = grid.dmesh
    return ifft2(1j * kx * uh), ifft2(1j * ky * uh)


def laplacian(u: np.ndarray, grid: Grid2D) -> np.ndarray:
    return ifft2(-grid.ksq * fft2(u))


def boundary_mass(u: Union[ComplexField, np.ndarray], grid: Grid2D | None = None, frac: float = 0.9) -> float:
    """Mass outside the disc of radius ``frac * L``."""
    if isinstance(u, ComplexField):
        grid = u.grid
        u = u.physical().values
    outside = grid.rsq > (frac * grid.L) ** 2
    return float(grid.cell_area * np.sum(np.abs(u[outside]) ** 2))


# Binary container --------------------------------------------------------
#
# offset size  content
#      0    8  magic b"RBFIELD1"
#      8    4  uint32 endianness marker 0x01020304 in the writer's byte order
#     12    4  uint32 n
#     16    4  uint32 space tag (0 physical, 1 spectral)
#     20    4  uint32 reserved (0)
#     24    8  float64 L
#     32  16n^2 complex128 values, row-major (C order), writer's byte order

_MAGIC = b"RBFIELD1"
_MARKER = 0x01020304
_SPACE_CODES = {PHYSICAL: 0, SPECTRAL: 1}


def field_to_bytes(field: ComplexField) -> bytes:
    order = "<" if np.little_endian else ">"
    head = _MAGIC + struct.pack(order + "IIIId", _MARKER, field.grid.n,
                                _SPACE_CODES[field.space], 0, field.grid.L)
    return head + np.ascontiguousarray(field.values).tobytes(order="C")


def field_from_bytes(blob: bytes) -> ComplexField:
    if blob[:8] != _MAGIC:
        raise ValueError("not a field container (bad magic)")
    if struct.unpack("<I", blob[8:12])[0] == _MARKER:
        order = "<"
    elif struct.unpack(">I", blob[8:12])[0] == _MARKER:
        order = ">"
    else:
        raise ValueError("unrecognized endianness marker")
    _, n, code, _, L = struct.unpack(order + "IIIId", blob[8:32])
    space = {v: k for k, v in _SPACE_CODES.items()}.get(code)
    if space is None:
        raise ValueError(f"unknown space code {code}")
    expected = 32 + 16 * n * n
    if len(blob) != expected:
        raise ValueError(f"container length {len(blob)} != expected {expected}")
    vals = np.frombuffer(blob, dtype=np.dtype(order + "c16"), offset=32).reshape(n, n)
    return ComplexField(Grid2D(n, L), vals.astype(np.complex128), space)


def save_field(field: ComplexField, path: Union[str, Path]) -> None:
    Path(path).write_bytes(field_to_bytes(field))


def load_field(path: Union[str, Path]) -> ComplexField:
    return field_from_bytes(Path(path).read_bytes())
