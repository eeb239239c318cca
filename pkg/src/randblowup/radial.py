"""Radial discretization: Chebyshev collocation, profile container, quadrature.

A radial profile is stored as a chain of Chebyshev segments. The innermost
segment may be *folded*: the Chebyshev grid on [-R, R] with an even number of
points, restricted to r > 0, which represents even functions without a node
at the origin. Outer segments are plain Chebyshev-Lobatto grids on [a, b].
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field as dc_field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import BarycentricInterpolator, CubicSpline

PROFILE_KINDS = ("Q", "Qb", "QbTilde", "Zeta", "ZetaTilde", "Psi_b", "F_b")


@lru_cache(maxsize=32)
def cheb(N: int) -> tuple[np.ndarray, np.ndarray]:
    """Chebyshev-Lobatto points ``cos(j pi / N)`` and differentiation matrix."""
    x = np.cos(np.pi * np.arange(N + 1) / N)
    c = np.ones(N + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(N + 1)
    dX = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (dX + np.eye(N + 1))
    D -= np.diag(D.sum(axis=1))
    D.flags.writeable = False
    x.flags.writeable = False
    return D, x


def folded_grid(m: int, R: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Even-function collocation on (0, R] with ``m`` nodes (descending).

    Returns nodes ``r`` and the first and second derivative matrices acting
    on the ``m`` retained values.
    """
    N = 2 * m - 1
    D, x = cheb(N)
    D2 = D @ D
    r = R * x[:m]
    D1f = (D[:m, :m] + D[:m, N:m - 1:-1]) / R
    D2f = (D2[:m, :m] + D2[:m, N:m - 1:-1]) / R**2
    return r, D1f, D2f


def interval_grid(a: float, b: float, npts: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chebyshev-Lobatto collocation on [a, b] with ``npts`` nodes (descending)."""
    D, x = cheb(npts - 1)
    s = 2.0 / (b - a)
    r = 0.5 * (a + b) + 0.5 * (b - a) * x
    return r, D * s, (D @ D) * s * s


@dataclass(frozen=True, eq=False)
class Segment:
    """One Chebyshev segment; values are given at the descending nodes."""

    a: float
    b: float
    values: np.ndarray = dc_field(repr=False)
    folded: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128).copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        if self.folded and self.a != 0.0:
            raise ValueError("a folded segment must start at r = 0")

    @property
    def size(self) -> int:
        return len(self.values)

    @cached_property
    def _ops(self):
        if self.folded:
            return folded_grid(self.size, self.b)
        return interval_grid(self.a, self.b, self.size)

    @property
    def nodes(self) -> np.ndarray:
        return self._ops[0]

    def node_derivative(self, nu: int) -> np.ndarray:
        if nu == 0:
            return self.values
        if nu == 1:
            return self._ops[1] @ self.values
        if nu == 2:
            return self._ops[2] @ self.values
        raise ValueError("only derivatives up to order 2 are supported")

    @cached_property
    def _interps(self) -> dict:
        return {}

    def evaluate(self, r: np.ndarray, nu: int = 0) -> np.ndarray:
        if nu not in self._interps:
            vals = self.node_derivative(nu)
            if self.folded:
                sign = -1.0 if nu % 2 else 1.0
                xs = np.concatenate([self.nodes, -self.nodes[::-1]])
                ys = np.concatenate([vals, sign * vals[::-1]])
            else:
                xs, ys = self.nodes, vals
            self._interps[nu] = BarycentricInterpolator(xs, ys)
        return np.asarray(self._interps[nu](r), dtype=np.complex128)


@dataclass(frozen=True, eq=False)
class RadialProfile:
    """Tabulated radial function with spectral and spline evaluators.

    ``segments`` are ordered by increasing radius and tile [0, r_max]. The
    profile is taken to vanish for r > r_max.
    """

    kind: str
    segments: tuple
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ValueError(f"unknown profile kind {self.kind!r}")
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        for s in segs:
            if not np.all(np.isfinite(s.values)):
                raise ValueError("profile values must be finite")
        for s0, s1 in zip(segs[:-1], segs[1:]):
            if not np.isclose(s0.b, s1.a, rtol=1e-14, atol=0):
                raise ValueError("segments must be contiguous")
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def b(self) -> Optional[float]:
        return self.meta.get("b")

    @property
    def r_max(self) -> float:
        return self.segments[-1].b

    @cached_property
    def _sorted(self) -> tuple[np.ndarray, np.ndarray]:
        r = np.concatenate([s.nodes for s in self.segments])
        v = np.concatenate([s.values for s in self.segments])
        order = np.argsort(r, kind="stable")
        return r[order], v[order]

    @property
    def nodes(self) -> np.ndarray:
        """All collocation nodes in increasing order (interfaces repeated)."""
        return self._sorted[0]

    @property
    def values(self) -> np.ndarray:
        return self._sorted[1]

    def evaluate(self, r, nu: int = 0) -> np.ndarray:
        """Spectral (barycentric) evaluation of the ``nu``-th derivative."""
        r = np.asarray(r, dtype=float)
        flat = np.abs(r.ravel())
        out = np.zeros(flat.shape, dtype=np.complex128)
        lo = 0.0
        for k, s in enumerate(self.segments):
            hi = s.b
            sel = (flat >= lo) & (flat <= hi) if k == 0 else (flat > lo) & (flat <= hi)
            if np.any(sel):
                out[sel] = s.evaluate(flat[sel], nu)
            lo = hi
        return out.reshape(r.shape)

    __call__ = evaluate

    @cached_property
    def interpolant(self) -> CubicSpline:
        """Cubic spline through a dense uniform resample of [0, r_max].

        Used for fast sampling onto 2D grids. The clamped condition at the
        origin encodes radial symmetry.
        """
        npts = int(min(200001, max(4001, 100 * self.r_max + 1)))
        rr = np.linspace(0.0, self.r_max, npts)
        vv = self.evaluate(rr)
        end = self.evaluate(np.array([self.r_max]), 1)[0]
        return CubicSpline(rr, vv, bc_type=((1, 0.0), (1, end)))

    def sample(self, rho: np.ndarray, nu: int = 0) -> np.ndarray:
        """Spline evaluation (derivative order ``nu``), zero beyond r_max."""
        rho = np.asarray(rho, dtype=float)
        inside = rho <= self.r_max
        out = np.zeros(rho.shape, dtype=np.complex128)
        if np.any(inside):
            sp = self.interpolant if nu == 0 else self.interpolant.derivative(nu)
            out[inside] = sp(rho[inside])
        return out

    def quadrature(self, per_segment: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Composite Gauss-Legendre nodes/weights on [0, r_max] (dr measure)."""
        rs, ws = [], []
        for s in self.segments:
            k = per_segment or max(64, 2 * s.size)
            x, w = leggauss(k)
            lo = 0.0 if s.folded else s.a
            rs.append(lo + (s.b - lo) * (x + 1) / 2)
            ws.append(w * (s.b - lo) / 2)
        return np.concatenate(rs), np.concatenate(ws)

    def with_kind(self, kind: str, segments=None, **meta) -> "RadialProfile":
        m = dict(self.meta)
        m.update(meta)
        return RadialProfile(kind, self.segments if segments is None else segments, m)


def map_segments(profile: RadialProfile, fn: Callable[[Segment], np.ndarray]) -> tuple:
    """New segments with values ``fn(segment)`` on the same nodes."""
    return tuple(Segment(s.a, s.b, fn(s), s.folded) for s in profile.segments)


def radial_l2sq(profile: RadialProfile, weight: Optional[Callable] = None) -> float:
    """``int |f|^2 w dx`` over R^2 for a radial profile (w radial, default 1)."""
    r, w = profile.quadrature()
    f = profile.evaluate(r)
    wt = 1.0 if weight is None else weight(r)
    return float(2 * np.pi * np.sum(w * r * wt * np.abs(f) ** 2))


# Smooth cutoffs -----------------------------------------------------------

def smoothstep(u: np.ndarray, nu: int = 0) -> np.ndarray:
    """Quintic smoothstep ``6u^5 - 15u^4 + 10u^3`` clamped to [0, 1].

    ``S(u) + S(1 - u) = 1``; C2 at both ends. ``nu`` selects a derivative.
    """
    u = np.asarray(u, dtype=float)
    inside = (u > 0) & (u < 1)
    if nu == 0:
        v = np.clip(u, 0.0, 1.0)
        return v**3 * (10 - 15 * v + 6 * v * v)
    if nu == 1:
        return np.where(inside, 30 * u**2 * (1 - u) ** 2, 0.0)
    if nu == 2:
        return np.where(inside, 60 * u * (1 - u) * (1 - 2 * u), 0.0)
    raise ValueError("smoothstep derivative order must be 0, 1 or 2")


def radial_cutoff(r: np.ndarray, r0: float, r1: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cutoff equal to 1 on r <= r0 and 0 on r >= r1, with two derivatives."""
    w = r1 - r0
    u = (r1 - np.asarray(r, dtype=float)) / w
    return smoothstep(u), -smoothstep(u, 1) / w, smoothstep(u, 2) / w**2


# Persistence ----------------------------------------------------------------

_HEADER = "# randblowup radial profile v1"


def _body_text(profile: RadialProfile) -> str:
    buf = io.StringIO()
    buf.write(f"# kind: {profile.kind}\n")
    buf.write(f"# meta: {json.dumps(profile.meta, sort_keys=True)}\n")
    for s in profile.segments:
        buf.write(f"# segment: {'folded' if s.folded else 'interval'} {s.a!r} {s.b!r} {s.size}\n")
    buf.write("# columns: r re im\n")
    for s in profile.segments:
        for r, v in zip(s.nodes, s.values):
            buf.write(f"{r:.17g} {v.real:.17g} {v.imag:.17g}\n")
    return buf.getvalue()


def content_hash(text: str) -> str:
    """Git-style blob hash (SHA-1 over ``"blob <len>\\0" + content``)."""
    data = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def profile_hash(profile: RadialProfile) -> str:
    return content_hash(_body_text(profile))


def profile_to_text(profile: RadialProfile) -> str:
    body = _body_text(profile)
    return f"{_HEADER}\n# hash: {content_hash(body)}\n{body}"


def profile_from_text(text: str, verify: bool = True) -> RadialProfile:
    lines = text.splitlines(keepends=True)
    if not lines or lines[0].strip() != _HEADER:
        raise ValueError("not a radial profile file")
    stored = lines[1].split(":", 1)[1].strip()
    body = "".join(lines[2:])
    if verify and content_hash(body) != stored:
        raise ValueError("profile content hash mismatch")
    kind, meta, segspec, rows = None, {}, [], []
    for ln in lines[2:]:
        if ln.startswith("# kind:"):
            kind = ln.split(":", 1)[1].strip()
        elif ln.startswith("# meta:"):
            meta = json.loads(ln.split(":", 1)[1])
        elif ln.startswith("# segment:"):
            t = ln.split(":", 1)[1].split()
            segspec.append((t[0] == "folded", float(t[1]), float(t[2]), int(t[3])))
        elif not ln.startswith("#") and ln.strip():
            rows.append([float(x) for x in ln.split()])
    data = np.array(rows)
    segs, pos = [], 0
    for folded, a, b, size in segspec:
        chunk = data[pos:pos + size]
        segs.append(Segment(a, b, chunk[:, 1] + 1j * chunk[:, 2], folded))
        pos += size
    return RadialProfile(kind, tuple(segs), meta)


def save_profile(profile: RadialProfile, path) -> str:
    text = profile_to_text(profile)
    Path(path).write_text(text)
    return profile_hash(profile)


def load_profile(path, verify: bool = True) -> RadialProfile:
    return profile_from_text(Path(path).read_text(), verify=verify)


def chain_segments(pieces: Sequence[tuple[float, float, np.ndarray, bool]]) -> tuple:
    return tuple(Segment(a, b, v, f) for a, b, v, f in pieces)
