"""Test functions on the quotients, smoothing kernels and reference measures.

Observables are built from compactly supported bumps in the reduced
coordinates (x, y, theta-mod-pi per factor).  Everything evaluates in
batch on (N, k, 3) coordinate arrays; single-point convenience wrappers
reduce their argument first, so observables are genuinely functions on
the quotient.

The smoothing kernels are the mollified box indicators used to compare
sums over integer boxes with their continuous volumes: exact 0/1 away
from an edge layer of width delta, with total mass exactly gamma_len**n.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_legendre

from . import quotient as qt
from . import sl2
from .quotient import Lattice, QuotientPoint

_PROFILE_GRID = 16385
# finite-difference step, relative to the smallest bump width
_FD_STEP = 0.01
# safety factor on grid suprema of derivatives
_SOBOLEV_SAFETY = 1.1
SOBOLEV_ORDER_CAP = 4


def bump_profile(r):
    """exp(1 + 1/(r^2 - 1)) on |r| < 1, exactly 0 outside; peak value 1."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = np.abs(r) < 1.0
    ri = r[inside]
    out[inside] = np.exp(1.0 + 1.0 / (ri * ri - 1.0))
    return out


def _profile_cdf_table():
    """Normalised CDF of the standard mollifier on [-1, 1]."""
    u = np.linspace(-1.0, 1.0, _PROFILE_GRID)
    vals = bump_profile(u)
    # trapezoid prefix integral; endpoints vanish so this is smooth
    steps = 0.5 * (vals[1:] + vals[:-1]) * np.diff(u)
    cdf = np.concatenate([[0.0], np.cumsum(steps)])
    cdf /= cdf[-1]
    return u, cdf


_CDF_U, _CDF_VALS = _profile_cdf_table()


def profile_cdf(u):
    """Phi(u): 0 for u <= -1, 1 for u >= 1, smooth monotone between."""
    return np.interp(u, _CDF_U, _CDF_VALS, left=0.0, right=1.0)


# ----------------------------------------------------------------------
# bump observables
# ----------------------------------------------------------------------

@dataclass
class BumpFunction:
    """Product bump in reduced coordinates, amplitude at the centre.

    Each factor contributes bump_profile((x-cx)/wx) * same for y * same
    for theta, the theta offset being folded modulo pi.  Support is the
    open product box; values vanish identically outside it.
    """

    lattice: Lattice
    center: np.ndarray  # (k, 3)
    widths: np.ndarray  # (k, 3)
    amplitude: float = 1.0
    order_cap: int = SOBOLEV_ORDER_CAP

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(self.lattice.k, 3)
        self.widths = np.asarray(self.widths, dtype=float).reshape(self.lattice.k, 3)
        if np.any(self.widths <= 0.0):
            raise ValueError("bump widths must be positive")
        if np.any(self.widths[:, 2] > math.pi / 2.0):
            raise ValueError("theta width must stay below pi/2 (frame circle has length pi)")
        if self.order_cap < 0:
            raise ValueError("derivative order cap must be nonnegative")

    @property
    def k(self) -> int:
        return self.lattice.k

    def min_width(self) -> float:
        return float(self.widths.min())

    def evaluate_coords(self, coords: np.ndarray) -> np.ndarray:
        """Values on an (N, k, 3) array of reduced coordinates."""
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 2:
            coords = coords[None]
        vals = np.full(coords.shape[0], self.amplitude)
        for i in range(self.k):
            dx = (coords[:, i, 0] - self.center[i, 0]) / self.widths[i, 0]
            dy = (coords[:, i, 1] - self.center[i, 1]) / self.widths[i, 1]
            dt = np.abs(coords[:, i, 2] - self.center[i, 2]) % math.pi
            dt = np.minimum(dt, math.pi - dt) / self.widths[i, 2]
            vals = vals * bump_profile(dx) * bump_profile(dy) * bump_profile(dt)
        return vals

    def value(self, p: QuotientPoint) -> float:
        return float(self.evaluate_coords(qt.coordinates(p)[None])[0])

    def support_grid(self, per_dim: int = 5) -> np.ndarray:
        """(M, k, 3) grid spanning [-0.9, 0.9] of each width around the centre."""
        ticks = np.linspace(-0.9, 0.9, per_dim)
        axes = []
        for i in range(self.k):
            for j in range(3):
                axes.append(self.center[i, j] + ticks * self.widths[i, j])
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = np.stack([m.ravel() for m in mesh], axis=1)
        return flat.reshape(-1, self.k, 3)


@dataclass
class ObservableSum:
    """Finite linear combination of bumps (same lattice)."""

    terms: list[tuple[float, BumpFunction]]

    def __post_init__(self):
        if not self.terms:
            raise ValueError("empty observable")
        k0 = self.terms[0][1].k
        if any(b.k != k0 for _, b in self.terms):
            raise ValueError("mixed factor counts in one observable")

    @property
    def lattice(self) -> Lattice:
        return self.terms[0][1].lattice

    @property
    def k(self) -> int:
        return self.terms[0][1].k

    def min_width(self) -> float:
        return min(b.min_width() for _, b in self.terms)

    def evaluate_coords(self, coords: np.ndarray) -> np.ndarray:
        out = None
        for c, b in self.terms:
            v = c * b.evaluate_coords(coords)
            out = v if out is None else out + v
        return out

    def value(self, p: QuotientPoint) -> float:
        return float(self.evaluate_coords(qt.coordinates(p)[None])[0])

    def support_grid(self, per_dim: int = 4) -> np.ndarray:
        return np.concatenate([b.support_grid(per_dim) for _, b in self.terms], axis=0)


@dataclass
class ConstantObservable:
    """f == const; the degenerate case every average test starts from."""

    lattice: Lattice
    level: float = 1.0

    @property
    def k(self) -> int:
        return self.lattice.k

    def min_width(self) -> float:
        return 1.0

    def evaluate_coords(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=float)
        n = coords.shape[0] if coords.ndim == 3 else 1
        return np.full(n, self.level)

    def value(self, p: QuotientPoint) -> float:
        return self.level


class TranslatedObservable:
    """p -> f(p * g): the right-translate of an observable by g."""

    def __init__(self, base, g: sl2.GroupElement):
        self.base = base
        self.g = g
        self.lattice = base.lattice

    @property
    def k(self) -> int:
        return self.base.k

    def min_width(self) -> float:
        return self.base.min_width()

    def evaluate_coords(self, coords: np.ndarray) -> np.ndarray:
        mats = qt.mats_from_coords(coords)
        moved = np.einsum("nkab,kbc->nkac", mats, self.g.mats)
        return self.base.evaluate_coords(qt.coords_of_stack(self.lattice, moved))

    def value(self, p: QuotientPoint) -> float:
        return self.base.value(qt.translate(p, self.g))


# ----------------------------------------------------------------------
# reference measure, k = 1
# ----------------------------------------------------------------------

def _gl_nodes(n: int, a: float, b: float):
    x, w = roots_legendre(n)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


def haar_integral_k1(f, nx: int = 64, nv: int = 64, ntheta: int = 32) -> float:
    """Normalised invariant integral of f over the modular quotient.

    Coordinates (x, v = 1/y, theta): the invariant density dx dy/y^2
    dtheta becomes dx dv dtheta, over v in (0, 1/sqrt(1-x^2)] and theta
    in [0, pi).  The total mass is computed by the same quadrature (and
    equals pi/3 * pi analytically), so the result is exactly 1 for f == 1.
    """
    xs, wx = _gl_nodes(nx, -0.5, 0.5)
    ss, ws = _gl_nodes(nv, 0.0, 1.0)
    ths, wth = _gl_nodes(ntheta, 0.0, math.pi)
    vmax = 1.0 / np.sqrt(1.0 - xs * xs)
    # tensor points: (x, s, theta) with v = s * vmax(x)
    X, S, TH = np.meshgrid(xs, ss, ths, indexing="ij")
    V = S * vmax[:, None, None]
    Y = 1.0 / V
    coords = np.stack([X.ravel(), Y.ravel(), TH.ravel()], axis=1)[:, None, :]
    vals = f.evaluate_coords(coords).reshape(X.shape)
    W = wx[:, None, None] * ws[None, :, None] * wth[None, None, :] * vmax[:, None, None]
    total = float(np.sum(vals * W))
    mass = float(np.sum(W))
    return total / mass


def haar_mass_k1(nx: int = 64, nv: int = 64) -> float:
    """Quadrature value of the unnormalised base mass (analytic: pi/3)."""
    xs, wx = _gl_nodes(nx, -0.5, 0.5)
    vmax = 1.0 / np.sqrt(1.0 - xs * xs)
    return float(np.sum(wx * vmax))


def haar_reference_k2(f, lattice, t_span: float = 20000.0, samples: int = 400000,
                      base: QuotientPoint | None = None):
    """Surrogate invariant integral on a Hilbert quotient.

    Long-horocycle time average from a generic basepoint, reported with
    a doubling self-consistency error |A(T) - A(T/2)|.  Used only where
    no closed-form fundamental domain is available; the error estimate
    is part of the return value on purpose.
    """
    if base is None:
        seed_mats = np.array([
            [[1.3, 0.21], [0.17, (1.0 + 0.21 * 0.17) / 1.3]],
            [[0.8, -0.33], [0.29, (1.0 - 0.33 * 0.29) / 0.8]],
        ])
        base = QuotientPoint(lattice, sl2.GroupElement(seed_mats))
    ts = (np.arange(samples) + 0.5) * (t_span / samples)
    k = lattice.k
    stack = np.broadcast_to(base.rep.mats, (samples, k, 2, 2)).copy()
    # right-multiply by u(t): adds t * first column to second column, factor 0
    stack[:, 0, 0, 1] += ts * stack[:, 0, 0, 0]
    stack[:, 0, 1, 1] += ts * stack[:, 0, 1, 0]
    vals = f.evaluate_coords(qt.coords_of_stack(lattice, stack))
    half = samples // 2
    full_avg = float(vals.mean())
    half_avg = float(vals[:half].mean())
    return full_avg, abs(full_avg - half_avg)


# ----------------------------------------------------------------------
# smoothing kernels for counting boxes
# ----------------------------------------------------------------------

@dataclass
class SmoothingKernel:
    """Mollified indicator of the box [0, gamma_len]^n with edge width delta.

    One-dimensional edge G(u) = Phi(u/delta) - Phi((u-gamma_len)/delta);
    the kernel is the tensor product of n copies.  Exactly 1 on
    [delta, gamma_len-delta]^n, exactly 0 outside [-delta,
    gamma_len+delta]^n, and the total integral is exactly gamma_len**n.
    """

    delta: float
    gamma_len: float
    n: int = 1

    def __post_init__(self):
        if not (0.0 < self.delta < self.gamma_len / 2.0):
            raise ValueError("need 0 < delta < gamma_len / 2")
        if self.n < 1:
            raise ValueError("dimension must be >= 1")

    def edge(self, u):
        u = np.asarray(u, dtype=float)
        return profile_cdf(u / self.delta) - profile_cdf((u - self.gamma_len) / self.delta)

    def kernel_value(self, u: np.ndarray) -> np.ndarray:
        """Values at an (N, n) array of points."""
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        out = np.ones(u.shape[0])
        for j in range(self.n):
            out = out * self.edge(u[:, j])
        return out

    def support_box(self) -> tuple[float, float]:
        return (-self.delta, self.gamma_len + self.delta)

    def mass(self) -> float:
        """Exact total integral: gamma_len ** n (telescoping shift)."""
        return self.gamma_len ** self.n

    def _panels_1d(self):
        d, g = self.delta, self.gamma_len
        return [(-d, 0.0), (0.0, d), (d, g - d), (g - d, g), (g, g + d)]

    def quadrature_check(self, order: int = 24) -> dict:
        """Panel-aligned tensor quadrature of mass and box-L1 deviation.

        Panels are aligned with the kink lines of the sharp indicator so
        Gauss-Legendre converges at full rate; feasible for n <= 3.
        """
        if self.n > 3:
            raise ValueError("tensor quadrature check limited to n <= 3")
        x, w = roots_legendre(order)
        nodes1, weights1, inside1 = [], [], []
        for (a, b) in self._panels_1d():
            nodes1.append(0.5 * (b - a) * x + 0.5 * (a + b))
            weights1.append(0.5 * (b - a) * w)
            inside1.append(np.full(order, a >= -1e-15 and b <= self.gamma_len + 1e-15))
        nodes1 = np.concatenate(nodes1)
        weights1 = np.concatenate(weights1)
        inside1 = np.concatenate(inside1)
        grids = np.meshgrid(*([nodes1] * self.n), indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        wgrids = np.meshgrid(*([weights1] * self.n), indexing="ij")
        wts = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
        igrids = np.meshgrid(*([inside1] * self.n), indexing="ij")
        chi = np.prod(np.stack([g.ravel() for g in igrids], axis=1), axis=1)
        vals = self.kernel_value(pts)
        mass_quad = float(np.sum(wts * vals))
        l1_dev = float(np.sum(wts * np.abs(vals - chi)))
        bound = 2.0 * self.n * self.delta * (self.gamma_len + 2.0 * self.delta) ** (self.n - 1)
        return {
            "mass_quadrature": mass_quad,
            "mass_exact": self.mass(),
            "mass_defect": abs(mass_quad - self.mass()),
            "l1_box_deviation": l1_dev,
            "l1_bound": bound,
            "l1_within_bound": l1_dev <= bound,
        }


# ----------------------------------------------------------------------
# Sobolev-type upper bounds by nested differencing
# ----------------------------------------------------------------------

@dataclass
class SobolevRecord:
    order: int
    value: float
    step: float
    points: int
    words: int


def _direction_basis(k: int) -> list[np.ndarray]:
    """3k right-invariant directions: X, Y, Z in each factor."""
    dirs = []
    for i in range(k):
        for base in (sl2.BASIS_X, sl2.BASIS_Y, sl2.BASIS_Z):
            coords = np.zeros((k, 3))
            if base is sl2.BASIS_X:
                coords[i, 0] = 1.0
            elif base is sl2.BASIS_Y:
                coords[i, 1] = 1.0
            else:
                coords[i, 2] = 1.0
            dirs.append(coords)
    return dirs


def _offset_elements(word: tuple[int, ...], dirs, eps: float, k: int):
    """All 2^m offset products exp(s_1 eps W_1) ... exp(s_m eps W_m).

    Returns (matrices (2^m, k, 2, 2), sign products (2^m,)).  Nested
    central differences expand into exactly this signed combination.
    """
    m = len(word)
    combos = list(itertools.product((1.0, -1.0), repeat=m))
    mats = np.empty((len(combos), k, 2, 2))
    signs = np.empty(len(combos))
    for idx, signs_tuple in enumerate(combos):
        acc = sl2.identity(k)
        sign = 1.0
        for s, wi in zip(signs_tuple, word):
            step = sl2.exp_map(sl2.LieAlgebraElement(s * eps * dirs[wi]))
            acc = sl2.compose(acc, step)
            sign *= s
        mats[idx] = acc.mats
        signs[idx] = sign
    return mats, signs


def _support_boxes(f) -> list[tuple[np.ndarray, np.ndarray]]:
    if isinstance(f, BumpFunction):
        return [(f.center, f.widths)]
    if isinstance(f, ObservableSum):
        return [(b.center, b.widths) for _, b in f.terms]
    return []


def _sample_coords(f, extra_points: int, seed: int) -> np.ndarray:
    """Support grid plus random points, all placed relative to the widths.

    Width-relative placement keeps the sample set covariant under
    dilations of the observable, so grid suprema of rescaled bumps obey
    the chain-rule scaling instead of drifting with the sampling.
    """
    k = f.k
    per_dim = 13 if k == 1 else 5
    grid = f.support_grid(per_dim) if hasattr(f, "support_grid") else np.empty((0, k, 3))
    rng = np.random.default_rng(seed)
    boxes = _support_boxes(f)
    if boxes:
        per = max(1, extra_points // len(boxes))
        parts = []
        for center, widths in boxes:
            offs = rng.uniform(-1.05, 1.05, size=(per, k, 3))
            parts.append(center[None] + offs * widths[None])
        rand = np.concatenate(parts, axis=0)
    else:
        rand = np.stack([
            rng.uniform(-0.45, 0.45, size=(extra_points, k)),
            rng.uniform(1.05, 2.2, size=(extra_points, k)),
            rng.uniform(0.1, math.pi - 0.1, size=(extra_points, k)),
        ], axis=2)
    pts = np.concatenate([grid, rand], axis=0)
    pts[:, :, 1] = np.maximum(pts[:, :, 1], 1e-3)
    return pts


def sobolev_norm(f, order: int, extra_points: int = 120,
                 seed: int = 2024) -> SobolevRecord:
    """Grid supremum of all right-derivative words up to the given order.

    Nested central differences of p -> f(p exp(t W)) over every word of
    basis directions with length <= order, maximised over a support grid
    plus random interior points, then inflated by a safety factor.  An
    upper-bound surrogate: cheap, deterministic, reproducible.  Order 0
    is the plain sup of |f| (no inflation): for a single bump the grid
    contains the centre, so the result is exactly the amplitude.
    """
    cap = int(getattr(f, "order_cap", SOBOLEV_ORDER_CAP))
    if not (0 <= order <= cap):
        raise ValueError(f"order must be in 0..{cap}")
    k = f.k
    lattice = f.lattice
    dirs = _direction_basis(k)
    eps = _FD_STEP * f.min_width()
    pts = _sample_coords(f, extra_points, seed)
    base_mats = qt.mats_from_coords(pts)
    best = float(np.max(np.abs(f.evaluate_coords(pts))))  # order-0 term
    if order == 0:
        return SobolevRecord(order=0, value=best, step=eps, points=len(pts), words=0)
    nwords = 0
    for m in range(1, order + 1):
        for word in itertools.product(range(3 * k), repeat=m):
            nwords += 1
            offs, signs = _offset_elements(word, dirs, eps, k)
            # (P, O, k, 2, 2): every point times every offset
            moved = np.einsum("pkab,okbc->pokac", base_mats, offs)
            flat = moved.reshape(-1, k, 2, 2)
            vals = f.evaluate_coords(qt.coords_of_stack(lattice, flat))
            vals = vals.reshape(len(pts), len(offs))
            diff = vals @ signs / (2.0 * eps) ** m
            best = max(best, float(np.max(np.abs(diff))))
    return SobolevRecord(order=order, value=_SOBOLEV_SAFETY * best, step=eps,
                         points=len(pts), words=nwords)
