"""Exact-shape numerics for products of SL(2,R) and its Lie algebra.

A group element is a stack of k unimodular 2x2 real matrices, one per
factor.  The one-parameter subgroups used everywhere else are

    u(t) = [[1, t], [0, 1]]   (horocycle direction, first factor)
    a(t) = diag(e^{t/2}, e^{-t/2})   (diagonal direction, first factor)

so that a(t) u(s) a(-t) = u(e^t s): the expansion rate of the diagonal
flow on the horocycle direction equals 1 with these parametrisations.

Lie-algebra elements are stored as (k, 3) coordinate arrays against the
basis

    X = [[0, 1], [0, 0]],  Y = [[0, 0], [1, 0]],  Z = [[1, 0], [0, -1]]

which satisfies [Z, X] = 2X, [Z, Y] = -2Y, [X, Y] = Z.  The norm on the
algebra is the Euclidean norm of the concatenated (X, Y, Z) coordinates
over all factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Determinant drift tolerated before renormalize() is considered overdue.
DET_TOL = 1e-10
# Branch radius for the principal matrix logarithm (per factor, in the
# fallback metric below).
LOG_BRANCH_RADIUS = 0.5
# Parameter guard for diagonal_a: e^(700) overflows float64.
A_PARAM_MAX = 1400.0
# Composition count after which renormalize() is applied automatically in
# long incremental chains.
RENORM_EVERY = 64

BASIS_X = np.array([[0.0, 1.0], [0.0, 0.0]])
BASIS_Y = np.array([[0.0, 0.0], [1.0, 0.0]])
BASIS_Z = np.array([[1.0, 0.0], [0.0, -1.0]])


class GroupDomainError(ValueError):
    """Raised when an operand leaves the domain of a group-core operation."""


class GroupElement:
    """A point of the k-fold product of SL(2,R).

    Wraps a (k, 2, 2) float array.  Stacks are never reshaped in place;
    all operations return fresh elements.
    """

    __slots__ = ("mats",)

    def __init__(self, mats):
        arr = np.asarray(mats, dtype=float)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3 or arr.shape[1:] != (2, 2):
            raise GroupDomainError(f"expected (k,2,2) matrix stack, got shape {arr.shape}")
        self.mats = arr

    @property
    def k(self) -> int:
        return self.mats.shape[0]

    def factor(self, i: int) -> np.ndarray:
        return self.mats[i]

    def det(self) -> np.ndarray:
        """Per-factor determinants."""
        m = self.mats
        return m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]

    def det_drift(self) -> float:
        return float(np.max(np.abs(self.det() - 1.0)))

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        return compose(self, other)

    def __repr__(self):
        return f"GroupElement(k={self.k}, mats={self.mats.tolist()})"

    def copy(self) -> "GroupElement":
        return GroupElement(self.mats.copy())


class LieAlgebraElement:
    """(k, 3) coordinates against (X, Y, Z) per factor."""

    __slots__ = ("coords",)

    def __init__(self, coords):
        arr = np.asarray(coords, dtype=float)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise GroupDomainError(f"expected (k,3) coordinates, got shape {arr.shape}")
        self.coords = arr

    @property
    def k(self) -> int:
        return self.coords.shape[0]

    def matrices(self) -> np.ndarray:
        """(k,2,2) matrix stack a*X + b*Y + c*Z per factor."""
        a = self.coords[:, 0]
        b = self.coords[:, 1]
        c = self.coords[:, 2]
        out = np.zeros((self.k, 2, 2))
        out[:, 0, 0] = c
        out[:, 0, 1] = a
        out[:, 1, 0] = b
        out[:, 1, 1] = -c
        return out

    def norm(self) -> float:
        """Euclidean norm of the concatenated coordinates."""
        return float(np.sqrt(np.sum(self.coords * self.coords)))

    def __repr__(self):
        return f"LieAlgebraElement({self.coords.tolist()})"


@dataclass(frozen=True)
class FlowGenerators:
    """Bookkeeping for the flow pair acting on a k-factor product.

    The diagonal flow expands the horocycle direction at exponential rate
    `alpha`; with the parametrisations in this module alpha == 1.  Flows
    act on the first factor (`active_factor` 0) unless stated otherwise.
    """

    k: int = 1
    alpha: float = 1.0
    active_factor: int = 0

    def commutation_defect(self, t: float, s: float) -> float:
        """|a(t) u(s) a(-t) - u(e^(alpha t) s)| max-entry defect."""
        lhs = compose(diagonal_a(t, self.k), compose(unipotent_u(s, self.k), diagonal_a(-t, self.k)))
        rhs = unipotent_u(np.exp(self.alpha * t) * s, self.k)
        return float(np.max(np.abs(lhs.mats - rhs.mats)))


def identity(k: int = 1) -> GroupElement:
    out = np.zeros((k, 2, 2))
    out[:, 0, 0] = 1.0
    out[:, 1, 1] = 1.0
    return GroupElement(out)


def compose(g: GroupElement, h: GroupElement) -> GroupElement:
    """Factor-wise matrix product g*h."""
    if g.k != h.k:
        raise GroupDomainError(f"factor mismatch: {g.k} vs {h.k}")
    return GroupElement(np.matmul(g.mats, h.mats))


def inverse(g: GroupElement) -> GroupElement:
    """Adjugate inverse; exact for det = 1 factors."""
    m = g.mats
    out = np.empty_like(m)
    out[:, 0, 0] = m[:, 1, 1]
    out[:, 0, 1] = -m[:, 0, 1]
    out[:, 1, 0] = -m[:, 1, 0]
    out[:, 1, 1] = m[:, 0, 0]
    return GroupElement(out)


def unipotent_u(t: float, k: int = 1) -> GroupElement:
    """u(t) in the first factor, identity elsewhere."""
    out = identity(k)
    out.mats[0, 0, 1] = t
    return out


def diagonal_a(t: float, k: int = 1) -> GroupElement:
    """a(t) = diag(e^{t/2}, e^{-t/2}) in the first factor."""
    if abs(t) > A_PARAM_MAX:
        raise GroupDomainError(f"diagonal_a parameter {t} exceeds overflow guard {A_PARAM_MAX}")
    out = identity(k)
    out.mats[0, 0, 0] = np.exp(0.5 * t)
    out.mats[0, 1, 1] = np.exp(-0.5 * t)
    return out


def renormalize(g: GroupElement) -> GroupElement:
    """Divide each factor by sqrt(det) to restore unimodularity.

    Raises if a factor determinant strays outside (0.5, 2): that is not
    drift but a corrupted element.
    """
    d = g.det()
    if np.any(d < 0.5) or np.any(d > 2.0):
        raise GroupDomainError(f"determinant out of renormalization range: {d}")
    return GroupElement(g.mats / np.sqrt(d)[:, None, None])


def adjoint(g: GroupElement, x: LieAlgebraElement) -> LieAlgebraElement:
    """Ad(g) x = g x g^{-1}, factor-wise, back in (X,Y,Z) coordinates."""
    if g.k != x.k:
        raise GroupDomainError(f"factor mismatch: {g.k} vs {x.k}")
    conj = np.matmul(np.matmul(g.mats, x.matrices()), inverse(g).mats)
    out = np.empty((g.k, 3))
    out[:, 0] = conj[:, 0, 1]
    out[:, 1] = conj[:, 1, 0]
    out[:, 2] = conj[:, 0, 0]
    return LieAlgebraElement(out)


def _exp_2x2(m: np.ndarray) -> np.ndarray:
    """exp of a stack of traceless 2x2 matrices via the q = -det branch."""
    q = m[:, 0, 0] ** 2 + m[:, 0, 1] * m[:, 1, 0]  # = -det(m) for traceless m
    c = np.empty_like(q)
    r = np.empty_like(q)
    small = np.abs(q) < 1e-12
    qs = q[small]
    c[small] = 1.0 + qs / 2.0 + qs * qs / 24.0
    r[small] = 1.0 + qs / 6.0 + qs * qs / 120.0
    pos = (~small) & (q > 0)
    lam = np.sqrt(q[pos])
    c[pos] = np.cosh(lam)
    r[pos] = np.sinh(lam) / lam
    neg = (~small) & (q < 0)
    om = np.sqrt(-q[neg])
    c[neg] = np.cos(om)
    r[neg] = np.sin(om) / om
    eye = np.eye(2)[None, :, :]
    return c[:, None, None] * eye + r[:, None, None] * m


def exp_map(x: LieAlgebraElement) -> GroupElement:
    return GroupElement(_exp_2x2(x.matrices()))


def _log_branch_ok(g: GroupElement) -> np.ndarray:
    """Per-factor mask: inside the principal-log branch radius."""
    diff = g.mats - np.eye(2)[None, :, :]
    frob = np.sqrt(np.sum(diff * diff, axis=(1, 2)))
    return 2.0 * np.arcsinh(0.5 * frob) <= LOG_BRANCH_RADIUS + 1e-12


def log_map(g: GroupElement) -> LieAlgebraElement:
    """Principal logarithm; domain = each factor within 0.5 of identity."""
    if not np.all(_log_branch_ok(g)):
        raise GroupDomainError("log_map operand outside the principal branch radius 0.5")
    m = g.mats
    half_tr = 0.5 * (m[:, 0, 0] + m[:, 1, 1])
    q = half_tr * half_tr - 1.0  # = lambda^2 (hyperbolic) resp. -omega^2 (elliptic)
    ratio = np.empty_like(q)
    small = np.abs(q) < 1e-10
    qs = q[small]
    ratio[small] = 1.0 - qs / 6.0 + 7.0 * qs * qs / 360.0
    pos = (~small) & (q > 0)
    lam = np.sqrt(q[pos])
    ratio[pos] = np.arccosh(half_tr[pos]) / lam
    neg = (~small) & (q < 0)
    om = np.sqrt(-q[neg])
    ratio[neg] = np.arccos(half_tr[neg]) / om
    traceless = m - half_tr[:, None, None] * np.eye(2)[None, :, :]
    lg = ratio[:, None, None] * traceless
    out = np.empty((g.k, 3))
    out[:, 0] = lg[:, 0, 1]
    out[:, 1] = lg[:, 1, 0]
    out[:, 2] = lg[:, 0, 0]
    return LieAlgebraElement(out)


def _fallback_distance(w: GroupElement) -> float:
    """Sum over factors of 2 asinh(|w - I|_F / 2); w = g^{-1} h."""
    diff = w.mats - np.eye(2)[None, :, :]
    frob = np.sqrt(np.sum(diff * diff, axis=(1, 2)))
    return float(np.sum(2.0 * np.arcsinh(0.5 * frob)))


def distance(g: GroupElement, h: GroupElement) -> float:
    """Displacement |log(g^{-1} h)| when in branch, else the asinh proxy.

    Symmetric and vanishing exactly at g == h; only comparability with the
    genuine left-invariant metric is relied on elsewhere.
    """
    w = compose(inverse(g), h)
    if np.all(_log_branch_ok(w)):
        return log_map(w).norm()
    return _fallback_distance(w)


def displacement_from_identity_batch(mats: np.ndarray) -> np.ndarray:
    """Vectorised distance(identity, w) for a (N,2,2) stack of factors.

    Used by the quotient layer when scanning thousands of lattice
    candidates at once.  Matches `distance` on each single element.
    """
    eye = np.eye(2)[None, :, :]
    diff = mats - eye
    frob = np.sqrt(np.sum(diff * diff, axis=(1, 2)))
    fallback = 2.0 * np.arcsinh(0.5 * frob)
    in_branch = fallback <= LOG_BRANCH_RADIUS + 1e-12
    out = fallback.copy()
    if np.any(in_branch):
        m = mats[in_branch]
        half_tr = 0.5 * (m[:, 0, 0] + m[:, 1, 1])
        q = half_tr * half_tr - 1.0
        ratio = np.empty_like(q)
        small = np.abs(q) < 1e-10
        qs = q[small]
        ratio[small] = 1.0 - qs / 6.0 + 7.0 * qs * qs / 360.0
        pos = (~small) & (q > 0)
        ratio[pos] = np.arccosh(half_tr[pos]) / np.sqrt(q[pos])
        neg = (~small) & (q < 0)
        ratio[neg] = np.arccos(half_tr[neg]) / np.sqrt(-q[neg])
        tl = m - half_tr[:, None, None] * np.eye(2)[None, :, :]
        lg = ratio[:, None, None] * tl
        out[in_branch] = np.sqrt(lg[:, 0, 1] ** 2 + lg[:, 1, 0] ** 2 + lg[:, 0, 0] ** 2)
    return out


def random_element(rng: np.random.Generator, k: int = 1, scale: float = 0.5) -> GroupElement:
    """Random element: exp of a Gaussian algebra element, one per factor."""
    coords = rng.normal(0.0, scale, size=(k, 3))
    return exp_map(LieAlgebraElement(coords))


class CompositionChain:
    """Incremental right-composition with automatic renormalization.

    Long flows multiply thousands of factors together; every RENORM_EVERY
    steps the running product is renormalized so determinant drift never
    accumulates past DET_TOL.
    """

    def __init__(self, start: GroupElement):
        self.current = start.copy()
        self._since_renorm = 0

    def push(self, step: GroupElement) -> GroupElement:
        self.current = compose(self.current, step)
        self._since_renorm += 1
        if self._since_renorm >= RENORM_EVERY:
            self.current = renormalize(self.current)
            self._since_renorm = 0
        return self.current
