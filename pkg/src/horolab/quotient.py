"""Lattice quotients of products of SL(2,R): reduction and geometry.

Points are classes Gamma * rep with Gamma acting by left multiplication;
flows act by right multiplication of the representative, which commutes
with reduction, so long orbits can be renormalised mid-flight.  Under
the standard inversion isomorphism this is the mirror of the usual left
action on the opposite coset space; the contracting diagonal direction
is right multiplication by a(+t) here, and the reduction oracle pins all
sign conventions (the identity class pushed that way climbs the cusp at
height e^t exactly).

Two lattice families are supported:

* ModularLattice: k = 1, Gamma = SL(2,Z).  Reduction is exact Gauss
  reduction of z = rep * i to the fundamental domain |Re z| <= 1/2,
  |z| >= 1 (ties: Re z in (-1/2, 1/2], and Re z >= 0 on the unit
  circle), fully vectorised over batches.
* HilbertLattice: k = 2, Gamma = SL2(O) for the ring of integers O of a
  real quadratic field Q(sqrt(D)), embedded by its two real places.
  Reduction is a best-effort bounded local search over O-translations,
  unit rescalings and inversion; the reduced flag reports whether the
  search reached a local optimum inside its budget.

Injectivity radius, lattice-point enumeration and the distance between
classes are all computed from bounded generator-ball enumerations of
Gamma, and are certified only within the enumeration validity radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import sl2
from .errors import BudgetExhausted
from .sl2 import GroupElement

# reduction tolerances (k=1 exact Gauss loop)
REDUCE_TOL = 1e-13
REDUCE_MAX_ITER = 400
# default enumeration bounds (config-overridable everywhere they appear)
ENUM_MAX_ENTRY = 200.0
ENUM_BUDGET_K1 = 6000
ENUM_BUDGET_K2 = 4000
# bounded (c,d) search for the Hilbert cusp height
CUSP_CD_COEFF_BOUND = 6
# injectivity-radius estimates are only certified inside this radius
ETA_VALIDITY_RADIUS = 1.0
# divergence detection: escape threshold, hysteresis factor, and the
# minimum number of samples that must confirm the escape (a spike at the
# very end of the horizon is a recurrence event, not divergence)
HEIGHT_THRESHOLD = 50.0
HYSTERESIS = 0.5
MIN_ESCAPE_TAIL = 3
UNIPOTENT_TOL = 1e-9


# ----------------------------------------------------------------------
# lattice descriptors
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ModularLattice:
    """SL(2,Z) inside a single SL(2,R) factor."""

    @property
    def k(self) -> int:
        return 1

    def label(self) -> str:
        return "modular-k1"


@dataclass(frozen=True)
class HilbertLattice:
    """SL2 of the ring of integers of Q(sqrt(D)), D squarefree, k = 2.

    Integers are pairs (m, n) <-> m + n*omega with omega = sqrt(D) for
    D = 2,3 mod 4 and omega = (1+sqrt(D))/2 for D = 1 mod 4.
    """

    disc: int = 2

    def __post_init__(self):
        if self.disc < 2:
            raise ValueError("need a squarefree D >= 2")
        for p in range(2, int(math.isqrt(self.disc)) + 1):
            if self.disc % (p * p) == 0:
                raise ValueError(f"D = {self.disc} is not squarefree")

    @property
    def k(self) -> int:
        return 2

    def label(self) -> str:
        return f"hilbert-D{self.disc}"

    @property
    def omega_mod4(self) -> bool:
        """True when D = 1 mod 4 (omega = (1+sqrt(D))/2)."""
        return self.disc % 4 == 1

    def omega_embeddings(self) -> tuple[float, float]:
        r = math.sqrt(self.disc)
        if self.omega_mod4:
            return ((1.0 + r) / 2.0, (1.0 - r) / 2.0)
        return (r, -r)

    def embed(self, m: int, n: int) -> tuple[float, float]:
        """The two real embeddings of m + n*omega."""
        w1, w2 = self.omega_embeddings()
        return (m + n * w1, m + n * w2)

    def mul(self, a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
        """Product in O in the (1, omega) basis."""
        m1, n1 = a
        m2, n2 = b
        if self.omega_mod4:
            # omega^2 = omega + (D-1)/4
            c = (self.disc - 1) // 4
            return (m1 * m2 + n1 * n2 * c, m1 * n2 + n1 * m2 + n1 * n2)
        return (m1 * m2 + n1 * n2 * self.disc, m1 * n2 + n1 * m2)

    def conj(self, a: tuple[int, int]) -> tuple[int, int]:
        m, n = a
        if self.omega_mod4:
            return (m + n, -n)
        return (m, -n)

    def norm(self, a: tuple[int, int]) -> int:
        m, n = self.mul(a, self.conj(a))
        assert n == 0
        return m

    def fundamental_unit(self) -> tuple[int, int]:
        """Smallest unit > 1 under the first embedding, by direct scan."""
        best = None
        for n in range(1, 2000):
            for m in range(-3 * n - 2, 3 * n + 3):
                if self.norm((m, n)) in (1, -1):
                    e1, _ = self.embed(m, n)
                    if e1 > 1.0 + 1e-12 and (best is None or e1 < best[0]):
                        best = (e1, (m, n))
            if best is not None:
                return best[1]
        raise BudgetExhausted(f"no fundamental unit found for D={self.disc}")


Lattice = ModularLattice | HilbertLattice


@dataclass
class QuotientPoint:
    """A class Gamma * rep, with a flag tracking reduction status."""

    lattice: Lattice
    rep: GroupElement
    reduced: bool = False

    def __post_init__(self):
        if self.rep.k != self.lattice.k:
            raise ValueError(f"representative has {self.rep.k} factors, lattice wants {self.lattice.k}")

    def copy(self) -> "QuotientPoint":
        return QuotientPoint(self.lattice, self.rep.copy(), self.reduced)


def identity_coset(lattice: Lattice) -> QuotientPoint:
    return QuotientPoint(lattice, sl2.identity(lattice.k), reduced=True)


def translate(p: QuotientPoint, g: GroupElement) -> QuotientPoint:
    """Raw right multiplication of the representative: rep -> rep * g."""
    return QuotientPoint(p.lattice, sl2.compose(p.rep, g), reduced=False)


def act(w: GroupElement, p: QuotientPoint) -> QuotientPoint:
    """Translation of the class by the group element w.

    Classes here are left cosets, so the translation action is realised
    on representatives as rep -> rep * w^{-1}; this is a genuine action
    (act(w, act(v, p)) == act(w v, p)) and commutes with reduction.
    """
    return QuotientPoint(p.lattice, sl2.compose(p.rep, sl2.inverse(w)), reduced=False)


def flow_u(p: QuotientPoint, t: float) -> QuotientPoint:
    """Horocycle flow for time t (translation by u(t))."""
    return act(sl2.unipotent_u(t, p.lattice.k), p)


def flow_a_contracting(p: QuotientPoint, t: float) -> QuotientPoint:
    """Diagonal push in the direction that contracts the horocycle one.

    Translation by a(-t): the direction whose pushes climb the cusp at
    exactly e^t from the identity class and whose injectivity radius
    enters the renormalised average bounds.
    """
    return act(sl2.diagonal_a(-t, p.lattice.k), p)


def phi_map(x: float, gamma_exp: float, alpha: float = 1.0, k: int = 1) -> GroupElement:
    """The composed element a(-log x / (2 alpha)) * u(x^{1+gamma}).

    Translating the identity class by this element at x = n drives the
    reduced cusp height to infinity like sqrt(n): the divergence
    signature separating the two branches of the sparse dichotomy.
    """
    if x <= 0.0:
        raise ValueError("phi map wants x > 0")
    return sl2.compose(
        sl2.diagonal_a(-math.log(x) / (2.0 * alpha), k),
        sl2.unipotent_u(x ** (1.0 + gamma_exp), k),
    )


# ----------------------------------------------------------------------
# batched Gauss reduction, k = 1
# ----------------------------------------------------------------------

def _mobius_coords(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(x, y) of g*i for a (N,2,2) stack; y uses the exact determinant."""
    a, b = mats[:, 0, 0], mats[:, 0, 1]
    c, d = mats[:, 1, 0], mats[:, 1, 1]
    den = c * c + d * d
    x = (a * c + b * d) / den
    y = (a * d - b * c) / den
    return x, y


def reduce_batch_k1(mats: np.ndarray, max_iter: int = REDUCE_MAX_ITER):
    """Gauss-reduce a (N,2,2) stack in place of z = g*i.

    Returns (reduced mats, converged mask).  Ties go to Re z in
    (-1/2, 1/2] and to Re z >= 0 on the unit circle; the output sign is
    canonicalised so the frame angle lies in [0, pi).
    """
    out = np.array(mats, dtype=float, copy=True)
    n = out.shape[0]
    # flip word tracked exactly (integer-valued float entries); the final
    # representative is word @ input in one product, so rounding does not
    # accumulate across reduction steps
    word = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        sub = out[idx]
        x, y = _mobius_coords(sub)
        # integer translation bringing x into (-1/2, 1/2]
        m = np.ceil(x - 0.5)
        need_shift = m != 0.0
        if np.any(need_shift):
            rows = idx[need_shift]
            shift = m[need_shift]
            out[rows, 0, 0] -= shift * out[rows, 1, 0]
            out[rows, 0, 1] -= shift * out[rows, 1, 1]
            word[rows, 0, 0] -= shift * word[rows, 1, 0]
            word[rows, 0, 1] -= shift * word[rows, 1, 1]
            sub = out[idx]
            x, y = _mobius_coords(sub)
        r2 = x * x + y * y
        inside = r2 < 1.0 - REDUCE_TOL
        boundary_left = (np.abs(r2 - 1.0) <= REDUCE_TOL) & (x < -REDUCE_TOL)
        invert = inside | boundary_left
        if np.any(invert):
            rows = idx[invert]
            top = out[rows, 0].copy()
            out[rows, 0] = -out[rows, 1]
            out[rows, 1] = top
            wtop = word[rows, 0].copy()
            word[rows, 0] = -word[rows, 1]
            word[rows, 1] = wtop
        done = ~invert & ~need_shift
        active[idx[done]] = False
    out = word @ np.asarray(mats, dtype=float)
    # canonical sign: bottom row angle in [0, pi)
    c, d = out[:, 1, 0], out[:, 1, 1]
    flip = (c < 0) | ((c == 0) & (d < 0))
    out[flip] *= -1.0
    return out, ~active


def iwasawa_coords(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(x, y, theta) with theta in [0, pi), for a (N,2,2) stack.

    g = n(x) a(y) k(theta); the bottom row determines the frame angle
    via theta = atan2(c, d) folded modulo pi.
    """
    x, y = _mobius_coords(mats)
    theta = np.arctan2(mats[:, 1, 0], mats[:, 1, 1])
    theta = np.mod(theta, np.pi)
    return x, y, theta


def mats_from_coords(coords: np.ndarray) -> np.ndarray:
    """Inverse of iwasawa_coords: (N,k,3) -> (N,k,2,2) with n(x) a(y) k(theta)."""
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 2:
        coords = coords[None]
    x, y, th = coords[..., 0], coords[..., 1], coords[..., 2]
    ry = np.sqrt(y)
    ct, st = np.cos(th), np.sin(th)
    out = np.empty(coords.shape[:2] + (2, 2))
    out[..., 1, 0] = st / ry
    out[..., 1, 1] = ct / ry
    out[..., 0, 0] = ry * ct + x * st / ry
    out[..., 0, 1] = -ry * st + x * ct / ry
    return out


def reduce_stack(lattice: Lattice, stack: np.ndarray):
    """Reduce a (N,k,2,2) stack of representatives; returns (stack, flags)."""
    if stack.ndim != 4:
        raise ValueError("expected (N,k,2,2)")
    if isinstance(lattice, ModularLattice):
        red, conv = reduce_batch_k1(stack[:, 0])
        return red[:, None, :, :], conv
    return _reduce_stack_hilbert(lattice, stack)


def reduce_point(p: QuotientPoint) -> QuotientPoint:
    """Canonical (k=1) / locally-minimal (k=2) representative of the class."""
    stack = p.rep.mats[None, :, :, :]
    red, conv = reduce_stack(p.lattice, stack)
    return QuotientPoint(p.lattice, GroupElement(red[0]), reduced=bool(conv[0]))


def coords_of_stack(lattice: Lattice, stack: np.ndarray) -> np.ndarray:
    """Reduced coordinates, shape (N, k, 3): per factor (x, y, theta)."""
    red, _ = reduce_stack(lattice, stack)
    n, k = red.shape[:2]
    out = np.empty((n, k, 3))
    for i in range(k):
        x, y, th = iwasawa_coords(red[:, i])
        out[:, i, 0] = x
        out[:, i, 1] = y
        out[:, i, 2] = th
    return out


def coordinates(p: QuotientPoint) -> np.ndarray:
    """(k, 3) reduced coordinates of a single class."""
    return coords_of_stack(p.lattice, p.rep.mats[None])[0]


# ----------------------------------------------------------------------
# Hilbert-modular best-effort reduction, k = 2
# ----------------------------------------------------------------------

def _unit_matrices(lat: HilbertLattice) -> tuple[np.ndarray, np.ndarray]:
    """Embedded diag(eps, eps^{-1}) and its inverse as (2,2,2) stacks."""
    eps = lat.fundamental_unit()
    nrm = lat.norm(eps)
    inv = lat.conj(eps) if nrm == 1 else tuple(-v for v in lat.conj(eps))
    e1, e2 = lat.embed(*eps)
    i1, i2 = lat.embed(*inv)
    fwd = np.array([[[e1, 0.0], [0.0, i1]], [[e2, 0.0], [0.0, i2]]])
    bwd = np.array([[[i1, 0.0], [0.0, e1]], [[i2, 0.0], [0.0, e2]]])
    return fwd, bwd


def _reduce_stack_hilbert(lat: HilbertLattice, stack: np.ndarray,
                          max_rounds: int = 40):
    """Bounded local search: translations, unit balancing, inversion.

    Maximises the product height y1*y2 and centres (x1, x2) at the
    origin of the embedded integer lattice; the flag reports whether a
    fixed point was reached within the round budget (best effort).
    """
    out = np.array(stack, dtype=float, copy=True)
    n = out.shape[0]
    w1, w2 = lat.omega_embeddings()
    basis = np.array([[1.0, w1], [1.0, w2]])
    basis_inv = np.linalg.inv(basis)
    unit_fwd, unit_bwd = _unit_matrices(lat)
    log_unit = math.log(abs(unit_fwd[0, 0, 0]))
    converged = np.zeros(n, dtype=bool)
    for _ in range(max_rounds):
        changed = np.zeros(n, dtype=bool)
        x1, y1 = _mobius_coords(out[:, 0])
        x2, y2 = _mobius_coords(out[:, 1])
        # unit balancing: y1/y2 scales by eps^{4m} under diag-unit^m
        ratio = 0.5 * np.log(y1 / y2)
        m_balance = np.rint(-ratio / (2.0 * log_unit)).astype(int)
        for sign in (1, -1):
            rows = np.flatnonzero(m_balance * sign > 0)
            if len(rows) == 0:
                continue
            mat = unit_fwd if sign > 0 else unit_bwd
            reps = np.abs(m_balance[rows])
            for r, cnt in zip(rows, reps):
                for _ in range(int(cnt)):
                    out[r, 0] = mat[0] @ out[r, 0]
                    out[r, 1] = mat[1] @ out[r, 1]
                changed[r] = True
        x1, y1 = _mobius_coords(out[:, 0])
        x2, y2 = _mobius_coords(out[:, 1])
        # nearest O-translation of (x1, x2)
        coeffs = (basis_inv @ np.stack([x1, x2]))
        mn = np.rint(coeffs).astype(int)
        nonzero = (mn[0] != 0) | (mn[1] != 0)
        rows = np.flatnonzero(nonzero)
        if len(rows):
            # apply [[1, -t],[0,1]] on the left, factor-wise
            t1 = mn[0, rows] + mn[1, rows] * w1
            t2 = mn[0, rows] + mn[1, rows] * w2
            out[rows, 0, 0, 0] -= t1 * out[rows, 0, 1, 0]
            out[rows, 0, 0, 1] -= t1 * out[rows, 0, 1, 1]
            out[rows, 1, 0, 0] -= t2 * out[rows, 1, 1, 0]
            out[rows, 1, 0, 1] -= t2 * out[rows, 1, 1, 1]
            changed[rows] = True
        # inversion when it grows the product height
        x1, y1 = _mobius_coords(out[:, 0])
        x2, y2 = _mobius_coords(out[:, 1])
        gain = 1.0 / ((x1 * x1 + y1 * y1) * (x2 * x2 + y2 * y2))
        rows = np.flatnonzero(gain > 1.0 + 1e-12)
        for r in rows:
            for i in range(2):
                top = out[r, i, 0].copy()
                out[r, i, 0] = -out[r, i, 1]
                out[r, i, 1] = top
            changed[r] = True
        converged = ~changed
        if not changed.any():
            break
    return out, converged


# ----------------------------------------------------------------------
# Gamma enumeration (generator balls, exact integer arithmetic)
# ----------------------------------------------------------------------

_ENUM_CACHE: dict[tuple, np.ndarray] = {}


def _canonical_sign(key: tuple) -> tuple:
    neg = tuple(-v for v in key)
    return key if key >= neg else neg


def enumerate_gamma(lattice: Lattice, max_entry: float = ENUM_MAX_ENTRY,
                    budget: int | None = None) -> np.ndarray:
    """Ball of Gamma elements around the identity, as a (N,k,2,2) stack.

    Breadth-first over a symmetric generator set with exact integer
    bookkeeping, pruned by embedded entry height and capped by budget;
    elements are kept modulo overall sign and returned with the identity
    first.  Deterministic for fixed parameters, cached per lattice.
    """
    if budget is None:
        budget = ENUM_BUDGET_K1 if lattice.k == 1 else ENUM_BUDGET_K2
    key = (lattice.label(), float(max_entry), int(budget))
    if key in _ENUM_CACHE:
        return _ENUM_CACHE[key]
    if isinstance(lattice, ModularLattice):
        stack = _enumerate_modular(max_entry, budget)
    else:
        stack = _enumerate_hilbert(lattice, max_entry, budget)
    _ENUM_CACHE[key] = stack
    return stack


def _enumerate_modular(max_entry: float, budget: int) -> np.ndarray:
    gens = [
        (1, 1, 0, 1), (1, -1, 0, 1),      # T, T^{-1}
        (0, -1, 1, 0), (0, 1, -1, 0),     # S, S^{-1}
    ]

    def mul(p, q):
        a, b, c, d = p
        e, f, g, h = q
        return (a * e + b * g, a * f + b * h, c * e + d * g, c * f + d * h)

    start = (1, 0, 0, 1)
    seen = {start}
    order = [start]
    frontier = [start]
    # Expand whole word-length shells: stopping mid-shell would leave the
    # ball without some inverses, and downstream minima assume a ball.
    while frontier and len(order) < budget:
        next_frontier = []
        for cur in frontier:
            for g in gens:
                nxt = _canonical_sign(mul(cur, g))
                if nxt in seen:
                    continue
                if max(abs(v) for v in nxt) > max_entry:
                    continue
                seen.add(nxt)
                order.append(nxt)
                next_frontier.append(nxt)
        frontier = next_frontier
    mats = np.array(order, dtype=float).reshape(-1, 2, 2)
    return mats[:, None, :, :]


def _enumerate_hilbert(lat: HilbertLattice, max_entry: float, budget: int) -> np.ndarray:
    one = (1, 0)
    zero = (0, 0)
    eps = lat.fundamental_unit()
    nrm = lat.norm(eps)
    eps_inv = lat.conj(eps) if nrm == 1 else tuple(-v for v in lat.conj(eps))
    neg = lambda a: (-a[0], -a[1])
    gens = [
        (one, one, zero, one), (one, neg(one), zero, one),            # T_1^{+-1}
        (one, (0, 1), zero, one), (one, (0, -1), zero, one),          # T_omega^{+-1}
        (zero, neg(one), one, zero), (zero, one, neg(one), zero),     # S^{+-1}
        (eps, zero, zero, eps_inv), (eps_inv, zero, zero, eps),       # unit diag^{+-1}
    ]

    def mul(p, q):
        a, b, c, d = p
        e, f, g, h = q
        m = lat.mul
        add = lambda u, v: (u[0] + v[0], u[1] + v[1])
        return (add(m(a, e), m(b, g)), add(m(a, f), m(b, h)),
                add(m(c, e), m(d, g)), add(m(c, f), m(d, h)))

    def height(mat) -> float:
        vals = []
        for entry in mat:
            e1, e2 = lat.embed(*entry)
            vals.extend((abs(e1), abs(e2)))
        return max(vals)

    def flat(mat):
        return tuple(v for entry in mat for v in entry)

    start = (one, zero, zero, one)
    seen = {_canonical_sign(flat(start))}
    order = [start]
    frontier = [start]
    # Same shell-completion rule as the modular case.
    while frontier and len(order) < budget:
        next_frontier = []
        for cur in frontier:
            for g in gens:
                nxt = mul(cur, g)
                key = _canonical_sign(flat(nxt))
                if key in seen:
                    continue
                if height(nxt) > max_entry:
                    continue
                seen.add(key)
                order.append(nxt)
                next_frontier.append(nxt)
        frontier = next_frontier
    n = len(order)
    stack = np.empty((n, 2, 2, 2))
    for i, (a, b, c, d) in enumerate(order):
        for j, place in enumerate((0, 1)):
            emb = lambda ent: lat.embed(*ent)[j]
            stack[i, j] = [[emb(a), emb(b)], [emb(c), emb(d)]]
    return stack


# ----------------------------------------------------------------------
# distances, injectivity radius, cusp height
# ----------------------------------------------------------------------

def _stack_displacement(stack: np.ndarray) -> np.ndarray:
    """distance(identity, w) for a (N,k,2,2) stack, matching sl2.distance."""
    n, k = stack.shape[:2]
    asinh_parts = np.empty((n, k))
    log_parts = np.empty((n, k))
    in_branch = np.empty((n, k), dtype=bool)
    eye = np.eye(2)[None, :, :]
    for i in range(k):
        m = stack[:, i]
        diff = m - eye
        frob = np.sqrt(np.sum(diff * diff, axis=(1, 2)))
        fb = 2.0 * np.arcsinh(0.5 * frob)
        asinh_parts[:, i] = fb
        ok = fb <= sl2.LOG_BRANCH_RADIUS + 1e-12
        in_branch[:, i] = ok
        log_parts[:, i] = 0.0
        if np.any(ok):
            log_parts[ok, i] = sl2.displacement_from_identity_batch(m[ok])
    all_ok = in_branch.all(axis=1)
    out = np.where(all_ok,
                   np.sqrt(np.sum(log_parts * log_parts, axis=1)),
                   np.sum(asinh_parts, axis=1))
    return out


def _with_negations(stack: np.ndarray) -> np.ndarray:
    """Append the sign-flipped copies (Gamma contains -identity)."""
    return np.concatenate([stack, -stack], axis=0)


def quotient_distance(p: QuotientPoint, q: QuotientPoint,
                      max_entry: float = ENUM_MAX_ENTRY,
                      budget: int | None = None) -> float:
    """min over enumerated gamma of distance(p.rep, gamma * q.rep).

    Scans both orderings of the pair, which amounts to minimising over
    the enumerated ball together with its inverses; the result is
    symmetric in (p, q) by construction.
    """
    if p.lattice != q.lattice:
        raise ValueError("points live on different quotients")
    gammas = _with_negations(enumerate_gamma(p.lattice, max_entry, budget))
    best = np.inf
    for left, right in ((p, q), (q, p)):
        moved = np.einsum("nkab,kbc->nkac", gammas, right.rep.mats)
        inv_left = sl2.inverse(left.rep).mats
        w = np.einsum("kab,nkbc->nkac", inv_left, moved)
        best = min(best, float(_stack_displacement(w).min()))
    return best


def injectivity_radius(p: QuotientPoint, max_entry: float = ENUM_MAX_ENTRY,
                       budget: int | None = None,
                       validity_radius: float = ETA_VALIDITY_RADIUS) -> float:
    """(1/2) min over enumerated nontrivial gamma of d(rep, gamma rep).

    Estimated from the bounded enumeration only, hence clamped to the
    validity radius beyond which the ball gives no certificate.
    """
    gammas = enumerate_gamma(p.lattice, max_entry, budget)
    gammas = _with_negations(gammas[1:])  # drop identity; keep -identity out too
    rep = p.rep.mats
    inv_rep = sl2.inverse(p.rep).mats
    w = np.einsum("kab,nkbc,kcd->nkad", inv_rep, gammas, rep)
    disp = _stack_displacement(w)
    return float(min(0.5 * disp.min(), validity_radius))


def cusp_height(p: QuotientPoint) -> float:
    """Height of the class in the cusp direction.

    k=1: the imaginary part of the Gauss-reduced z.  k=2: the product
    height y1*y2 maximised over a bounded family of O-rows (c, d),
    the standard height at the cusp at infinity.
    """
    if isinstance(p.lattice, ModularLattice):
        red = reduce_point(p)
        _, y = _mobius_coords(red.rep.mats[0][None])
        return float(y[0])
    return _hilbert_cusp_height(p.lattice, p.rep.mats)


def _cd_rows(lat: HilbertLattice, bound: int = CUSP_CD_COEFF_BOUND) -> np.ndarray:
    """Embedded nonzero rows (c, d) in O^2 with coefficients up to bound."""
    key = ("cdrows", lat.label(), bound)
    if key in _ENUM_CACHE:
        return _ENUM_CACHE[key]
    w1, w2 = lat.omega_embeddings()
    rng = np.arange(-bound, bound + 1)
    m, n = np.meshgrid(rng, rng, indexing="ij")
    vals1 = (m + n * w1).ravel()
    vals2 = (m + n * w2).ravel()
    pairs = np.stack([vals1, vals2], axis=1)  # embeddings of one O-element
    c = pairs[:, None, :]
    d = pairs[None, :, :]
    ce = np.broadcast_to(c, (len(pairs), len(pairs), 2)).reshape(-1, 2)
    de = np.broadcast_to(d, (len(pairs), len(pairs), 2)).reshape(-1, 2)
    keep = ~((np.abs(ce).max(axis=1) < 1e-12) & (np.abs(de).max(axis=1) < 1e-12))
    rows = np.stack([ce[keep], de[keep]], axis=1)  # (M, 2=c/d, 2=place)
    _ENUM_CACHE[key] = rows
    return rows


def _hilbert_cusp_height(lat: HilbertLattice, mats: np.ndarray) -> float:
    red, _ = _reduce_stack_hilbert(lat, mats[None])
    z = []
    for i in range(2):
        x, y = _mobius_coords(red[0, i][None])
        z.append((float(x[0]), float(y[0])))
    rows = _cd_rows(lat)
    prod = np.ones(len(rows))
    for i, (x, y) in enumerate(z):
        c = rows[:, 0, i]
        d = rows[:, 1, i]
        prod *= (c * x + d) ** 2 + (c * y) ** 2
    y1y2 = z[0][1] * z[1][1]
    return float(y1y2 / prod.min())


# ----------------------------------------------------------------------
# divergence detection and torus-orbit certification
# ----------------------------------------------------------------------

@dataclass
class DivergenceReport:
    mode: str
    times: np.ndarray
    heights: np.ndarray
    threshold: float
    diverges: bool
    first_escape: float | None


def detect_divergence(p: QuotientPoint, mode: str = "geodesic",
                      t_max: float = 30.0, samples: int = 60,
                      threshold: float = HEIGHT_THRESHOLD,
                      gamma_exp: float = 0.1, alpha: float = 1.0) -> DivergenceReport:
    """Sample cusp heights along the contracting geodesic or the sparse map.

    Divergence = the height passes the threshold at some sample time,
    never drops below threshold * HYSTERESIS afterwards, and at least
    MIN_ESCAPE_TAIL samples confirm the escape (finite-horizon verdict
    with hysteresis; evidence, not proof).
    """
    k = p.lattice.k
    if mode == "geodesic":
        times = np.linspace(0.0, t_max, samples)
        elements = [sl2.diagonal_a(-float(t), k) for t in times]
    elif mode == "phi":
        times = np.unique(np.floor(np.geomspace(1.0, max(t_max, 2.0), samples)))
        elements = [phi_map(float(x), gamma_exp, alpha, k) for x in times]
    else:
        raise ValueError(f"unknown divergence mode {mode!r}")
    heights = np.empty(len(times))
    for i, g in enumerate(elements):
        heights[i] = cusp_height(act(g, p))
    escape = heights > threshold
    diverges = False
    first_escape = None
    if escape.any():
        j = int(np.argmax(escape))
        tail_ok = bool(np.all(heights[j:] >= threshold * HYSTERESIS))
        if tail_ok and len(heights) - j >= MIN_ESCAPE_TAIL:
            diverges = True
            first_escape = float(times[j])
    return DivergenceReport(mode=mode, times=times, heights=heights,
                            threshold=threshold, diverges=diverges,
                            first_escape=first_escape)


@dataclass
class TorusReport:
    found: bool
    torus_dim: int
    generators: list[GroupElement]
    orbit_height_bound: float | None
    commutation_defect: float


def torus_orbit_check(p: QuotientPoint, max_entry: float = ENUM_MAX_ENTRY,
                      budget: int | None = None,
                      height_cap: float = HEIGHT_THRESHOLD,
                      grid: int = 6) -> TorusReport:
    """Search the stabiliser of the class for a full-rank unipotent torus.

    Every enumerated gamma yields the stabiliser element
    h = rep^{-1} gamma rep; h is kept when its first factor is a strict
    upper-triangular unipotent (it must lie on the horocycle direction
    itself) and every other factor is unipotent (trace 2 within 1e-9).
    The kept logarithms must span rank k and commute pairwise; the
    candidate torus orbit is then sampled on a grid to certify bounded
    cusp height.
    """
    lat = p.lattice
    k = lat.k
    gammas = enumerate_gamma(lat, max_entry, budget)[1:]
    rep = p.rep.mats
    inv_rep = sl2.inverse(p.rep).mats
    h_all = np.einsum("kab,nkbc,kcd->nkad", inv_rep, gammas, rep)
    tr = h_all[:, :, 0, 0] + h_all[:, :, 1, 1]
    unipotent = np.all(np.abs(tr - 2.0) <= UNIPOTENT_TOL, axis=1)
    first = h_all[:, 0]
    on_u = (np.abs(first[:, 1, 0]) <= UNIPOTENT_TOL) \
        & (np.abs(first[:, 0, 0] - 1.0) <= UNIPOTENT_TOL) \
        & (np.abs(first[:, 0, 1]) > UNIPOTENT_TOL)
    cand = h_all[unipotent & on_u]
    if len(cand) == 0:
        return TorusReport(False, 0, [], None, 0.0)
    logs = (cand - np.eye(2)[None, None]).reshape(len(cand), -1)
    # greedy rank-k selection of generators with small entries
    order = np.argsort(np.abs(cand).max(axis=(1, 2, 3)))
    chosen: list[int] = []
    basis: list[np.ndarray] = []
    for idx in order:
        trial = basis + [logs[idx]]
        if np.linalg.matrix_rank(np.stack(trial), tol=1e-8) == len(trial):
            chosen.append(int(idx))
            basis.append(logs[idx])
        if len(chosen) == k:
            break
    torus_dim = len(chosen)
    gens = [GroupElement(cand[i]) for i in chosen]
    defect = 0.0
    for i in range(len(gens)):
        for j in range(i + 1, len(gens)):
            ab = sl2.compose(gens[i], gens[j]).mats
            ba = sl2.compose(gens[j], gens[i]).mats
            defect = max(defect, float(np.max(np.abs(ab - ba))))
    found = torus_dim == k and defect <= UNIPOTENT_TOL
    bound = None
    if found:
        nil = [g.mats - np.eye(2)[None] for g in gens]
        heights = []
        ticks = np.linspace(0.0, 1.0, grid)
        mesh = np.meshgrid(*([ticks] * torus_dim), indexing="ij")
        coords = np.stack([m.ravel() for m in mesh], axis=1)
        for c in coords:
            shift = sum(ci * ni for ci, ni in zip(c, nil))
            elem = GroupElement(np.eye(2)[None] + shift) if k == 1 else \
                GroupElement(np.stack([np.eye(2) + shift[i] for i in range(k)]))
            heights.append(cusp_height(translate(p, elem)))
        bound = float(max(heights))
        found = bound <= height_cap
    return TorusReport(found=found, torus_dim=torus_dim, generators=gens,
                       orbit_height_bound=bound, commutation_defect=defect)
