"""Time sets and Birkhoff averages along the horocycle flow.

Averages come in two flavours: continuous (composite Gauss-Legendre
quadrature of t -> f(u(t) . p) over [0, T]) and sparse (plain means over
progressions, almost primes, polynomial times, or Taylor blocks).  Both
walk the orbit in fixed-size chunks: each chunk re-anchors at a reduced
checkpoint representative so matrix entries stay bounded no matter how
long the orbit is, and partial sums are combined in a fixed order so
results are bit-identical for any worker count.
"""

from __future__ import annotations

import math
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_legendre

from . import observables as ob
from . import quotient as qt
from . import sieve
from . import sl2
from .errors import ConfigError
from .quotient import QuotientPoint
from .sl2 import GroupDomainError, GroupElement

# quadrature panels use this many Gauss-Legendre nodes each
_GL_ORDER = 5
_GL_X, _GL_W = roots_legendre(_GL_ORDER)
# orbit chunking: nodes per slab (memory ceiling) and the hard time range
_SLAB_NODES = 200_000
TIME_RANGE_MAX = 1e12
# quadrature must resolve the narrowest bump feature by this factor
_STEP_FRACTION = 8.0


class DegenerateBlockError(ValueError):
    """Block decomposition with k_max < 1: M too small for this gamma."""


# ----------------------------------------------------------------------
# time sets
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    t_span: float
    quadrature_step: float | None = None


@dataclass(frozen=True)
class Progression:
    step_k: float
    t_span: float


@dataclass(frozen=True)
class AlmostPrimes:
    level: int
    n_max: int


@dataclass(frozen=True)
class PolynomialTimes:
    gamma_exp: float
    n_max: int


@dataclass(frozen=True)
class Block:
    m_base: int
    gamma_exp: float


TimeSet = Interval | Progression | AlmostPrimes | PolynomialTimes | Block


def generate(ts: TimeSet, table: sieve.FactorTable | None = None) -> np.ndarray:
    """Strictly increasing times of a TimeSet as a float array.

    Empty parameter ranges give an empty array, never an error.
    """
    if isinstance(ts, Progression):
        if ts.step_k <= 0:
            raise ConfigError("progression step must be positive")
        if ts.t_span <= 0:
            return np.empty(0)
        return np.arange(0.0, ts.t_span, ts.step_k)
    if isinstance(ts, AlmostPrimes):
        if ts.level < 1:
            raise ConfigError("almost-prime level must be >= 1")
        if ts.n_max < 1:
            return np.empty(0)
        if table is None or table.n_max < ts.n_max:
            table = sieve.build_factor_table(ts.n_max)
        return sieve.almost_primes(table, ts.level, ts.n_max).astype(float)
    if isinstance(ts, PolynomialTimes):
        if not (0.0 <= ts.gamma_exp < 0.5):
            raise ConfigError("polynomial exponent gamma must lie in [0, 1/2)")
        if ts.n_max < 1:
            return np.empty(0)
        n = np.arange(1, ts.n_max + 1, dtype=float)
        return n ** (1.0 + ts.gamma_exp)
    if isinstance(ts, Block):
        return block_decompose(ts.m_base, ts.gamma_exp).exact_times
    if isinstance(ts, Interval):
        if ts.t_span <= 0:
            return np.empty(0)
        step = ts.quadrature_step or ts.t_span / 64.0
        nodes, _ = _panel_nodes(ts.t_span, step)
        return nodes
    raise ConfigError(f"unknown time set {ts!r}")


# ----------------------------------------------------------------------
# Taylor blocks
# ----------------------------------------------------------------------

@dataclass
class BlockPair:
    m_base: int
    gamma_exp: float
    k_max: int
    exact_times: np.ndarray   # (M+k)^{1+gamma}
    linear_times: np.ndarray  # M^{1+gamma} + (1+gamma) M^gamma k


def block_decompose(m_base: int, gamma_exp: float) -> BlockPair:
    """Polynomial times in one block and their tangent-line approximation.

    k runs to floor(M^{1/2-gamma}/(1+gamma)); over that range the
    quadratic Taylor remainder stays O(M^{-gamma}), which is what makes
    the linear progression a faithful stand-in for the true times.
    """
    if m_base < 2:
        raise DegenerateBlockError("block base must be >= 2")
    if not (0.0 < gamma_exp < 0.5):
        raise DegenerateBlockError("block exponent gamma must lie in (0, 1/2)")
    k_max = int(math.floor(m_base ** (0.5 - gamma_exp) / (1.0 + gamma_exp)))
    if k_max < 1:
        raise DegenerateBlockError(
            f"degenerate block: M={m_base}, gamma={gamma_exp} gives k_max={k_max}")
    k = np.arange(k_max + 1, dtype=float)
    exact = (m_base + k) ** (1.0 + gamma_exp)
    gap = (1.0 + gamma_exp) * m_base ** gamma_exp
    linear = m_base ** (1.0 + gamma_exp) + gap * k
    return BlockPair(m_base=m_base, gamma_exp=gamma_exp, k_max=k_max,
                     exact_times=exact, linear_times=linear)


def block_error(m_base: int, gamma_exp: float) -> float:
    """max_k |exact - linear| over one block."""
    pair = block_decompose(m_base, gamma_exp)
    return float(np.max(np.abs(pair.exact_times - pair.linear_times)))


def block_taylor_remainder(m_base: int, gamma_exp: float) -> float:
    """Closed-form second-order term (1+g)g/2 * M^{g-1} * k_max^2."""
    pair = block_decompose(m_base, gamma_exp)
    g = gamma_exp
    return 0.5 * (1.0 + g) * g * m_base ** (g - 1.0) * pair.k_max ** 2


# ----------------------------------------------------------------------
# orbit evaluation in reduced chunks
# ----------------------------------------------------------------------

def _orbit_mats(base: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """(N,k,2,2) stack base * u(-offset): the flow by u(offset) on classes."""
    k = base.shape[0]
    n = len(offsets)
    out = np.broadcast_to(base, (n, k, 2, 2)).copy()
    out[:, 0, 0, 1] -= offsets * out[:, 0, 0, 0]
    out[:, 0, 1, 1] -= offsets * out[:, 0, 1, 0]
    return out


def _checkpoint(p: QuotientPoint, t0: float) -> np.ndarray:
    """Reduced representative of the orbit point at time t0."""
    if abs(t0) > TIME_RANGE_MAX:
        raise GroupDomainError(f"orbit time {t0} beyond safe range {TIME_RANGE_MAX}")
    mats = _orbit_mats(p.rep.mats, np.array([t0]))
    red, _ = qt.reduce_stack(p.lattice, mats)
    return red[0]


def _orbit_values(f, p: QuotientPoint, times: np.ndarray,
                  workers: int = 1) -> np.ndarray:
    """f(u(t) . p) for every t, chunked with per-chunk reduced anchors.

    Chunk boundaries depend only on the time array, and chunks are
    evaluated independently, so the output is identical for any worker
    count.
    """
    if len(times) and abs(float(times[-1])) > TIME_RANGE_MAX:
        raise GroupDomainError(
            f"orbit time {times[-1]} beyond safe range {TIME_RANGE_MAX}")
    lattice = p.lattice
    spans = range(0, len(times), _SLAB_NODES)

    def one_chunk(start: int) -> np.ndarray:
        stop = min(start + _SLAB_NODES, len(times))
        t0 = float(times[start])
        base = _checkpoint(p, t0)
        mats = _orbit_mats(base, times[start:stop] - t0)
        return f.evaluate_coords(qt.coords_of_stack(lattice, mats))

    if workers <= 1:
        parts = [one_chunk(s) for s in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one_chunk, spans))
    return np.concatenate(parts) if parts else np.empty(0)


def orbit_coordinates(p: QuotientPoint, times: np.ndarray,
                      workers: int = 1) -> np.ndarray:
    """Reduced coordinates (N,k,3) of u(t) . p for every t.

    Materialises the whole stack (24 bytes per sample per factor); use
    _orbit_values when only one observable is needed.
    """
    if len(times) and abs(float(times[-1])) > TIME_RANGE_MAX:
        raise GroupDomainError(
            f"orbit time {times[-1]} beyond safe range {TIME_RANGE_MAX}")
    lattice = p.lattice
    spans = range(0, len(times), _SLAB_NODES)

    def one_chunk(start: int) -> np.ndarray:
        stop = min(start + _SLAB_NODES, len(times))
        t0 = float(times[start])
        base = _checkpoint(p, t0)
        mats = _orbit_mats(base, times[start:stop] - t0)
        return qt.coords_of_stack(lattice, mats)

    if workers <= 1:
        parts = [one_chunk(s) for s in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one_chunk, spans))
    if not parts:
        return np.empty((0, p.lattice.k, 3))
    return np.concatenate(parts, axis=0)


def _panel_nodes(t_span: float, step: float):
    """Composite Gauss-Legendre nodes and weights on [0, t_span]."""
    panels = max(1, int(math.ceil(t_span / step)))
    h = t_span / panels
    starts = np.arange(panels) * h
    nodes = (starts[:, None] + 0.5 * h * (_GL_X[None, :] + 1.0)).ravel()
    weights = np.broadcast_to(0.5 * h * _GL_W, (panels, _GL_ORDER)).ravel().copy()
    return nodes, weights


def _resolve_step(f, step: float | None) -> float:
    natural = f.min_width() / _STEP_FRACTION
    if step is None:
        return natural
    if step > natural * (1.0 + 1e-9):
        raise ConfigError(
            f"quadrature step {step} too coarse for observable width {f.min_width()}")
    return step


# ----------------------------------------------------------------------
# averages
# ----------------------------------------------------------------------

@dataclass
class AverageResult:
    value: float
    sample_count: int
    reference: float
    deviation: float
    timeset: TimeSet
    point_id: str = ""
    sobolev_l: int | None = None
    metadata: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "value": self.value,
            "sample_count": self.sample_count,
            "reference": self.reference,
            "deviation": self.deviation,
            "timeset": repr(self.timeset),
            "point_id": self.point_id,
            "sobolev_l": self.sobolev_l,
            **self.metadata,
        }


def _reference_value(f, p: QuotientPoint, reference: float | None) -> tuple[float, str]:
    if reference is not None:
        return float(reference), "explicit"
    if isinstance(p.lattice, qt.ModularLattice):
        return ob.haar_integral_k1(f, nx=160, nv=160, ntheta=80), "haar-quadrature-k1"
    val, err = ob.haar_reference_k2(f, p.lattice)
    return val, f"horocycle-surrogate-k2(err={err:.2e})"


def horocycle_average(f, p: QuotientPoint, t_span: float,
                      step: float | None = None, workers: int = 1,
                      reference: float | None = None,
                      point_id: str = "") -> AverageResult:
    """(1/T) integral of f over the orbit arc u([0, T]) . p.

    Composite Gauss-Legendre with the step tied to the narrowest feature
    of f; the injectivity radius at the renormalised basepoint (the
    diagonal push by log T) is recorded alongside, since every effective
    bound on this average is phrased through it.
    """
    if t_span <= 0:
        raise ConfigError("averaging horizon must be positive")
    t0 = _time.perf_counter()
    h = _resolve_step(f, step)
    nodes, weights = _panel_nodes(t_span, h)
    vals = _orbit_values(f, p, nodes, workers=workers)
    # fixed-order combination: slab sums, then one final sum
    slab_sums = [float(np.dot(weights[s:s + _SLAB_NODES], vals[s:s + _SLAB_NODES]))
                 for s in range(0, len(nodes), _SLAB_NODES)]
    value = sum(slab_sums) / t_span
    ref, ref_kind = _reference_value(f, p, reference)
    eta_scale = math.log(t_span) if t_span > 1.0 else 0.0
    eta = qt.injectivity_radius(qt.flow_a_contracting(p, eta_scale))
    return AverageResult(
        value=value, sample_count=len(nodes), reference=ref,
        deviation=abs(value - ref), timeset=Interval(t_span, h),
        point_id=point_id, metadata={
            "reference_kind": ref_kind,
            "eta_renormalized": eta,
            "runtime_s": _time.perf_counter() - t0,
            "workers": workers,
        })


def sparse_average(f, p: QuotientPoint, ts: TimeSet, workers: int = 1,
                   reference: float | None = None, point_id: str = "",
                   table: sieve.FactorTable | None = None) -> AverageResult:
    """Plain mean of f over {u(t) . p : t in the time set}."""
    t0 = _time.perf_counter()
    times = generate(ts, table=table)
    if len(times) == 0:
        raise ConfigError(f"empty time set: {ts!r}")
    vals = _orbit_values(f, p, times, workers=workers)
    slab_sums = [float(np.sum(vals[s:s + _SLAB_NODES]))
                 for s in range(0, len(vals), _SLAB_NODES)]
    value = sum(slab_sums) / len(times)
    ref, ref_kind = _reference_value(f, p, reference)
    return AverageResult(
        value=value, sample_count=len(times), reference=ref,
        deviation=abs(value - ref), timeset=ts, point_id=point_id,
        metadata={
            "reference_kind": ref_kind,
            "runtime_s": _time.perf_counter() - t0,
            "workers": workers,
        })


@dataclass
class ReferenceResult:
    value: float
    error_estimate: float
    t_ref: float
    sample_count: int
    flagged_divergent: bool = False


def haar_reference(f, p: QuotientPoint, t_ref: float,
                   step: float | None = None, workers: int = 1) -> ReferenceResult:
    """Long-arc orbit average standing in for the invariant integral.

    Averages f over u([0, t_ref]) . p with the same composite quadrature
    as horocycle_average but normalised by the quadrature mass, so a
    constant observable reproduces its level bit-exactly.  The error
    estimate is the halving difference |A(T) - A(T/2)|; basepoints whose
    renormalising geodesic push escapes to the cusp are flagged, since
    their orbit average measures a closed orbit, not the whole space.
    Panels are generated slab by slab, so the horizon is limited by
    time, not memory.
    """
    if t_ref <= 1.0:
        raise ConfigError("reference horizon must exceed 1")
    probe = qt.detect_divergence(p, mode="geodesic", t_max=max(2.0, math.log(t_ref)))
    h = _resolve_step(f, step)
    panels = max(1, int(math.ceil(t_ref / h)))
    ph = t_ref / panels
    half_panels = panels // 2
    per_slab = max(1, _SLAB_NODES // _GL_ORDER)
    num = mass = num_h = mass_h = 0.0
    count = 0
    for start in range(0, panels, per_slab):
        stop = min(start + per_slab, panels)
        starts = np.arange(start, stop) * ph
        nodes = (starts[:, None] + 0.5 * ph * (_GL_X[None, :] + 1.0)).ravel()
        weights = np.broadcast_to(0.5 * ph * _GL_W, (stop - start, _GL_ORDER)).ravel()
        vals = _orbit_values(f, p, nodes, workers=workers)
        ones = np.ones_like(vals)
        num += float(np.dot(weights, vals))
        mass += float(np.dot(weights, ones))
        if stop <= half_panels:
            num_h += float(np.dot(weights, vals))
            mass_h += float(np.dot(weights, ones))
        elif start < half_panels:
            cut = (half_panels - start) * _GL_ORDER
            num_h += float(np.dot(weights[:cut], vals[:cut]))
            mass_h += float(np.dot(weights[:cut], ones[:cut]))
        count += len(nodes)
    value = num / mass
    half_value = num_h / mass_h if mass_h > 0.0 else value
    return ReferenceResult(
        value=value, error_estimate=abs(value - half_value), t_ref=t_ref,
        sample_count=count, flagged_divergent=probe.diverges)


def renormalization_identity_check(f, p: QuotientPoint, t_span: float,
                                   step: float | None = None,
                                   workers: int = 1) -> float:
    """|time average over [0, T] - unit-time average at the pushed point|.

    The left side integrates f(u(s) . p) directly; the right side
    integrates f(a(log T) u(sigma) a(-log T) . p) over sigma in [0, 1]
    with the conjugation evaluated as an explicit matrix product.  The
    two quadratures sample different node sets of the same underlying
    identity, so agreement is a genuine two-route check.
    """
    if t_span <= 0:
        raise ConfigError("averaging horizon must be positive")
    h = _resolve_step(f, step)
    lhs_nodes, lhs_w = _panel_nodes(t_span, h)
    lhs_vals = _orbit_values(f, p, lhs_nodes, workers=workers)
    lhs = float(np.dot(lhs_w, lhs_vals)) / t_span

    tau = math.log(t_span)
    panels = max(1, int(math.ceil(t_span / h)))
    sig_nodes, sig_w = _panel_nodes(1.0, 1.0 / panels)
    a_fwd = sl2.diagonal_a(tau, p.lattice.k)
    a_bwd = sl2.diagonal_a(-tau, p.lattice.k)
    k = p.lattice.k
    vals = np.empty(len(sig_nodes))
    for start in range(0, len(sig_nodes), _SLAB_NODES):
        stop = min(start + _SLAB_NODES, len(sig_nodes))
        sg = sig_nodes[start:stop]
        n = len(sg)
        u_stack = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
        u_stack[:, 0, 1] = sg
        w_first = a_fwd.mats[0] @ u_stack @ a_bwd.mats[0]
        w_stack = np.broadcast_to(np.eye(2), (n, k, 2, 2)).copy()
        w_stack[:, 0] = w_first
        inv = np.empty_like(w_stack)
        inv[..., 0, 0] = w_stack[..., 1, 1]
        inv[..., 0, 1] = -w_stack[..., 0, 1]
        inv[..., 1, 0] = -w_stack[..., 1, 0]
        inv[..., 1, 1] = w_stack[..., 0, 0]
        mats = np.einsum("kab,nkbc->nkac", p.rep.mats, inv)
        vals[start:stop] = f.evaluate_coords(qt.coords_of_stack(p.lattice, mats))
    rhs = float(np.dot(sig_w, vals))
    return abs(lhs - rhs)


def block_average_compare(f, p: QuotientPoint, m_base: int, gamma_exp: float,
                          workers: int = 1):
    """Averages over the exact block times and their linear stand-ins.

    Returns (exact_avg, linear_avg, gap); the gap is bounded by the
    first-order regularity of f times the block time error.
    """
    pair = block_decompose(m_base, gamma_exp)
    exact_vals = _orbit_values(f, p, pair.exact_times, workers=workers)
    linear_vals = _orbit_values(f, p, pair.linear_times, workers=workers)
    exact_avg = float(exact_vals.mean())
    linear_avg = float(linear_vals.mean())
    return exact_avg, linear_avg, abs(exact_avg - linear_avg)


def correlation(f, g, t: float, flow: str = "geodesic",
                nx: int = 160, nv: int = 160, ntheta: int = 80) -> float:
    """<f o flow(t), g> against the normalised invariant measure, k=1.

    flow(t) translates the argument of f by a(t) or u(t); the pairing is
    computed by fundamental-domain quadrature.
    """
    if not isinstance(f.lattice, qt.ModularLattice):
        raise ConfigError("correlation quadrature is only available for the k=1 quotient")
    if flow == "geodesic":
        elem = sl2.diagonal_a(t, 1)
    elif flow == "horocycle":
        elem = sl2.unipotent_u(t, 1)
    else:
        raise ConfigError(f"unknown flow {flow!r}")
    inv = sl2.inverse(elem)

    class _Pair:
        lattice = f.lattice
        k = 1

        @staticmethod
        def evaluate_coords(coords: np.ndarray) -> np.ndarray:
            mats = qt.mats_from_coords(coords)
            moved = np.einsum("nkab,kbc->nkac", mats, inv.mats)
            fvals = f.evaluate_coords(qt.coords_of_stack(f.lattice, moved))
            return fvals * g.evaluate_coords(coords)

    return ob.haar_integral_k1(_Pair(), nx=nx, nv=nv, ntheta=ntheta)


# ----------------------------------------------------------------------
# empirical decay exponents
# ----------------------------------------------------------------------

@dataclass
class DecayFit:
    slope: float
    intercept: float
    residual: float
    floored: bool


_DEVIATION_FLOOR = 1e-14


def decay_fit(series) -> DecayFit:
    """Least-squares slope of log(deviation) against log(scale).

    Non-positive deviations are floored at 1e-14 and flagged: they mean
    exact agreement, where no finite slope is meaningful.
    """
    pts = [(float(s), float(d)) for s, d in series]
    if len(pts) < 4:
        raise ConfigError("decay fit needs at least 4 points")
    scales = np.array([s for s, _ in pts])
    devs = np.array([d for _, d in pts])
    if np.any(scales <= 0):
        raise ConfigError("scales must be positive")
    floored = bool(np.any(devs < _DEVIATION_FLOOR))
    devs = np.maximum(devs, _DEVIATION_FLOOR)
    lx = np.log(scales)
    ly = np.log(devs)
    coeffs, res, *_ = np.polyfit(lx, ly, 1, full=True)
    slope, intercept = float(coeffs[0]), float(coeffs[1])
    residual = float(res[0]) if len(res) else 0.0
    return DecayFit(slope=slope, intercept=intercept, residual=residual,
                    floored=floored)
