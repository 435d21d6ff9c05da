"""Linear-sieve machinery over nonnegative weight sequences.

The sieve sum of a weight sequence a(1..N) is

    S(A, P, z) = sum of a(n) over n coprime to every prime p < z,

and the engine brackets it between the classical linear-sieve bounds

    S <  (F0(s) + eps e^{14-s}) X + R      (valid once D >= z)
    S >  (f0(s) - eps e^{14-s}) X - R      (valid once D >= z^2)

with s = log D / log z, X = V(z) |A|, V(z) = prod_{p<z} (1 - g(p)) and
R the accumulated remainders |r(d)| = | |A_d| - g(d) |A| | over squarefree
d | P(z), d < D*Q.  The bracket requires the one-dimensional density
condition: for every 1 < u < z,

    prod over p not in Q, u <= p < z of (1 - g(p))^{-1} < (1+eps) log z / log u,

which for g = 1/d holds above an empirically scanned threshold u~(eps)
(Mertens-type products stabilise); Q is then the finite set of primes
below that threshold and Q* their product widens the remainder range.

F0 and f0 start on their elementary branches

    F0(s) = 2 e^gamma / s             (0 < s <= 3)
    f0(s) = 0                         (0 < s <= 2)
    f0(s) = 2 e^gamma log(s-1) / s    (2 <= s <= 4)

and continue by the coupled delay equations (s F0)' = f0(s-1),
(s f0)' = F0(s-1), integrated here in the deviation variables
p = s(F0 - 1), q = s(1 - f0) so the super-exponentially small tails are
not lost to cancellation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExhausted

EULER_GAMMA = float(np.euler_gamma)

# Default enumeration cap for the remainder sum; a genuine run that needs
# more divisors than this should raise rather than silently truncate.
REMAINDER_BUDGET = 200_000

# Threshold below which the deviation variables of the delayed system are
# clamped to exactly zero.  The true deviations cross this level near
# s ~ 10-11 where the certified envelope 5 e^{-s} is still ~ 1e-4, so
# clamping is harmless there and keeps the far tail exactly 1 instead of
# letting it plateau at the integration noise floor.
_DEVIATION_CLAMP = 1e-9


# ----------------------------------------------------------------------
# smallest-prime-factor table and multiplicity counts
# ----------------------------------------------------------------------

@dataclass
class FactorTable:
    """Smallest-prime-factor table for 1..n_max (spf[1] = 1 by convention)."""

    n_max: int
    spf: np.ndarray
    primes: np.ndarray

    def omega_upper(self, n: int) -> int:
        """Omega(n): number of prime factors counted with multiplicity."""
        if n < 1 or n > self.n_max:
            raise ValueError(f"n={n} outside table range 1..{self.n_max}")
        count = 0
        while n > 1:
            n //= int(self.spf[n])
            count += 1
        return count

    def omega_all(self) -> np.ndarray:
        """Vector of Omega(n) for n = 0..n_max (index 0 unused, set to 0)."""
        counts = np.zeros(self.n_max + 1, dtype=np.int32)
        m = np.arange(self.n_max + 1, dtype=np.int64)
        m[0] = 1
        while True:
            active = m > 1
            if not active.any():
                break
            counts[active] += 1
            m[active] //= self.spf[m[active]]
        return counts


def build_factor_table(n_max: int) -> FactorTable:
    if n_max < 2:
        raise ValueError("factor table needs n_max >= 2")
    spf = np.zeros(n_max + 1, dtype=np.int64)
    for p in range(2, int(math.isqrt(n_max)) + 1):
        if spf[p] == 0:
            sl = spf[p * p:: p]
            sl[sl == 0] = p
    unmarked = spf == 0
    spf[unmarked] = np.arange(n_max + 1)[unmarked]  # primes (and 0,1) map to themselves
    spf[1] = 1
    primes = np.flatnonzero(spf == np.arange(n_max + 1))[2:]  # drop 0 and 1
    return FactorTable(n_max=n_max, spf=spf, primes=primes)


def omega_count(table: FactorTable, n) -> np.ndarray | int:
    """Omega with multiplicity; Omega(1) = 0.  Accepts scalars or arrays."""
    if np.isscalar(n):
        return table.omega_upper(int(n))
    arr = np.asarray(n, dtype=np.int64)
    counts = np.zeros(arr.shape, dtype=np.int32)
    m = arr.copy()
    while True:
        active = m > 1
        if not active.any():
            break
        counts[active] += 1
        m[active] //= table.spf[m[active]]
    return counts


def almost_primes(table: FactorTable, level: int, n_max: int | None = None) -> np.ndarray:
    """All n <= n_max with Omega(n) <= level, ascending; contains 1."""
    if level < 0:
        raise ValueError("level must be >= 0")
    n_max = table.n_max if n_max is None else n_max
    if n_max > table.n_max:
        raise ValueError("n_max beyond factor table")
    om = table.omega_all()[: n_max + 1]
    hits = np.flatnonzero(om <= level)
    return hits[hits >= 1]


def primes_below(z: float, table: FactorTable | None = None) -> np.ndarray:
    """Ascending primes p < z (strict), via the table or a local sieve."""
    limit = int(math.ceil(z)) - 1
    if limit < 2:
        return np.array([], dtype=np.int64)
    if table is not None and table.n_max >= limit:
        pr = table.primes
    else:
        pr = build_factor_table(max(limit, 2)).primes
    return pr[pr < z]


# ----------------------------------------------------------------------
# Mertens-type products and the empirical admissibility threshold
# ----------------------------------------------------------------------

_PRIME_LOG_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _prime_log_prefix(z_max: int) -> tuple[np.ndarray, np.ndarray]:
    """(primes < z_max, prefix sums of -log(1 - 1/p)); cached."""
    for cached_max in _PRIME_LOG_CACHE:
        if cached_max >= z_max:
            primes, prefix = _PRIME_LOG_CACHE[cached_max]
            cut = np.searchsorted(primes, z_max)
            return primes[:cut], prefix[: cut + 1]
    # odd-only Eratosthenes
    if z_max < 3:
        raise ValueError("z_max too small")
    size = z_max // 2
    sieve = np.ones(size, dtype=bool)  # index i <-> odd number 2i+1
    sieve[0] = False
    for i in range(1, (int(math.isqrt(z_max)) + 1) // 2 + 1):
        if sieve[i]:
            p = 2 * i + 1
            sieve[(p * p) // 2:: p] = False
    odd_primes = 2 * np.flatnonzero(sieve) + 1
    primes = np.concatenate(([2], odd_primes)).astype(np.int64)
    terms = -np.log1p(-1.0 / primes)
    prefix = np.concatenate(([0.0], np.cumsum(terms)))
    _PRIME_LOG_CACHE.clear()
    _PRIME_LOG_CACHE[z_max] = (primes, prefix)
    return primes, prefix


def mertens_product(u: float, z: float, z_max: int = 10**8) -> float:
    """prod over u <= p < z of (1 - 1/p)^{-1}, by cached prefix sums."""
    if not (1.0 < u < z):
        raise ValueError("need 1 < u < z")
    primes, prefix = _prime_log_prefix(max(int(z) + 1, z_max))
    lo = np.searchsorted(primes, u, side="left")
    hi = np.searchsorted(primes, z, side="left")
    return float(np.exp(prefix[hi] - prefix[lo]))


@dataclass(frozen=True)
class MertensReport:
    u: float
    z: float
    epsilon: float
    lhs: float
    rhs: float
    holds: bool


def mertens_check(u: float, z: float, epsilon: float, z_max: int = 10**8) -> MertensReport:
    """Check prod_{u<=p<z} (1-1/p)^{-1} < (1 + eps/3) log z / log u."""
    lhs = mertens_product(u, z, z_max=z_max)
    rhs = (1.0 + epsilon / 3.0) * math.log(z) / math.log(u)
    return MertensReport(u=u, z=z, epsilon=epsilon, lhs=lhs, rhs=rhs, holds=lhs < rhs)


def empirical_u_tilde(epsilon: float, z_max: int = 10**8,
                      u_grid_size: int = 140, z_grid_size: int = 60) -> float:
    """Least grid u such that the Mertens inequality holds for every grid
    u' >= u against every grid z in (u', z_max].

    Purely empirical: the returned threshold is a property of the scan
    grid and is recorded alongside any result that depends on it.
    """
    primes, prefix = _prime_log_prefix(z_max)
    u_grid = np.unique(np.exp(np.linspace(math.log(2.0), math.log(z_max / 10.0), u_grid_size)))
    z_grid = np.unique(np.exp(np.linspace(math.log(10.0), math.log(float(z_max)), z_grid_size)))
    factor = 1.0 + epsilon / 3.0
    ok = np.zeros(len(u_grid), dtype=bool)
    for i, u in enumerate(u_grid):
        zs = z_grid[z_grid > u * 1.0000001]
        if len(zs) == 0:
            ok[i] = True
            continue
        lo = np.searchsorted(primes, u, side="left")
        hi = np.searchsorted(primes, zs, side="left")
        lhs = np.exp(prefix[hi] - prefix[lo])
        rhs = factor * np.log(zs) / math.log(u)
        ok[i] = bool(np.all(lhs < rhs))
    suffix_ok = np.logical_and.accumulate(ok[::-1])[::-1]
    hits = np.flatnonzero(suffix_ok)
    if len(hits) == 0:
        raise BudgetExhausted(f"no admissible u on the scan grid up to {u_grid[-1]:.3g}")
    return float(u_grid[hits[0]])


# ----------------------------------------------------------------------
# linear-sieve functions F0, f0
# ----------------------------------------------------------------------

@dataclass
class LinearSieveFunctions:
    """Grid-backed F0/f0 with elementary branches and a clamped tail.

    grid_step <= 1e-3; on [1,3] (resp. (0,2] and [2,4]) the closed
    branches are used exactly; past s_max both functions are exactly 1
    (their true deviations there are below double precision).
    """

    s_max: float
    grid_step: float
    s_grid: np.ndarray
    p_dev: np.ndarray  # s * (F0(s) - 1)
    q_dev: np.ndarray  # s * (1 - f0(s))

    def upper(self, s) -> np.ndarray | float:
        """F0(s); domain s > 0."""
        s_arr = np.asarray(s, dtype=float)
        if np.any(s_arr <= 0):
            raise ValueError("F0 needs s > 0")
        out = np.ones_like(s_arr)
        small = s_arr <= 3.0
        out = np.where(small, 2.0 * np.exp(EULER_GAMMA) / np.maximum(s_arr, 1e-300), out)
        mid = (~small) & (s_arr <= self.s_max)
        if np.any(mid):
            p = np.interp(s_arr[mid], self.s_grid, self.p_dev)
            vals = 1.0 + p / s_arr[mid]
            out = np.asarray(out)
            out[mid] = vals
        return out if out.ndim else float(out)

    def lower(self, s) -> np.ndarray | float:
        """f0(s); domain s > 0; identically 0 up to s = 2."""
        s_arr = np.asarray(s, dtype=float)
        if np.any(s_arr <= 0):
            raise ValueError("f0 needs s > 0")
        out = np.ones_like(s_arr)
        zero = s_arr <= 2.0
        branch = (s_arr > 2.0) & (s_arr <= 4.0)
        out = np.asarray(out)
        out[zero] = 0.0
        if np.any(branch):
            sb = s_arr[branch]
            out[branch] = 2.0 * np.exp(EULER_GAMMA) * np.log(sb - 1.0) / sb
        mid = (s_arr > 4.0) & (s_arr <= self.s_max)
        if np.any(mid):
            q = np.interp(s_arr[mid], self.s_grid, self.q_dev)
            out[mid] = 1.0 - q / s_arr[mid]
        return out if out.ndim else float(out)

    def check_invariants(self) -> dict:
        """Grid-level shape certificates; raises AssertionError on failure."""
        F = 1.0 + self.p_dev / self.s_grid
        f = 1.0 - self.q_dev / self.s_grid
        head = self.s_grid <= 3.0
        F[head] = 2.0 * np.exp(EULER_GAMMA) / self.s_grid[head]
        fhead = self.s_grid <= 2.0
        f[fhead] = 0.0
        fbranch = (self.s_grid > 2.0) & (self.s_grid <= 4.0)
        f[fbranch] = 2.0 * np.exp(EULER_GAMMA) * np.log(self.s_grid[fbranch] - 1.0) / self.s_grid[fbranch]
        assert np.all(np.diff(F) <= 1e-12), "F0 must be nonincreasing"
        assert np.all(np.diff(f) >= -1e-12), "f0 must be nondecreasing"
        assert np.all(f <= 1.0 + 1e-12) and np.all(F >= 1.0 - 1e-12), "f0 <= 1 <= F0"
        tail = self.s_grid >= 10.0
        bound = 5.0 * np.exp(-self.s_grid[tail])
        dev_f = np.abs(F[tail] - 1.0)
        dev_g = np.abs(1.0 - f[tail])
        assert np.all(dev_f <= bound), "F0 tail envelope violated"
        assert np.all(dev_g <= bound), "f0 tail envelope violated"
        return {
            "F_at_2": float(self.upper(2.0)),
            "f_at_4": float(self.lower(4.0)),
            "max_tail_dev": float(max(dev_f.max(initial=0.0), dev_g.max(initial=0.0))),
        }


_SIEVE_FN_CACHE: dict[tuple[float, float], LinearSieveFunctions] = {}


def linear_sieve_functions(s_max: float = 40.0, grid_step: float = 1e-3) -> LinearSieveFunctions:
    """Integrate the delayed system for F0/f0 on a uniform grid.

    The deviations p = s(F0-1), q = s(1-f0) satisfy p'(s) = -q(s-1)/(s-1)
    for s > 3 and q'(s) = -p(s-1)/(s-1) for s > 4, with exact branch data
    before that.  A 4-step Adams-Moulton-type quadrature on the uniform
    grid (the lagged integrand is already known at the new node, so the
    formula stays explicit) keeps the global error near 1e-12, and the
    tail is clamped to zero once below _DEVIATION_CLAMP.
    """
    if grid_step > 1e-3 + 1e-15:
        raise ValueError("grid step must be <= 1e-3")
    key = (s_max, grid_step)
    if key in _SIEVE_FN_CACHE:
        return _SIEVE_FN_CACHE[key]
    h = grid_step
    lag = int(round(1.0 / h))
    if abs(lag * h - 1.0) > 1e-12:
        raise ValueError("grid step must divide 1 exactly for the lag lookup")
    n_nodes = int(round((s_max - 1.0) / h)) + 1
    s = 1.0 + h * np.arange(n_nodes)
    p = np.zeros(n_nodes)
    q = np.zeros(n_nodes)
    two_eg = 2.0 * np.exp(EULER_GAMMA)

    i3 = int(round(2.0 / h))      # index of s = 3
    i4 = int(round(3.0 / h))      # index of s = 4
    head = slice(0, i3 + 1)
    p[head] = two_eg - s[head]                       # s(F0-1) on [1,3]
    q[: lag + 1] = s[: lag + 1]                      # f0 = 0 on [1,2]
    branch = slice(lag, i4 + 1)
    q[branch] = s[branch] - two_eg * np.log(s[branch] - 1.0)

    # integrands at node m: phi_p[m] = -q[m-lag]/s[m-lag], phi_q likewise
    def phi_p(m):
        return -q[m - lag] / s[m - lag]

    def phi_q(m):
        return -p[m - lag] / s[m - lag]

    def q_branch(x: float) -> float:
        # closed form for q on (0, 4]
        return x if x <= 2.0 else x - two_eg * math.log(x - 1.0)

    # 5-point Gauss-Legendre on [0, 1] for the startup steps whose lagged
    # integrand still has a closed form (so no interpolation across the
    # derivative kink of q at s = 2 is ever needed)
    gl_x = np.array([0.04691007703067, 0.23076534494716, 0.5,
                     0.76923465505284, 0.95308992296933])
    gl_w = np.array([0.11846344252810, 0.23931433524968, 0.28444444444444,
                     0.23931433524968, 0.11846344252810])

    p_dead = False
    q_dead = False
    for n in range(i3 + 1, n_nodes):
        # --- advance p over [s[n-1], s[n]]
        if p_dead:
            p[n] = 0.0
        elif n - i3 < 3:
            # startup: the lagged argument lies in (2, 2+3h] where q is exact
            args = s[n - 1] - 1.0 + h * gl_x
            vals = np.array([-q_branch(x) / x for x in args])
            p[n] = p[n - 1] + h * float(np.dot(gl_w, vals))
        else:
            p[n] = p[n - 1] + h / 24.0 * (
                9.0 * phi_p(n) + 19.0 * phi_p(n - 1) - 5.0 * phi_p(n - 2) + phi_p(n - 3)
            )
        if not p_dead and p[n] < _DEVIATION_CLAMP:
            p[n] = 0.0
            p_dead = True
        # --- advance q over the same step (only active past s = 4)
        if n > i4:
            if q_dead:
                q[n] = 0.0
            elif n - i4 < 3:
                # lagged argument in (3, 3+3h]: p is marched there but smooth
                # (only a second-derivative break at 3), interpolation is safe
                mphi = _midpoint_phi(p, s, n, lag)
                q[n] = q[n - 1] + h / 6.0 * (phi_q(n - 1) + 4.0 * mphi + phi_q(n))
            else:
                q[n] = q[n - 1] + h / 24.0 * (
                    9.0 * phi_q(n) + 19.0 * phi_q(n - 1) - 5.0 * phi_q(n - 2) + phi_q(n - 3)
                )
            if not q_dead and q[n] < _DEVIATION_CLAMP:
                q[n] = 0.0
                q_dead = True
    out = LinearSieveFunctions(s_max=s_max, grid_step=h, s_grid=s, p_dev=p, q_dev=q)
    _SIEVE_FN_CACHE[key] = out
    return out


def _midpoint_phi(dev: np.ndarray, s: np.ndarray, n: int, lag: int) -> float:
    """-dev/s at the lagged midpoint s[n] - 1 - h/2, by 4-point interpolation."""
    m = n - lag
    ys = dev[m - 2: m + 2] / s[m - 2: m + 2]
    # cubic interpolation at the midpoint between nodes m-1 and m
    val = (-ys[0] + 9.0 * ys[1] + 9.0 * ys[2] - ys[3]) / 16.0
    return -float(val)


# ----------------------------------------------------------------------
# sieve problems, remainders, brute force, the bracket
# ----------------------------------------------------------------------

@dataclass
class SieveProblem:
    """Weight sequence plus sieve parameters.

    weights[n] = a(n) for 1 <= n <= N (index 0 ignored and forced to 0);
    density g defaults to g(p) = 1/p extended multiplicatively.
    """

    weights: np.ndarray
    z: float
    level_d: float               # D
    epsilon: float
    exclude_below: float = 0.0   # Q = primes below this threshold
    remainder_budget: int = REMAINDER_BUDGET

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or len(w) < 2:
            raise ValueError("weights must be a 1-d array indexed by n")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        w = w.copy()
        w[0] = 0.0
        self.weights = w
        if not (0.0 < self.epsilon < 1.0 / 200.0):
            raise ValueError("epsilon must lie in (0, 1/200)")
        if self.z < 2.0:
            # z = 2 is the degenerate no-sieving case (no primes below 2)
            raise ValueError("z must be at least 2")

    @property
    def n_max(self) -> int:
        return len(self.weights) - 1

    def total(self) -> float:
        return float(self.weights.sum())


def density_g(d: int) -> float:
    """Default multiplicative density g(d) = 1/d."""
    return 1.0 / d


def v_of_z(z: float, table: FactorTable | None = None) -> float:
    """V(z) = prod_{p < z} (1 - 1/p)."""
    pr = primes_below(z, table)
    return float(np.prod(1.0 - 1.0 / pr)) if len(pr) else 1.0


def remainder_r(problem: SieveProblem, d: int) -> float:
    """r(d) = |A_d| - g(d) |A| with |A_d| = sum of a(n) over d | n."""
    w = problem.weights
    a_d = float(w[d:: d].sum())
    return a_d - density_g(d) * problem.total()


def _squarefree_divisors(primes: np.ndarray, cutoff: float, budget: int) -> list[int]:
    """Squarefree d composed of the given primes with d < cutoff, via DFS."""
    out = [1]
    plist = [int(p) for p in primes]

    def dfs(idx: int, prod: int):
        for j in range(idx, len(plist)):
            nxt = prod * plist[j]
            if nxt >= cutoff:
                # primes ascending: larger j only increases the product
                break
            if len(out) >= budget:
                raise BudgetExhausted(
                    f"divisor enumeration exceeded budget {budget}", partial=len(out)
                )
            out.append(nxt)
            dfs(j + 1, nxt)

    dfs(0, 1)
    return out


def brute_force_S(problem: SieveProblem, table: FactorTable) -> float:
    """S(A, P, z) summed directly from the factor table (n=1 counts)."""
    if table.n_max < problem.n_max:
        raise ValueError("factor table too small for the weight range")
    n = problem.n_max
    spf = table.spf[: n + 1]
    mask = (spf >= problem.z) | (np.arange(n + 1) == 1)
    return float(problem.weights[mask[: n + 1]].sum())


def buchstab_defect(problem: SieveProblem, z_prime: float, table: FactorTable) -> float:
    """S(A,P,z) - [ S(A,P,z') - sum_{z'<=p<z} S(A_p,P,p) ]; identically 0.

    S(A_p, P, p) collects a(n) over n with least prime factor exactly p,
    so the subtracted sum partitions the n removed when z' grows to z.
    """
    if not (2.0 < z_prime <= problem.z):
        raise ValueError("need 2 < z' <= z")
    n = problem.n_max
    spf = table.spf[: n + 1]
    w = problem.weights
    lhs = brute_force_S(problem, table)
    loose = float(w[(spf >= z_prime) | (np.arange(n + 1) == 1)].sum())
    mid_primes = table.primes[(table.primes >= z_prime) & (table.primes < problem.z)]
    correction = 0.0
    for p in mid_primes:
        correction += float(w[spf == p].sum())
    return lhs - (loose - correction)


@dataclass
class SieveBoundsReport:
    s: float
    big_x: float
    v_z: float
    total: float
    remainder: float
    divisor_count: int
    upper: float
    lower: float
    s_exact: float
    brackets_hold: bool
    admissible: bool
    upper_valid: bool   # D >= z
    lower_valid: bool   # D >= z^2
    q_threshold: float
    q_product: float


def admissibility_check(problem: SieveProblem, table: FactorTable) -> bool:
    """The one-dimensional density hypothesis over all 1 < u < z.

    The left side only jumps at primes of P \\ Q and the right side
    decreases in u, so checking at each such prime point is exhaustive.
    """
    pr = primes_below(problem.z, table)
    pr = pr[pr >= problem.exclude_below]
    if len(pr) == 0:
        return True
    log_terms = -np.log1p(-1.0 / pr.astype(float))
    tail = np.cumsum(log_terms[::-1])[::-1]  # tail[i] = sum over p >= pr[i]
    lhs = np.exp(tail)
    rhs = (1.0 + problem.epsilon) * math.log(problem.z) / np.log(pr.astype(float))
    return bool(np.all(lhs < rhs))


def sieve_bounds(problem: SieveProblem, table: FactorTable,
                 functions: LinearSieveFunctions | None = None) -> SieveBoundsReport:
    """Evaluate the linear-sieve bracket and compare with the exact sum."""
    fns = functions if functions is not None else linear_sieve_functions()
    pz = primes_below(problem.z, table)
    v_z = float(np.prod(1.0 - 1.0 / pz)) if len(pz) else 1.0
    total = problem.total()
    big_x = v_z * total
    s = math.log(problem.level_d) / math.log(problem.z)
    q_primes = pz[pz < problem.exclude_below]
    q_product = float(np.prod(q_primes.astype(float))) if len(q_primes) else 1.0
    cutoff = problem.level_d * q_product
    divisors = _squarefree_divisors(pz, cutoff, problem.remainder_budget)
    remainder = 0.0
    for d in divisors:
        remainder += abs(remainder_r(problem, d))
    slack = problem.epsilon * math.exp(14.0 - s)
    upper = (float(fns.upper(s)) + slack) * big_x + remainder
    lower = (float(fns.lower(s)) - slack) * big_x - remainder
    s_exact = brute_force_S(problem, table)
    upper_valid = problem.level_d >= problem.z
    lower_valid = problem.level_d >= problem.z ** 2
    holds = True
    if upper_valid:
        holds = holds and (s_exact <= upper + 1e-9)
    if lower_valid:
        holds = holds and (lower - 1e-9 <= s_exact)
    return SieveBoundsReport(
        s=s, big_x=big_x, v_z=v_z, total=total, remainder=remainder,
        divisor_count=len(divisors), upper=upper, lower=lower, s_exact=s_exact,
        brackets_hold=holds, admissible=admissibility_check(problem, table),
        upper_valid=upper_valid, lower_valid=lower_valid,
        q_threshold=problem.exclude_below, q_product=q_product,
    )


# ----------------------------------------------------------------------
# the dynamical pipeline: orbit weights -> sieve positivity
# ----------------------------------------------------------------------

@dataclass
class PipelineReport:
    n_max: int
    alpha_exp: float
    z: float
    level: int                  # L = floor(1/alpha) + 1
    s_target: float
    u_tilde: float
    f0_at_s: float
    bounds: SieveBoundsReport
    omega_sum: float
    chain_ok: bool              # omega_sum >= S_exact >= lower
    positive: bool              # lower bound strictly positive
    margin: float               # S_exact - 0.01 * V(z) |A| + R  (recorded check)


def dynamical_sieve_pipeline(weights: np.ndarray, alpha_exp: float,
                             epsilon: float = 0.004, s_target: float = 101.0,
                             table: FactorTable | None = None,
                             u_tilde: float | None = None) -> PipelineReport:
    """Run the sieve over orbit weights a(n), n = 1..N.

    z = N^alpha, D = z^{s_target}; the excluded prime set comes from the
    empirical Mertens threshold at 3*epsilon so the density hypothesis
    holds with factor (1 + epsilon); the almost-prime level is
    L = floor(1/alpha) + 1, and the report certifies the chain

        sum over n with Omega(n) <= L of a(n)  >=  S(A,P,z)  >=  lower > 0.
    """
    w = np.asarray(weights, dtype=float)
    n_max = len(w) - 1
    if n_max < 100:
        raise ValueError("pipeline needs a weight range of at least 100")
    z = float(n_max) ** alpha_exp
    level = int(math.floor(1.0 / alpha_exp)) + 1
    if table is None:
        table = build_factor_table(n_max)
    if u_tilde is None:
        u_tilde = empirical_u_tilde(3.0 * epsilon)
    problem = SieveProblem(
        weights=w, z=z, level_d=z ** s_target, epsilon=epsilon,
        exclude_below=u_tilde,
    )
    fns = linear_sieve_functions()
    report = sieve_bounds(problem, table, fns)
    s = report.s
    f0 = float(fns.lower(s))
    omega_vals = omega_count(table, np.arange(1, n_max + 1))
    omega_sum = float(w[1:][omega_vals <= level].sum())
    chain_ok = (omega_sum >= report.s_exact - 1e-9) and (report.s_exact >= report.lower - 1e-9)
    margin = report.s_exact - (0.01 * report.big_x - report.remainder)
    return PipelineReport(
        n_max=n_max, alpha_exp=alpha_exp, z=z, level=level, s_target=s_target,
        u_tilde=u_tilde, f0_at_s=f0, bounds=report, omega_sum=omega_sum,
        chain_ok=chain_ok, positive=report.lower > 0.0, margin=margin,
    )
