"""Return structure of critical orbits: neighbourhoods, returns, bound
periods, the basic assumption and finite-horizon exponent estimates."""

import math
from dataclasses import dataclass, field

import numpy as np

from .sphere import (SpherePoint, chordal_distance, dist_to_set,
                     log_spherical_derivative, working_precision, scalar)


@dataclass
class NeighborhoodSystem:
    """Closed chordal balls of radius delta_prime, delta and delta**2
    around the critical points."""

    delta_prime: float
    delta: float
    critical: list
    degrees: list

    def __post_init__(self):
        if not (self.delta ** 2 < self.delta < self.delta_prime < 1):
            raise ValueError("need delta**2 < delta < delta_prime < 1")
        for i in range(len(self.critical)):
            for j in range(i + 1, len(self.critical)):
                gap = chordal_distance(self.critical[i], self.critical[j])
                if gap <= 2 * self.delta_prime:
                    raise ValueError(
                        f"neighbourhoods of critical points {i} and {j} overlap")

    @property
    def delta2(self):
        return self.delta ** 2

    def locate(self, point, critical=None):
        """(distance to Crit, nearest component)."""
        return dist_to_set(point, self.critical if critical is None else critical)

    def zone(self, dist):
        if dist <= self.delta2:
            return "deep"
        if dist <= self.delta:
            return "shallow"
        if dist <= self.delta_prime:
            return "pseudo"
        return "outside"


def depth(dist):
    """Integer r with dist in [e^(-r-1/2), e^(-r+1/2))."""
    if dist <= 0:
        return math.inf
    return math.ceil(-math.log(dist) - 0.5)


def whitney_bound(dist):
    """dist / (log dist)^2, the partition scale at distance ``dist``."""
    if dist <= 0:
        return 0.0
    if dist >= 1:
        return math.inf
    return dist / math.log(dist) ** 2


def is_essential(diam, dist):
    return diam >= 0.5 * whitney_bound(dist)


@dataclass
class ReturnEvent:
    time: int
    component: int
    depth: int
    dist: float
    kind: str                  # essential, inessential, pseudo, bound
    depth_class: str = None    # deep, shallow (None for pseudo and bound)
    bound_period: int = 0
    free_period: int = 0
    diam: float = 0.0
    truncated: bool = False


@dataclass
class OrbitTrace:
    """Critical orbit xi_k = f_a^k(c_l(a)), k = 0..n.

    ``ledger[k]`` is log|Df^k(v)| for the critical value v = xi_1, i.e. the
    sum of log f#(xi_j) over 1 <= j <= k; ``ledger[0] = 0``.
    """

    a: object
    l: int
    points: list
    ledger: list
    critical: list = None
    returns: list = field(default_factory=list)
    certified_horizon: int = None

    def __post_init__(self):
        if self.certified_horizon is None:
            self.certified_horizon = len(self.points) - 1

    @property
    def horizon(self):
        return min(self.certified_horizon, len(self.points) - 1)

    def dist_to_crit(self, k, critical=None):
        crit = critical if critical is not None else self.critical
        return dist_to_set(self.points[k], crit)


def critical_trace(f, c, n, a=None, l=None, critical=None, horizon=None):
    """Build an OrbitTrace of the critical point ``c`` under ``f``."""
    points = [c]
    ledger = [0.0]
    p = c
    for k in range(1, n + 1):
        p = f.evaluate(p)
        points.append(p)
        ledger.append(ledger[-1] + log_spherical_derivative(f, p))
    if critical is None:
        critical = [q for q, _ in f.critical_points()]
    return OrbitTrace(a, l, points, ledger, critical, [], horizon)


# ---------------------------------------------------------------- bound periods

def binding_length(separations, partner_dists, beta):
    """Largest p with separations[j] <= e^(-beta j) partner_dists[j] for all
    1 <= j <= p.  Index 0 of both sequences is ignored.

    Returns (p, exhausted) where ``exhausted`` means the data ran out while
    the inequality still held.
    """
    n = min(len(separations), len(partner_dists)) - 1
    for j in range(1, n + 1):
        if separations[j] > math.exp(-beta * j) * partner_dists[j]:
            return j - 1, False
    return max(n, 0), True


def partner_distance(point, critical):
    """Distance from a partner orbit point to Crit.

    When the partner sits exactly on a critical point (a persistent critical
    relation) that point is skipped, otherwise the binding test would be
    vacuous.
    """
    best = 3.0
    for q in critical:
        s = chordal_distance(point, q)
        if s <= 1e-300:
            continue
        best = min(best, s)
    return best


class PartnerTooShort(ValueError):
    pass


def bound_period_pointwise(trace, nu, partner, beta, critical=None):
    """Pointwise bound period of the return at time ``nu``."""
    p, truncated = bound_period_scan([trace.points[nu:trace.horizon + 1]],
                                     [partner], beta, critical or trace.critical)
    return p


def bound_period_scan(sequences, partners, beta, critical):
    """Minimum binding length over all (sequence, partner) pairs.

    ``sequences`` are point lists starting at the return time; ``partners``
    are critical traces whose points[j] is xi_{j,k}.
    """
    best = None
    truncated = False
    for part in partners:
        pd = [partner_distance(q, critical) for q in part.points[:part.horizon + 1]]
        for seq in sequences:
            m = min(len(seq), len(pd))
            sep = [chordal_distance(seq[j], part.points[j]) for j in range(m)]
            p, exhausted = binding_length(sep, pd[:m], beta)
            if exhausted:
                if len(seq) > len(pd):
                    raise PartnerTooShort(
                        f"partner orbit of length {len(pd)} too short; extend it")
                truncated = True
            best = p if best is None else min(best, p)
    return (0 if best is None else best), truncated


def host_curve(center, direction, r, samples=(0.5, 0.75, 1.0)):
    """Points of the host segment of chordal length e^-r / r^2 centred at
    ``center`` with its middle half removed."""
    length = math.exp(-r) / max(r, 1) ** 2
    bits = center.bits
    swap = abs(center.z) > abs(center.w)
    local = center.swapped() if swap else center
    with working_precision(bits):
        x0 = local.affine()
        # chordal length ~ 2|dx| / (1 + |x|^2)
        half = 0.5 * length * (1 + abs(complex(x0)) ** 2) / 2
        u = direction / abs(direction) if direction != 0 else 1.0
        pts = []
        for t in samples:
            for sign in (1, -1):
                x = x0 + scalar(sign * t * half * u, bits)
                q = SpherePoint(x, scalar(1, bits))
                pts.append(q.swapped() if swap else q)
    return pts


def bound_period_interval(traces, nu, partners, beta, critical=None, host=None):
    """Bound period of a curve return: the minimum pointwise criterion over
    the sampled curve points (``traces``, one per sampled parameter), the
    optional host-curve orbits and all sampled partner parameters."""
    crit = critical or traces[0].critical
    seqs = [t.points[nu:t.horizon + 1] for t in traces]
    if host:
        seqs.extend(host)
    p, _ = bound_period_scan(seqs, partners, beta, crit)
    return p


# ----------------------------------------------------------------- detection

def detect_returns(trace, nbhd, beta=0.0, partners=None, diameters=None):
    """Returns of a critical orbit into U' with kinds and bound periods.

    ``partners`` maps a component index to the critical trace of that
    critical point (same parameter); without it bound periods are zero.
    ``diameters`` optionally gives the curve diameter per time, used for the
    essential test; single orbits have diameter zero.
    """
    events = []
    bound_until = 0
    last_free = None
    H = trace.horizon
    crit = nbhd.critical
    for k in range(1, H + 1):
        dist, comp = dist_to_set(trace.points[k], crit)
        zone = nbhd.zone(dist)
        if zone == "outside":
            continue
        r = depth(dist)
        diam = diameters[k] if diameters is not None else 0.0
        if k <= bound_until:
            events.append(ReturnEvent(k, comp, r, dist, "bound", None, 0, 0, diam))
            continue
        if zone == "pseudo":
            kind, dclass = "pseudo", None
        else:
            kind = "essential" if is_essential(diam, dist) else "inessential"
            dclass = "deep" if zone == "deep" else "shallow"
        p = 0
        truncated = False
        if partners is not None and comp in partners:
            p, truncated = bound_period_scan([trace.points[k:H + 1]],
                                             [partners[comp]], beta, crit)
        ev = ReturnEvent(k, comp, r, dist, kind, dclass, p, 0, diam, truncated)
        if last_free is not None:
            prev = events[last_free]
            prev.free_period = k - (prev.time + prev.bound_period)
        events.append(ev)
        last_free = len(events) - 1
        bound_until = k + p
    if last_free is not None:
        prev = events[last_free]
        prev.free_period = max(0, H + 1 - (prev.time + prev.bound_period))
    trace.returns = events
    return events


def brute_force_returns(trace, nbhd):
    """Independent oracle: every time k >= 1 with dist <= delta_prime."""
    out = []
    for k in range(1, trace.horizon + 1):
        d = min(chordal_distance(trace.points[k], c) for c in nbhd.critical)
        if d <= nbhd.delta_prime:
            out.append((k, d <= nbhd.delta))
    return out


# --------------------------------------------------- basic assumption, exponents

def basic_assumption_scan(dists, Kb, exponent):
    """First k >= 1 with dists[k] < Kb e^(-exponent k), or None."""
    for k in range(1, len(dists)):
        if dists[k] < Kb * math.exp(-exponent * k):
            return k
    return None


def basic_assumption_check(trace, constants, n):
    """(passed, first violation time) for dist(xi_k, Crit) >= Kb e^(-2 alpha k),
    k = 1..n; the inequality is inclusive."""
    if n > trace.horizon:
        raise ValueError("n beyond the certified horizon")
    dists = [0.0] + [trace.dist_to_crit(k)[0] for k in range(1, n + 1)]
    first = basic_assumption_scan(dists, constants.Kb, constants.deletion_exponent)
    return first is None, first


def lyapunov_estimates(trace):
    """(min, max) of ledger[k]/k over k in [H/2, H]."""
    ledger = trace.ledger if hasattr(trace, "ledger") else trace
    H = len(ledger) - 1
    if H < 10:
        raise ValueError("horizon must be at least 10")
    vals = [ledger[k] / k for k in range(max(1, math.ceil(H / 2)), H + 1)]
    return min(vals), max(vals)


# ------------------------------------------------------------ outside expansion

@dataclass
class OutsideExpansion:
    lam: float
    C_prime: float
    n: int
    kept: int
    sampled: int


def sphere_samples(count, seed=0):
    """Low-discrepancy (Fibonacci) points on the sphere with a seeded
    rotation, returned as normalized projective coordinate arrays."""
    rng = np.random.default_rng(seed)
    i = np.arange(count) + 0.5
    zc = 1 - 2 * i / count
    phi = np.pi * (1 + 5 ** 0.5) * i + rng.uniform(0, 2 * np.pi)
    rad = np.sqrt(np.maximum(0.0, 1 - zc * zc))
    x, y = rad * np.cos(phi), rad * np.sin(phi)
    # stereographic projection from the north pole, kept projective
    num = (x + 1j * y).astype(complex)
    den = (1 - zc).astype(complex)
    return _normalize_arrays(num, den)


def _normalize_arrays(z, w):
    m = np.maximum(np.abs(z), np.abs(w))
    m[m == 0] = 1.0
    return z / m, w / m


def _homog_arrays(coeffs, d, z, w):
    val = np.zeros_like(z)
    dz = np.zeros_like(z)
    dw = np.zeros_like(z)
    for k, c in enumerate(coeffs):
        c = complex(c)
        if c == 0:
            continue
        zk = z ** k
        wk = w ** (d - k)
        val += c * zk * wk
        if k > 0:
            dz += k * c * z ** (k - 1) * wk
        if k < d:
            dw += (d - k) * c * zk * w ** (d - k - 1)
    return val, dz, dw


def step_arrays(f, z, w):
    """Vectorized image and spherical derivative in doubles."""
    d = f.degree
    P, Pz, Pw = _homog_arrays(f.numerator, d, z, w)
    Q, Qz, Qw = _homog_arrays(f.denominator, d, z, w)
    det = Pz * Qw - Pw * Qz
    sharp = np.abs(det) * (np.abs(z) ** 2 + np.abs(w) ** 2) / (
        d * (np.abs(P) ** 2 + np.abs(Q) ** 2))
    nz, nw = _normalize_arrays(P, Q)
    return nz, nw, sharp


def chordal_arrays(z1, w1, z2, w2):
    cross = np.abs(z1 * w2 - z2 * w1)
    n1 = np.sqrt(np.abs(z1) ** 2 + np.abs(w1) ** 2)
    n2 = np.sqrt(np.abs(z2) ** 2 + np.abs(w2) ** 2)
    return np.minimum(2 * cross / (n1 * n2), 2.0)


def dist_to_crit_arrays(z, w, critical):
    best = np.full(z.shape, 3.0)
    for c in critical:
        cz, cw = complex(c.z), complex(c.w)
        best = np.minimum(best, chordal_arrays(z, w, cz, cw))
    return best


def outside_expansion_estimate(f, nbhd, n, samples=10000, seed=0):
    """Empirical expansion outside U.

    lam is the minimum of |Df^n(z)|^(1/n) over sampled z whose iterates
    z, f z, ..., f^(n-1) z all avoid U.  C_prime is the minimum of
    |Df^k(z)| / lam^k over segments that start in U, stay outside U and
    re-enter U at some time k <= n (None when no such segment is seen).
    """
    if isinstance(samples, int):
        z, w = sphere_samples(samples, seed)
    else:
        z = np.array([complex(p.z) for p in samples])
        w = np.array([complex(p.w) for p in samples])
    total = len(z)
    if total == 0:
        raise ValueError("empty sample")
    crit = nbhd.critical
    inside0 = dist_to_crit_arrays(z, w, crit) <= nbhd.delta
    avoid = ~inside0
    logd = np.zeros(total)
    seg_open = inside0.copy()
    reentry = []
    for k in range(1, n + 1):
        z, w, sharp = step_arrays(f, z, w)
        with np.errstate(divide="ignore"):
            logd += np.log(sharp)
        inside = dist_to_crit_arrays(z, w, crit) <= nbhd.delta
        if k < n:
            avoid &= ~inside
        for idx in np.nonzero(seg_open & inside)[0]:
            reentry.append((k, logd[idx]))
        seg_open &= ~inside
    kept = int(avoid.sum())
    if kept == 0:
        raise ValueError("U too large for horizon: no sample avoids U")
    lam = float(np.exp(np.min(logd[avoid]) / n))
    C_prime = None
    if reentry:
        C_prime = float(min(math.exp(ld - k * math.log(lam)) for k, ld in reentry))
    return OutsideExpansion(lam, C_prime, n, kept, total)


# ------------------------------------------------------------ bound expansion

@dataclass
class BoundExpansionRecord:
    time: int
    p: int
    r: int
    degree: int
    gamma: float
    lower: float
    upper: float
    log_growth: float
    growth_needed: float
    lower_ok: bool
    upper_ok: bool
    growth_ok: bool

    @property
    def ok(self):
        return self.lower_ok and self.upper_ok and self.growth_ok


def check_bound_expansion(trace, nu, p, constants, degree, r=None, gamma=None,
                          slack=2.0):
    """Compare a bound period with d r/(2 Gamma) <= p <= 2 d r/gamma and
    |Df^p(xi_nu)| >= e^(gamma p / (2 d)), each with a slack factor."""
    ledger = trace.ledger if hasattr(trace, "ledger") else trace
    if r is None:
        r = depth(trace.dist_to_crit(nu)[0])
    if gamma is None:
        gamma = ledger[nu] / nu if nu > 0 else constants.gamma0
        gamma = max(gamma, constants.gammaI)
    log_growth = ledger[nu + p - 1] - ledger[nu - 1] if p > 0 else 0.0
    return bound_expansion_record(nu, p, r, degree, gamma, log_growth,
                                  constants.Gamma, slack)


def bound_expansion_record(nu, p, r, degree, gamma, log_growth, Gamma, slack=2.0):
    lower = degree * r / (2 * Gamma)
    upper = 2 * degree * r / gamma
    need = gamma * p / (2 * degree)
    return BoundExpansionRecord(
        nu, p, r, degree, gamma, lower, upper, log_growth, need,
        p >= lower / slack, p <= upper * slack,
        log_growth >= need - math.log(slack))
