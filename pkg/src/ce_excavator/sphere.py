"""Rational maps on the Riemann sphere in projective coordinates.

Points are pairs (z : w) scaled by powers of two so that the larger
coordinate has modulus in [1/2, 1).  Maps are stored as coefficient lists
(lowest degree first) and evaluated in homogeneous form, so the point at
infinity never needs a special case.

Scalars are Python complex numbers at 53 bits and gmpy2 ``mpc`` values
above that.  Every arithmetic block runs inside ``working_precision`` so
the MPFR context matches the operands.
"""

import math
from contextlib import nullcontext

import gmpy2
import numpy as np

DOUBLE_BITS = 53
CRIT_TOL = 1e-8


class PrecisionExhausted(RuntimeError):
    pass


class CriticalPointError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def working_precision(bits):
    if bits <= DOUBLE_BITS:
        return nullcontext()
    return gmpy2.context(gmpy2.get_context(), precision=bits)


def scalar(x, bits=DOUBLE_BITS):
    """Convert ``x`` to the scalar type used at ``bits`` of precision."""
    if bits <= DOUBLE_BITS:
        return complex(x)
    with working_precision(bits):
        if isinstance(x, str):
            return gmpy2.mpc(gmpy2.mpfr(x))
        return gmpy2.mpc(x)


def real_scalar(x, bits=DOUBLE_BITS):
    if bits <= DOUBLE_BITS:
        return float(x)
    with working_precision(bits):
        return gmpy2.mpfr(x)


def bits_of(x):
    if isinstance(x, gmpy2.mpc):
        return x.precision[0]
    if isinstance(x, gmpy2.mpfr):
        return x.precision
    return DOUBLE_BITS


def _abs2(x):
    if isinstance(x, gmpy2.mpc):
        return gmpy2.norm(x)
    return x.real * x.real + x.imag * x.imag


def _log(x):
    """Natural log of a non-negative real as a float (-inf at zero)."""
    if x == 0:
        return float("-inf")
    if isinstance(x, gmpy2.mpfr):
        return float(gmpy2.log(x))
    return math.log(x)


_ONE = gmpy2.mpfr(1)


def _pow2_scale(m):
    # exponent e with m * 2**-e in [1/2, 1)
    if isinstance(m, gmpy2.mpfr):
        return gmpy2.frexp(m)[0]
    return math.frexp(m)[1]


class SpherePoint:
    """A point (z : w) of the Riemann sphere."""

    __slots__ = ("z", "w", "_c53")

    def __init__(self, z, w=1, normalize=True):
        bits = max(bits_of(z), bits_of(w))
        z = scalar(z, bits)
        w = scalar(w, bits)
        if z == 0 and w == 0:
            raise ValueError("(0 : 0) is not a point of the sphere")
        if normalize:
            with working_precision(bits):
                m = max(abs(z), abs(w))
                if not (0.5 <= m < 1):
                    e = _pow2_scale(m)
                    if bits > DOUBLE_BITS:
                        s = gmpy2.mul_2exp(gmpy2.mpfr(1), -e)
                    else:
                        s = math.ldexp(1.0, -e)
                    z = z * s
                    w = w * s
        self.z = z
        self.w = w

    @classmethod
    def _raw(cls, z, w, bits):
        """Fast constructor for scalars already at ``bits`` (inside a context)."""
        self = object.__new__(cls)
        m = max(abs(z), abs(w))
        if not (0.5 <= m < 1):
            if bits > DOUBLE_BITS:
                s = gmpy2.mul_2exp(_ONE, -gmpy2.frexp(m)[0])
            else:
                s = math.ldexp(1.0, -math.frexp(m)[1])
            z = z * s
            w = w * s
        self.z = z
        self.w = w
        return self

    @classmethod
    def from_affine(cls, z, bits=DOUBLE_BITS):
        return cls(scalar(z, bits), scalar(1, bits))

    @classmethod
    def infinity(cls, bits=DOUBLE_BITS):
        return cls(scalar(1, bits), scalar(0, bits))

    @property
    def bits(self):
        return bits_of(self.z)

    def is_infinity(self):
        return self.w == 0

    def affine(self):
        """Affine coordinate z/w, or None at infinity."""
        if self.w == 0:
            return None
        with working_precision(self.bits):
            return self.z / self.w

    def swapped(self):
        """The image under z -> 1/z, i.e. the coordinate in the other chart."""
        return SpherePoint(self.w, self.z)

    def at_precision(self, bits):
        return SpherePoint(scalar(self.z, bits), scalar(self.w, bits))

    def to_complex(self):
        a = self.affine()
        return complex("inf") if a is None else complex(a)

    def __repr__(self):
        return f"SpherePoint({complex(self.z)!r} : {complex(self.w)!r})"


FAST_FLOOR = 1e-7


def _coords53(p):
    try:
        return p._c53
    except AttributeError:
        c = (complex(p.z), complex(p.w))
        p._c53 = c
        return c


def chordal_estimate(p, q):
    """Double-precision chordal distance (absolute error about 1e-16)."""
    z1, w1 = _coords53(p)
    z2, w2 = _coords53(q)
    return min(2.0, 2 * abs(z1 * w2 - z2 * w1) / math.sqrt(
        (z1.real * z1.real + z1.imag * z1.imag + w1.real * w1.real + w1.imag * w1.imag) *
        (z2.real * z2.real + z2.imag * z2.imag + w2.real * w2.real + w2.imag * w2.imag)))


def chordal_distance(p, q):
    """Chordal distance on the sphere of diameter 2.

    Evaluated in double precision from the normalized coordinates; results
    below FAST_FLOOR, where cancellation would cost relative accuracy, are
    recomputed at the points' own precision.
    """
    d = chordal_estimate(p, q)
    if d >= FAST_FLOOR:
        return d
    return _chordal_exact(p, q)


def _chordal_exact(p, q):
    bits = max(p.bits, q.bits)
    with working_precision(bits):
        cross = abs(p.z * q.w - q.z * p.w)
        norm_p = _abs2(p.z) + _abs2(p.w)
        norm_q = _abs2(q.z) + _abs2(q.w)
        if bits > DOUBLE_BITS:
            d = 2 * cross / (gmpy2.sqrt(norm_p) * gmpy2.sqrt(norm_q))
        else:
            d = 2 * cross / (math.sqrt(norm_p) * math.sqrt(norm_q))
    return min(float(d), 2.0)


def _trim(coeffs):
    c = list(coeffs)
    while len(c) > 1 and c[-1] == 0:
        c.pop()
    return c


def poly_degree(coeffs, rel_tol=0.0):
    c = [complex(x) for x in coeffs]
    scale = max((abs(x) for x in c), default=0.0)
    deg = len(c) - 1
    while deg > 0 and abs(c[deg]) <= rel_tol * scale:
        deg -= 1
    return deg


def poly_derivative(coeffs):
    return [k * coeffs[k] for k in range(1, len(coeffs))] or [0 * coeffs[0]]


def poly_mul(p, q):
    out = [0 * p[0]] * (len(p) + len(q) - 1)
    for i, a in enumerate(p):
        for j, b in enumerate(q):
            out[i + j] = out[i + j] + a * b
    return out


def poly_add(p, q):
    n = max(len(p), len(q))
    zero = 0 * (p[0] if p else q[0])
    return [(p[k] if k < len(p) else zero) + (q[k] if k < len(q) else zero)
            for k in range(n)]


def poly_scale(p, s):
    return [s * c for c in p]


def poly_eval(coeffs, x):
    acc = coeffs[-1]
    for c in reversed(coeffs[:-1]):
        acc = acc * x + c
    return acc


def homogeneous_eval(coeffs, d, z, w):
    """Value and partials of sum c_k z^k w^(d-k)."""
    wp = [1]
    for _ in range(d):
        wp.append(wp[-1] * w)
    zp = [1]
    for _ in range(d):
        zp.append(zp[-1] * z)
    val = 0
    dz = 0
    dw = 0
    for k, c in enumerate(coeffs):
        if c == 0:
            continue
        val = val + c * zp[k] * wp[d - k]
        if k > 0:
            dz = dz + k * c * zp[k - 1] * wp[d - k]
        if k < d:
            dw = dw + (d - k) * c * zp[k] * wp[d - k - 1]
    return val, dz, dw


class RationalMap:
    """f = P/Q on the sphere, coefficients lowest degree first."""

    def __init__(self, numerator, denominator, bits=DOUBLE_BITS, check=True):
        num = _trim([scalar(c, bits) for c in numerator])
        den = _trim([scalar(c, bits) for c in denominator])
        self.bits = bits
        self.degree = max(len(num), len(den)) - 1
        if self.degree < 1:
            raise ValueError("constant map")
        zero = scalar(0, bits)
        self.numerator = num + [zero] * (self.degree + 1 - len(num))
        self.denominator = den + [zero] * (self.degree + 1 - len(den))
        self._critical = None
        d = self.degree
        self._terms = [
            [(k, c, k * c, (d - k) * c) for k, c in enumerate(coeffs) if c != 0]
            for coeffs in (self.numerator, self.denominator)]
        if check:
            self.check_coprime()

    def with_precision(self, bits):
        return RationalMap(self.numerator, self.denominator, bits, check=False)

    def check_coprime(self, tol=1e-10):
        """Reject maps whose numerator and denominator share a root."""
        p = [complex(c) for c in self.numerator]
        q = [complex(c) for c in self.denominator]
        if p[-1] == 0 and q[-1] == 0:
            raise ValueError("numerator and denominator vanish together at infinity")
        scale = max(abs(c) for c in p + q)
        dq = poly_degree(q)
        if dq > 0:
            for r in np.roots(q[dq::-1]):
                # compare |P(r)| against the size of P near r
                r = complex(r)
                s = max(1.0, abs(r)) ** self.degree
                if abs(poly_eval(p, r)) <= tol * scale * s:
                    raise ValueError(f"common root near {r}")

    def evaluate(self, p):
        return self.evaluate_with_derivative(p)[0]

    def _homog(self, which, zp, wp):
        d = self.degree
        val = dz = dw = 0
        for k, c, kc, dkc in self._terms[which]:
            val += c * zp[k] * wp[d - k]
            if k:
                dz += kc * zp[k - 1] * wp[d - k]
            if k < d:
                dw += dkc * zp[k] * wp[d - k - 1]
        return val, dz, dw

    def evaluate_with_derivative(self, p):
        """Image point and spherical derivative f#(p)."""
        bits = max(self.bits, p.bits)
        d = self.degree
        z, w = p.z, p.w
        with working_precision(bits):
            zp = [1, z]
            wp = [1, w]
            for _ in range(d - 1):
                zp.append(zp[-1] * z)
                wp.append(wp[-1] * w)
            P, Pz, Pw = self._homog(0, zp, wp)
            Q, Qz, Qw = self._homog(1, zp, wp)
            if P == 0 and Q == 0:
                raise ArithmeticError("indeterminate 0/0: map has a common root")
            det = Pz * Qw - Pw * Qz
            num = abs(det) * (_abs2(z) + _abs2(w))
            sharp = num / (d * (_abs2(P) + _abs2(Q)))
            if bits > DOUBLE_BITS and not isinstance(P, gmpy2.mpc):
                P, Q = gmpy2.mpc(P), gmpy2.mpc(Q)
            elif bits <= DOUBLE_BITS:
                P, Q = complex(P), complex(Q)
            image = SpherePoint._raw(P, Q, bits)
        return image, sharp

    def __call__(self, p):
        return self.evaluate(p)

    def critical_points(self):
        if self._critical is None:
            self._critical = find_critical_points(self)
        return self._critical

    @property
    def max_local_degree(self):
        return max(d for _, d in self.critical_points())


def evaluate(f, p):
    return f.evaluate(p)


def spherical_derivative(f, p):
    """f#(p) = |f'(p)| (1 + |p|^2) / (1 + |f(p)|^2), as a float."""
    _, s = f.evaluate_with_derivative(p)
    return float(s)


def log_spherical_derivative(f, p):
    _, s = f.evaluate_with_derivative(p)
    return _log(s)


def _jacobian_affine(f):
    """Coefficients of P'Q - PQ' (the affine critical polynomial)."""
    P, Q = f.numerator, f.denominator
    a = poly_mul(poly_derivative(P), Q)
    b = poly_mul(P, poly_derivative(Q))
    return [x - y for x, y in zip(a, b)]


def _cluster_roots(roots, radius):
    """Group numerically repeated roots; returns (centre, count) pairs."""
    roots = sorted(roots, key=lambda r: (r.real, r.imag))
    used = [False] * len(roots)
    groups = []
    for i, r in enumerate(roots):
        if used[i]:
            continue
        members = [r]
        used[i] = True
        for j in range(i + 1, len(roots)):
            if not used[j] and abs(roots[j] - r) <= radius:
                members.append(roots[j])
                used[j] = True
        groups.append((sum(members) / len(members), len(members)))
    return groups


def _polish(coeffs, x0, mult, bits, steps=60):
    """Newton on the (mult-1)-th derivative, where the root is simple."""
    g = list(coeffs)
    for _ in range(mult - 1):
        g = poly_derivative(g)
    dg = poly_derivative(g)
    with working_precision(bits):
        x = scalar(x0, bits)
        for _ in range(steps):
            den = poly_eval(dg, x)
            if den == 0:
                break
            step = poly_eval(g, x) / den
            x = x - step
            if abs(step) <= 2.0 ** (-bits + 4) * max(1, abs(x)):
                break
    return x


def _chart_roots(coeffs, limit):
    """Clustered roots with |x| <= limit; exact zero roots included."""
    c = [complex(x) for x in coeffs]
    deg = poly_degree(c, 1e-14)
    if deg == 0:
        return []
    raw = [complex(r) for r in np.roots(c[deg::-1])]
    scale = max(1.0, max(abs(r) for r in raw))
    return [(centre, mult) for centre, mult in _cluster_roots(raw, 1e-3 * scale)
            if abs(centre) <= limit]


def find_critical_points(f, tol=CRIT_TOL):
    """Critical points with local degrees, root-found in both charts.

    The chart z covers |z| <= 1 and the chart 1/z covers the rest, so
    every zero of the homogeneous Jacobian is counted exactly once.
    """
    d = f.degree
    total = 2 * d - 2
    jac = _jacobian_affine(f)
    jac = (jac + [0 * jac[0]] * (total + 1))[: total + 1]
    rev = list(reversed(jac))
    one = scalar(1, f.bits)
    points = []
    for centre, mult in _chart_roots(jac, 1.0 + 1e-6):
        x = _polish(jac, centre, mult, f.bits)
        points.append((SpherePoint(x, one), mult + 1))
    for centre, mult in _chart_roots(rev, 1.0 / (1.0 + 1e-6) - 1e-12):
        x = _polish(rev, centre, mult, f.bits)
        points.append((SpherePoint(one, x), mult + 1))
    count = sum(k - 1 for _, k in points)
    worst = max((spherical_derivative(f, p) for p, _ in points), default=0.0)
    if count != total:
        raise CriticalPointError(
            f"critical count {count} violates 2d-2 = {total}", worst)
    if worst >= tol:
        raise CriticalPointError("critical point not polished", worst)
    return points


def dist_to_set(p, points):
    """Chordal distance to the nearest of ``points`` and its index."""
    best = 3.0
    idx = -1
    for i, q in enumerate(points):
        s = chordal_distance(p, q)
        if s < best:
            best = s
            idx = i
    return best, idx


class OrbitFragment:
    """Points f^k(p) for k <= n and the spherical log-derivative ledger."""

    def __init__(self, points, ledger, horizon=None, exhausted=False):
        self.points = points
        self.ledger = ledger
        self.horizon = len(points) - 1 if horizon is None else horizon
        self.exhausted = exhausted

    def __len__(self):
        return len(self.points)


def _raw_orbit(f, p, n):
    points = [p]
    ledger = [0.0]
    acc = 0.0
    for _ in range(n):
        q, s = f.evaluate_with_derivative(points[-1])
        acc += _log(s)
        points.append(q)
        ledger.append(acc)
    return points, ledger


def iterate_orbit(f, p, n, validate=False, divergence=1e-6):
    """Orbit of ``p`` for ``n`` steps with log|Df^k(p)| in ledger[k].

    With ``validate`` the orbit is recomputed at twice the precision and the
    horizon is cut at the first time the two disagree by more than
    ``divergence`` chordally.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    bits = max(f.bits, p.bits)
    if p.bits < bits:
        p = p.at_precision(bits)
    points, ledger = _raw_orbit(f, p, n)
    if not validate:
        return OrbitFragment(points, ledger)
    hi = 2 * bits
    check, _ = _raw_orbit(f.with_precision(hi), p.at_precision(hi), n)
    horizon = n
    for k in range(n + 1):
        if chordal_distance(points[k], check[k]) > divergence:
            horizon = k - 1
            break
    return OrbitFragment(points, ledger, horizon, horizon < n)
