"""One-parameter families f_a = f_0 + a u and the constants derived from them."""

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .sphere import (DOUBLE_BITS, RationalMap, SpherePoint, chordal_distance,
                     iterate_orbit, poly_degree, poly_derivative, poly_eval,
                     poly_mul, real_scalar, scalar, working_precision, _log)
from .orbits import (NeighborhoodSystem, OrbitTrace, chordal_arrays,
                     outside_expansion_estimate, sphere_samples, step_arrays)


class FamilyError(ValueError):
    pass


class NotCollettEckmann(FamilyError):
    pass


def _pad(c, n):
    return list(c) + [0] * (n - len(c))


def _chart(point):
    """0 for the chart z/w (used when |z| <= |w|), 1 for w/z."""
    return 0 if abs(point.z) <= abs(point.w) else 1


def _coord(point, chart):
    with working_precision(point.bits):
        return point.z / point.w if chart == 0 else point.w / point.z


def _from_coord(x, chart, bits):
    one = scalar(1, bits)
    return SpherePoint(x, one) if chart == 0 else SpherePoint(one, x)


class RationalFamily:
    """f_a(z) = (N0 + a N1) / (D0 + a D1), real parameter |a| <= epsilon.

    Built from a base map and a direction u = Un/Ud; when Ud is constant the
    family is (P + a (Un/Ud) Q) / Q, otherwise (P Ud + a Un Q) / (Q Ud).
    """

    def __init__(self, base, direction_num=(1,), direction_den=(1,),
                 epsilon=1e-6, bits=DOUBLE_BITS, crit_floor=1e-6, name=None):
        self.name = name
        self.bits = bits
        self.epsilon = real_scalar(epsilon, bits)
        self.base = base if base.bits == bits else base.with_precision(bits)
        P = list(self.base.numerator)
        Q = list(self.base.denominator)
        un = [scalar(c, bits) for c in direction_num]
        ud = [scalar(c, bits) for c in direction_den]
        with working_precision(bits):
            if poly_degree(ud) == 0:
                u0 = ud[0]
                n1 = poly_mul([c / u0 for c in un], Q)
                n0, d0, d1 = P, Q, [0 * Q[0]]
            else:
                n0, d0 = poly_mul(P, ud), poly_mul(Q, ud)
                n1, d1 = poly_mul(un, Q), [0 * Q[0]]
        size = max(len(n0), len(d0), len(n1), len(d1))
        zero = scalar(0, bits)
        self.N0 = [scalar(c, bits) for c in _pad(n0, size)]
        self.D0 = [scalar(c, bits) for c in _pad(d0, size)]
        self.N1 = [scalar(c, bits) for c in _pad(n1, size)]
        self.D1 = [scalar(c, bits) for c in _pad(d1, size)]
        self.direction = (un, ud)
        self.degree = self.base.degree
        self.crit_floor = crit_floor
        self._base_crit = None
        self._paths = {}
        self._constant = None

    # ---------------------------------------------------------------- maps
    def _a(self, a):
        return real_scalar(a, self.bits)

    def map_at(self, a, check=False):
        a = self._a(a)
        if abs(a) > self.epsilon:
            raise FamilyError(f"|a| = {float(abs(a)):.3e} exceeds epsilon")
        if a == 0:
            return self.base
        with working_precision(self.bits):
            num = [x + a * y for x, y in zip(self.N0, self.N1)]
            den = [x + a * y for x, y in zip(self.D0, self.D1)]
        deg = max(poly_degree(num, 1e-12), poly_degree(den, 1e-12))
        if deg < self.degree:
            raise FamilyError(f"degree drops from {self.degree} to {deg} at a = {float(a)}")
        return RationalMap(num, den, self.bits, check=check)

    def u_at(self, point):
        """Direction u evaluated at a point (None at a pole)."""
        un, ud = self.direction
        x = point.affine()
        if x is None:
            return None
        with working_precision(self.bits):
            return poly_eval(un, x) / poly_eval(ud, x)

    def _local(self, coeffs, chart):
        d = len(coeffs) - 1
        return list(coeffs) if chart == 0 else list(reversed(coeffs))

    def local_step(self, a, point, chart_in, chart_out=None):
        """Image of ``point`` under f_a with chart derivatives.

        Returns (image, chart_out, dx, da): dx is the derivative of the image
        coordinate with respect to the input coordinate and da the partial
        in the parameter, both in the given charts.
        """
        a = self._a(a)
        bits = self.bits
        with working_precision(bits):
            x = _coord(point, chart_in)
            n0 = self._local(self.N0, chart_in)
            d0 = self._local(self.D0, chart_in)
            n1 = self._local(self.N1, chart_in)
            d1 = self._local(self.D1, chart_in)
            num = [p + a * q for p, q in zip(n0, n1)]
            den = [p + a * q for p, q in zip(d0, d1)]
            P, Q = poly_eval(num, x), poly_eval(den, x)
            Px, Qx = poly_eval(poly_derivative(num), x), poly_eval(poly_derivative(den), x)
            Pa, Qa = poly_eval(n1, x), poly_eval(d1, x)
            if chart_out is None:
                chart_out = 0 if abs(P) <= abs(Q) else 1
            if chart_out == 0:
                y = P / Q
                dx = (Px * Q - P * Qx) / (Q * Q)
                da = (Pa * Q - P * Qa) / (Q * Q)
            else:
                y = Q / P
                dx = (Qx * P - Q * Px) / (P * P)
                da = (Qa * P - Q * Pa) / (P * P)
        return _from_coord(y, chart_out, bits), chart_out, dx, da

    # ---------------------------------------------------- critical points
    def base_critical(self):
        if self._base_crit is None:
            self._base_crit = self.base.critical_points()
        return self._base_crit

    @property
    def n_critical(self):
        return len(self.base_critical())

    def _crit_poly(self, l, a):
        """(m-1)-th derivative of the Jacobian in the chart of c_l(0),
        where m = d_l - 1; its root is simple."""
        c0, dl = self.base_critical()[l]
        chart = _chart(c0)
        with working_precision(self.bits):
            num = [p + a * q for p, q in zip(self._local(self.N0, chart), self._local(self.N1, chart))]
            den = [p + a * q for p, q in zip(self._local(self.D0, chart), self._local(self.D1, chart))]
            a1 = poly_mul(poly_derivative(num), den)
            a2 = poly_mul(num, poly_derivative(den))
            jac = [x - y for x, y in zip(a1, a2)]
            for _ in range(dl - 2):
                jac = poly_derivative(jac)
        return jac, chart

    def _path_is_constant(self, l):
        c0, _ = self.base_critical()[l]
        chart = _chart(c0)
        x0 = _coord(c0, chart)
        for a in (-self.epsilon, self.epsilon):
            g, _ = self._crit_poly(l, a)
            if abs(complex(poly_eval(g, x0))) > 1e-14 * max(1.0, max(abs(complex(c)) for c in g)):
                return False
        return True

    def critical_point(self, l, a):
        """c_l(a) by Newton continuation from c_l(0) in steps of epsilon/1024."""
        a = self._a(a)
        c0, _ = self.base_critical()[l]
        if self._constant is None:
            self._constant = [self._path_is_constant(k) for k in range(self.n_critical)]
        if a == 0 or self._constant[l]:
            return c0
        key = (l, a)
        if key in self._paths:
            return self._paths[key]
        chart = _chart(c0)
        x = _coord(c0, chart)
        h = self.epsilon / 1024
        steps = max(1, int(math.ceil(float(abs(a) / h))))
        with working_precision(self.bits):
            for s in range(1, steps + 1):
                t = a * s / steps
                x = self._newton(l, t, x)
        point = _from_coord(x, chart, self.bits)
        self._paths[key] = point
        return point

    def _newton(self, l, a, x, iters=50):
        g, _ = self._crit_poly(l, a)
        dg = poly_derivative(g)
        for _ in range(iters):
            den = poly_eval(dg, x)
            if den == 0:
                break
            step = poly_eval(g, x) / den
            x = x - step
            if abs(step) <= 2.0 ** (-self.bits + 6) * max(1, abs(x)):
                break
        return x

    def critical_velocity(self, l, a):
        """c_l'(a) in the chart of c_l(0), from the implicit function theorem."""
        a = self._a(a)
        if self._constant is None:
            self._constant = [self._path_is_constant(k) for k in range(self.n_critical)]
        if self._constant[l]:
            return scalar(0, self.bits)
        c = self.critical_point(l, a)
        chart = _chart(self.base_critical()[l][0])
        x = _coord(c, chart)
        h = self.epsilon * 2.0 ** -20
        with working_precision(self.bits):
            gp, _ = self._crit_poly(l, a + h)
            gm, _ = self._crit_poly(l, a - h)
            g, _ = self._crit_poly(l, a)
            ga = (poly_eval(gp, x) - poly_eval(gm, x)) / (2 * h)
            gx = poly_eval(poly_derivative(g), x)
            return -ga / gx

    def critical_set(self, a):
        return [self.critical_point(l, a) for l in range(self.n_critical)]

    def critical_degrees(self):
        return [d for _, d in self.base_critical()]

    def check_separation(self):
        for a in (-self.epsilon, 0, self.epsilon):
            crit = self.critical_set(a)
            for i in range(len(crit)):
                for j in range(i + 1, len(crit)):
                    if chordal_distance(crit[i], crit[j]) < self.crit_floor:
                        raise FamilyError(f"critical points {i} and {j} collide near a = {float(a)}")

    def subordinate(self):
        """Critical points whose critical value is itself critical throughout
        the family: {l: k} with f_a(c_l(a)) = c_k(a)."""
        out = {}
        for l in range(self.n_critical):
            hits = []
            for a in (-self.epsilon, 0, self.epsilon):
                f = self.map_at(a)
                v = f.evaluate(self.critical_point(l, a))
                crit = self.critical_set(a)
                ds = [chordal_distance(v, c) for c in crit]
                k = int(np.argmin(ds))
                hits.append(k if ds[k] <= 1e-12 else None)
            if hits[0] is not None and all(h == hits[0] for h in hits):
                out[l] = hits[0]
        return out

    def free_critical(self):
        sub = self.subordinate()
        return [l for l in range(self.n_critical) if l not in sub]


# ---------------------------------------------------------------- orbits

@dataclass
class ParamDerivatives:
    """Parameter derivatives xi'_k in the chart of xi_k (0: z/w, 1: w/z)."""

    values: list
    charts: list
    space: list      # chart derivative of f at xi_k, k = 0..n-1
    param: list      # partial in a of f at xi_k, expressed at xi_{k+1}

    def affine(self, k, point):
        """xi'_k in the affine coordinate z/w, or None at infinity."""
        v = self.values[k]
        if self.charts[k] == 0:
            return v
        y = _coord(point, 1)
        if y == 0:
            return None
        with working_precision(point.bits):
            return -v / (y * y)


def orbit_with_param_derivative(F, l, a, n, v_chart=None):
    """Critical orbit of c_l under f_a with xi'_{k+1} = Df(xi_k) xi'_k + d_a f(xi_k).

    ``v_chart`` fixes the chart of the critical value xi_1 (default: the chart
    of the critical value of the base map), so ratios pulled back to v do not
    flip with a.
    """
    a = F._a(a)
    f = F.map_at(a)
    crit = F.critical_set(a)
    c = F.critical_point(l, a)
    chart0 = _chart(F.base_critical()[l][0])
    if v_chart is None:
        v_chart = _chart(F.base.evaluate(F.base_critical()[l][0]))
    points = [c]
    charts = [chart0]
    vals = [F.critical_velocity(l, a)]
    space, param = [], []
    ledger = [0.0]
    for k in range(n):
        target = v_chart if k == 0 else None
        q, ch, dx, da = F.local_step(a, points[-1], charts[-1], target)
        with working_precision(F.bits):
            vals.append(dx * vals[-1] + da)
        space.append(dx)
        param.append(da)
        points.append(q)
        charts.append(ch)
        _, s = f.evaluate_with_derivative(q)
        ledger.append(ledger[-1] + _log(s))
    trace = OrbitTrace(a, l, points, ledger, crit)
    return trace, ParamDerivatives(vals, charts, space, param)


def finite_difference_derivative(F, l, a, n, h):
    """Central differences of xi_k(a) in the chart of xi_k(a), k = 0..n."""
    a = F._a(a)
    h = F._a(h)
    base, d = orbit_with_param_derivative(F, l, a, n)
    with working_precision(F.bits):
        ap, am = a + h, a - h
    plus, _ = orbit_with_param_derivative(F, l, ap, n)
    minus, _ = orbit_with_param_derivative(F, l, am, n)
    out = []
    with working_precision(F.bits):
        for k in range(n + 1):
            ch = d.charts[k]
            out.append((_coord(plus.points[k], ch) - _coord(minus.points[k], ch)) / (2 * h))
    return out, d


def transversality_ratio(F, l, a, m):
    """Partial sum over n < m of d_a f(xi_n) / Df^n(v) with complex chart
    derivatives; v is read in the chart of the base critical value."""
    if m < 1:
        raise ValueError("m must be positive")
    trace, d = orbit_with_param_derivative(F, l, a, m)
    total = 0
    prod = 1
    with working_precision(F.bits):
        for n in range(m):
            if n > 0:
                prod = prod * d.space[n]
            if prod == 0:
                raise FamilyError(f"Df^n(v) vanishes at n = {n}: orbit hits a critical point")
            # d.param[n] is the a-partial at xi_{n+1}; Df^n(v) maps T_v to T_{xi_{n+1}}
            total = total + d.param[n] / prod
    return total


def transversality_check(F, l, a, m):
    """(partial sum, xi'_m / Df^{m-1}(v)) for the same orbit."""
    trace, d = orbit_with_param_derivative(F, l, a, m)
    with working_precision(F.bits):
        prod = 1
        for n in range(1, m):
            prod = prod * d.space[n]
        ratio = d.values[m] / prod
    return transversality_ratio(F, l, a, m), ratio


def distortion_ratio(F, l, a, b, n):
    """|Df_a^n(v_l(a)) / Df_b^n(v_l(b)) - 1| from spherical ledgers."""
    ta, _ = orbit_with_param_derivative(F, l, a, n)
    tb, _ = orbit_with_param_derivative(F, l, b, n)
    return abs(math.expm1(ta.ledger[n] - tb.ledger[n]))


# ------------------------------------------------------------- constants

@dataclass
class ConstantsLedger:
    alpha: float
    gamma0: float
    gammaH: float
    tau: float
    Gamma: float
    K: int
    Kb: float
    C0: float
    delta: float
    delta_prime: float
    epsilon1: float
    deletion_exponent: float = None
    beta: float = None
    S: float = None
    gammaB: float = None
    gammaI: float = None
    gammaC: float = None
    gammaL: float = None
    h: float = None
    theta: float = None
    alpha_hat: float = None
    q_blind: float = None
    eps2: float = None
    alpha_max: float = None
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        m = min(self.gamma0, self.gammaH) * (1 - self.tau)
        self.alpha_max = m / (400 * self.K * self.Gamma) if self.Gamma > 0 else 0.0
        self.beta = self.alpha
        self.S = self.epsilon1 * self.delta
        self.gammaB = 0.75 * m
        self.gammaI = m / 3
        self.gammaC = 0.25 * m
        self.gammaL = m / 6
        self.h = 4 * self.K ** 2 / self.gammaI if self.gammaI > 0 else math.inf
        self.theta = 1 / (6 * self.h)
        self.alpha_hat = 2 * self.K * self.alpha / self.gammaI if self.gammaI > 0 else math.inf
        self.q_blind = 2 * self.alpha
        self.eps2 = self.theta * self.tau / 2
        if self.deletion_exponent is None:
            self.deletion_exponent = 2 * self.alpha

    @property
    def Delta(self):
        return -math.log(self.delta)

    @property
    def Delta_prime(self):
        return -math.log(self.delta_prime)

    def violations(self):
        """Every ledger invariant that fails, re-derived from the raw fields."""
        bad = []
        m = min(self.gamma0, self.gammaH) * (1 - self.tau)
        if not (0 < self.tau < 1):
            bad.append("tau must lie in (0, 1)")
        if m <= 0:
            bad.append("min(gamma0, gammaH)(1 - tau) must be positive")
        if self.Gamma <= 0:
            bad.append("Gamma must be positive")
        if self.alpha <= 0:
            bad.append("alpha must be positive")
        if m > 0 and self.Gamma > 0 and self.alpha > m / (400 * self.K * self.Gamma) * (1 + 1e-12):
            bad.append("alpha exceeds min(gamma0, gammaH)(1 - tau)/(400 K Gamma)")
        if self.beta != self.alpha:
            bad.append("beta must equal alpha")
        if not (self.gammaI < self.gammaB / 2):
            bad.append("gammaI must be below gammaB/2")
        if not (0 < self.delta < self.delta_prime < 1):
            bad.append("need 0 < delta < delta_prime < 1")
        if abs(self.S - self.epsilon1 * self.delta) > 1e-15 * self.S:
            bad.append("S must equal epsilon1 * delta")
        for name, val in (("gammaB", 0.75 * m), ("gammaI", m / 3),
                          ("gammaC", 0.25 * m), ("gammaL", m / 6)):
            if abs(getattr(self, name) - val) > 1e-12 * abs(val):
                bad.append(f"{name} inconsistent")
        if self.Kb <= 0:
            bad.append("Kb must be positive")
        return bad

    def validate(self):
        bad = self.violations()
        if bad:
            raise FamilyError("; ".join(bad))
        return self

    def as_dict(self):
        out = asdict(self)
        out["Delta"] = self.Delta
        out["Delta_prime"] = self.Delta_prime
        return out


@dataclass
class SamplingPlan:
    grid_points: int = 10 ** 6
    params: int = 5
    seed: int = 0
    outside_samples: int = 10 ** 4
    outside_n: int = 20
    gamma0_length: int = 2000


def sup_log_derivative(F, plan):
    """max of log f_a# over a low-discrepancy sphere grid and sampled a."""
    z, w = sphere_samples(plan.grid_points, plan.seed)
    eps = float(F.epsilon)
    params = np.linspace(-eps, eps, plan.params) if plan.params > 1 else [0.0]
    best = -math.inf
    for a in params:
        f = F.map_at(float(a)).with_precision(DOUBLE_BITS)
        _, _, sharp = step_arrays(f, z, w)
        best = max(best, float(np.log(np.max(sharp))))
    return best


def ledger_slope(ledger):
    """Least-squares slope of the back half of a ledger."""
    H = len(ledger) - 1
    k = np.arange(H // 2, H + 1)
    vals = np.asarray(ledger, dtype=float)[H // 2:]
    return float(np.polyfit(k, vals, 1)[0])


def critical_value_ledger(F, l, length):
    f = F.base.with_precision(DOUBLE_BITS)
    c = F.base_critical()[l][0]
    v = f.evaluate(c.at_precision(DOUBLE_BITS))
    return iterate_orbit(f, v, length).ledger


def derive_constants(F, plan=None, tau=0.5, delta=math.exp(-3),
                     delta_prime=None, epsilon1=0.1, Kb=None, alpha=None,
                     deletion_exponent=None):
    """Estimate Gamma, gamma0, gammaH and build the constants ledger."""
    plan = plan or SamplingPlan()
    if plan.grid_points <= 0 or plan.outside_samples <= 0:
        raise FamilyError("sampling plan must be non-empty")
    delta_prime = delta_prime if delta_prime is not None else math.sqrt(delta)
    Gamma = 1.1 * sup_log_derivative(F, plan)
    free = F.free_critical()
    if not free:
        raise NotCollettEckmann("family not numerically CE at base: no free critical point")
    slopes = {}
    C0 = 1.0
    for l in free:
        led = critical_value_ledger(F, l, plan.gamma0_length)
        if not np.all(np.isfinite(led)):
            raise NotCollettEckmann("family not numerically CE at base: critical orbit hits Crit")
        slopes[l] = ledger_slope(led)
    gamma0 = min(slopes.values())
    if gamma0 > 0:
        for l in free:
            led = critical_value_ledger(F, l, plan.gamma0_length)
            C0 = min(C0, min(math.exp(x - gamma0 * k) for k, x in enumerate(led)))
    crit = [c.at_precision(DOUBLE_BITS) for c, _ in F.base_critical()]
    nbhd = NeighborhoodSystem(delta_prime, delta, crit, F.critical_degrees())
    base = F.base.with_precision(DOUBLE_BITS)
    oe = outside_expansion_estimate(base, nbhd, plan.outside_n,
                                    plan.outside_samples, plan.seed)
    gammaH = math.log(oe.lam)
    if gamma0 <= 0 or gammaH <= 0:
        raise NotCollettEckmann(
            f"family not numerically CE at base (gamma0={gamma0:.4g}, gammaH={gammaH:.4g})")
    K = max(F.critical_degrees())
    m = min(gamma0, gammaH) * (1 - tau)
    alpha_max = m / (400 * K * Gamma)
    if alpha is None:
        alpha = alpha_max
    if Kb is None:
        Kb = delta ** 3
    led = ConstantsLedger(alpha=alpha, gamma0=gamma0, gammaH=gammaH, tau=tau,
                          Gamma=Gamma, K=K, Kb=Kb, C0=C0, delta=delta,
                          delta_prime=delta_prime, epsilon1=epsilon1,
                          deletion_exponent=deletion_exponent)
    led.notes = {"gamma0_by_critical": {str(k): v for k, v in slopes.items()},
                 "outside_lambda": oe.lam, "outside_C_prime": oe.C_prime,
                 "outside_kept": oe.kept, "subordinate": {str(k): v for k, v in F.subordinate().items()}}
    return led.validate()


# ------------------------------------------------------------- builtins

def lattes2(epsilon=1e-6, bits=DOUBLE_BITS):
    """f_a(z) = 1 - 2/z^2 + a."""
    base = RationalMap([-2, 0, 1], [0, 0, 1], bits)
    return RationalFamily(base, (1,), (1,), epsilon, bits, name="lattes2")


def quadratic_like(c=-2.0, epsilon=1e-6, bits=DOUBLE_BITS):
    """f_a(z) = z^2 + c + a."""
    base = RationalMap([c, 0, 1], [1], bits)
    return RationalFamily(base, (1,), (1,), epsilon, bits, name="quadratic-like")
