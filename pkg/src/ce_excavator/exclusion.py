"""Parameter exclusion over time windows [n, 2n].

Each free critical point l owns a list of partition elements (parameter
intervals).  Elements are advanced one time step at a time; outside U they
are cut so their image curve stays below the large scale S, at essential
returns they are cut to the Whitney scale, and parameters violating the
basic assumption are deleted.  Window ends apply the large-deviation cut,
blind-escape deletion and the exponent restoration check.

Image curves are tracked by three parameters (endpoints and midpoint); the
diameter is the largest pairwise chordal distance.

When the number of elements of one critical point would exceed
``max_elements`` the engine keeps, for each element being cut, a contiguous
block representative among its children.  The representative carries the
measure (``weight``) of its whole block and the block's parameter span, so
measure bookkeeping stays exact while the dynamics is followed on a
deterministic subsample.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import gmpy2

from .sphere import (DOUBLE_BITS, SpherePoint, chordal_distance, chordal_estimate, iterate_orbit,
                     real_scalar, working_precision, _log)
from .orbits import (NeighborhoodSystem, ReturnEvent, binding_length, depth,
                     host_curve, is_essential, partner_distance, whitney_bound,
                     bound_expansion_record)


class ExclusionError(RuntimeError):
    pass


class ScaleInversion(ExclusionError):
    pass


def thread_count():
    try:
        return max(1, int(os.environ.get("CE_EXCAVATOR_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items, threads=None):
    """Ordered map; results are identical for any thread count."""
    items = list(items)
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------------ orbits

class ParamOrbit:
    """Critical orbit of one parameter with full history.

    points[t] = xi_t(a); logs[t] = log|Df^t(v)| = sum_{j=1..t} log f#(xi_j).
    """

    __slots__ = ("a", "f", "points", "logs", "_next")

    def __init__(self, a, f, start):
        self.a = a
        self.f = f
        self.points = [start]
        self.logs = [0.0]
        nxt, _ = f.evaluate_with_derivative(start)
        self._next = nxt

    @property
    def time(self):
        return len(self.points) - 1

    def step(self):
        p = self._next
        nxt, s = self.f.evaluate_with_derivative(p)
        self.points.append(p)
        self.logs.append(self.logs[-1] + _log(s))
        self._next = nxt

    def advance_to(self, t):
        while self.time < t:
            self.step()
        return self


class OrbitBank:
    """Parameter orbits and partner orbits for one family, keyed by parameter."""

    def __init__(self, F, l):
        self.F = F
        self.l = l
        self.orbits = {}
        self.partners = {}
        self.maps = {}
        self.crit = {}

    def map(self, a):
        f = self.maps.get(a)
        if f is None:
            f = self.F.map_at(a)
            self.maps[a] = f
        return f

    def critical(self, a):
        c = self.crit.get(a)
        if c is None:
            c = self.F.critical_set(a)
            self.crit[a] = c
        return c

    def orbit(self, a, t):
        o = self.orbits.get(a)
        if o is None:
            o = ParamOrbit(a, self.map(a), self.F.critical_point(self.l, a))
            self.orbits[a] = o
        return o.advance_to(t)

    def partner(self, k, a, j):
        key = (k, a)
        o = self.partners.get(key)
        if o is None:
            o = ParamOrbit(a, self.map(a), self.F.critical_point(k, a))
            self.partners[key] = o
        return o.advance_to(j)

    def prune(self, keep):
        keep = set(keep)
        for a in [a for a in self.orbits if a not in keep]:
            del self.orbits[a]
        for key in [key for key in self.partners if key[1] not in keep]:
            del self.partners[key]
        for a in [a for a in self.maps if a not in keep]:
            del self.maps[a]
            self.crit.pop(a, None)


# ---------------------------------------------------------------- elements

@dataclass
class Binding:
    nu: int
    component: int
    event: ReturnEvent
    host: list = None          # host-curve orbits (point lists from nu)
    host_map: object = None


@dataclass
class PartitionElement:
    lo: object
    hi: object
    l: int
    weight: float
    span: tuple
    created: int = 0
    history: tuple = ()
    exponent_ledger: tuple = ()
    escape_records: tuple = ()
    T_accumulator: int = 0
    status: str = "active"
    reason: str = None
    deleted_at: int = None
    binding: Binding = None
    last_free: int = None
    audit: int = None

    @property
    def mid(self):
        # endpoints never change after construction, so the midpoint is cached
        m = self.__dict__.get("_mid")
        if m is None:
            with working_precision(_bits(self.lo)):
                m = self.__dict__["_mid"] = (self.lo + self.hi) / 2
        return m

    @property
    def length(self):
        return float(self.hi - self.lo)

    @property
    def retained(self):
        return self.status in ("active", "escaped")

    def params(self):
        return (self.lo, self.mid, self.hi)

    def last_return(self):
        return self.history[-1].time if self.history else -1


def _bits(x):
    return x.precision if isinstance(x, gmpy2.mpfr) else DOUBLE_BITS


@dataclass
class EscapeRecord:
    nu: int
    deep: bool
    depth: int
    start: int = None          # nu + p, known when the bound period ends
    E: float = None            # escape time, -inf when deleted first
    capped: bool = False


def _clone(el, lo, hi, weight, span):
    return PartitionElement(
        lo, hi, el.l, weight, span, el.created, el.history, el.exponent_ledger,
        tuple(EscapeRecord(**vars(r)) for r in el.escape_records),
        el.T_accumulator, el.status, el.reason, el.deleted_at, el.binding,
        el.last_free, el.audit)


# ----------------------------------------------------------- curve geometry

@dataclass
class Geometry:
    points: tuple
    dist: float
    component: int
    diam: float
    dists: tuple


def _geometry(bank, el, t):
    pts = []
    dists = []
    best = (3.0, -1)
    for a in el.params():
        p = bank.orbit(a, t).points[t]
        pts.append(p)
        crit = bank.critical(a)
        d, i = 3.0, -1
        for k, c in enumerate(crit):
            s = chordal_distance(p, c)
            if s < d:
                d, i = s, k
        dists.append(d)
        if d < best[0]:
            best = (d, i)
    diam = max(chordal_distance(pts[0], pts[1]), chordal_distance(pts[0], pts[2]),
               chordal_distance(pts[1], pts[2]))
    return Geometry(tuple(pts), best[0], best[1], diam, tuple(dists))


def curve_diameter(points):
    """Largest pairwise chordal distance of a sampled curve."""
    best = 0.0
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            best = max(best, chordal_distance(points[i], points[j]))
    return best


# ----------------------------------------------------------------- reports

@dataclass
class ExclusionReport:
    window: tuple
    input_measure: float
    retained: float
    deleted_basic: float = 0.0
    deleted_large_deviation: float = 0.0
    deleted_blind: float = 0.0
    deleted_star: float = 0.0
    deleted_exponent: float = 0.0
    deleted_precision: float = 0.0
    return_histogram: dict = field(default_factory=dict)
    audits: dict = field(default_factory=dict)

    def deletions(self):
        return [self.deleted_basic, self.deleted_large_deviation, self.deleted_blind,
                self.deleted_star, self.deleted_exponent, self.deleted_precision]

    def balance_error(self):
        lhs = math.fsum([self.retained] + self.deletions())
        if self.input_measure == 0:
            return abs(lhs)
        return abs(lhs - self.input_measure) / self.input_measure


# ------------------------------------------------------------- the engine

class CriticalEngine:
    """Partition state and time stepping for one free critical point."""

    def __init__(self, F, l, constants, nbhd, bits, max_elements=1024,
                 partner_params="curve", q_max=2.0):
        self.F = F
        self.l = l
        self.c = constants
        self.nbhd = nbhd
        self.bits = bits
        self.max_elements = max_elements
        self.q_max = q_max
        self.bank = OrbitBank(F, l)
        eps = F.epsilon
        self.omega0 = (-eps, eps)
        self.omega0_len = float(2 * eps)
        self.floor = self.omega0_len * 2.0 ** -(bits - 8)
        self.degrees = F.critical_degrees()
        self.chain = F.subordinate()
        self.time = 0
        el = PartitionElement(-eps, eps, l, self.omega0_len,
                              (-float(eps), float(eps)), 0)
        self.elements = [el]
        self.deleted = []
        self.start_time = None
        self.start_partition = None
        self.log = []
        self.audit_records = []        # [nu, weight, deleted]
        self.events = []               # free returns with diagnostics
        self.bound_records = []
        self.doubling = []
        self.escapes = []
        self.cap_binds = []
        self.whitney_lower_misses = 0
        self.sampled = False
        self._pending = {k: 0.0 for k in ("basic", "precision")}

    # --- bookkeeping -------------------------------------------------------
    def active_measure(self):
        return math.fsum(e.weight for e in self.elements)

    def _delete(self, el, reason, t):
        el.status = "deleted" if reason != "blind" else "blind-deleted"
        el.reason = reason
        el.deleted_at = t
        for r in el.escape_records:
            if r.E is None:
                r.E = -math.inf
        self.deleted.append(el)

    def _register_basic_deletion(self, el, t):
        if el.audit is not None:
            self.audit_records[el.audit][2] += el.weight
        self._pending["basic"] += el.weight
        self._delete(el, "basic-assumption", t)

    # --- splitting ---------------------------------------------------------
    def _children(self, el, k, keep=None):
        """Cut ``el`` into k equal parts; ``keep`` optional list of
        (first, last) child-index blocks, each replaced by its middle child."""
        lo, hi = el.lo, el.hi
        s0, s1 = el.span
        if keep is None:
            keep = [(i, i) for i in range(k)]
        cuts = {0: lo, k: hi}
        with working_precision(self.bits):
            for i, j in keep:
                m = (i + j) // 2
                for c in (m, m + 1):
                    if c not in cuts:
                        cuts[c] = lo + (hi - lo) * c / k

        def spans(i):
            return s1 if i == k else s0 + (s1 - s0) * i / k
        out = []
        used = 0.0
        for n, (i, j) in enumerate(keep):
            m = (i + j) // 2
            if n == len(keep) - 1:
                w = el.weight - used
            else:
                w = el.weight * (j - i + 1) / k
                used += w
            out.append(_clone(el, cuts[m], cuts[m + 1], w, (spans(i), spans(j + 1))))
        return out

    def _too_narrow(self, el, k):
        return el.length / k < self.floor

    EQUAL_TRIES = 3

    def _split_to_scale(self, el, t, bound_fn, quota=None):
        """Least-count equal split so each child's curve satisfies
        diam <= bound_fn(geometry); recursion repairs nonlinear children."""
        g = _geometry(self.bank, el, t)
        limit = bound_fn(g)
        if g.diam <= limit:
            return [el]
        k = max(2, math.ceil(g.diam / limit))
        if self._too_narrow(el, k):
            self._pending["precision"] += el.weight
            self._delete(el, "precision", t)
            return []
        # least count of equal parts; a curved image can need a few more
        # than diam/limit, after which stragglers are cut recursively
        for extra in range(self.EQUAL_TRIES):
            kk = k + extra
            keep = None
            if quota is not None and quota < kk:
                keep = _blocks(kk, quota)
            kids = self._children(el, kk, keep)
            geos = [_geometry(self.bank, kid, t) for kid in kids]
            if all(gk.diam <= bound_fn(gk) for gk in geos):
                break
        if keep is not None:
            self.sampled = True
        out = []
        for kid in kids:
            out.extend(self._split_to_scale(kid, t, bound_fn, None))
        return out

    def _carve(self, el, t):
        """Delete the parts of ``el`` violating the basic assumption at t.

        Violating elements are bisected until each offending piece lies
        inside the threshold ball or is below 1/16 of the threshold, so only
        those pieces are removed.
        """
        thr = self.c.Kb * math.exp(-self.c.deletion_exponent * t)
        g = _geometry(self.bank, el, t)
        if g.dist >= thr:
            return [el]
        if max(g.dists) < thr or g.diam <= thr / 16 or self._too_narrow(el, 2):
            self._register_basic_deletion(el, t)
            return []
        out = []
        for kid in self._children(el, 2):
            out.extend(self._carve(kid, t))
        return out

    # --- one time step -------------------------------------------------------
    def step(self):
        t = self.time + 1
        params = []
        for el in self.elements:
            params.extend(el.params())
        for a in params:
            self.bank.orbit(a, 0)
        parallel_map(lambda a: self.bank.orbit(a, t), list(dict.fromkeys(params)))
        self.time = t
        pieces = []
        plans = []
        for el in self.elements:
            in_bound = False
            if el.binding is not None:
                in_bound = self._binding_holds(el, t)
                if not in_bound:
                    self._end_binding(el, t)
                    in_bound = self._chain_continues(el, t)
            # the basic assumption is enforced at free times
            for piece in ([el] if in_bound else self._carve(el, t)):
                pieces.append(piece)
                plans.append(self._classify(piece, t, in_bound))
        self.elements = pieces
        # global quota for cuts at the large scale
        n_keep = sum(1 for p in plans if p[0] == "keep")
        wanted = sum(p[1] for p in plans if p[0] == "scale")
        room = self.max_elements - n_keep - sum(1 for p in plans if p[0] == "return")
        factor = None
        if wanted > 0 and wanted > room:
            factor = max(room, 1) / wanted
        new = []
        for el, plan in zip(self.elements, plans):
            kind = plan[0]
            if kind == "keep":
                new.append(el)
            elif kind == "scale":
                quota = None if factor is None else max(1, int(plan[1] * factor))
                new.extend(self._split_to_scale(el, t, lambda g: self.c.S, quota))
            elif kind == "return":
                new.extend(self._essential_return(el, t, plan[1]))
        new = [e for e in new if e.retained]
        new.sort(key=lambda e: e.lo)
        self.elements = new
        if self.start_time is None and (any(p[0] in ("scale", "return") for p in plans)):
            self.start_time = t
            self.start_partition = [(e.lo, e.hi) for e in new]
        keep = set()
        for el in self.elements:
            keep.update(el.params())
        self.bank.prune(keep)

    def _classify(self, el, t, in_bound):
        """Decide what happens to ``el`` at time t; records events that do
        not change the partition."""
        c = self.c
        g = _geometry(self.bank, el, t)
        zone = self.nbhd.zone(g.dist)
        if in_bound:
            if zone != "outside":
                ev = ReturnEvent(t, g.component, depth(g.dist), g.dist, "bound",
                                 None, 0, 0, g.diam)
                el.history = el.history + (ev,)
            if zone in ("outside", "pseudo") and g.diam > c.S:
                return ("scale", math.ceil(g.diam / c.S))
            return ("keep",)
        # free time: escape position
        if g.diam >= c.S:
            self._resolve_escapes(el, t)
        if zone == "outside":
            if g.diam > c.S:
                return ("scale", math.ceil(g.diam / c.S))
            return ("keep",)
        if zone == "pseudo":
            ev = ReturnEvent(t, g.component, depth(g.dist), g.dist, "pseudo",
                             None, 0, 0, g.diam)
            el.history = el.history + (ev,)
            self._start_binding(el, t, g, ev, host=False)
            if g.diam > c.S:
                return ("scale", math.ceil(g.diam / c.S))
            return ("keep",)
        # free return into U
        self._doubling_audit(el, t)
        if is_essential(g.diam, g.dist):
            return ("return", g)
        ev = self._return_event(el, t, g, "inessential")
        self._start_binding(el, t, g, ev, host=True)
        return ("keep",)

    def _return_event(self, el, t, g, kind):
        r = depth(g.dist)
        dclass = "deep" if g.dist <= self.nbhd.delta2 else "shallow"
        ev = ReturnEvent(t, g.component, r, g.dist, kind, dclass, 0, 0, g.diam)
        prev = [e for e in el.history if e.kind in ("essential", "inessential")]
        if prev:
            last = prev[-1]
            last.free_period = t - (last.time + last.bound_period)
        el.history = el.history + (ev,)
        el.last_free = t
        # checkpoint at the free time just before the return; the return
        # itself starts a bound period whose loss is repaid by its end
        gamma = self._exponent(el, t - 1)
        el.exponent_ledger = el.exponent_ledger + ((t, gamma),)
        self.events.append((el.l, ev))
        if el.status == "escaped":
            el.status = "active"
        return ev

    def _exponent(self, el, t):
        vals = [self.bank.orbit(a, t).logs[t] / t for a in el.params()] if t > 0 else [0.0]
        return min(vals)

    def _essential_return(self, el, t, g):
        """Refine at an essential return, delete violators, start bindings."""
        thr = self.c.Kb * math.exp(-self.c.deletion_exponent * t)

        def whitney(gk):
            # pieces closer than the deletion threshold are carved below
            return whitney_bound(max(gk.dist, thr))
        kids = self._split_to_scale(el, t, whitney)
        out = []
        carved = []
        for kid in kids:
            carved.extend(self._carve(kid, t))
        # one audit record per refined element: deletions in its descendants
        # up to their next essential return are charged against it
        self.audit_records.append([t, math.fsum(k.weight for k in carved), 0.0])
        record = len(self.audit_records) - 1
        for kid in carved:
            gk = _geometry(self.bank, kid, t)
            kind = "essential" if is_essential(gk.diam, gk.dist) else "inessential"
            if gk.diam < 0.5 * whitney_bound(gk.dist):
                self.whitney_lower_misses += 1
            ev = self._return_event(kid, t, gk, kind)
            kid.audit = record
            if kind == "essential":
                if ev.depth_class == "deep":
                    rec = EscapeRecord(t, True, ev.depth)
                else:
                    rec = EscapeRecord(t, False, ev.depth, t, 0)
                kid.escape_records = kid.escape_records + (rec,)
            self._start_binding(kid, t, gk, ev, host=(kind == "inessential"))
            out.append(kid)
        return out

    # --- bound periods -----------------------------------------------------
    def _start_binding(self, el, t, g, ev, host):
        hosts = None
        hmap = None
        if host:
            a = el.mid
            lo_pt, hi_pt = g.points[0], g.points[2]
            direction = complex(hi_pt.affine() - lo_pt.affine()) if (
                lo_pt.affine() is not None and hi_pt.affine() is not None) else 1.0
            pts = host_curve(g.points[1], direction, max(ev.depth, 1))
            hmap = self.bank.map(a)
            hosts = [[p] for p in pts]
        el.binding = Binding(t, g.component, ev, hosts, hmap)

    def _binding_holds(self, el, t):
        b = el.binding
        j = t - b.nu
        beta = self.c.beta
        seqs = [self.bank.orbit(a, t).points[t] for a in el.params()]
        if b.host:
            for h in b.host:
                while len(h) <= j:
                    h.append(b.host_map.evaluate(h[-1]))
                seqs.append(h[j])
        bound = math.exp(-beta * j)
        for a in el.params():
            q = self.bank.partner(b.component, a, j).points[j]
            tol = bound * partner_distance(q, self.bank.critical(a))
            for z in seqs:
                # the double-precision estimate decides unless it is within
                # rounding of the tolerance
                sep = chordal_estimate(z, q)
                if abs(sep - tol) <= 1e-12 * max(tol, 1e-300) + 1e-15:
                    sep = chordal_distance(z, q)
                if sep > tol:
                    return False
        return True

    def _chain_continues(self, el, t):
        """A visit near a critical point c followed by a visit near f(c), with
        f(c) critical for every parameter, is one return: the second visit
        rebinds to the orbit of f(c) instead of counting as a free return."""
        if not self.chain:
            return False
        prev = _geometry(self.bank, el, t - 1)
        if self.nbhd.zone(prev.dist) not in ("deep", "shallow") or prev.component not in self.chain:
            return False
        g = _geometry(self.bank, el, t)
        k = self.chain[prev.component]
        if g.component != k or self.nbhd.zone(g.dist) == "outside":
            return False
        ev = ReturnEvent(t, k, depth(g.dist), g.dist, "bound", None, 0, 0, g.diam)
        el.binding = Binding(t, k, ev)
        return True

    @staticmethod
    def _episode_start(b):
        # a chained binding continues the return one step earlier
        return b.nu - 1 if b.event.kind == "bound" else b.nu

    def _end_binding(self, el, t):
        """The binding failed at time t, so p = t - nu - 1."""
        b = el.binding
        p = t - b.nu - 1
        b.event.bound_period = p
        el.binding = None
        if b.event.kind in ("essential", "inessential"):
            nu = b.nu
            a = el.mid
            o = self.bank.orbit(a, t)
            log_growth = o.logs[nu + p - 1] - o.logs[nu - 1] if p > 0 else 0.0
            gamma = max(o.logs[nu] / nu if nu > 0 else self.c.gamma0, self.c.gammaI)
            rec = bound_expansion_record(nu, p, b.event.depth,
                                         self.degrees[b.component], gamma,
                                         log_growth, self.c.Gamma)
            self.bound_records.append((el.l, rec))
            for r in el.escape_records:
                if r.nu == nu and r.deep and r.start is None:
                    r.start = nu + p

    # --- audits ------------------------------------------------------------
    def _doubling_audit(self, el, t):
        if el.last_free is None:
            return
        nu = el.last_free
        o_lo = self.bank.orbit(el.lo, t)
        o_hi = self.bank.orbit(el.hi, t)
        before = chordal_distance(o_lo.points[nu], o_hi.points[nu])
        after = chordal_distance(o_lo.points[t], o_hi.points[t])
        self.doubling.append((el.l, nu, t, before, after, after >= 2 * before))

    def _resolve_escapes(self, el, t):
        for r in el.escape_records:
            if r.E is None and r.start is not None and t >= r.start:
                r.E = t - r.start
                self.escapes.append((el.l, r.nu, r.depth, r.E))
                el.status = "escaped"

    # --- windows -----------------------------------------------------------
    def large_deviation(self, n):
        """T_n cut and blind-escape deletion at the end of [n, 2n]."""
        c = self.c
        cut = 0.0
        blind = 0.0
        survivors = []
        for el in self.elements:
            T = 0
            last = None
            for r in el.escape_records:
                if not (n <= r.nu <= 2 * n):
                    continue
                if r.E is None:
                    if r.start is not None and r.start <= 2 * n:
                        E = 2 * n - r.start
                        r.capped = True
                        self.cap_binds.append((el.l, r.nu, E))
                    else:
                        E = 0
                else:
                    E = r.E
                if E == -math.inf:
                    continue
                last = (r, E)
                T += E
            el.T_accumulator = T
            if T >= c.tau * n:
                cut += el.weight
                self._delete(el, "large-deviation", 2 * n)
                continue
            if last is not None and last[0].E is None and last[1] >= 6 * c.h * c.alpha * n:
                blind += el.weight
                self._delete(el, "blind", 2 * n)
                continue
            survivors.append(el)
        self.elements = survivors
        return cut, blind

    def restoration(self, n):
        """Delete survivors whose exponent is not restored at 2n."""
        c = self.c
        lost = 0.0
        survivors = []
        for el in self.elements:
            # elements still bound at 2n are judged at their last free time
            t = 2 * n if el.binding is None else self._episode_start(el.binding) - 1
            logs = [self.bank.orbit(a, t).logs[t] for a in el.params()]
            ok = min(logs) + math.log(c.C0) >= c.gammaB * t
            dips = [g for (_, g) in el.exponent_ledger if g < c.gammaI - 4 * c.K * c.alpha]
            if ok and not dips:
                survivors.append(el)
            else:
                lost += el.weight
                self._delete(el, "exponent", 2 * n)
        self.elements = survivors
        return lost

    def distortion_audit(self, t):
        worst = 0.0
        for el in self.elements:
            la = self.bank.orbit(el.lo, t).logs[t]
            lb = self.bank.orbit(el.hi, t).logs[t]
            worst = max(worst, abs(math.expm1(la - lb)))
        return worst

    def weak_distortion_audit(self, N, t):
        """Largest Q with ratio in [Q^-k, Q^k] over active elements."""
        worst = 1.0
        k = t - N
        if k <= 0 or N < 1:
            return worst
        for el in self.elements:
            o_a = self.bank.orbit(el.lo, t)
            o_b = self.bank.orbit(el.hi, t)
            before = chordal_distance(o_a.points[N], o_b.points[N])
            after = chordal_distance(o_a.points[t], o_b.points[t])
            if before == 0 or after == 0:
                continue
            deriv = math.exp(o_a.logs[t - 1] - o_a.logs[N - 1])
            ratio = after / (deriv * before)
            worst = max(worst, max(ratio, 1 / ratio) ** (1 / k))
        return worst

    def take_pending(self):
        out = dict(self._pending)
        for k in self._pending:
            self._pending[k] = 0.0
        return out


def _blocks(k, m):
    """Split range(k) into m contiguous blocks of near-equal size."""
    m = min(m, k)
    out = []
    start = 0
    for i in range(m):
        size = k // m + (1 if i < k % m else 0)
        out.append((start, start + size - 1))
        start += size
    return out


# ------------------------------------------------------------ operations

def start_phase(F, constants, l, nbhd=None, bits=None, horizon=500, max_elements=1024):
    """Iterate omega_0 until its curve first reaches the large scale outside
    U or the essential-return scale inside U.  Returns (N_l, partition)."""
    bits = bits or F.bits
    nbhd = nbhd or neighborhoods(F, constants)
    eng = CriticalEngine(F, l, constants, nbhd, bits, max_elements)
    while eng.start_time is None:
        if eng.time >= horizon:
            raise ExclusionError("horizon exhausted: epsilon too large or family too tame")
        eng.step()
        if not eng.elements:
            raise ExclusionError("every parameter deleted during the start phase")
    return eng.start_time, eng.elements


def neighborhoods(F, constants, bits=None):
    crit = F.critical_set(0)
    return NeighborhoodSystem(constants.delta_prime, constants.delta, crit,
                              F.critical_degrees())


def classify_and_refine(element, nu, engine):
    """Cut ``element`` at time ``nu`` to the scale its zone requires."""
    g = _geometry(engine.bank, element, nu)
    zone = engine.nbhd.zone(g.dist)
    if zone in ("deep", "shallow"):
        if not is_essential(g.diam, g.dist):
            return [element]
        return engine._split_to_scale(element, nu, lambda gk: whitney_bound(gk.dist))
    return engine._split_to_scale(element, nu, lambda gk: engine.c.S)


def delete_basic_violators(elements, constants, up_to, min_dist):
    """Split ``elements`` by the basic assumption.

    ``min_dist(element, t)`` returns the curve's distance to Crit at time t.
    Returns (survivors, deleted measure, deletions) with deletions a list of
    (element, time).
    """
    survivors, deleted = [], []
    for el in elements:
        hit = None
        for t in range(1, up_to + 1):
            if min_dist(el, t) < constants.Kb * math.exp(-constants.deletion_exponent * t):
                hit = t
                break
        if hit is None:
            survivors.append(el)
        else:
            el.status, el.reason, el.deleted_at = "deleted", f"basic-assumption@{hit}", hit
            deleted.append((el, hit))
    return survivors, math.fsum(e.weight for e, _ in deleted), deleted


def escape_time(records, nu):
    """Escape time recorded for the return at ``nu`` (0 for shallow,
    -inf when deleted before escaping, None while pending)."""
    for r in records:
        if r.nu == nu:
            if not r.deep:
                return 0
            return r.E
    return None


def large_deviation_cut(elements, window, constants, T_values, final_escapes=None):
    """Delete elements with T_n >= tau n and blind escapes >= 6 h alpha n.

    ``T_values`` and ``final_escapes`` are per-element sequences aligned
    with ``elements``.  Returns (survivors, deleted measure, blind measure).
    """
    n = window[0]
    cut = blind = 0.0
    survivors = []
    for i, el in enumerate(elements):
        if T_values[i] >= constants.tau * n:
            cut += el.weight
            el.status, el.reason = "deleted", "large-deviation"
        elif final_escapes is not None and final_escapes[i] is not None and \
                final_escapes[i] >= 6 * constants.h * constants.alpha * n:
            blind += el.weight
            el.status, el.reason = "blind-deleted", "blind"
        else:
            survivors.append(el)
    return survivors, cut, blind


def star_upgrade(omega, deleted_other, n, constants):
    """Remove whole elements of ``omega`` meeting elements of other critical
    points deleted at times in [alpha_hat n, 2 alpha_hat n].

    ``deleted_other`` holds (lo, hi, time) triples.  A fine element wider
    than the coarse element it meets is a scale inversion.
    Returns (survivors, removed measure).
    """
    lo_t = constants.alpha_hat * n
    hi_t = 2 * constants.alpha_hat * n
    coarse = sorted((float(a), float(b)) for a, b, t in deleted_other if lo_t <= t <= hi_t)
    if not coarse:
        return list(omega), 0.0
    survivors = []
    removed = 0.0
    for el in omega:
        a, b = float(el.lo), float(el.hi)
        hit = None
        for (c0, c1) in coarse:
            if a < c1 and c0 < b:
                hit = (c0, c1)
                break
        if hit is None:
            survivors.append(el)
            continue
        if (b - a) > (hit[1] - hit[0]):
            raise ScaleInversion(
                f"element [{a}, {b}] is wider than the deleted element [{hit[0]}, {hit[1]}]")
        removed += el.weight
        el.status, el.reason = "deleted", "star"
    return survivors, removed


def history_count(R, s, Delta):
    """(number of (r_1..r_s) with r_j >= Delta and sum R, binomial bound
    C(R+s-1, s-1)), computed by dynamic programming in exact integers."""
    if R < 0 or s < 0:
        raise ValueError("R and s must be non-negative")
    ways = [1] + [0] * R
    for _ in range(s):
        nxt = [0] * (R + 1)
        for total in range(R + 1):
            if ways[total]:
                for r in range(Delta, R - total + 1):
                    nxt[total + r] += ways[total]
        ways = nxt
    return ways[R], history_bound(R, s)


def history_bound(R, s):
    if s == 0:
        return 1 if R == 0 else 0
    return math.comb(R + s - 1, s - 1)


def history_weight(R, s, Delta):
    """Histories weighted by their partition choices.

    Each depth r_j admits about r_j^2 sub-intervals of the Whitney scale, so
    a history (r_1..r_s) stands for prod r_j^2 partition paths.  Returns
    (sum over histories of prod r_j^2, C(R+s-1, s-1) * max prod r_j^2).
    """
    if R < 0 or s < 0:
        raise ValueError("R and s must be non-negative")
    # total[x] and best[x]: weighted count and largest weight over prefixes summing to x
    total = [1] + [0] * R
    best = [1] + [0] * R
    for _ in range(s):
        nt = [0] * (R + 1)
        nb = [0] * (R + 1)
        for x in range(R + 1):
            if total[x]:
                for r in range(Delta, R - x + 1):
                    nt[x + r] += total[x] * r * r
                    nb[x + r] = max(nb[x + r], best[x] * r * r)
        total, best = nt, nb
    return total[R], history_bound(R, s) * best[R]


def history_count_by_partitions(R, s, Delta, weight=None):
    """Independent count: enumerate multisets of parts and count their
    orderings with a multinomial coefficient.  ``weight(parts)`` optionally
    weights each history."""
    if s == 0:
        return 1 if R == 0 else 0
    total = 0

    def parts(remaining, slots, largest, acc):
        nonlocal total
        if slots == 0:
            if remaining == 0:
                counts = {}
                for x in acc:
                    counts[x] = counts.get(x, 0) + 1
                m = math.factorial(s)
                for v in counts.values():
                    m //= math.factorial(v)
                total += m if weight is None else m * weight(acc)
            return
        for x in range(min(largest, remaining - Delta * (slots - 1)), Delta - 1, -1):
            acc.append(x)
            parts(remaining - x, slots - 1, x, acc)
            acc.pop()

    parts(R, s, R, [])
    return total


def history_weight_by_partitions(R, s, Delta):
    return history_count_by_partitions(R, s, Delta, lambda acc: math.prod(x * x for x in acc))


def measure_retained(sets, omega0=None):
    """Measure of the intersection over critical points of the retained sets,
    relative to |omega_0|.

    ``sets`` maps each critical index to (span_lo, span_hi, weight) triples;
    each element has density weight / span length on its span and the
    intersection is the integral of the product of densities (exactly the
    interval intersection when nothing was subsampled).
    """
    if isinstance(sets, RunState):
        return state_retained(sets)
    lo0, hi0 = float(omega0[0]), float(omega0[1])
    total = hi0 - lo0
    if not sets:
        return 1.0
    cuts = {lo0, hi0}
    for items in sets.values():
        for a, b, _ in items:
            cuts.add(float(a))
            cuts.add(float(b))
    cuts = sorted(cuts)
    dens = []
    for items in sets.values():
        items = sorted(((float(a), float(b), w) for a, b, w in items))
        dens.append(items)
    acc = []
    ptr = [0] * len(dens)
    for x0, x1 in zip(cuts[:-1], cuts[1:]):
        if x1 <= x0:
            continue
        xm = 0.5 * (x0 + x1)
        prod = 1.0
        for i, items in enumerate(dens):
            while ptr[i] < len(items) and items[ptr[i]][1] <= xm:
                ptr[i] += 1
            if ptr[i] < len(items) and items[ptr[i]][0] <= xm:
                a, b, w = items[ptr[i]]
                prod *= w / (b - a) if b > a else 0.0
            else:
                prod = 0.0
                break
        acc.append(prod * (x1 - x0))
    return math.fsum(acc) / total


# -------------------------------------------------------------- full runs

@dataclass
class RunState:
    engines: dict
    constants: object
    windows: list
    reports: list = field(default_factory=list)
    start: dict = field(default_factory=dict)
    horizon: int = None
    dropped: list = field(default_factory=list)


def certified_horizon(F, l, max_time, bits):
    """Shortest validated horizon over the orbits of -eps, 0 and eps."""
    best = max_time
    for a in (-F.epsilon, 0, F.epsilon):
        f = F.map_at(a)
        c = F.critical_point(l, a)
        frag = iterate_orbit(f, c, max_time, validate=True)
        best = min(best, frag.horizon)
    return best


def run_window(state, n, threads=None):
    """Advance every engine from n to 2n and emit the window report."""
    c = state.constants
    engines = state.engines
    report_input = {}
    # star upgrade: other critical points' deletions on the alpha_hat scale
    star_removed = 0.0
    for l, eng in engines.items():
        report_input[l] = eng.active_measure()
    for l, eng in engines.items():
        others = [(d.lo, d.hi, d.deleted_at) for k, e in engines.items() if k != l
                  for d in e.deleted if d.reason == "basic-assumption"]
        survivors, removed = star_upgrade(eng.elements, others, n, c)
        for el in eng.elements:
            if el.status == "deleted" and el.reason == "star":
                eng.deleted.append(el)
        eng.elements = survivors
        star_removed += removed
        eng._star = removed
    for t in range(n + 1, 2 * n + 1):
        for eng in engines.values():
            if eng.time < t:
                eng.step()
    entries = {}
    for l, eng in engines.items():
        pend = eng.take_pending()
        cut, blind = eng.large_deviation(n)
        exp_lost = eng.restoration(n)
        retained = eng.active_measure()
        rep = ExclusionReport((n, 2 * n), report_input[l], retained,
                              deleted_basic=pend["basic"],
                              deleted_large_deviation=cut, deleted_blind=blind,
                              deleted_star=getattr(eng, "_star", 0.0),
                              deleted_exponent=exp_lost,
                              deleted_precision=pend["precision"])
        rep.return_histogram = _histogram(eng, n)
        rep.audits = window_audits(eng, n, rep)
        entries[l] = rep
    state.reports.append(entries)
    return state, entries


def _histogram(eng, n):
    hist = {}
    for l, ev in eng.events:
        if n < ev.time <= 2 * n:
            hist[ev.depth] = hist.get(ev.depth, 0) + 1
    return {str(k): hist[k] for k in sorted(hist)}


def window_audits(eng, n, rep):
    c = eng.c
    lo, hi = n, 2 * n
    ba = []
    for nu, w, dele in eng.audit_records:
        if w > 0:
            frac = dele / w
            ba.append({"nu": nu, "fraction": frac, "bound": math.exp(-c.alpha * nu),
                       "ok": frac <= math.exp(-c.alpha * nu)})
    inp = rep.input_measure if rep.input_measure > 0 else 1.0
    ld_frac = rep.deleted_large_deviation / inp
    ld_bound = math.exp(n * (c.eps2 - c.theta * c.tau))
    blind_frac = rep.deleted_blind / inp
    blind_bound = math.exp(-c.q_blind * n)
    star_frac = rep.deleted_star / inp
    star_bound = 4 * math.exp(-c.alpha * c.alpha_hat * n)
    dbl = [d for d in eng.doubling if lo < d[2] <= hi]
    bnd = [r for _, r in eng.bound_records if lo < r.time <= hi]
    esc = [e for e in eng.escapes if lo < e[1] <= hi]
    qtime = [{"nu": nu, "r": r, "E": E, "ok": E <= 2 * c.h * r} for _, nu, r, E in esc]
    ach_beta = None
    if rep.input_measure > 0:
        lost = 1 - rep.retained / rep.input_measure
        ach_beta = math.inf if lost <= 0 else -math.log(lost) / n
    return {
        "basic_assumption": {"records": ba, "ok": all(x["ok"] for x in ba)},
        "large_deviation": {"fraction": ld_frac, "bound": ld_bound, "ok": ld_frac <= ld_bound},
        "blind": {"fraction": blind_frac, "bound": blind_bound, "ok": blind_frac <= blind_bound},
        "star": {"fraction": star_frac, "bound": star_bound, "ok": star_frac <= star_bound},
        "doubling": {"total": len(dbl), "passed": sum(1 for d in dbl if d[5]),
                     "violations": [{"from": d[1], "to": d[2], "before": d[3], "after": d[4]}
                                    for d in dbl if not d[5]]},
        "bound_expansion": {"total": len(bnd), "passed": sum(1 for r in bnd if r.ok),
                            "violations": [{"time": r.time, "p": r.p, "r": r.r,
                                            "lower_ok": r.lower_ok, "upper_ok": r.upper_ok,
                                            "growth_ok": r.growth_ok} for r in bnd if not r.ok]},
        "q_time": {"records": qtime, "ok": all(x["ok"] for x in qtime)},
        "distortion_max": eng.distortion_audit(2 * n),
        "weak_distortion_Q": eng.weak_distortion_audit(n, 2 * n),
        "weak_distortion_ok": eng.weak_distortion_audit(n, 2 * n) <= eng.q_max,
        "escape_caps": [{"nu": nu, "E": E} for _, nu, E in eng.cap_binds if lo <= nu <= hi],
        "balance_error": rep.balance_error(),
        "achieved_beta": ach_beta,
        "sampled": eng.sampled,
        "whitney_lower_misses": eng.whitney_lower_misses,
    }


def run_exclusion(F, constants, windows, bits=None, max_elements=1024,
                  window_start=None, q_max=2.0, max_time=None):
    """Start phase plus ``windows`` windows [n, 2n] from n = N_1 (or from
    ``window_start``).  Windows ending past ``max_time`` or past the
    certified horizon are dropped and listed in ``state.dropped``."""
    bits = bits or F.bits
    nbhd = neighborhoods(F, constants)
    engines = {l: CriticalEngine(F, l, constants, nbhd, bits, max_elements, q_max=q_max)
               for l in F.free_critical()}
    state = RunState(engines, constants, [])
    # start phase for every free critical point
    horizon_cap = max_time if max_time is not None else 600
    while any(e.start_time is None for e in engines.values()):
        for eng in engines.values():
            if eng.start_time is None:
                if eng.time >= horizon_cap:
                    raise ExclusionError("horizon exhausted: epsilon too large or family too tame")
                eng.step()
    N = {l: e.start_time for l, e in engines.items()}
    state.start = N
    N1 = min(N.values())
    n0 = window_start or N1
    state.windows = [n0 * 2 ** w for w in range(windows)]
    if max_time is not None:
        state.dropped += [n for n in state.windows if 2 * n > max_time]
        state.windows = [n for n in state.windows if 2 * n <= max_time]
    if state.windows:
        end = 2 * state.windows[-1]
        hor = min(certified_horizon(F, l, end, bits) for l in engines)
        state.horizon = hor
        state.dropped += [n for n in state.windows if 2 * n > hor]
        state.windows = [n for n in state.windows if 2 * n <= hor]
    # bring every engine to the first window start
    first = state.windows[0] if state.windows else max(e.time for e in engines.values())
    for eng in engines.values():
        while eng.time < first:
            eng.step()
    start_entry = {}
    for l, eng in engines.items():
        pend = eng.take_pending()
        rep = ExclusionReport((0, eng.time), eng.omega0_len, eng.active_measure(),
                              deleted_basic=pend["basic"],
                              deleted_precision=pend["precision"])
        start_entry[l] = rep
    state.reports.append(start_entry)
    for i, n in enumerate(state.windows):
        try:
            run_window(state, n)
        except ScaleInversion:
            raise
        except (ExclusionError, ArithmeticError) as exc:
            raise ExclusionError(f"window {i} [{n}, {2 * n}]: {exc}") from exc
    return state


def state_retained(state):
    sets = {l: [(e.span[0], e.span[1], e.weight) for e in eng.elements]
            for l, eng in state.engines.items()}
    eng = next(iter(state.engines.values()))
    return measure_retained(sets, (eng.omega0[0], eng.omega0[1]))
