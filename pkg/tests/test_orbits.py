import math

import pytest
from hypothesis import given, settings, strategies as st

from ce_excavator.orbits import (NeighborhoodSystem, OrbitTrace, basic_assumption_scan,
                                 binding_length, bound_expansion_record,
                                 brute_force_returns, critical_trace, depth,
                                 detect_returns, is_essential, lyapunov_estimates,
                                 outside_expansion_estimate, partner_distance,
                                 whitney_bound)
from ce_excavator.sphere import RationalMap, SpherePoint


def lattes():
    return RationalMap([-2, 0, 1], [0, 0, 1])


def lattes_nbhd(delta=math.exp(-3)):
    crit = [SpherePoint.from_affine(0), SpherePoint.infinity()]
    return NeighborhoodSystem(math.sqrt(delta), delta, crit, [2, 2])


def test_depth_brackets():
    for r in range(1, 12):
        assert depth(math.exp(-r)) == r
        assert depth(math.exp(-r + 0.49)) == r
        assert depth(math.exp(-r - 0.49)) == r


def test_whitney_bound_values():
    d = math.exp(-4)
    assert whitney_bound(d) == pytest.approx(d / 16)
    assert whitney_bound(0) == 0.0
    assert whitney_bound(1.5) == math.inf
    assert is_essential(d / 32, d) and not is_essential(d / 33, d)


def test_neighbourhood_zones():
    nb = lattes_nbhd()
    assert nb.zone(nb.delta2 / 2) == "deep"
    assert nb.zone(nb.delta2) == "deep"
    assert nb.zone(nb.delta) == "shallow"
    assert nb.zone(nb.delta_prime) == "pseudo"
    assert nb.zone(0.9) == "outside"


def test_neighbourhood_rejects_bad_radii():
    crit = [SpherePoint.from_affine(0), SpherePoint.infinity()]
    with pytest.raises(ValueError):
        NeighborhoodSystem(0.01, 0.1, crit, [2, 2])


def test_lattes_value_orbit_has_no_returns():
    f = lattes()
    tr = critical_trace(f, SpherePoint.infinity(), 40)
    nb = lattes_nbhd()
    assert detect_returns(tr, nb) == []
    assert brute_force_returns(tr, nb) == []
    lo, hi = lyapunov_estimates(tr)
    assert lo == pytest.approx(math.log(4), abs=1e-12)
    assert hi == pytest.approx(math.log(4), abs=1e-12)


def test_detection_agrees_with_brute_force():
    f = lattes()
    p = SpherePoint.from_affine(0.3141 + 0.2718j)
    tr = critical_trace(f, p, 40)
    nb = lattes_nbhd()
    events = detect_returns(tr, nb)
    got = [(e.time, e.depth_class is not None) for e in events]
    assert got == brute_force_returns(tr, nb)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=30),
       st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_binding_length_monotone_in_beta(seps, b1, b2):
    pd = [1.0] * len(seps)
    lo, hi = sorted((b1, b2))
    # a larger beta tightens the tolerance, so the bound period cannot grow
    assert binding_length(seps, pd, hi)[0] <= binding_length(seps, pd, lo)[0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1e-9, 1.0), min_size=2, max_size=40), st.floats(1e-6, 1.0),
       st.floats(0.0, 0.1))
def test_basic_assumption_prefix_closed(dists, Kb, expo):
    first = basic_assumption_scan([0.0] + dists, Kb, expo)
    for m in range(1, len(dists) + 1):
        prefix = basic_assumption_scan([0.0] + dists[:m], Kb, expo)
        # passing up to m means passing every shorter prefix
        if first is None or first > m:
            assert prefix is None
        else:
            assert prefix == first


def test_basic_assumption_inclusive():
    assert basic_assumption_scan([0.0, 0.1], 0.1, 0.0) is None
    assert basic_assumption_scan([0.0, 0.0999], 0.1, 0.0) == 1


def test_partner_distance_skips_exact_hit():
    crit = [SpherePoint.from_affine(0), SpherePoint.infinity()]
    assert partner_distance(SpherePoint.infinity(), crit) == 2.0
    assert partner_distance(SpherePoint.from_affine(1), crit) == pytest.approx(math.sqrt(2))


def test_lyapunov_needs_horizon():
    with pytest.raises(ValueError):
        lyapunov_estimates([0.0] * 5)


def test_bound_expansion_bracket():
    rec = bound_expansion_record(10, 6, 5, 2, 1.0, 4.0, 2.0)
    assert rec.lower == pytest.approx(2.5) and rec.upper == pytest.approx(20.0)
    assert rec.ok
    short = bound_expansion_record(10, 1, 5, 2, 1.0, 4.0, 2.0)
    assert not short.lower_ok


def test_outside_expansion_on_lattes():
    # the flat orbifold metric is doubled each step but is singular at the
    # postcritical points, so the spherical rate approaches 2 only as the
    # bounded distortion constant is amortized over longer horizons
    short = outside_expansion_estimate(lattes(), lattes_nbhd(), 20, samples=2000, seed=1)
    long = outside_expansion_estimate(lattes(), lattes_nbhd(), 40, samples=2000, seed=1)
    assert 1.0 < short.lam < long.lam < 2.0
    assert 0 < long.kept <= short.kept <= short.sampled == 2000


def test_trace_dist_to_crit():
    f = lattes()
    tr = critical_trace(f, SpherePoint.infinity(), 3)
    assert isinstance(tr, OrbitTrace)
    d, k = tr.dist_to_crit(2)
    assert k == 0 and d == pytest.approx(math.sqrt(2))
