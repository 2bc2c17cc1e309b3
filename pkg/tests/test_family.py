import math

import pytest

from ce_excavator.family import (ConstantsLedger, FamilyError, NotCollettEckmann,
                                 SamplingPlan, derive_constants,
                                 finite_difference_derivative, lattes2,
                                 orbit_with_param_derivative, quadratic_like,
                                 transversality_check, transversality_ratio)
from ce_excavator.sphere import RationalMap

SMALL = SamplingPlan(grid_points=20000, outside_samples=2000)


def test_lattes_critical_structure():
    F = lattes2(1e-6, 128)
    crit = F.critical_set(0)
    assert not crit[0].is_infinity() and complex(crit[0].affine()) == 0
    assert crit[1].is_infinity()
    # 0 -> infinity for every parameter, so only infinity is free
    assert F.subordinate() == {0: 1}
    assert F.free_critical() == [1]


def test_critical_points_move_with_parameter():
    F = quadratic_like(-2.0, 1e-3, 128)
    # z^2 + c + a keeps its critical point at 0
    c = F.critical_point(0, 5e-4)
    assert abs(complex(c.affine())) < 1e-30


def test_parameter_outside_range():
    F = lattes2(1e-6)
    with pytest.raises(FamilyError):
        F.map_at(2e-6)


def test_param_derivative_matches_finite_differences():
    F = lattes2(1e-5, 256)
    for a in ("0", "1e-5"):
        fd, d = finite_difference_derivative(F, 1, a, 25, "1e-40")
        for k in range(1, 26):
            exact = complex(d.values[k])
            assert abs(complex(fd[k]) - exact) <= 1e-6 * abs(exact)


def test_param_derivative_of_critical_value():
    # xi_1 = 1 + a for the critical point at infinity
    F = lattes2(1e-5, 128)
    tr, d = orbit_with_param_derivative(F, 1, 0, 3)
    assert complex(d.values[1]) == 1
    assert complex(tr.points[2].affine()) == -1
    # xi'_2 = f'(1) * 1 + 1 = 5
    assert complex(d.values[2]) == pytest.approx(5)


def test_transversality_partial_sum_closed_form():
    # orbit 1 -> -1 -> -1 ...: sum = 1 + (1/4) sum (-1/4)^k = 6/5
    F = lattes2(1e-6, 256)
    for m in (1, 2, 3, 10):
        expect = 1 + sum(0.25 * (-0.25) ** k for k in range(m - 1))
        assert complex(transversality_ratio(F, 1, 0, m)) == pytest.approx(expect, rel=1e-14)
    s, ratio = transversality_check(F, 1, 0, 30)
    assert abs(complex(s) - 1.2) < 1e-15
    assert abs(complex(ratio) - complex(s)) < 1e-12


def test_derived_constants_lattes():
    F = lattes2(1e-6)
    c = derive_constants(F, SMALL)
    assert c.validate() is c
    assert c.gamma0 == pytest.approx(math.log(4), abs=1e-9)
    assert c.beta == c.alpha
    assert c.alpha <= c.alpha_max * (1 + 1e-12)
    assert c.S == pytest.approx(0.1 * math.exp(-3))
    assert c.gammaI < c.gammaB / 2
    assert c.Kb == pytest.approx(math.exp(-9))


def test_constants_ledger_rejects_large_alpha():
    c = ConstantsLedger(alpha=1.0, gamma0=1.0, gammaH=1.0, tau=0.5, Gamma=2.0, K=2,
                        Kb=1e-3, C0=1.0, delta=0.05, delta_prime=0.2, epsilon1=0.1)
    assert any("alpha" in v for v in c.violations())
    with pytest.raises(FamilyError):
        c.validate()


def test_non_ce_family_is_rejected():
    # z^2 - 1 has a superattracting cycle 0 -> -1 -> 0
    F = quadratic_like(-1.0, 1e-6)
    with pytest.raises(NotCollettEckmann):
        derive_constants(F, SMALL)


def test_common_root_rejected():
    with pytest.raises(ValueError):
        RationalMap([-1, 0, 1], [1, 1])
