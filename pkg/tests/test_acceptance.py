"""Acceptance criteria, one test each.  Every test prints a PASS/FAIL line
(visible in ``pytest -v`` output) before asserting."""

import json
import math
import time

import numpy as np
import pytest

from ce_excavator.cli import cmd_orbit, main, parse_config
from ce_excavator.exclusion import (history_count, history_count_by_partitions,
                                    history_weight, history_weight_by_partitions,
                                    run_exclusion, state_retained)
from ce_excavator.family import (SamplingPlan, derive_constants,
                                 finite_difference_derivative, lattes2,
                                 transversality_check)
from ce_excavator.sphere import (RationalMap, SpherePoint, chordal_distance,
                                 iterate_orbit, spherical_derivative)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def test_c01_lattes_exponent(report):
    cfg = parse_config(json.dumps({"orbit": {"l": 1, "a": "0", "n": 200}}))
    t0 = time.perf_counter()
    rep, _ = cmd_orbit(cfg)
    dt = time.perf_counter() - t0
    err = max(abs(rep["lyapunov_min"] - math.log(4)), abs(rep["lyapunov_max"] - math.log(4)))
    report(1, err <= 1e-6 and dt < 1.0, f"|lyap - log 4| = {err:.2e}, {dt:.3f} s")


def test_c02_metric_and_chain_rule(report):
    N = 100_000
    rng = np.random.default_rng(2024)

    def random_points(k):
        z = rng.standard_cauchy(k) + 1j * rng.standard_cauchy(k)
        inf = rng.random(k) < 0.01
        return [SpherePoint.infinity() if i else SpherePoint.from_affine(complex(x))
                for x, i in zip(z, inf)]

    t0 = time.perf_counter()
    pts = random_points(3 * N)
    sym = tri = 0
    worst_tri = -math.inf
    for i in range(N):
        p, q, r = pts[3 * i:3 * i + 3]
        pq = chordal_distance(p, q)
        sym += pq != chordal_distance(q, p)
        excess = chordal_distance(p, r) - pq - chordal_distance(q, r)
        worst_tri = max(worst_tri, excess)
        tri += excess > 1e-12
    # chain rule: ledger of f twice vs the derivative of the composite
    f = RationalMap([-2, 0, 1], [0, 0, 1])
    ff = RationalMap([4, 0, -4, 0, -1], [4, 0, -4, 0, 1])
    chain = 0
    worst_chain = 0.0
    for p in pts[:N]:
        led = iterate_orbit(f, p, 2).ledger[2]
        sd = spherical_derivative(ff, p)
        if sd == 0:
            # at a critical point both sides must vanish
            chain += led != -math.inf
            continue
        e = abs(led - math.log(sd))
        worst_chain = max(worst_chain, e)
        chain += e > 1e-9
    # chart consistency: g(z) = 1/f(1/z) seen through z -> 1/z
    g1 = RationalMap([1, -3, 0.5], [2, 1j, 1])
    g2 = RationalMap([1, 1j, 2], [0.5, -3, 1])
    chart = 0
    worst_chart = 0.0
    for p in pts[N:2 * N]:
        a = spherical_derivative(g1, p)
        b = spherical_derivative(g2, p.swapped())
        e = abs(a - b) / max(a, 1e-300)
        worst_chart = max(worst_chart, e)
        chart += e > 1e-10
    dt = time.perf_counter() - t0
    ok = not (sym or tri or chain or chart) and dt < 30
    report(2, ok, f"failures sym={sym} tri={tri} chain={chain} chart={chart}; "
                  f"worst tri {worst_tri:.1e} chain {worst_chain:.1e} chart {worst_chart:.1e}; {dt:.1f} s")


def test_c03_parameter_derivative_vs_finite_differences(report):
    F = lattes2(1e-5, 256)
    worst = 0.0
    for a in ("0", "1e-5"):
        fd, d = finite_difference_derivative(F, 1, a, 30, "1e-40")
        for k in range(1, 31):
            # compared at working precision; the gap is far below double resolution
            worst = max(worst, float(abs(fd[k] - d.values[k]) / abs(d.values[k])))
    report(3, worst <= 1e-4, f"max relative error {worst:.2e} for k <= 30, h = 1e-40")


def test_c04_transversality(report):
    F = lattes2(1e-6, 256)
    s, ratio = transversality_check(F, 1, 0, 30)
    s, ratio = complex(s), complex(ratio)
    limit_err = abs(s - 4 / 3)
    agree = abs(ratio - s) / abs(s)
    report(4, limit_err <= 1e-6 and agree <= 1e-4,
           f"partial sum {s.real:.12f} (|. - 4/3| = {limit_err:.2e}), "
           f"cross-check relative gap {agree:.2e}")


def test_c05_history_count(report):
    t0 = time.perf_counter()
    bad = []
    for R in range(31):
        for s in range(R + 1):
            for D in (1, 2, 3):
                n, binom = history_count(R, s, D)
                w, wbound = history_weight(R, s, D)
                if n != history_count_by_partitions(R, s, D) or n > binom:
                    bad.append(("count", R, s, D))
                if w != history_weight_by_partitions(R, s, D) or w > wbound:
                    bad.append(("weight", R, s, D))
    dt = time.perf_counter() - t0
    report(5, not bad and dt < 10, f"{len(bad)} mismatches, {dt:.2f} s")


@pytest.fixture(scope="module")
def audit_runs(tmp_path_factory):
    """Two identical 2-window runs on lattes2 written through the CLI."""
    cfg = {"epsilon": 1e-6, "delta": math.exp(-3), "precision_bits": 256, "windows": 2}
    base = tmp_path_factory.mktemp("audit")
    path = base / "cfg.json"
    path.write_text(json.dumps(cfg))
    outs = []
    for i in range(2):
        out = base / f"run{i}"
        assert main(["exclude", "--config", str(path), "--out", str(out)]) == 0
        outs.append(((out / "exclusion.json").read_bytes(), (out / "intervals.csv").read_bytes()))
    return outs


def _audited(outs):
    rep = json.loads(outs[0][0])
    return rep, [e for entry in rep["entries"] for e in entry.values() if "audits" in e]


def test_c06_basic_assumption_audit(audit_runs, report):
    rep, entries = _audited(audit_runs)
    recs = [r for e in entries for r in e["audits"]["basic_assumption"]["records"]]
    worst = max((r["fraction"] / r["bound"] for r in recs), default=0.0)
    ok = len(rep["windows"]) == 2 and recs and all(r["ok"] for r in recs)
    report(6, bool(ok), f"{len(recs)} essential-return records, worst fraction/bound {worst:.3g}")


def test_c07_doubling_and_bound_period(audit_runs, report):
    _, entries = _audited(audit_runs)
    d_pass = sum(e["audits"]["doubling"]["passed"] for e in entries)
    d_tot = sum(e["audits"]["doubling"]["total"] for e in entries)
    d_viol = sum(len(e["audits"]["doubling"]["violations"]) for e in entries)
    b_pass = sum(e["audits"]["bound_expansion"]["passed"] for e in entries)
    b_tot = sum(e["audits"]["bound_expansion"]["total"] for e in entries)
    b_viol = sum(len(e["audits"]["bound_expansion"]["violations"]) for e in entries)
    itemized = d_viol == d_tot - d_pass and b_viol == b_tot - b_pass
    ok = d_tot > 0 and b_tot > 0 and d_pass >= 0.95 * d_tot and b_pass >= 0.95 * b_tot
    report(7, ok and itemized, f"doubling {d_pass}/{d_tot}, bound period {b_pass}/{b_tot}, "
                               f"violations itemized: {itemized}")


def test_c08_large_deviation(audit_runs, report):
    rep, entries = _audited(audit_runs)
    rows = [(e["window"][0], e["audits"]["large_deviation"]) for e in entries]
    ok = all(n <= 128 and x["ok"] and x["fraction"] <= x["bound"] for n, x in rows)
    detail = ", ".join(f"n={n}: {x['fraction']:.2e} <= {x['bound']:.4f}" for n, x in rows)
    report(8, ok, detail)


def test_c09_conservation_and_reruns(audit_runs, report):
    rep = json.loads(audit_runs[0][0])
    worst = max(e["balance_error"] for entry in rep["entries"] for e in entry.values())
    same = audit_runs[0] == audit_runs[1]
    report(9, worst <= 1e-12 and same, f"worst balance error {worst:.1e}, byte-identical: {same}")


def test_c10_density_trend(report):
    t0 = time.perf_counter()
    retained = []
    for eps in (1e-5, 1e-6, 1e-7):
        F = lattes2(eps, 256)
        c = derive_constants(F, SamplingPlan(grid_points=200000))
        st = run_exclusion(F, c, 1, max_elements=1024, window_start=8)
        retained.append(state_retained(st))
    dt = time.perf_counter() - t0
    monotone = retained[0] <= retained[1] <= retained[2]
    report(10, monotone and dt < 600,
           "retained " + ", ".join(f"{r:.7f}" for r in retained) + f" over windows [8, 16]; {dt:.0f} s")
