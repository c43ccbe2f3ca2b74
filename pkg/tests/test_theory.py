import cmath
import math
from fractions import Fraction

import numpy as np
import pytest

from collab.interval_map import PiecewiseExpandingMap
from collab.lattice import CollisionScheme
from collab.theory import (
    BetaTable,
    FormulaDensities,
    NonRationalError,
    RecurrenceRecord,
    RecurrenceScan,
    ThetaRangeError,
    closed_form_betas,
    detect_recurrence,
    exact_orbit,
    example_report,
    example_scheme,
    q_k_value,
    spectral_theta,
    theta_tilde_value,
    theta_value,
)


def test_exact_orbit_fixed_points():
    pmap = PiecewiseExpandingMap.mod_beta(5)
    orbit, cycle = exact_orbit(pmap, Fraction(1, 2), 10)
    assert orbit[0] == orbit[1] == Fraction(1, 2) and cycle == (0, 1)
    orbit, cycle = exact_orbit(pmap, Fraction(1, 4), 10)
    assert orbit[0] == orbit[1] == Fraction(1, 4) and cycle == (0, 1)


def test_exact_orbit_two_cycle():
    orbit, cycle = exact_orbit(PiecewiseExpandingMap.mod_beta(2), Fraction(1, 3), 10)
    assert orbit[:3] == [Fraction(1, 3), Fraction(2, 3), Fraction(1, 3)]
    assert cycle == (0, 2)


def test_exact_orbit_rejects_nonrational():
    pmap = PiecewiseExpandingMap.from_c2_branches(
        [0, 0.5, 1], [lambda x: 2 * x, lambda x: 2 * x - 1],
        [lambda x: 2.0, lambda x: 2.0], 2.0)
    with pytest.raises(NonRationalError):
        exact_orbit(pmap, Fraction(1, 3), 5)


def test_detect_recurrence_worked_example():
    scan = detect_recurrence(example_scheme(), k_max=50)
    assert scan.exact and scan.complete
    assert set(scan.s_rec_pairs) == {
        (Fraction(1, 2), Fraction(1, 4)), (Fraction(1, 4), Fraction(1, 2))}
    assert scan.s_tilde_pairs == ()
    recs = {(r.v, r.k): r for r in scan.s_records(include_k0=True)}
    # every lag matches at the fixed points; k >= 2 carries the same-channel
    # complement at lag 1 which zeroes its weight
    assert (1, 0) in recs and (1, 1) in recs and (-1, 1) in recs
    assert recs[(1, 1)].j_lags == ()
    assert any(w == 1 for (_, w) in recs[(1, 2)].j_lags if (1, 2) in recs) or \
        (1, 2) in recs and recs[(1, 2)].j_lags
    # example labelling: v' = -w
    assert recs[(1, 1)].v_prime == -1 and recs[(-1, 1)].v_prime == 1


def test_detect_recurrence_no_records():
    sch = CollisionScheme(
        pmap=PiecewiseExpandingMap.mod_beta(2), dimension=1, side=9,
        centers={1: Fraction(3, 10), -1: Fraction(7, 10)},
        epsilon=0.05, delta=0.01)
    scan = detect_recurrence(sch, k_max=64)
    assert scan.records == () and scan.complete and scan.exact
    dens = FormulaDensities.idealized_for(sch)
    th = theta_value(sch, scan, dens)
    assert th.theta == 1 and th.theta_with_k0 == 1


def test_detect_recurrence_two_cycle_centers():
    # centers forming a desynchronized tau-2-cycle: the pair orbit returns
    # with the same orientation at even lags and interverted at odd lags
    sch = CollisionScheme(
        pmap=PiecewiseExpandingMap.mod_beta(5), dimension=1, side=9,
        centers={1: Fraction(1, 24), -1: Fraction(5, 24)},
        epsilon=0.05, delta=0.01)
    scan = detect_recurrence(sch, k_max=50)
    assert scan.complete
    s_ks = {r.k for r in scan.s_records(include_k0=True) if r.v == 1}
    st_ks = {r.k for r in scan.stilde_records() if r.v == 1}
    assert 1 in s_ks  # same-orientation return after tau^2 (cycle length)
    assert 0 in st_ks  # interverted return after tau^1
    assert (Fraction(1, 24), Fraction(5, 24)) in scan.s_tilde_pairs


def test_float_fallback_flags_approximate():
    # float centers mean approximate mode: records are found by the 1e-9
    # tolerance but the scan is flagged inexact and incomplete
    sch = CollisionScheme(
        pmap=PiecewiseExpandingMap.mod_beta(5), dimension=1, side=9,
        centers={1: 0.5, -1: 0.25}, epsilon=0.05, delta=0.01)
    scan = detect_recurrence(sch, k_max=30)
    assert not scan.exact and not scan.complete
    assert any(r.k == 1 for r in scan.s_records())
    assert all(not r.exact for r in scan.records)


def test_q_k_worked_example_value():
    sch = example_scheme()
    scan = detect_recurrence(sch, k_max=10)
    dens = FormulaDensities.idealized_for(sch)
    by_vk = {(r.v, r.k): r for r in scan.s_records(include_k0=True)}
    q_plus = q_k_value(sch, by_vk[(1, 1)], dens)
    q_minus = q_k_value(sch, by_vk[(-1, 1)], dens)
    assert q_plus + q_minus == Fraction(1, 625)  # 5^-4 at the fixed points
    assert q_k_value(sch, by_vk[(1, 2)], dens) == 0  # killed by the complement
    assert q_k_value(sch, by_vk[(1, 0)], dens) + \
        q_k_value(sch, by_vk[(-1, 0)], dens) == Fraction(1, 25)


def test_theta_values_worked_example():
    sch = example_scheme()
    scan = detect_recurrence(sch, k_max=200)
    th = theta_value(sch, scan, FormulaDensities.idealized_for(sch))
    assert th.theta == 1 - Fraction(1, 5) ** 4 == Fraction(624, 625)
    assert th.theta_with_k0 == 1 - Fraction(1, 25) - Fraction(1, 625)
    assert th.tail_bound == 5.0 ** (-400)
    assert float(th.theta) == 0.9984


def test_theta_range_error():
    # a weakly expanding map with synthetic records that suppress every
    # complement makes the sum exceed 1; the error must surface, unclamped
    pmap = PiecewiseExpandingMap.from_affine(
        [0, "20/21", 1], ["21/20", 21], [0, -20])
    sch = CollisionScheme(pmap=pmap, dimension=1, side=9,
                          centers={1: Fraction(1, 2), -1: Fraction(1, 4)},
                          epsilon=0.05, delta=0.01)
    scan = RecurrenceScan(
        records=tuple(RecurrenceRecord(v=v, k=k, w=v, kind="s_rec")
                      for v in (1, -1) for k in range(1, 13)),
        s_rec_pairs=(), s_tilde_pairs=(), k_max=13, complete=True, exact=True)
    with pytest.raises(ThetaRangeError):
        theta_value(sch, scan, FormulaDensities.idealized_for(sch))


def test_theta_tilde_and_phi_worked_example():
    sch = example_scheme()
    scan = detect_recurrence(sch, k_max=50)
    th = theta_value(sch, scan, FormulaDensities.idealized_for(sch))
    betas = closed_form_betas(scan, th)
    tt = theta_tilde_value(th, betas, [0.0, 0.5, 1.0, 2.0])
    assert tt.consistent_at_zero
    for s, t, p in zip(tt.s_grid, tt.theta_tilde, tt.phi_x):
        assert abs(t - float(th.theta)) <= 1e-15
        assert abs(p - cmath.exp(1j * s)) <= 1e-15
    assert abs(tt.phi_x[0] - 1) <= 1e-15


def test_theta_tilde_estimated_inconsistency_reported():
    sch = example_scheme()
    scan = detect_recurrence(sch, k_max=50)
    th = theta_value(sch, scan, FormulaDensities.idealized_for(sch))
    # measured beta inputs near zero disagree with the formula route; the
    # check must report, not mask, the discrepancy
    betas = BetaTable(values={(1, 0, 1): (0.0, 1e-5)}, closed_form=False)
    tt = theta_tilde_value(th, betas, [0.0, 1.0])
    assert not tt.consistent_at_zero
    assert "disagree" in tt.consistency_message


def test_phi_modulus_guard():
    sch = example_scheme()
    scan = detect_recurrence(sch, k_max=50)
    th = theta_value(sch, scan, FormulaDensities.idealized_for(sch))
    # a subnormalized beta table keeps |phi_X| <= 1 on the grid
    good = theta_tilde_value(th, closed_form_betas(scan, th),
                             np.linspace(0, 3, 13))
    assert all(abs(p) <= 1 + 1e-9 for p in good.phi_x)
    assert good.consistent_at_zero
    # inconsistent inputs (negative entry masquerading as a probability)
    # break the modulus bound and must be reported, not silently used
    bad = BetaTable(values={(1, 0, 1): (1.0016 - 2.0, 0.0)}, closed_form=True)
    res = theta_tilde_value(th, bad, [0.0, 1.0, 2.0])
    assert not res.consistent_at_zero
    assert res.consistency_message


def test_closed_form_betas_requires_empty_stilde():
    sch = CollisionScheme(
        pmap=PiecewiseExpandingMap.mod_beta(5), dimension=1, side=9,
        centers={1: Fraction(1, 24), -1: Fraction(5, 24)},
        epsilon=0.05, delta=0.01)
    scan = detect_recurrence(sch, k_max=30)
    th = theta_value(sch, scan, FormulaDensities.idealized_for(sch))
    with pytest.raises(ValueError):
        closed_form_betas(scan, th)


def test_spectral_theta_at_worked_example():
    row = spectral_theta(example_scheme(), 0.01, n_cells=64)
    assert 0.955 <= row["theta_spec"] <= 0.965
    assert abs(row["mu_hole"] - 2 * 0.01 ** 2) <= 1e-12
    assert row["lambda"] < 1.0


def test_example_report_asserts_and_attaches_spectral():
    rep = example_report(deltas=(0.02, 0.01), s_grid=(0.0, 0.5, 1.0),
                         spectral_cells=48)
    d = rep.as_dict()
    assert d["theta"] == "624/625"
    assert d["theta_float"] == 0.9984
    assert d["s_tilde_rec_pairs"] == []
    assert len(d["theta_spec"]) == 2
    assert d["theta_tilde_consistent"]
    assert sorted(d["s_rec_pairs"]) == [["1/2", "1/4"], ["1/4", "1/2"]]


def test_rational_mode_invariance_under_precision():
    # re-evaluating the exact path with longer floats changes nothing
    sch = example_scheme()
    scan = detect_recurrence(sch, k_max=120)
    th1 = theta_value(sch, scan, FormulaDensities.idealized_for(sch))
    th2 = theta_value(sch, scan, FormulaDensities.idealized_for(sch),
                      truncation=120)
    assert th1.theta == th2.theta == Fraction(624, 625)
