"""Structural assertion suite: every directly checkable example plus the
cross-cutting invariants (multiset conservation, focal independence, orbit
agreement, the index-map identity, operator row sums, worker determinism).

Run through the CLI ``selfcheck`` subcommand; any failure is an exit-code-4
condition.  Budgeted to finish in well under a minute.
"""

from __future__ import annotations

import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import scipy.stats

from .ensemble import EnsembleEngine, RngSpec
from .interval_map import PiecewiseExpandingMap, invariant_density, transition_matrix
from .lattice import (
    CollisionScheme,
    LatticeState,
    collision_pairs,
    first_hit,
    in_hole,
    index_map,
    step,
    swap_stage,
)
from .stats import (
    SurvivalCurve,
    count_collisions,
    empirical_cf,
    estimate_survival,
    fit_escape_rate,
    hole_mass_formula,
    ks_exponential,
)
from .theory import (
    FormulaDensities,
    RecurrenceRecord,
    RecurrenceScan,
    closed_form_betas,
    detect_recurrence,
    exact_orbit,
    example_scheme,
    theta_tilde_value,
    theta_value,
)
from .ulam import BoxModel, build_interval_operator, build_operator, leading_eigen, marginal_density, operator_gap_diagnostics

CHECKS = []


def check(name):
    def deco(fn):
        CHECKS.append((name, fn))
        return fn
    return deco


def _example(delta=0.01, **kw):
    return example_scheme(delta=delta, **kw)


def _state(scheme, values: dict, fill=0.9):
    coords = np.full(scheme.n_sites, fill)
    for site, val in values.items():
        coords[scheme.site_index(site)] = float(val)
    return LatticeState(scheme, coords)


# -- interval map -----------------------------------------------------------


@check("site map: 5x mod 1 sends 0.3 to 0.5")
def _c1():
    assert abs(PiecewiseExpandingMap.mod_beta(5)(0.3) - 0.5) < 1e-15


@check("site map: derivative of 2x mod 1 at 0.7 is 2")
def _c2():
    assert PiecewiseExpandingMap.mod_beta(2).deriv(0.7) == 2.0


@check("invariant density of beta*x mod 1 is Lebesgue, eigenvalue 1")
def _c3():
    dens = invariant_density(PiecewiseExpandingMap.mod_beta(3), 64)
    assert np.all(np.abs(dens.values - 1.0) <= 1e-10)


@check("invariant density is an Ulam fixed point within 1e-10 in L1")
def _c4():
    pmap = PiecewiseExpandingMap.from_affine([0, "1/3", 1], [3, "3/2"], [0, "-1/2"])
    dens = invariant_density(pmap, 128)
    mat = transition_matrix(pmap, dens.edges)
    mass = dens.values * dens.widths
    assert float(np.abs(mat.T @ mass - mass).sum()) <= 1e-10


# -- lattice dynamics --------------------------------------------------------


@check("collision listed when both midpoints occupy their zones")
def _c5():
    sch = _example()
    st = _state(sch, {(0,): 0.5, (1,): 0.25})
    assert collision_pairs(st) == [((0,), 1)]


@check("no collision when the partner is in the wrong zone")
def _c6():
    sch = _example()
    st = _state(sch, {(0,): 0.5, (1,): 0.5})
    assert collision_pairs(st) == []


@check("no collision when every coordinate is outside the zones")
def _c7():
    sch = _example()
    st = _state(sch, {})
    assert collision_pairs(st) == []


@check("product step equals sitewise map application")
def _c8():
    sch = _example()
    rng = np.random.default_rng(7)
    st = LatticeState.random(sch, rng)
    new, events = step(st, dynamics="product")
    assert events == []
    assert np.array_equal(new.coords, sch.pmap.apply(st.coords))


@check("full step swaps the colliding pair then applies the map")
def _c9():
    sch = _example()
    st = _state(sch, {(0,): 0.5, (1,): 0.25})
    new, events = step(st, dynamics="full")
    assert len(events) == 1 and events[0].focal
    assert abs(new.value((0,)) - sch.pmap(0.25)) < 1e-15
    assert abs(new.value((1,)) - sch.pmap(0.5)) < 1e-15


@check("decoupled step leaves the focal coordinate independent")
def _c10():
    sch = _example()
    st = _state(sch, {(0,): 0.5, (1,): 0.25})
    new, events = step(st, dynamics="decoupled")
    assert events == []
    assert abs(new.value((0,)) - sch.pmap(0.5)) < 1e-15


@check("rare event holds exactly for a correctly oriented zone pair")
def _c11():
    sch = _example()
    assert in_hole(_state(sch, {(0,): 0.5, (1,): 0.25}))
    assert not in_hole(_state(sch, {}))
    assert not in_hole(_state(sch, {(0,): 0.25, (1,): 0.5}))


@check("first hit is 0 inside the rare event, absent with zones disabled")
def _c12():
    sch = _example()
    assert first_hit(_state(sch, {(0,): 0.5, (1,): 0.25}), 5) == 0
    off = replace(sch, disabled=True)
    st = LatticeState.random(off, np.random.default_rng(3))
    assert first_hit(st, 200) is None


@check("index map stays put without collisions, follows a single swap")
def _c13():
    sch = _example(mode="full_lattice")
    st = _state(sch, {})
    assert index_map(st, (3,), 5, "psi", check=True) == (3,)
    st2 = _state(sch, {(3,): 0.5, (4,): 0.25})
    assert index_map(st2, (3,), 1, "psi", check=True) == (4,)


@check("focal swap moves the tilde index but not the plain index")
def _c14():
    sch = _example()
    st = _state(sch, {(0,): 0.5, (1,): 0.25})
    assert index_map(st, (1,), 1, "psi", check=True) == (1,)
    assert index_map(st, (1,), 1, "psi_tilde", check=True) == (0,)


# -- structural invariants ---------------------------------------------------


@check("swap stage conserves the coordinate multiset")
def _c15():
    sch = _example(mode="full_lattice", delta=0.02)
    rng = np.random.default_rng(11)
    for _ in range(200):
        st = LatticeState.random(sch, rng)
        swapped, _ = swap_stage(st, dynamics="full")
        assert np.array_equal(np.sort(swapped), np.sort(st.coords))


@check("focal coordinate follows its bare orbit under the decoupled dynamics")
def _c16():
    sch = _example(mode="full_lattice", delta=0.02)
    rng = np.random.default_rng(13)
    for _ in range(20):
        st = LatticeState.random(sch, rng)
        expect = st.value((0,))
        cur = st
        for n in range(40):
            cur, _ = step(cur, dynamics="decoupled")
            expect = sch.pmap(expect)
            assert cur.value((0,)) == expect


@check("full and decoupled orbits agree on all coordinates before the first hit")
def _c17():
    sch = _example(delta=0.08, epsilon=0.08)  # large delta so hits are common
    rng = np.random.default_rng(17)
    checked = 0
    for _ in range(50):
        st = LatticeState.random(sch, rng)
        t = first_hit(st, 200, dynamics="full")
        if t is None or t == 0:
            continue
        a, b = st, st
        for n in range(t):
            assert np.array_equal(a.coords, b.coords)
            a, _ = step(a, dynamics="full")
            b, _ = step(b, dynamics="decoupled")
        checked += 1
    assert checked >= 10


@check("index identity (T^k x)_{Psi} = tau^k(x_p) on 10^4 states, k <= 50")
def _c18():
    sch = _example(mode="full_lattice", delta=0.02)
    engine = EnsembleEngine(sch, RngSpec(424242, block_size=10_000))
    worst = engine.run("psi", 10_000, k=50, variant="psi")[0]
    assert worst <= 1e-12, f"worst deviation {worst}"
    worst = engine.run("psi", 10_000, k=50, variant="psi_tilde")[0]
    assert worst <= 1e-12, f"worst deviation {worst}"


@check("collision pairs form a matching on dense random states")
def _c19():
    sch = _example(mode="full_lattice", delta=0.05, epsilon=0.05)
    rng = np.random.default_rng(19)
    for _ in range(500):
        st = LatticeState.random(sch, rng)
        pairs = collision_pairs(st)  # raises if the matching property fails
        sites = [p for (p, v) in pairs] + [sch.neighbor(p, v) for (p, v) in pairs]
        assert len(sites) == len(set(sites))


@check("swap stage preserves per-site uniform marginals (chi-square)")
def _c20():
    sch = CollisionScheme(
        pmap=PiecewiseExpandingMap.mod_beta(5), dimension=1, side=5,
        centers={1: 0.5, -1: 0.25}, epsilon=0.05, delta=0.05,
        mode="full_lattice",
    )
    engine = EnsembleEngine(sch, RngSpec(5150))
    g = engine.rng.generator(0)
    X = g.random((5, 1_000_000))
    engine._swap_edges(X, "full")
    for row in range(5):
        counts, _ = np.histogram(X[row], bins=50, range=(0.0, 1.0))
        _, p = scipy.stats.chisquare(counts)
        assert p > 0.001, f"site {row} marginal non-uniform, p = {p}"


# -- transfer operators ------------------------------------------------------


@check("closed 1D Ulam of the doubling map at N=4 has two 1/2 entries per row")
def _c21():
    op = build_interval_operator(PiecewiseExpandingMap.mod_beta(2),
                                 np.linspace(0, 1, 5))
    dense = op.to_coo().toarray()
    for row in dense:
        nz = row[row > 0]
        assert len(nz) == 2 and np.allclose(nz, 0.5)


@check("operator row sums match their kind on a small box")
def _c22():
    sch = _example(delta=0.02)
    box = BoxModel.build(sch, "two_site", n_cells=40, variant="decoupled")
    closed = build_operator(sch, box, "closed")
    assert np.all(np.abs(closed.row_sums() - 1.0) <= 1e-10)
    opened = build_operator(sch, box, "open")
    expect = 1.0 - box.hole_fractions()
    assert np.all(np.abs(opened.row_sums() - expect) <= 1e-10)
    fullbox = BoxModel.build(sch, "two_site", n_cells=40, variant="full")
    tw0 = build_operator(sch, fullbox, "twisted", s=0.0)
    base = build_operator(sch, fullbox, "closed")
    diff = (tw0.to_coo() - base.to_coo()).tocoo()
    assert diff.nnz == 0 or np.max(np.abs(diff.data)) == 0.0


@check("open rows vanish inside the hole and stay stochastic outside")
def _c23():
    sch = _example(delta=0.02)
    box = BoxModel.build(sch, "two_site", n_cells=40, variant="decoupled")
    opened = build_operator(sch, box, "open")
    hole = box.hole_fractions()
    rs = opened.row_sums()
    assert np.all(np.abs(rs[hole >= 1.0]) <= 1e-12)
    assert np.all(np.abs(rs[hole <= 0.0] - 1.0) <= 1e-10)


@check("closed box eigenvalue is 1 within 1e-10")
def _c24():
    sch = _example(delta=0.02)
    box = BoxModel.build(sch, "three_site", n_cells=48, variant="decoupled")
    res = leading_eigen(build_operator(sch, box, "closed"))
    assert abs(res.eigenvalue.real - 1.0) <= 1e-10


@check("marginal at the focal site of the closed decoupled box is Lebesgue")
def _c25():
    sch = _example(delta=0.02)
    box = BoxModel.build(sch, "three_site", n_cells=48, variant="decoupled")
    res = leading_eigen(build_operator(sch, box, "closed"))
    marg = marginal_density(res, box, sch.focal_site)
    assert np.all(np.abs(marg.values - 1.0) <= 1e-6)
    off = replace(sch, disabled=True)
    box2 = BoxModel.build(off, "two_site", n_cells=40, variant="decoupled")
    res2 = leading_eigen(build_operator(off, box2, "closed"))
    for site in box2.sites:
        m = marginal_density(res2, box2, site)
        assert np.all(np.abs(m.values - 1.0) <= 1e-6)


@check("operator difference diagnostic: mass 2*delta^2 exactly, quartering")
def _c26():
    sch = _example()
    diag = operator_gap_diagnostics(sch, (0.02, 0.01, 0.005), n_cells=48)
    for row in diag.rows:
        assert abs(row.mass_difference - 2 * row.delta ** 2) <= 1e-12
    r01 = diag.rows[0].mass_difference / diag.rows[1].mass_difference
    assert abs(r01 - 4.0) <= 0.08
    assert diag.tv_slope >= 1.0


# -- rare-event statistics ---------------------------------------------------


@check("survival curve is identically 1 with zones disabled")
def _c27():
    sch = replace(_example(delta=0.02), disabled=True)
    curve = estimate_survival(sch, 2000, 50, RngSpec(101), reference_checks=2)
    assert np.all(curve.fraction == 1.0)


@check("survival at n=0 equals 1 - 2d*delta^2 within errors")
def _c28():
    sch = _example(delta=0.05)
    curve = estimate_survival(sch, 200_000, 3, RngSpec(103), reference_checks=2)
    expect = 1.0 - 2 * 0.05 ** 2
    assert abs(curve.fraction[0] - expect) <= 4 * curve.stderr[0] + 1e-9


@check("synthetic geometric curve fits its exact rate with R^2 = 1")
def _c29():
    n = np.arange(201)
    frac = 0.8 ** n
    curve = SurvivalCurve(steps=n, fraction=frac, stderr=np.zeros_like(frac),
                          n_traj=10 ** 9)
    fit = fit_escape_rate(curve, window=(0, 200), min_survivors=1)
    assert abs(fit.rate - (-math.log(0.8))) <= 1e-12
    assert abs(fit.r_squared - 1.0) <= 1e-12


@check("constant survival curve fits rate 0")
def _c30():
    n = np.arange(101)
    curve = SurvivalCurve(steps=n, fraction=np.ones_like(n, dtype=float),
                          stderr=np.zeros(101), n_traj=10 ** 6)
    fit = fit_escape_rate(curve, window=(0, 100))
    assert abs(fit.rate) <= 1e-15


@check("empirical-mean rescaling self-normalizes the hitting sample")
def _c31():
    times = np.array([3.0, 7.0, 11.0, 40.0] * 50)
    res = ks_exponential(times, scaling="empirical_mean")
    assert abs((times / res.scale).mean() - 1.0) <= 1e-12


@check("KS distance: seeded Exp(1) sample small, constant sample >= 0.5")
def _c32():
    g = np.random.default_rng(2024)
    sample = g.exponential(size=100_000)
    res = ks_exponential(sample, scaling="empirical_mean")
    assert res.statistic <= 0.006, f"KS = {res.statistic}"
    const = ks_exponential(np.ones(500), scaling="empirical_mean")
    assert const.statistic >= 0.5


@check("counts vanish with zones disabled; s=0 characteristic value is 1")
def _c33():
    sch = replace(_example(delta=0.05), disabled=True)
    sample = count_collisions(sch, t=0.2, n_traj=800, gap=10, rng=RngSpec(107),
                              init="lebesgue", mu_hole=2 * 0.05 ** 2)
    assert np.all(sample.counts == 0)
    rows = empirical_cf(sample, [0.0, 0.7], n_boot=20)
    assert rows[0]["value"] == 1.0 + 0j
    assert rows[1]["value"] == 1.0 + 0j


@check("doubling the window doubles the mean count within errors")
def _c34():
    sch = _example(delta=0.05)
    a = count_collisions(sch, t=0.5, n_traj=4000, gap=10, rng=RngSpec(109),
                         init="lebesgue")
    b = count_collisions(sch, t=1.0, n_traj=4000, gap=10, rng=RngSpec(109),
                         init="lebesgue")
    ma, mb = a.counts.mean(), b.counts.mean()
    se = math.sqrt(a.counts.var() / len(a.counts) + b.counts.var() / len(b.counts))
    assert abs(mb - 2 * ma) <= 3 * max(se, 0.05), (ma, mb)


@check("mass formula gives 2*d*delta^2 for the worked scheme, 0 when disabled")
def _c35():
    sch = _example(delta=0.01)
    assert abs(hole_mass_formula(sch) - 2 * 0.01 ** 2) <= 1e-18
    assert hole_mass_formula(replace(sch, disabled=True)) == 0.0


# -- closed forms ------------------------------------------------------------


@check("exact orbit of 1/3 under the doubling map is the 2-cycle 1/3, 2/3")
def _c36():
    orbit, cycle = exact_orbit(PiecewiseExpandingMap.mod_beta(2), Fraction(1, 3), 10)
    assert orbit[:3] == [Fraction(1, 3), Fraction(2, 3), Fraction(1, 3)]
    assert cycle == (0, 2)


@check("centers leaving the center set produce no recurrence records")
def _c37():
    sch = CollisionScheme(
        pmap=PiecewiseExpandingMap.mod_beta(2), dimension=1, side=9,
        centers={1: Fraction(3, 10), -1: Fraction(7, 10)}, epsilon=0.05,
        delta=0.01,
    )
    scan = detect_recurrence(sch, k_max=64)
    assert scan.records == () and scan.complete


@check("one-term clustering sum: q = 1/25 gives extremal index 24/25")
def _c38():
    sch = _example()
    scan = RecurrenceScan(
        records=(RecurrenceRecord(v=1, k=0, w=1, kind="s_rec"),),
        s_rec_pairs=((Fraction(1, 2), Fraction(1, 4)),),
        s_tilde_pairs=(), k_max=10, complete=True, exact=True)
    dens = FormulaDensities(
        rho_tau={1: Fraction(1), -1: Fraction(0)},
        rho_side={1: (Fraction(1), Fraction(1)), -1: (Fraction(1), Fraction(1))})
    th = theta_value(sch, scan, dens)
    assert th.theta_with_k0 == Fraction(24, 25)


@check("empty recurrence sets give constant twisted weight and phi(0) = 1")
def _c39():
    sch = CollisionScheme(
        pmap=PiecewiseExpandingMap.mod_beta(2), dimension=1, side=9,
        centers={1: Fraction(3, 10), -1: Fraction(7, 10)}, epsilon=0.05,
        delta=0.01,
    )
    scan = detect_recurrence(sch, k_max=64)
    dens = FormulaDensities.idealized_for(sch)
    th = theta_value(sch, scan, dens)
    assert th.theta == 1
    tt = theta_tilde_value(th, closed_form_betas(scan, th), [0.0, 0.5, 1.0])
    assert all(abs(t - 1.0) < 1e-12 for t in tt.theta_tilde)
    assert abs(tt.phi_x[0] - 1.0) < 1e-12
    for s, p in zip(tt.s_grid, tt.phi_x):
        assert abs(p - complex(math.cos(s), math.sin(s))) < 1e-12


# -- determinism --------------------------------------------------------------


@check("identical seeds reproduce identical curves at any worker count")
def _c40():
    sch = _example(delta=0.05)
    a = estimate_survival(sch, 4000, 120, RngSpec(777, block_size=1000),
                          workers=1, reference_checks=2)
    b = estimate_survival(sch, 4000, 120, RngSpec(777, block_size=1000),
                          workers=2, reference_checks=2)
    assert np.array_equal(a.fraction, b.fraction)
    assert np.array_equal(a.block_hits, b.block_hits)


def run_selfcheck(verbose: bool = True):
    """Run every check; returns (results, all_passed)."""
    results = []
    for name, fn in CHECKS:
        try:
            fn()
            results.append((name, True, ""))
        except Exception as exc:  # pragma: no cover - failure path
            results.append((name, False, f"{type(exc).__name__}: {exc}"))
        if verbose:
            ok = results[-1][1]
            print(f"[{'PASS' if ok else 'FAIL'}] {name}"
                  + ("" if ok else f"  ({results[-1][2]})"))
    return results, all(ok for (_, ok, _) in results)
