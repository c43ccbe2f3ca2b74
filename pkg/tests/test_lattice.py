import numpy as np
import pytest
from dataclasses import replace
from fractions import Fraction

from collab.ensemble import EnsembleEngine, RngSpec
from collab.interval_map import PiecewiseExpandingMap
from collab.lattice import (
    CollisionScheme,
    LatticeState,
    collision_pairs,
    first_hit,
    in_hole,
    index_map,
    step,
    swap_stage,
)
from collab.theory import example_scheme


def state_with(scheme, values, fill=0.9):
    coords = np.full(scheme.n_sites, fill)
    for site, val in values.items():
        coords[scheme.site_index(site)] = float(val)
    return LatticeState(scheme, coords)


def test_scheme_validation():
    pmap = PiecewiseExpandingMap.mod_beta(5)
    with pytest.raises(ValueError):  # overlapping zones
        CollisionScheme(pmap, 1, 9, {1: 0.5, -1: 0.52}, 0.05, 0.01)
    with pytest.raises(ValueError):  # delta above epsilon
        CollisionScheme(pmap, 1, 9, {1: 0.5, -1: 0.25}, 0.01, 0.05)
    with pytest.raises(ValueError):  # center on a branch point
        CollisionScheme(pmap, 1, 9, {1: 0.4, -1: 0.25}, 0.05, 0.01)
    with pytest.raises(ValueError):  # zone leaves (0, 1)
        CollisionScheme(pmap, 1, 9, {1: 0.01, -1: 0.25}, 0.05, 0.01)
    with pytest.raises(ValueError):
        CollisionScheme(pmap, 1, 2, {1: 0.5, -1: 0.25}, 0.05, 0.01)
    with pytest.raises(ValueError):  # desk-scale guard: L^d <= 10^6
        CollisionScheme(pmap, 3, 101, {1: 0.5, -1: 0.25, 2: 0.62, -2: 0.1,
                                       3: 0.83, -3: 0.05}, 0.02, 0.01)


def test_collision_pairs_worked_example(worked_scheme):
    sch = worked_scheme
    st = state_with(sch, {(0,): 0.5, (1,): 0.25})
    assert collision_pairs(st) == [((0,), 1)]
    st = state_with(sch, {(0,): 0.5, (1,): 0.5})
    assert collision_pairs(st) == []
    st = state_with(sch, {})
    assert collision_pairs(st) == []
    # wrong orientation does not collide
    st = state_with(sch, {(0,): 0.25, (1,): 0.5})
    assert collision_pairs(st) == []
    # the other channel: partner below the focal site
    st = state_with(sch, {(0,): 0.25, (8,): 0.5})
    assert collision_pairs(st) == [((0,), -1)]


def test_pair_width_rule():
    # bulk pairs use epsilon even when one member neighbours the focal site
    sch = example_scheme(delta=0.004, mode="full_lattice")
    st = state_with(sch, {(1,): 0.5 + 0.01, (2,): 0.25})
    # inside epsilon zones but outside delta zones; pair (1,2) excludes p*
    assert collision_pairs(st) == [((1,), 1)]
    st2 = state_with(sch, {(0,): 0.5 + 0.01, (1,): 0.25})
    # same offsets on the focal pair use width delta: no collision
    assert collision_pairs(st2) == []


def test_step_variants(worked_scheme):
    sch = worked_scheme
    st = state_with(sch, {(0,): 0.5, (1,): 0.25})
    prod, ev = step(st, dynamics="product")
    assert ev == []
    assert np.array_equal(prod.coords, sch.pmap.apply(st.coords))
    full, ev = step(st, dynamics="full")
    assert [e.focal for e in ev] == [True]
    assert full.value((0,)) == sch.pmap(0.25)
    assert full.value((1,)) == sch.pmap(0.5)
    dec, ev = step(st, dynamics="decoupled")
    assert ev == []
    assert dec.value((0,)) == sch.pmap(0.5)


def test_decoupled_also_suppresses_second_site():
    sch = example_scheme(delta=0.02, mode="full_lattice")
    st = state_with(sch, {(3,): 0.5, (4,): 0.25})
    moved, ev = step(st, dynamics="decoupled")
    assert len(ev) == 1
    frozen, ev2 = step(st, dynamics="decoupled", decouple_also=(4,))
    assert ev2 == []
    assert frozen.value((3,)) == sch.pmap(0.5)


def test_in_hole(worked_scheme):
    sch = worked_scheme
    assert in_hole(state_with(sch, {(0,): 0.5, (1,): 0.25}))
    assert in_hole(state_with(sch, {(0,): 0.25, (8,): 0.5}))
    assert not in_hole(state_with(sch, {(0,): 0.25, (1,): 0.5}))
    assert not in_hole(state_with(sch, {}))


def test_first_hit(worked_scheme):
    sch = worked_scheme
    assert first_hit(state_with(sch, {(0,): 0.5, (1,): 0.25}), 10) == 0
    off = replace(sch, disabled=True)
    st = LatticeState.random(off, np.random.default_rng(1))
    assert first_hit(st, 300) is None


def test_first_hit_full_equals_decoupled(worked_scheme, rng):
    sch = replace(worked_scheme, delta=0.05, epsilon=0.05)
    agree = 0
    for _ in range(40):
        st = LatticeState.random(sch, rng)
        tf = first_hit(st, 120, dynamics="full")
        td = first_hit(st, 120, dynamics="decoupled")
        assert tf == td
        agree += tf is not None
    assert agree >= 5


def test_swap_stage_is_permutation(rng):
    sch = example_scheme(delta=0.05, epsilon=0.05, mode="full_lattice")
    for _ in range(100):
        st = LatticeState.random(sch, rng)
        swapped, events = swap_stage(st)
        assert np.array_equal(np.sort(swapped), np.sort(st.coords))
        for e in events:
            q = sch.neighbor(e.site, e.direction)
            assert swapped[q] == st.value(e.site)


def test_index_map_base_cases(worked_scheme):
    sch = replace(worked_scheme, mode="full_lattice")
    st = state_with(sch, {})
    assert index_map(st, (3,), 4, "psi", check=True) == (3,)
    st = state_with(sch, {(3,): 0.5, (4,): 0.25})
    assert index_map(st, (3,), 1, "psi", check=True) == (4,)
    assert index_map(st, (4,), 1, "psi", check=True) == (3,)


def test_index_map_focal_clause(worked_scheme):
    st = state_with(worked_scheme, {(0,): 0.5, (1,): 0.25})
    assert index_map(st, (1,), 1, "psi", check=True) == (1,)
    assert index_map(st, (1,), 1, "psi_tilde", check=True) == (0,)
    assert index_map(st, (0,), 1, "psi_tilde", check=True) == (1,)


def test_index_identity_randomized(rng):
    sch = example_scheme(delta=0.03, epsilon=0.06, mode="full_lattice")
    for _ in range(25):
        st = LatticeState.random(sch, rng)
        for variant in ("psi", "psi_tilde"):
            index_map(st, (2,), 12, variant, check=True)  # raises on failure


def test_two_dimensional_lattice(rng):
    sch = CollisionScheme(
        pmap=PiecewiseExpandingMap.mod_beta(5), dimension=2, side=5,
        centers={1: 0.5, -1: 0.25, 2: 0.62, -2: 0.1},
        epsilon=0.04, delta=0.02, mode="full_lattice",
    )
    st = state_with(sch, {(0, 0): 0.62, (0, 1): 0.1})
    assert collision_pairs(st) == [((0, 0), 2)]
    assert in_hole(st)
    new, ev = step(st, dynamics="full")
    assert len(ev) == 1 and ev[0].focal
    for _ in range(10):
        st = LatticeState.random(sch, rng)
        swapped, _ = swap_stage(st)
        assert np.array_equal(np.sort(swapped.ravel()), np.sort(st.coords.ravel()))
        index_map(st, (2, 3), 6, "psi", check=True)


def test_engine_matches_reference_stepping(worked_scheme):
    sch = replace(worked_scheme, delta=0.05, epsilon=0.05)
    engine = EnsembleEngine(sch, RngSpec(31, block_size=64))
    X = engine.initial_block(0, 64)
    tmp = np.empty_like(X)
    states = [engine.initial_state(i) for i in range(8)]
    for n in range(30):
        engine.step_block(X, "full", tmp)
        for i in range(8):
            states[i], _ = step(states[i], dynamics="full")
            for r, site in enumerate(engine.sim_sites):
                assert X[r, i] == states[i].value(site), (n, i, site)


def test_engine_full_lattice_mode_matches_reference():
    sch = example_scheme(delta=0.04, epsilon=0.05, mode="full_lattice")
    engine = EnsembleEngine(sch, RngSpec(37, block_size=32))
    X = engine.initial_block(0, 32)
    tmp = np.empty_like(X)
    states = [engine.initial_state(i) for i in range(6)]
    for n in range(25):
        engine.step_block(X, "decoupled", tmp)
        for i in range(6):
            states[i], _ = step(states[i], dynamics="decoupled")
            for r, site in enumerate(engine.sim_sites):
                assert X[r, i] == states[i].value(site)


def test_event_csv_row(tmp_path):
    from collab.lattice import SwapEvent, write_event_log
    e = SwapEvent(step=4, site=(2,), direction=-1, focal=False)
    assert e.csv_row == "4,2,-1,0"
    e2 = SwapEvent(step=0, site=(1, 3), direction=2, focal=True)
    path = tmp_path / "events.csv"
    write_event_log(path, [e, e2])
    assert path.read_text() == (
        "step,site,direction,focal\n4,2,-1,0\n0,1;3,+2,1\n")
