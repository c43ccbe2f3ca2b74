import math
from dataclasses import replace

import numpy as np
import pytest

from collab.ensemble import EnsembleEngine, RngSpec
from collab.stats import (
    InsufficientSurvivorsError,
    SurvivalCurve,
    count_collisions,
    empirical_cf,
    estimate_beta,
    estimate_survival,
    fit_escape_rate,
    hole_mass_formula,
    ks_exponential,
    mass_asymptotics_check,
    return_index_mismatch,
    sample_hitting_times,
)
from collab.theory import example_scheme


def test_rng_spec_substreams():
    spec = RngSpec(123, block_size=100)
    assert spec.n_blocks(250) == 3
    assert list(spec.block_lengths(250)) == [(0, 100), (1, 100), (2, 50)]
    a = spec.generator(0).random(4)
    b = spec.generator(0).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, spec.generator(1).random(4))
    with pytest.raises(ValueError):
        RngSpec(-1)


def test_initial_states_depend_only_on_master_and_index(worked_scheme):
    engine = EnsembleEngine(worked_scheme, RngSpec(9, block_size=50))
    wide = engine.initial_block(0, 50)
    narrow = engine.initial_block(0, 7)
    assert np.array_equal(wide[:, :7], narrow)


def test_survival_disabled_scheme(worked_scheme):
    off = replace(worked_scheme, disabled=True)
    curve = estimate_survival(off, 2000, 40, RngSpec(11), reference_checks=2)
    assert np.all(curve.fraction == 1.0)


def test_survival_initial_mass(worked_scheme):
    sch = replace(worked_scheme, delta=0.05)
    curve = estimate_survival(sch, 100_000, 3, RngSpec(13), reference_checks=2)
    expect = 1 - 2 * 0.05 ** 2
    assert abs(curve.fraction[0] - expect) <= 4 * curve.stderr[0]


def test_survival_requires_enough_trajectories(worked_scheme):
    with pytest.raises(ValueError):
        estimate_survival(worked_scheme, 10, 10, RngSpec(1))


def test_survival_worker_determinism(worked_scheme):
    sch = replace(worked_scheme, delta=0.05)
    a = estimate_survival(sch, 3000, 80, RngSpec(17, block_size=800),
                          workers=1, reference_checks=0)
    b = estimate_survival(sch, 3000, 80, RngSpec(17, block_size=800),
                          workers=2, reference_checks=0)
    assert np.array_equal(a.fraction, b.fraction)
    assert np.array_equal(a.block_hits, b.block_hits)


def test_survival_matches_hitting_times_exactly(worked_scheme):
    sch = replace(worked_scheme, delta=0.05)
    horizon = 120
    curve = estimate_survival(sch, 5000, horizon, RngSpec(19),
                              reference_checks=0)
    sample = sample_hitting_times(sch, 5000, horizon, init="lebesgue",
                                  rng=RngSpec(19))
    for n in (0, 5, 40, horizon):
        frac = float(np.mean((sample.times > n) | sample.censored))
        assert frac == curve.fraction[n]


def test_fit_escape_rate_synthetic():
    n = np.arange(301)
    curve = SurvivalCurve(steps=n, fraction=0.8 ** n,
                          stderr=np.zeros_like(n, float), n_traj=10 ** 9)
    fit = fit_escape_rate(curve, window=(0, 300), min_survivors=1)
    assert abs(fit.rate + math.log(0.8)) <= 1e-12
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    flat = SurvivalCurve(steps=np.arange(50), fraction=np.ones(50),
                         stderr=np.zeros(50), n_traj=10 ** 6)
    assert fit_escape_rate(flat, window=(0, 49)).rate == 0.0


def test_fit_escape_rate_window_shrinks(worked_scheme):
    n = np.arange(101)
    frac = np.exp(-0.05 * n)
    curve = SurvivalCurve(steps=n, fraction=frac, stderr=np.zeros(101),
                          n_traj=2000)
    fit = fit_escape_rate(curve, window=(0, 100))
    assert fit.window[1] < 100  # shrank to keep 1000 survivors
    assert abs(fit.rate - 0.05) < 1e-6
    tiny = SurvivalCurve(steps=np.arange(4), fraction=np.array([1, 1e-4, 1e-4, 1e-4]),
                         stderr=np.zeros(4), n_traj=2000)
    with pytest.raises(InsufficientSurvivorsError):
        fit_escape_rate(tiny)


def test_hitting_times_basics(worked_scheme):
    sch = replace(worked_scheme, delta=0.05)
    sample = sample_hitting_times(sch, 4000, 900, init="lebesgue",
                                  rng=RngSpec(23))
    assert sample.times.min() >= 0
    assert np.all(sample.times[sample.censored] == 900)
    # mean ~ 1/(theta * mu(H)): within 10% at this delta
    mean = sample.uncensored.mean()
    assert 0.8 / (2 * 0.05 ** 2) <= mean <= 1.2 / (2 * 0.05 ** 2)


def test_hitting_censoring_warning(worked_scheme):
    sch = replace(worked_scheme, delta=0.02)
    with pytest.warns(UserWarning):
        sample = sample_hitting_times(sch, 2000, 100, init="lebesgue",
                                      rng=RngSpec(29))
    assert sample.warnings


def test_ks_exponential_basics(rng):
    data = rng.exponential(size=100_000)
    res = ks_exponential(data)
    assert res.statistic <= 0.006
    assert abs((data / res.scale).mean() - 1.0) <= 1e-12
    const = ks_exponential(np.full(300, 7.0))
    assert const.statistic >= 0.5
    with pytest.raises(ValueError):
        ks_exponential(np.ones(10))
    explicit = ks_exponential(data, scaling=1.0)
    assert explicit.scale == 1.0
    assert explicit.statistic <= 0.01


def test_hole_mass_formula(worked_scheme):
    assert hole_mass_formula(worked_scheme) == pytest.approx(2 * 0.02 ** 2, abs=1e-18)


def test_mass_asymptotics_ulam_and_histogram(worked_scheme):
    rows = mass_asymptotics_check(worked_scheme, (0.02, 0.01, 0.005),
                                  source="ulam", n_cells=48)
    for row in rows:
        assert abs(row.formula - 2 * row.delta ** 2) <= 1e-15
        # the two estimators agree far inside the 5% self-consistency band
        assert abs(row.ratio - 1.0) <= 0.05
        assert abs(row.ratio - 1.0) <= 1e-9  # closed decoupled box is Lebesgue
    rows = mass_asymptotics_check(worked_scheme, (0.05,), source="histogram",
                                  rng=RngSpec(31), n_traj=40_000, horizon=100)
    assert abs(rows[0].ratio - 1.0) <= 0.1


def test_mass_asymptotics_estimated_densities(worked_scheme):
    rows = mass_asymptotics_check(worked_scheme, (0.02,), source="ulam",
                                  n_cells=64, estimated_densities=True)
    assert abs(rows[0].ratio - 1.0) <= 1e-6


def test_count_collisions_zero_when_disabled(worked_scheme):
    off = replace(worked_scheme, disabled=True)
    sample = count_collisions(off, t=0.1, n_traj=500, gap=10, rng=RngSpec(37),
                              init="lebesgue", mu_hole=8e-4)
    assert np.all(sample.counts == 0)
    assert sample.cluster_sizes().size == 0
    rows = empirical_cf(sample, [0.0, 0.4, 1.3], n_boot=10)
    assert all(r["value"] == 1.0 + 0j for r in rows)


def test_count_collisions_stationarity(worked_scheme):
    sch = replace(worked_scheme, delta=0.05)
    a = count_collisions(sch, t=0.5, n_traj=4000, gap=10, rng=RngSpec(41),
                         init="lebesgue")
    b = count_collisions(sch, t=1.0, n_traj=4000, gap=10, rng=RngSpec(41),
                         init="lebesgue")
    se = math.sqrt(a.counts.var() / 4000 + b.counts.var() / 4000)
    assert abs(b.counts.mean() - 2 * a.counts.mean()) <= 3 * max(se, 0.05)
    assert all(sum(cl) == z for cl, z in zip(a.clusters, a.counts))


def test_count_horizon_guard(worked_scheme):
    with pytest.raises(ValueError):
        count_collisions(worked_scheme, t=10.0, n_traj=10, gap=5,
                         rng=RngSpec(43), mu_hole=1e-9)


def test_empirical_cf_overlay(worked_scheme):
    sch = replace(worked_scheme, delta=0.05)
    sample = count_collisions(sch, t=1.0, n_traj=12_000, gap=10,
                              rng=RngSpec(47), init="lebesgue")
    theta = 0.96
    rows = empirical_cf(sample, [0.0, 1.0], theta_tilde=[theta, theta])
    assert rows[0]["value"] == 1.0 + 0j
    assert abs(rows[0]["overlay"] - 1.0) <= 1e-12
    assert abs(rows[1]["value"] - rows[1]["overlay"]) <= 0.08


@pytest.mark.slow
def test_empirical_cf_matches_spectral_overlay():
    # cross-check against the spectral twisted weight: the worked scheme's
    # empirical characteristic function tracks exp(-(1-e^is) theta t)
    from collab.theory import spectral_theta
    sch = example_scheme(delta=0.005)
    sample = count_collisions(sch, t=0.5, n_traj=40_000, gap=10,
                              rng=RngSpec(73), init="invariant")
    theta = spectral_theta(sch, 0.005, n_cells=64)["theta_spec"]
    rows = empirical_cf(sample, [0.5, 1.0, 2.0], theta_tilde=[theta] * 3)
    for r in rows:
        assert abs(r["value"] - r["overlay"]) <= 0.03, r


def test_estimate_beta_trivials(worked_scheme):
    # no recurrent centers: both variants vanish within errors for k <= 4
    from fractions import Fraction
    from collab.interval_map import PiecewiseExpandingMap
    from collab.lattice import CollisionScheme
    sch = CollisionScheme(
        pmap=PiecewiseExpandingMap.mod_beta(2), dimension=1, side=9,
        centers={1: Fraction(3, 10), -1: Fraction(7, 10)},
        epsilon=0.04, delta=0.01)
    for k in (1, 2, 4):
        for variant in (1, 2):
            est = estimate_beta(sch, k=k, j=0, n_traj=4000, variant=variant,
                                rng=RngSpec(53))
            assert est.value <= 2 * est.stderr + 2e-3
    with pytest.raises(InsufficientSurvivorsError):
        estimate_beta(sch, 1, 0, 100, 1, RngSpec(59))


def test_estimate_beta_worked_example_zeros(worked_scheme):
    # interverted set empty: variant 2 vanishes; variant 1 with j >= 1 too
    sch = replace(worked_scheme, delta=0.005)
    b2 = estimate_beta(sch, k=1, j=0, n_traj=20_000, variant=2, rng=RngSpec(61))
    assert b2.value <= 2 * b2.stderr + 1e-3
    b1j1 = estimate_beta(sch, k=2, j=1, n_traj=20_000, variant=1, rng=RngSpec(67))
    assert b1j1.value <= 2 * b1j1.stderr + 1e-3


def test_return_index_mismatch_negligible():
    # index-moved returns are negligible: pooled over lags k <= 10 the
    # mismatch fraction sits orders of magnitude below the 0.02 bound, and
    # does not grow as delta shrinks (at feasible sample sizes it is already
    # at its noise floor, so a strict decrease is not resolvable)
    pooled = {}
    for delta in (0.01, 0.005):
        sch = example_scheme(delta=delta, mode="full_lattice")
        out = return_index_mismatch(sch, range(1, 11), 120_000, RngSpec(71))
        returns = sum(v["returns"] for v in out.values())
        mism = sum(v["returns"] * v["mismatch_fraction"] for v in out.values())
        assert returns > 1000
        pooled[delta] = (mism / returns, returns)
    for frac, _ in pooled.values():
        assert frac <= 0.02
    f01, n01 = pooled[0.01]
    f005, n005 = pooled[0.005]
    se = math.sqrt(f01 * (1 - f01) / n01 + f005 * (1 - f005) / n005)
    assert f005 <= f01 + 2 * se + 1e-12
