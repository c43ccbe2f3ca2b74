"""Monte Carlo estimators for the rare-event statistics.

Survival curves and escape-rate fits, hitting-time samples and their
exponential goodness of fit, rare-event mass asymptotics, the collision
counting process with cluster sizes, empirical characteristic functions,
and the cluster-structure conditional probabilities.  Everything is
trajectory-parallel with per-block substreams, so outputs are bit-identical
at any worker count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.stats

from .ensemble import EnsembleEngine, RngSpec
from .interval_map import invariant_density
from .lattice import CollisionScheme, first_hit
from .theory import FormulaDensities
from .ulam import BoxModel, ResolutionError, build_operator, leading_eigen, marginal_density

__all__ = [
    "BetaEstimate",
    "CountingSample",
    "EscapeRateFit",
    "HittingSample",
    "InsufficientSurvivorsError",
    "KSResult",
    "MassRow",
    "RngSpec",
    "SurvivalCurve",
    "count_collisions",
    "empirical_cf",
    "estimate_beta",
    "estimate_survival",
    "fit_escape_rate",
    "hole_mass_formula",
    "ks_exponential",
    "mass_asymptotics_check",
    "return_index_mismatch",
    "sample_hitting_times",
]


class InsufficientSurvivorsError(RuntimeError):
    """Too few surviving trajectories to fit an escape rate."""


# ---------------------------------------------------------------------------
# survival


@dataclass(frozen=True)
class SurvivalCurve:
    """Surviving fraction per step with binomial errors.

    ``fraction[n]`` estimates the measure of states whose orbit has not yet
    seen a focal collision at times 0..n.  ``block_hits[b, n]`` counts the
    first hits of substream block b at time n, enabling replicate standard
    errors for derived fits.
    """

    steps: np.ndarray
    fraction: np.ndarray
    stderr: np.ndarray
    n_traj: int
    block_hits: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.any(np.diff(self.fraction) > 1e-15):
            raise ValueError("survival curve must be non-increasing")
        if np.any((self.fraction < 0) | (self.fraction > 1)):
            raise ValueError("survival fractions must lie in [0, 1]")

    def survivors(self, n: int) -> int:
        return int(round(self.fraction[n] * self.n_traj))


def _curve_from_times(times_parts, horizon: int, n_traj: int) -> SurvivalCurve:
    hists = []
    for times in times_parts:
        h = np.bincount(np.minimum(times, horizon + 1), minlength=horizon + 2)
        hists.append(h)
    block_hits = np.array(hists)
    total = block_hits.sum(axis=0)
    hit_cum = np.cumsum(total[: horizon + 1])
    frac = 1.0 - hit_cum / n_traj
    frac = np.maximum.accumulate(frac[::-1])[::-1]  # guard rounding
    stderr = np.sqrt(np.clip(frac * (1 - frac), 0, None) / n_traj)
    return SurvivalCurve(steps=np.arange(horizon + 1), fraction=frac,
                         stderr=stderr, n_traj=n_traj, block_hits=block_hits)


def estimate_survival(scheme: CollisionScheme, n_traj: int, horizon: int,
                      rng: RngSpec, workers: int = 1,
                      subsample: float = 0.01,
                      reference_checks: int = 6) -> SurvivalCurve:
    """Survival curve of the focal collision under the full dynamics.

    Initial states are i.i.d. product-Lebesgue.  First hits agree between
    the full and the decoupled dynamics (the two differ only after a focal
    collision); a subsample is re-run under explicit full-dynamics stepping
    and a handful of trajectories against the single-state reference to
    assert exactly that, per run.
    """
    if n_traj < 1000:
        raise ValueError("need at least 10^3 trajectories")
    engine = EnsembleEngine(scheme, rng)
    parts = engine.run("first_hits", n_traj, workers=workers, horizon=horizon,
                       init="lebesgue", burn_in=0)
    curve = _curve_from_times(parts, horizon, n_traj)
    if curve.fraction[0] == 0.0:
        raise RuntimeError("every trajectory started inside the rare event; "
                           "delta is misconfigured")
    times = np.concatenate(parts)
    # full-vs-decoupled identity on a subsample, re-run with swaps active
    n_sub = min(max(1, int(round(subsample * n_traj))), len(parts[0]))
    sub_horizon = int(min(horizon, np.percentile(times, 50) + 1))
    check = engine._first_hits_block(0, n_sub, sub_horizon,
                                     "lebesgue", 0, dynamics_override="full")
    base = parts[0][: len(check)]
    mism = np.nonzero(np.minimum(base, sub_horizon + 1) != check)[0]
    if mism.size:
        raise AssertionError(
            f"full vs decoupled first hits differ on subsample rows {mism[:5]}"
        )
    # reference cross-validation of the vectorized engine
    ref_h = int(min(horizon, 400))
    for i in range(min(reference_checks, n_traj)):
        state = engine.initial_state(i)
        t_full = first_hit(state, ref_h, dynamics="full")
        t_dec = first_hit(state, ref_h, dynamics="decoupled")
        engine_t = int(times[i]) if times[i] <= ref_h else None
        if t_full != t_dec or t_full != engine_t:
            raise AssertionError(
                f"trajectory {i}: reference full={t_full} decoupled={t_dec} "
                f"engine={engine_t}"
            )
    return curve


@dataclass(frozen=True)
class EscapeRateFit:
    rate: float
    r_squared: float
    stderr: float
    window: tuple
    n_points: int


def fit_escape_rate(curve: SurvivalCurve, window: Optional[tuple] = None,
                    min_survivors: int = 1000) -> EscapeRateFit:
    """Least-squares escape rate from the log survival curve.

    Fits ln(fraction) over [n0, n1] and returns the negated slope; n1 is
    shrunk until at least ``min_survivors`` trajectories survive there.
    The standard error comes from block-replicate refits when block data is
    attached, else from the OLS slope formula.
    """
    frac = curve.fraction
    horizon = len(frac) - 1
    n0 = 1 if window is None else int(window[0])
    n1 = horizon if window is None else int(window[1])
    while n1 > n0 and curve.survivors(n1) < min_survivors:
        n1 -= 1
    if n1 - n0 < 2:
        raise InsufficientSurvivorsError(
            f"window [{n0}, {n1}] too short with >= {min_survivors} survivors"
        )
    ns = np.arange(n0, n1 + 1)
    ys = np.log(frac[n0: n1 + 1])
    slope, intercept = np.polyfit(ns, ys, 1)
    resid = ys - (slope * ns + intercept)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    if curve.block_hits is not None and curve.block_hits.shape[0] >= 2:
        rates = []
        for b in range(curve.block_hits.shape[0]):
            h = curve.block_hits[b]
            m = h.sum()
            f = 1.0 - np.cumsum(h[: horizon + 1]) / m
            with np.errstate(divide="ignore"):
                yb = np.log(f[n0: n1 + 1])
            good = np.isfinite(yb)
            if good.sum() >= 3:
                rates.append(-np.polyfit(ns[good], yb[good], 1)[0])
        rates = np.array(rates)
        stderr = float(rates.std(ddof=1) / math.sqrt(len(rates))) if len(rates) >= 2 else 0.0
    else:
        denom = float(np.sum((ns - ns.mean()) ** 2))
        dof = max(len(ns) - 2, 1)
        stderr = math.sqrt(float(np.sum(resid ** 2)) / dof / denom)
    return EscapeRateFit(rate=-float(slope), r_squared=r2, stderr=stderr,
                         window=(n0, n1), n_points=len(ns))


# ---------------------------------------------------------------------------
# hitting times


@dataclass(frozen=True)
class HittingSample:
    """First hitting times of the focal collision, censored at the horizon."""

    times: np.ndarray
    censored: np.ndarray
    horizon: int
    init: str
    burn_in: int
    warnings: tuple = ()

    @property
    def uncensored(self) -> np.ndarray:
        return self.times[~self.censored]


def sample_hitting_times(scheme: CollisionScheme, n_traj: int, horizon: int,
                         init: str = "invariant", rng: RngSpec = None,
                         burn_in: int = 1000, workers: int = 1) -> HittingSample:
    """Hitting times under the decoupled dynamics.

    ``init='invariant'`` applies ``burn_in`` decoupled steps before time 0
    (its adequacy is checked by doubling in the acceptance studies);
    ``init='lebesgue'`` starts directly from product-Lebesgue states.
    """
    if rng is None:
        raise ValueError("an RngSpec is required for reproducibility")
    if init not in ("lebesgue", "invariant"):
        raise ValueError("init must be 'lebesgue' or 'invariant'")
    engine = EnsembleEngine(scheme, rng)
    parts = engine.run("first_hits", n_traj, workers=workers, horizon=horizon,
                       init=init, burn_in=burn_in if init == "invariant" else 0)
    times = np.concatenate(parts)
    censored = times > horizon
    times = np.where(censored, horizon, times)
    warns = ()
    cfrac = float(censored.mean())
    if cfrac > 0.5:
        msg = (f"censoring fraction {cfrac:.2f} exceeds 50%; the horizon is "
               "below the mean hitting time")
        warnings.warn(msg)
        warns = (msg,)
    return HittingSample(times=times, censored=censored, horizon=horizon,
                         init=init, burn_in=burn_in if init == "invariant" else 0,
                         warnings=warns)


@dataclass(frozen=True)
class KSResult:
    statistic: float
    pvalue: float
    n: int
    scale: float


def ks_exponential(sample, scaling="empirical_mean") -> KSResult:
    """Kolmogorov-Smirnov distance of rescaled hitting times to Exp(1).

    ``scaling='empirical_mean'`` divides by the sample mean (the
    self-normalizing choice); a float rescales by that explicit rate.
    Censored entries are excluded.
    """
    if isinstance(sample, HittingSample):
        data = sample.uncensored.astype(float)
    else:
        data = np.asarray(sample, dtype=float)
    n = len(data)
    if n < 100:
        raise ValueError("need at least 100 uncensored samples")
    if scaling == "empirical_mean":
        scale = float(data.mean())
        rescaled = data / scale
    else:
        scale = float(scaling)
        rescaled = data * scale
    x = np.sort(rescaled)
    cdf = 1.0 - np.exp(-x)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))
    pvalue = float(scipy.stats.kstwo.sf(d, n))
    return KSResult(statistic=d, pvalue=pvalue, n=n, scale=scale)


# ---------------------------------------------------------------------------
# rare-event mass


def hole_mass_formula(scheme: CollisionScheme,
                      densities: Optional[FormulaDensities] = None) -> float:
    """First-order rare-event mass: per channel, the invariant density at
    the focal center times delta^2 times the averaged one-sided neighbour
    marginal at the partner center."""
    if scheme.disabled:
        return 0.0
    if densities is None:
        densities = FormulaDensities.idealized_for(scheme)
    d2 = scheme.delta ** 2
    total = 0.0
    for v in scheme.direction_labels():
        plus, minus = densities.rho_side[v]
        total += float(densities.rho_tau[v]) * d2 * (float(plus) + float(minus)) / 2
    return total


@dataclass(frozen=True)
class MassRow:
    delta: float
    direct: float
    formula: float

    @property
    def ratio(self) -> float:
        return self.direct / self.formula if self.formula else math.nan


def mass_asymptotics_check(scheme: CollisionScheme, deltas: Sequence[float],
                           source: str = "ulam", n_cells: int = 64,
                           rng: Optional[RngSpec] = None,
                           n_traj: int = 20_000, horizon: int = 200,
                           estimated_densities: bool = False) -> list:
    """Direct rare-event mass against the first-order formula, per delta.

    ``source='ulam'`` takes the mass of the hole under the closed box
    eigen-measure; ``source='histogram'`` uses the long-run occupation
    fraction of decoupled trajectories.  The formula side uses idealized
    densities by default or box marginals when ``estimated_densities``.
    """
    rows = []
    for d in deltas:
        sch = replace(scheme, delta=float(d))
        box = BoxModel.build(sch, which="three_site" if scheme.dimension == 1
                             else "two_site", n_cells=n_cells, variant="decoupled")
        closed = leading_eigen(build_operator(sch, box, "closed"))
        if source == "ulam":
            direct = float((closed.eigen_density * box.hole_fractions()).sum())
        elif source == "histogram":
            if rng is None:
                raise ValueError("histogram source needs an RngSpec")
            engine = EnsembleEngine(sch, rng)
            parts = engine.run("occupation", n_traj, horizon=horizon, burn_in=200)
            hits = sum(p[0] for p in parts)
            steps = sum(p[1] for p in parts)
            direct = hits / steps
        else:
            raise ValueError("source must be 'ulam' or 'histogram'")
        if estimated_densities:
            marginals = {}
            for v, partner in sch.focal_channels():
                if partner not in box.sites:
                    raise ResolutionError(f"site {partner} outside the box")
                dens = marginal_density(closed, box, partner)
                a_mv = sch.centers[-v]
                width = np.diff(box.edges)[
                    np.searchsorted(box.edges, a_mv, side="right") - 1]
                if width > sch.delta:
                    raise ResolutionError(
                        f"marginal bin width {width} at {a_mv} exceeds delta"
                    )
                marginals[v] = dens
            dens_in = FormulaDensities.estimated_for(sch, marginals)
        else:
            dens_in = FormulaDensities.idealized_for(sch)
        rows.append(MassRow(delta=float(d), direct=direct,
                            formula=hole_mass_formula(sch, dens_in)))
    return rows


# ---------------------------------------------------------------------------
# counting process


@dataclass(frozen=True)
class CountingSample:
    """Collision counts over the rescaled time window, with cluster sizes.

    ``counts[i]`` is the number of focal collisions of trajectory i during
    steps 1..horizon of the full dynamics; ``clusters[i]`` lists the sizes
    of maximal hit runs separated by at most ``gap`` steps.
    """

    t: float
    mu_hole: float
    horizon: int
    gap: int
    counts: np.ndarray
    clusters: list
    init: str

    def cluster_sizes(self) -> np.ndarray:
        flat = [s for traj in self.clusters for s in traj]
        return np.array(flat, dtype=int) if flat else np.empty(0, dtype=int)


def count_collisions(scheme: CollisionScheme, t: float, n_traj: int, gap: int,
                     rng: RngSpec, init: str = "invariant", burn_in: int = 1000,
                     mu_hole: Optional[float] = None,
                     workers: int = 1) -> CountingSample:
    """Sample the counting process over floor(t / mu(H_delta)) full steps.

    ``mu_hole`` defaults to the first-order mass formula; hits are counted
    from step 1, matching the counting process's definition.
    """
    if mu_hole is None:
        mu_hole = hole_mass_formula(scheme)
    horizon = int(math.floor(t / mu_hole))
    if horizon > 10 ** 9:
        raise ValueError(f"horizon {horizon} exceeds the 10^9 step guard")
    engine = EnsembleEngine(scheme, rng)
    parts = engine.run("count_hits", n_traj, workers=workers, horizon=horizon,
                       init=init, burn_in=burn_in if init == "invariant" else 0)
    counts = np.zeros(n_traj, dtype=int)
    clusters = [[] for _ in range(n_traj)]
    offset = 0
    for b, (traj_ids, steps) in enumerate(parts):
        m = rng.block_size if (b + 1) * rng.block_size <= n_traj else n_traj - offset
        if traj_ids.size:
            order = np.lexsort((steps, traj_ids))
            tid = traj_ids[order] + offset
            stp = steps[order]
            np.add.at(counts, tid, 1)
            start = 0
            for i in range(1, len(tid) + 1):
                if i == len(tid) or tid[i] != tid[start] or stp[i] - stp[i - 1] > gap:
                    clusters[tid[start]].append(i - start)
                    start = i
        offset += m
    sample = CountingSample(t=t, mu_hole=mu_hole, horizon=horizon, gap=gap,
                            counts=counts, clusters=clusters, init=init)
    for i in range(n_traj):
        if counts[i] != sum(clusters[i]):
            raise AssertionError("cluster sizes do not partition the count")
    return sample


def empirical_cf(sample: CountingSample, s_grid: Sequence[float],
                 n_boot: int = 200, seed: int = 0,
                 theta_tilde: Optional[Sequence[complex]] = None) -> list:
    """Empirical characteristic function of the counts with bootstrap CIs.

    When ``theta_tilde`` supplies the twisted weight per grid point, the
    companion limit curve exp(-(1 - e^{is}) theta_tilde(s) t) is attached.
    """
    z = sample.counts.astype(float)
    n = len(z)
    if n < 10_000:
        warnings.warn("characteristic function estimated from fewer than 10^4 "
                      "trajectories")
    g = np.random.default_rng(seed)
    rows = []
    for idx, s in enumerate(s_grid):
        vals = np.exp(1j * float(s) * z)
        est = complex(vals.mean())
        boots = np.empty(n_boot, dtype=complex)
        for b in range(n_boot):
            pick = g.integers(0, n, n)
            boots[b] = vals[pick].mean()
        re_lo, re_hi = np.percentile(boots.real, [2.5, 97.5])
        im_lo, im_hi = np.percentile(boots.imag, [2.5, 97.5])
        row = {
            "s": float(s),
            "value": est,
            "re_ci": (float(re_lo), float(re_hi)),
            "im_ci": (float(im_lo), float(im_hi)),
        }
        if theta_tilde is not None:
            e = np.exp(1j * float(s))
            row["overlay"] = complex(np.exp(-(1 - e) * theta_tilde[idx] * sample.t))
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# cluster-structure conditionals


@dataclass(frozen=True)
class BetaEstimate:
    value: float
    stderr: float
    n: int
    k: int
    j: int
    variant: int


def estimate_beta(scheme: CollisionScheme, k: int, j: int, n_traj: int,
                  variant: int, rng: RngSpec, workers: int = 1) -> BetaEstimate:
    """Conditional probability of a lag-k return with j intermediate hits.

    Trajectories start inside the rare event (importance sampling over the
    channels with product-Lebesgue bulk, exact for Lebesgue-invariant site
    maps).  Variant 1 interposes one decoupled step before the k full steps
    and counts intermediate hits over steps 0..k-1; variant 2 runs k+1 full
    steps counting hits over steps 1..k.
    """
    if n_traj < 500:
        raise InsufficientSurvivorsError(
            "need at least 500 conditioned trajectories"
        )
    engine = EnsembleEngine(scheme, rng)
    parts = engine.run("beta", n_traj, workers=workers, k=k, variant=variant)
    final = np.concatenate([p[0] for p in parts])
    inter = np.concatenate([p[1] for p in parts])
    hit = final & (inter == j)
    p = float(hit.mean())
    stderr = math.sqrt(max(p * (1 - p), 1e-300) / len(hit))
    return BetaEstimate(value=p, stderr=stderr, n=len(hit), k=k, j=j,
                        variant=variant)


def return_index_mismatch(scheme: CollisionScheme, k_values: Sequence[int],
                          n_traj: int, rng: RngSpec, workers: int = 1) -> dict:
    """Among lag-k returns of hole starts, the fraction whose index map
    moved off the starting neighbour site (negligible as delta shrinks)."""
    engine = EnsembleEngine(scheme, rng)
    out = {}
    for k in k_values:
        parts = engine.run("return_index", n_traj, workers=workers, k=int(k))
        returned = np.concatenate([p[0] for p in parts])
        moved = np.concatenate([p[1] for p in parts])
        n_ret = int(returned.sum())
        frac = float(moved[returned].mean()) if n_ret else 0.0
        out[int(k)] = {"returns": n_ret, "mismatch_fraction": frac}
    return out
