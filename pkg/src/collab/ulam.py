"""Ulam discretizations of the closed, open and twisted transfer operators.

Operators act on small site boxes around the focal site in
isolated_neighborhood mode, where the box dynamics is exactly closed.  Every
axis shares one partition of [0, 1); the partition is graded so that each
collision zone is a union of cells with a geometric stack of sub-cells
accumulating at the zone centre (where returns concentrate), which keeps the
dominant eigenvalue accurate at desk-scale grid sizes.  The open kind kills
the rare-event mass before transport; the twisted kind reweights it by a
unit-modulus phase.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .ensemble import EnsembleEngine, RngSpec
from .interval_map import (
    ConvergenceError,
    DensityEstimate,
    PiecewiseExpandingMap,
    transition_matrix,
)
from .lattice import CollisionScheme

__all__ = [
    "BoxModel",
    "IndexEvent",
    "ModeError",
    "ResolutionError",
    "SparseTransferOperator",
    "SpectralResult",
    "build_axis_partition",
    "build_interval_operator",
    "build_operator",
    "leading_eigen",
    "marginal_density",
    "operator_gap_diagnostics",
]

KINDS = ("closed", "open", "twisted")
MIN_ZONE_CELLS = 4


class ResolutionError(ValueError):
    """Axis grid cannot resolve every collision zone with >= 4 cells."""


class ModeError(ValueError):
    """Box operators require isolated_neighborhood mode."""


# ---------------------------------------------------------------------------
# partitions


def build_axis_partition(scheme: CollisionScheme, n_cells: int,
                         levels: int = 4) -> np.ndarray:
    """Shared axis partition with zone-aligned graded refinement.

    Each focal zone [a - delta/2, a + delta/2) becomes a union of cells whose
    widths shrink geometrically (ratio 1/|tau'(a)|) toward the centre, with
    matching outward buffer rings; branch points of the map are cell edges;
    the bulk is filled uniformly so the axis has exactly ``n_cells`` cells.

    Raises ResolutionError when ``n_cells`` is too small to give every zone
    at least four cells.
    """
    if n_cells < 8:
        raise ResolutionError("axis grid needs at least 8 cells")
    delta = scheme.delta
    for lev in range(levels, 0, -1):
        pts = {0.0, 1.0}
        pts.update(float(p) for p in scheme.pmap.partition_points)
        ok = True
        for v, a in scheme.centers.items():
            slope = abs(scheme.pmap.deriv(a))
            ratio = max(slope, 2.0)
            half = delta / 2
            ring = [half * ratio ** (-j) for j in range(lev + 1)]
            inner = set()
            for w in ring:
                inner.update((a - w, a + w))
            for wo, wi in zip(ring, ring[1:]):
                mid = wi + (wo - wi) / 2
                inner.update((a - mid, a + mid))
            inner.add(a)
            pts.update(inner)
            for j in range(1, lev + 1):
                w = half * ratio ** j
                for s in (-1.0, 1.0):
                    p = a + s * w
                    if 0.0 < p < 1.0:
                        pts.add(p)
            if len([p for p in inner if a - half <= p <= a + half]) - 1 < MIN_ZONE_CELLS:
                ok = False
        edges = np.array(sorted(pts))
        mandatory = len(edges) - 1
        if not ok or mandatory > n_cells:
            continue
        # fill the remaining budget uniformly inside the largest gaps
        budget = n_cells - mandatory
        gaps = np.diff(edges)
        splits = np.zeros(len(gaps), dtype=int)
        for _ in range(budget):
            i = int(np.argmax(gaps / (splits + 1)))
            splits[i] += 1
        out = [edges[0]]
        for i, g in enumerate(gaps):
            for k in range(1, splits[i] + 1):
                out.append(edges[i] + g * k / (splits[i] + 1))
            out.append(edges[i + 1])
        result = np.array(out)
        if len(result) - 1 != n_cells:
            raise AssertionError("partition budget accounting failed")
        return result
    raise ResolutionError(
        f"cannot resolve {len(scheme.centers)} zones with >= {MIN_ZONE_CELLS} "
        f"cells each inside a {n_cells}-cell axis"
    )


def _overlap_fractions(edges: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Per-cell overlap fraction with [lo, hi); exact interval arithmetic."""
    left = np.maximum(edges[:-1], lo)
    right = np.minimum(edges[1:], hi)
    return np.clip(right - left, 0.0, None) / np.diff(edges)


def _zone_cells(edges: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Indices of cells contained in [lo, hi] (zone-aligned partitions)."""
    tol = 1e-12
    return np.nonzero((edges[:-1] >= lo - tol) & (edges[1:] <= hi + tol))[0]


# ---------------------------------------------------------------------------
# box geometry


@dataclass(frozen=True)
class BoxModel:
    """A 2- or 3-site box around the focal site with a shared axis partition.

    ``sites`` lists the box sites in axis order; ``variant`` selects the box
    dynamics ('decoupled' suppresses the focal swaps, 'full' keeps them).
    ``channels`` holds, per collision channel contained in the box, the focal
    and partner axis indices together with their zone bounds.
    """

    scheme: CollisionScheme
    sites: tuple
    edges: np.ndarray
    variant: str = "decoupled"

    def __post_init__(self):
        if self.scheme.mode != "isolated_neighborhood":
            raise ModeError("box operators are exact only in isolated_neighborhood mode")
        if self.variant not in ("decoupled", "full"):
            raise ValueError("variant must be 'decoupled' or 'full'")
        if not 2 <= len(self.sites) <= 3:
            raise ValueError("box must contain 2 or 3 sites")
        if self.scheme.focal_site not in self.sites:
            raise ValueError("box must contain the focal site")
        for v, a in self.scheme.centers.items():
            lo, hi = self.scheme.zone_bounds(v, self.scheme.delta)
            if len(_zone_cells(self.edges, lo, hi)) < MIN_ZONE_CELLS:
                raise ResolutionError(
                    f"zone for direction {v} resolved by fewer than "
                    f"{MIN_ZONE_CELLS} cells"
                )

    @classmethod
    def build(cls, scheme: CollisionScheme, which: str = "three_site",
              n_cells: int = 100, variant: str = "decoupled",
              levels: int = 4) -> "BoxModel":
        p_star = scheme.focal_site
        if which == "two_site":
            sites = (p_star, scheme.neighbor(p_star, 1))
        elif which == "three_site":
            if scheme.dimension != 1:
                raise ValueError("three-site boxes are defined for d = 1 only")
            sites = (scheme.neighbor(p_star, -1), p_star, scheme.neighbor(p_star, 1))
        else:
            raise ValueError("which must be 'two_site' or 'three_site'")
        edges = build_axis_partition(scheme, n_cells, levels=levels)
        return cls(scheme=scheme, sites=sites, edges=edges, variant=variant)

    @property
    def n_axes(self) -> int:
        return len(self.sites)

    @property
    def n_cells(self) -> int:
        return len(self.edges) - 1

    @property
    def focal_axis(self) -> int:
        return self.sites.index(self.scheme.focal_site)

    def channels(self) -> list:
        """Collision channels with both members inside the box."""
        out = []
        site_axis = {s: i for i, s in enumerate(self.sites)}
        for v, partner in self.scheme.focal_channels():
            if partner in site_axis:
                lo_f, hi_f = self.scheme.zone_bounds(v, self.scheme.delta)
                lo_p, hi_p = self.scheme.zone_bounds(-v, self.scheme.delta)
                out.append((v, self.focal_axis, site_axis[partner],
                            (lo_f, hi_f), (lo_p, hi_p)))
        return out

    def hole_fractions(self) -> np.ndarray:
        """Per-cell overlap fraction with the rare event, as a box tensor.

        The rare event is a union over channels of zone rectangles; zones on
        the focal axis are disjoint, so the channel fractions add.
        """
        n, k = self.n_cells, self.n_axes
        out = np.zeros((n,) * k)
        for (v, af, ap, (lo_f, hi_f), (lo_p, hi_p)) in self.channels():
            of = _overlap_fractions(self.edges, lo_f, hi_f)
            op_ = _overlap_fractions(self.edges, lo_p, hi_p)
            shape_f = [1] * k
            shape_f[af] = n
            shape_p = [1] * k
            shape_p[ap] = n
            out += of.reshape(shape_f) * op_.reshape(shape_p)
        return np.clip(out, 0.0, 1.0)

    def lebesgue_masses(self) -> np.ndarray:
        w = np.diff(self.edges)
        out = w
        for _ in range(self.n_axes - 1):
            out = np.multiply.outer(out, w)
        return out

    def swap_blocks(self) -> list:
        """Zone cell-index blocks for the exchange stage of the full variant.

        Valid because the partition is zone-aligned: each channel's collision
        set is a union of whole cells, and the exchange transposes the focal
        and partner axes on that block.
        """
        out = []
        for (v, af, ap, (lo_f, hi_f), (lo_p, hi_p)) in self.channels():
            zf = _zone_cells(self.edges, lo_f, hi_f)
            zp = _zone_cells(self.edges, lo_p, hi_p)
            out.append((af, ap, zf, zp))
        return out


# ---------------------------------------------------------------------------
# operators


@dataclass
class SparseTransferOperator:
    """Transfer operator on box (or interval) cells in tensor form.

    ``axis_matrix[i, j]`` is the fraction of axis-cell i carried into axis-
    cell j by the site map; ``row_factor`` multiplies the mass of each source
    cell before transport (survival fraction for the open kind, mean phase
    for the twisted kind); ``swap_blocks`` lists the exchange-stage index
    blocks used by full-variant boxes.
    """

    kind: str
    axis_matrix: sp.csr_matrix
    n_axes: int
    edges: np.ndarray
    row_factor: Optional[np.ndarray] = None
    swap_blocks: tuple = ()
    s: Optional[float] = None
    box: Optional[BoxModel] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        self._trans = self.axis_matrix.T.tocsr()

    @property
    def n_cells(self) -> int:
        return self.axis_matrix.shape[0]

    @property
    def dimension(self) -> int:
        return self.n_cells ** self.n_axes

    def apply(self, mu: np.ndarray) -> np.ndarray:
        """Pushforward of a tensor of cell masses through one step."""
        nu = mu if self.row_factor is None else mu * self.row_factor
        if self.swap_blocks:
            nu = nu.copy() if nu is mu else nu
            for (af, ap, zf, zp) in self.swap_blocks:
                idx = np.ix_(*[zf if a == af else (zp if a == ap else
                                                   np.arange(self.n_cells))
                               for a in range(self.n_axes)])
                tgt = np.ix_(*[zp if a == af else (zf if a == ap else
                                                   np.arange(self.n_cells))
                               for a in range(self.n_axes)])
                block = nu[idx].copy()
                nu[idx] = 0.0
                nu[tgt] = nu[tgt] + np.swapaxes(block, af, ap)
        n, k = self.n_cells, self.n_axes
        for axis in range(k):
            moved = np.moveaxis(nu, axis, 0).reshape(n, -1)
            pushed = self._trans @ moved
            nu = np.moveaxis(pushed.reshape((n,) + tuple(
                self.n_cells for _ in range(k - 1))), 0, axis)
        return nu

    def row_sums(self) -> np.ndarray:
        """Total outgoing fraction per source cell (tensor shaped)."""
        ones = np.ones(self.n_cells)
        axis_sum = np.asarray(self.axis_matrix @ ones).ravel()
        out = axis_sum
        for _ in range(self.n_axes - 1):
            out = np.multiply.outer(out, axis_sum)
        if self.row_factor is not None:
            out = out * self.row_factor
        return out

    def to_coo(self, max_dimension: int = 400_000) -> sp.coo_matrix:
        """Materialized (row = source cell, col = target cell) matrix."""
        if self.dimension > max_dimension:
            raise MemoryError(
                f"refusing to materialize {self.dimension}x{self.dimension} operator"
            )
        base = self.axis_matrix
        for _ in range(self.n_axes - 1):
            base = sp.kron(base, self.axis_matrix, format="csr")
        if self.swap_blocks:
            perm = np.arange(self.dimension).reshape((self.n_cells,) * self.n_axes)
            for (af, ap, zf, zp) in self.swap_blocks:
                src = np.ix_(*[zf if a == af else (zp if a == ap else
                                                   np.arange(self.n_cells))
                               for a in range(self.n_axes)])
                tgt = [zp if a == af else (zf if a == ap else np.arange(self.n_cells))
                       for a in range(self.n_axes)]
                flat_target = np.arange(self.dimension).reshape(
                    (self.n_cells,) * self.n_axes)[np.ix_(*tgt)]
                perm[src] = np.swapaxes(flat_target, af, ap)
            base = base[perm.ravel()]
        if self.row_factor is not None:
            base = sp.diags(self.row_factor.ravel().astype(complex if
                            np.iscomplexobj(self.row_factor) else float)) @ base
        return base.tocoo()


def build_operator(scheme: CollisionScheme, box: BoxModel, kind: str,
                   s: float = None) -> SparseTransferOperator:
    """Closed / open / twisted operator on the box.

    The open kind realizes the rare-event operator (survival-weighted
    transport by the decoupled dynamics); the twisted kind reweights each
    source cell by the mean of exp(i*s*1_H) and transports by the box
    variant's dynamics, so twisted(0) coincides with the closed operator.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if box.scheme is not scheme and box.scheme.to_config() != scheme.to_config():
        raise ValueError("box was built for a different scheme")
    if kind == "open" and box.variant != "decoupled":
        raise ValueError("the rare-event (open) operator is defined through "
                         "the decoupled dynamics; build the box with "
                         "variant='decoupled'")
    P = transition_matrix(scheme.pmap, box.edges)
    swaps = tuple(box.swap_blocks()) if box.variant == "full" else ()
    factor = None
    if kind == "open":
        factor = 1.0 - box.hole_fractions()
    elif kind == "twisted":
        if s is None:
            raise ValueError("twisted kind needs the parameter s")
        o = box.hole_fractions()
        factor = 1.0 + (cmath.exp(1j * s) - 1.0) * o
        if s == 0.0:
            factor = None  # twisted(0) is the closed operator, entrywise
    return SparseTransferOperator(
        kind=kind,
        axis_matrix=P,
        n_axes=box.n_axes,
        edges=box.edges,
        row_factor=factor,
        swap_blocks=swaps,
        s=s,
        box=box,
    )


def build_interval_operator(pmap: PiecewiseExpandingMap, edges: np.ndarray,
                            kind: str = "closed",
                            hole: Optional[tuple] = None,
                            s: float = None) -> SparseTransferOperator:
    """One-dimensional operator on [0, 1), optionally with a hole interval.

    Used by the open-system oracles (e.g. the doubling map with hole
    [0, 1/4)) and by the invariant-density machinery.
    """
    edges = np.asarray(edges, dtype=float)
    P = transition_matrix(pmap, edges)
    factor = None
    if kind == "open":
        if hole is None:
            raise ValueError("open kind needs a hole interval")
        factor = 1.0 - _overlap_fractions(edges, *hole)
    elif kind == "twisted":
        if hole is None or s is None:
            raise ValueError("twisted kind needs a hole interval and s")
        if s != 0.0:
            factor = 1.0 + (cmath.exp(1j * s) - 1.0) * _overlap_fractions(edges, *hole)
    return SparseTransferOperator(kind=kind, axis_matrix=P, n_axes=1,
                                  edges=edges, row_factor=factor, s=s)


# ---------------------------------------------------------------------------
# spectra


@dataclass(frozen=True)
class SpectralResult:
    """Dominant eigendata of a transfer operator."""

    eigenvalue: complex
    eigen_density: np.ndarray
    iterations: int
    residual: float
    kind: str

    @property
    def modulus(self) -> float:
        return abs(self.eigenvalue)

    @property
    def phase(self) -> float:
        return math.atan2(self.eigenvalue.imag, self.eigenvalue.real)

    @property
    def escape_rate(self) -> float:
        return -math.log(self.modulus)


def leading_eigen(op: SparseTransferOperator, tolerance: float = 1e-12,
                  max_iterations: int = 100_000) -> SpectralResult:
    """Dominant eigenvalue and eigen-density by L1-normalized power iteration.

    Starts from Lebesgue cell masses; the eigenvalue estimate is the mass
    ratio of successive iterates, and convergence requires the L1 residual
    |A v - lambda v| <= tolerance * |v|.
    """
    w = np.diff(op.edges)
    mu = w.astype(complex) if op.kind == "twisted" and op.row_factor is not None else w.copy()
    for _ in range(op.n_axes - 1):
        mu = np.multiply.outer(mu, w)
    mu = mu / np.abs(mu).sum()
    lam = 1.0 + 0j
    residual = math.inf
    for it in range(1, max_iterations + 1):
        nu = op.apply(mu)
        total = nu.sum()
        denom = mu.sum()
        lam = total / denom
        if abs(lam) < 1e-14:
            raise ConvergenceError("dominant eigenvalue collapsed to 0; the "
                                   "hole swallowed all mass")
        residual = float(np.abs(nu - lam * mu).sum() / np.abs(mu).sum())
        mu = nu / np.abs(nu).sum()
        if residual <= tolerance:
            break
    else:
        raise ConvergenceError(
            f"power iteration stalled at residual {residual:.3e} after "
            f"{max_iterations} iterations"
        )
    if op.kind in ("closed", "open"):
        lam = lam.real if isinstance(lam, complex) else lam
        mu = mu.real
        mu = mu / mu.sum()
        if op.kind == "closed" and abs(lam - 1.0) > 1e-10:
            raise ConvergenceError(f"closed operator eigenvalue {lam} is not 1")
        if op.kind == "open" and not (0.0 < lam <= 1.0 + 1e-12):
            raise ConvergenceError(f"open operator eigenvalue {lam} outside (0, 1]")
    eigenvalue = complex(lam)
    return SpectralResult(eigenvalue=eigenvalue, eigen_density=mu,
                          iterations=it, residual=residual, kind=op.kind)


# ---------------------------------------------------------------------------
# marginals


@dataclass(frozen=True)
class IndexEvent:
    """Conditioning event for marginal densities.

    Requires the index map started at ``site`` to reach ``target`` after
    ``k`` steps while avoiding every (j, site_j) in ``complements``.
    """

    site: tuple
    k: int
    target: tuple
    complements: tuple = ()
    variant: str = "psi"


def _event_fractions(box: BoxModel, event: IndexEvent,
                     samples_per_cell: int, seed: int) -> np.ndarray:
    """Monte Carlo within-cell fraction of the index event, per box cell."""
    site_axis = {s: i for i, s in enumerate(box.sites)}
    if event.site not in site_axis or event.target not in site_axis:
        missing = event.site if event.site not in site_axis else event.target
        raise ValueError(f"index event references site {missing} outside the box")
    for (_, s_j) in event.complements:
        if s_j not in site_axis:
            raise ValueError(f"index event complement references site {s_j} "
                             "outside the box")
    engine = EnsembleEngine(box.scheme, RngSpec(seed))
    row_of_axis = [engine._row_of[s] for s in box.sites]
    n, k_axes = box.n_cells, box.n_axes
    edges = box.edges
    rng = np.random.default_rng(seed)
    n_cells_total = n ** k_axes
    spc = samples_per_cell
    # all cells at once: sample spc points per cell
    grids = np.meshgrid(*[np.arange(n)] * k_axes, indexing="ij")
    X = np.empty((len(engine.sim_sites), n_cells_total * spc))
    X[:] = rng.random(X.shape)
    for axis in range(k_axes):
        cell_idx = np.repeat(grids[axis].ravel(), spc)
        u = rng.random(n_cells_total * spc)
        X[row_of_axis[axis]] = edges[cell_idx] + u * (edges[cell_idx + 1] - edges[cell_idx])
    dynamics = "decoupled" if event.variant == "psi" else "full"
    S = np.full(X.shape[1], engine._row_of[event.site], dtype=np.int64)
    want_j = {j: engine._row_of[s_j] for (j, s_j) in event.complements}
    ok = np.ones(X.shape[1], dtype=bool)
    tmp = np.empty_like(X)
    for step_idx in range(1, event.k + 1):
        for (r1, r2, lo1, hi1, lo2, hi2, focal, _axis, _p) in engine.edges:
            if dynamics == "decoupled" and focal:
                continue
            x1, x2 = X[r1], X[r2]
            swap = (x1 >= lo1) & (x1 < hi1) & (x2 >= lo2) & (x2 < hi2)
            at1 = swap & (S == r1)
            at2 = swap & (S == r2)
            S[at1] = r2
            S[at2] = r1
        engine.step_block(X, dynamics, tmp)
        if step_idx in want_j:
            ok &= S != want_j[step_idx]
    ok &= S == engine._row_of[event.target]
    return ok.reshape((n,) * k_axes + (spc,)).mean(axis=-1)


def marginal_density(result: SpectralResult, box: BoxModel, coordinate,
                     conditioning: Optional[IndexEvent] = None,
                     samples_per_cell: int = 16,
                     seed: int = 0):
    """Marginal of the eigen-measure on one box coordinate (or a pair).

    With ``conditioning`` the cell masses are first filtered by the Monte
    Carlo within-cell fraction of the index event, realizing the conditioned
    marginals that enter the extremal-index formula.  Conditioned marginals
    are not normalized (they carry the event's measure); unconditioned ones
    are probability densities.
    """
    sites = [coordinate] if isinstance(coordinate, tuple) and (
        not coordinate or not isinstance(coordinate[0], tuple)) else list(coordinate)
    axes = []
    site_axis = {s: i for i, s in enumerate(box.sites)}
    for s in sites:
        if s not in site_axis:
            raise ValueError(f"coordinate {s} is outside the box")
        axes.append(site_axis[s])
    mass = result.eigen_density.real.copy()
    if conditioning is not None:
        mass = mass * _event_fractions(box, conditioning, samples_per_cell, seed)
    other = tuple(a for a in range(box.n_axes) if a not in axes)
    marg = mass.sum(axis=other) if other else mass
    widths = np.diff(box.edges)
    if len(axes) == 1:
        vals = marg / widths
        total = float((vals * widths).sum())
        if conditioning is None:
            return DensityEstimate(box.edges, vals / max(total, 1e-300))
        return box.edges, vals  # unnormalized conditioned marginal
    return box.edges, marg / np.multiply.outer(widths, widths)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class GapDiagnosticsRow:
    delta: float
    tv_difference: float
    mass_difference: float


@dataclass(frozen=True)
class GapDiagnostics:
    rows: tuple
    tv_slope: float
    mass_slope: float


def operator_gap_diagnostics(scheme: CollisionScheme, deltas: Sequence[float],
                             which: str = "three_site", n_cells: int = 64,
                             levels: int = 3) -> GapDiagnostics:
    """Weak-norm distance between the closed and rare-event operators.

    For each delta the closed and open operators are applied to the uniform
    density; the total-variation norm of the difference and the plain mass
    difference are both reported (they coincide for a positive input, and
    both equal the Lebesgue mass of the rare event) along with fitted
    log-log slopes against delta.  The bound being certified is an upper
    bound O(delta), so slopes >= 1 are the checkable direction.
    """
    if len(deltas) < 3:
        raise ValueError("need at least 3 delta values")
    ratios = [deltas[i] / deltas[i + 1] for i in range(len(deltas) - 1)]
    if any(abs(r - ratios[0]) > 1e-9 * ratios[0] for r in ratios):
        raise ValueError("delta values must be in geometric progression")
    rows = []
    for d in deltas:
        sch = replace(scheme, delta=float(d))
        box = BoxModel.build(sch, which=which, n_cells=n_cells,
                             variant="decoupled", levels=levels)
        closed = build_operator(sch, box, "closed")
        opened = build_operator(sch, box, "open")
        u = box.lebesgue_masses()
        diff = closed.apply(u) - opened.apply(u)
        tv = float(np.abs(diff).sum())
        mass = float(diff.sum())
        rows.append(GapDiagnosticsRow(delta=float(d), tv_difference=tv,
                                      mass_difference=mass))
    logd = np.log([r.delta for r in rows])
    tv_slope = float(np.polyfit(logd, np.log([r.tv_difference for r in rows]), 1)[0])
    mass_slope = float(np.polyfit(logd, np.log([r.mass_difference for r in rows]), 1)[0])
    return GapDiagnostics(rows=tuple(rows), tv_slope=tv_slope, mass_slope=mass_slope)
