"""One-dimensional site dynamics: piecewise expanding maps of [0, 1).

The site map is piecewise monotone, each branch mapping its interval onto the
whole of [0, 1), with |derivative| bounded below by an expansion factor
``alpha > 1``.  Affine branches with rational data additionally support exact
arithmetic, which the closed-form recurrence machinery relies on.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Branch",
    "ConvergenceError",
    "DensityEstimate",
    "MapDomainError",
    "MapSingularityError",
    "PiecewiseExpandingMap",
    "invariant_density",
    "transition_matrix",
]

#: results of the mod-1 reduction inside [1 - MOD_CLAMP, 1] collapse to 0
MOD_CLAMP = 1e-15

ONTO_TOL = 1e-12


class MapDomainError(ValueError):
    """Point lies outside [0, 1)."""


class MapSingularityError(ValueError):
    """Derivative requested at a partition point."""


class ConvergenceError(RuntimeError):
    """Power iteration failed to converge; the map specification is suspect."""


def mod1(y: float) -> float:
    """Reduce into [0, 1), collapsing the floating-point closure of the torus."""
    y = y - np.floor(y)
    if y >= 1.0 - MOD_CLAMP:
        return 0.0
    return float(y)


def mod1_array(y: np.ndarray) -> np.ndarray:
    y = y - np.floor(y)
    y[y >= 1.0 - MOD_CLAMP] = 0.0
    return y


@dataclass(frozen=True)
class Branch:
    """One monotone branch of the site map.

    Affine branches carry ``slope`` and ``offset`` (map x -> slope*x + offset
    mod 1); nonlinear branches carry callables ``fn`` and ``deriv_fn`` instead.
    Rational slope/offset/endpoints enable the exact evaluation path.
    """

    lo: float
    hi: float
    slope: Optional[float] = None
    offset: Optional[float] = None
    fn: Optional[Callable[[float], float]] = None
    deriv_fn: Optional[Callable[[float], float]] = None
    lo_exact: Optional[Fraction] = None
    hi_exact: Optional[Fraction] = None
    slope_exact: Optional[Fraction] = None
    offset_exact: Optional[Fraction] = None

    @property
    def affine(self) -> bool:
        return self.slope is not None

    @property
    def rational(self) -> bool:
        return None not in (self.lo_exact, self.hi_exact,
                            self.slope_exact, self.offset_exact)


def _as_fraction(x) -> Optional[Fraction]:
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    return None


@dataclass(frozen=True)
class PiecewiseExpandingMap:
    """Piecewise C2, piecewise onto, uniformly expanding map of [0, 1).

    Parameters
    ----------
    partition_points : sequence of float
        Branch endpoints 0 = xi_0 < ... < xi_M = 1.
    branches : sequence of Branch
        One branch per partition interval, each monotone and onto [0, 1).
    expansion_factor : float
        Lower bound alpha > 1 on |derivative|.

    Branch membership is half-open: x belongs to branch i when
    ``xi_{i-1} <= x < xi_i``.
    """

    partition_points: tuple
    branches: tuple
    expansion_factor: float
    name: str = ""

    def __post_init__(self):
        self.validate()

    # -- construction ------------------------------------------------------

    @classmethod
    def mod_beta(cls, beta: int) -> "PiecewiseExpandingMap":
        """The canonical family x -> beta*x mod 1 with integer beta >= 2."""
        if int(beta) != beta or beta < 2:
            raise ValueError(f"mod_beta requires integer beta >= 2, got {beta!r}")
        beta = int(beta)
        pts = [Fraction(i, beta) for i in range(beta + 1)]
        branches = tuple(
            Branch(
                lo=float(pts[i]),
                hi=float(pts[i + 1]),
                slope=float(beta),
                offset=float(-i),
                lo_exact=pts[i],
                hi_exact=pts[i + 1],
                slope_exact=Fraction(beta),
                offset_exact=Fraction(-i),
            )
            for i in range(beta)
        )
        return cls(
            partition_points=tuple(float(p) for p in pts),
            branches=branches,
            expansion_factor=float(beta),
            name=f"mod_{beta}",
        )

    @classmethod
    def from_affine(cls, points: Sequence, slopes: Sequence, offsets: Sequence,
                    name: str = "affine") -> "PiecewiseExpandingMap":
        """Affine-branch map from endpoint/slope/offset lists.

        Entries may be ints, floats, Fractions or strings like ``"1/3"``;
        rational data activates the exact evaluation path.
        """
        if len(points) != len(slopes) + 1 or len(slopes) != len(offsets):
            raise ValueError("need len(points) == len(slopes)+1 == len(offsets)+1")
        pts_exact = [_as_fraction(p) for p in points]
        slo_exact = [_as_fraction(s) for s in slopes]
        off_exact = [_as_fraction(c) for c in offsets]
        pts = [float(Fraction(p) if isinstance(p, str) else p) for p in points]
        branches = []
        for i in range(len(slopes)):
            s = slopes[i] if not isinstance(slopes[i], str) else Fraction(slopes[i])
            c = offsets[i] if not isinstance(offsets[i], str) else Fraction(offsets[i])
            branches.append(
                Branch(
                    lo=pts[i],
                    hi=pts[i + 1],
                    slope=float(s),
                    offset=float(c),
                    lo_exact=pts_exact[i],
                    hi_exact=pts_exact[i + 1],
                    slope_exact=slo_exact[i],
                    offset_exact=off_exact[i],
                )
            )
        alpha = min(abs(float(s if not isinstance(s, str) else Fraction(s))) for s in slopes)
        return cls(tuple(pts), tuple(branches), alpha, name=name)

    @classmethod
    def from_c2_branches(cls, points: Sequence[float],
                         fns: Sequence[Callable[[float], float]],
                         derivs: Sequence[Callable[[float], float]],
                         expansion_factor: float,
                         name: str = "c2") -> "PiecewiseExpandingMap":
        """Nonlinear branches given as (map, derivative) callables per interval."""
        pts = tuple(float(p) for p in points)
        branches = tuple(
            Branch(lo=pts[i], hi=pts[i + 1], fn=fns[i], deriv_fn=derivs[i])
            for i in range(len(fns))
        )
        return cls(pts, branches, float(expansion_factor), name=name)

    @classmethod
    def from_config(cls, block: dict) -> "PiecewiseExpandingMap":
        """Build from the experiment-config map block."""
        kind = block.get("kind")
        if kind == "mod_beta":
            return cls.mod_beta(block["beta"])
        if kind == "affine_branches":
            return cls.from_affine(block["points"], block["slopes"], block["offsets"])
        raise ValueError(f"unknown map kind {kind!r}")

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        pts = self.partition_points
        if not (abs(pts[0]) < ONTO_TOL and abs(pts[-1] - 1.0) < ONTO_TOL):
            raise ValueError("partition must start at 0 and end at 1")
        if any(pts[i] >= pts[i + 1] for i in range(len(pts) - 1)):
            raise ValueError("partition points must be strictly increasing")
        if len(self.branches) != len(pts) - 1:
            raise ValueError("need one branch per partition interval")
        if self.expansion_factor <= 1.0:
            raise ValueError("expansion factor must exceed 1")
        for b in self.branches:
            self._check_branch(b)

    def _check_branch(self, b: Branch) -> None:
        if b.affine:
            if b.rational:
                lo_img = b.slope_exact * b.lo_exact + b.offset_exact
                hi_img = b.slope_exact * b.hi_exact + b.offset_exact
                span = abs(hi_img - lo_img)
                onto = span == 1 and min(lo_img, hi_img) == int(min(lo_img, hi_img))
                if not onto:
                    raise ValueError(f"affine branch on [{b.lo}, {b.hi}) is not onto [0,1)")
            else:
                span = abs(b.slope) * (b.hi - b.lo)
                lo_img = b.slope * b.lo + b.offset
                hi_img = b.slope * b.hi + b.offset
                frac = min(lo_img, hi_img) - round(min(lo_img, hi_img))
                if abs(span - 1.0) > ONTO_TOL or abs(frac) > ONTO_TOL:
                    raise ValueError(f"affine branch on [{b.lo}, {b.hi}) is not onto [0,1)")
            if abs(b.slope) < self.expansion_factor - ONTO_TOL:
                raise ValueError("branch slope below the declared expansion factor")
        else:
            if b.fn is None or b.deriv_fn is None:
                raise ValueError("nonlinear branch needs fn and deriv_fn")
            xs = np.linspace(b.lo, b.hi, 33, endpoint=False)[1:]
            ds = np.array([b.deriv_fn(float(x)) for x in xs])
            if np.any(np.abs(ds) < self.expansion_factor - 1e-9):
                raise ValueError("sampled |derivative| below the expansion factor")
            left = b.fn(b.lo)
            right = b.fn(b.hi - 1e-13)
            ends = sorted([mod1(left), right - np.floor(left)])
            if not (ends[0] < ONTO_TOL or ends[0] > 1 - ONTO_TOL) and abs(ends[1] - ends[0]) < 1 - 1e-9:
                raise ValueError("nonlinear branch does not look onto [0,1)")

    # -- evaluation --------------------------------------------------------

    @property
    def is_rational_affine(self) -> bool:
        return all(b.rational for b in self.branches)

    def branch_index(self, x: float) -> int:
        if not (0.0 <= x < 1.0):
            raise MapDomainError(f"x = {x!r} outside [0, 1)")
        return min(bisect_right(self.partition_points, x) - 1, len(self.branches) - 1)

    def __call__(self, x: float) -> float:
        b = self.branches[self.branch_index(float(x))]
        if b.affine:
            return mod1(b.slope * float(x) + b.offset)
        return mod1(b.fn(float(x)))

    def eval_exact(self, x: Fraction) -> Fraction:
        """Exact image of a rational point under a rational-affine map."""
        if not self.is_rational_affine:
            raise ValueError("exact evaluation needs rational affine branches")
        if not (0 <= x < 1):
            raise MapDomainError(f"x = {x} outside [0, 1)")
        for b in self.branches:
            if b.lo_exact <= x < b.hi_exact:
                y = b.slope_exact * x + b.offset_exact
                return y - (y.numerator // y.denominator)
        raise MapDomainError(f"no branch contains {x}")

    def deriv(self, x: float) -> float:
        """Signed derivative on the branch containing x.

        Raises MapSingularityError at interior partition points, where the
        two-sided derivative does not exist; callers perturb or use the
        branch membership convention explicitly.
        """
        x = float(x)
        if not (0.0 <= x < 1.0):
            raise MapDomainError(f"x = {x!r} outside [0, 1)")
        for p in self.partition_points[1:-1]:
            if x == p:
                raise MapSingularityError(f"derivative undefined at partition point {x}")
        b = self.branches[self.branch_index(x)]
        return float(b.slope) if b.affine else float(b.deriv_fn(x))

    def deriv_exact(self, x: Fraction) -> Fraction:
        if not self.is_rational_affine:
            raise ValueError("exact derivative needs rational affine branches")
        for b in self.branches:
            if b.lo_exact <= x < b.hi_exact:
                return b.slope_exact
        raise MapDomainError(f"no branch contains {x}")

    def apply(self, xs: np.ndarray) -> np.ndarray:
        """Vectorized map evaluation; xs must lie in [0, 1)."""
        xs = np.asarray(xs, dtype=float)
        if len(self.branches) >= 2 and all(
            b.affine and b.slope == self.branches[0].slope
            and abs(b.hi - b.lo - (self.branches[0].hi - self.branches[0].lo)) < 1e-15
            for b in self.branches
        ) and self.branches[0].offset == 0.0:
            # fast path: full equal-slope family beta*x mod 1
            y = self.branches[0].slope * xs
            return mod1_array(y)
        idx = np.clip(
            np.searchsorted(self.partition_points, xs, side="right") - 1,
            0, len(self.branches) - 1,
        )
        if all(b.affine for b in self.branches):
            slopes = np.array([b.slope for b in self.branches])
            offs = np.array([b.offset for b in self.branches])
            y = slopes[idx] * xs + offs[idx]
            return mod1_array(y)
        y = np.empty_like(xs)
        flat_idx = idx.ravel()
        flat_x = xs.ravel()
        flat_y = y.ravel()
        for i, b in enumerate(self.branches):
            m = flat_idx == i
            if not m.any():
                continue
            if b.affine:
                flat_y[m] = b.slope * flat_x[m] + b.offset
            else:
                flat_y[m] = [b.fn(float(v)) for v in flat_x[m]]
        return mod1_array(y)

    def orbit_deriv_exact(self, x: Fraction, n: int) -> Fraction:
        """|(tau^n)'(x)| by the chain rule along the exact orbit."""
        d = Fraction(1)
        y = x
        for _ in range(n):
            d *= abs(self.deriv_exact(y))
            y = self.eval_exact(y)
        return d

    def to_config(self) -> dict:
        if self.name.startswith("mod_") and self.name[4:].isdigit():
            return {"kind": "mod_beta", "beta": int(self.name[4:])}
        if all(b.affine for b in self.branches):
            return {
                "kind": "affine_branches",
                "points": [str(b.lo_exact) if b.lo_exact is not None else b.lo for b in self.branches]
                + [str(self.branches[-1].hi_exact) if self.branches[-1].hi_exact is not None
                   else self.branches[-1].hi],
                "slopes": [str(b.slope_exact) if b.slope_exact is not None else b.slope
                           for b in self.branches],
                "offsets": [str(b.offset_exact) if b.offset_exact is not None else b.offset
                            for b in self.branches],
            }
        raise ValueError("nonlinear maps have no config representation")


# ---------------------------------------------------------------------------
# densities


@dataclass(frozen=True)
class DensityEstimate:
    """Piecewise-constant probability density on a partition of [0, 1).

    ``values[i]`` is the bin-averaged density on ``[edges[i], edges[i+1])``.
    The default constructor checks positivity and unit mass.
    """

    edges: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=float))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if len(self.edges) != len(self.values) + 1:
            raise ValueError("need len(edges) == len(values) + 1")
        if np.any(self.values < -1e-12):
            raise ValueError("density values must be nonnegative")
        mass = float(np.sum(self.values * np.diff(self.edges)))
        if abs(mass - 1.0) > 1e-10:
            raise ValueError(f"density mass {mass} not 1 within 1e-10")

    @classmethod
    def uniform_grid(cls, values: np.ndarray) -> "DensityEstimate":
        n = len(values)
        return cls(np.linspace(0.0, 1.0, n + 1), values)

    @property
    def grid_size(self) -> int:
        return len(self.values)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    def value_right(self, a: float) -> float:
        """rho(a+): density of the bin immediately to the right of a."""
        i = int(np.searchsorted(self.edges, a, side="right") - 1)
        return float(self.values[min(max(i, 0), len(self.values) - 1)])

    def value_left(self, a: float) -> float:
        """rho(a-): density of the bin immediately to the left of a."""
        i = int(np.searchsorted(self.edges, a, side="left") - 1)
        return float(self.values[min(max(i, 0), len(self.values) - 1)])

    def l1_distance(self, other: "DensityEstimate") -> float:
        if not np.array_equal(self.edges, other.edges):
            raise ValueError("L1 distance needs matching partitions")
        return float(np.sum(np.abs(self.values - other.values) * self.widths))


# ---------------------------------------------------------------------------
# 1D Ulam machinery


def _branch_image_pieces(b: Branch):
    """Unwrapped image intervals of an affine branch restricted to [a, b)."""

    def pieces(a, c):
        lo_img = b.slope * a + b.offset
        hi_img = b.slope * c + b.offset
        u, v = (lo_img, hi_img) if lo_img <= hi_img else (hi_img, lo_img)
        out = []
        k0 = int(np.floor(u + 1e-14))
        k1 = int(np.ceil(v - 1e-14))
        for k in range(k0, k1):
            s, t = max(u, float(k)), min(v, float(k + 1))
            if t - s > 1e-16:
                out.append((s - k, t - k))
        return out

    return pieces


def transition_matrix(pmap: PiecewiseExpandingMap, edges: np.ndarray,
                      samples_per_cell: int = 10_000,
                      rng: Optional[np.random.Generator] = None) -> sp.csr_matrix:
    """Ulam matrix of the map on an arbitrary partition of [0, 1).

    Entry (i, j) is the fraction of cell i carried into cell j, i.e.
    ``m(C_i ∩ tau^{-1} C_j) / m(C_i)``.  Affine branches are handled exactly
    through piecewise-linear interval images; nonlinear branches fall back to
    stratified within-cell sampling.

    Returns a CSR matrix with rows summing to 1 (up to float rounding).
    """
    edges = np.asarray(edges, dtype=float)
    n = len(edges) - 1
    rows, cols, vals = [], [], []
    affine_ok = all(b.affine for b in pmap.branches)
    if affine_ok:
        for i in range(n):
            a, c = edges[i], edges[i + 1]
            w = c - a
            for b in pmap.branches:
                lo, hi = max(a, b.lo), min(c, b.hi)
                if hi - lo <= 1e-16:
                    continue
                for (u, v) in _branch_image_pieces(b)(lo, hi):
                    jlo = int(np.searchsorted(edges, u, side="right") - 1)
                    jhi = int(np.searchsorted(edges, v, side="left"))
                    mass = (v - u) / abs(b.slope) / w  # fraction of cell i
                    for j in range(max(jlo, 0), min(jhi, n)):
                        ov = min(v, edges[j + 1]) - max(u, edges[j])
                        if ov > 0:
                            rows.append(i)
                            cols.append(j)
                            vals.append(mass * ov / (v - u))
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        for i in range(n):
            a, c = edges[i], edges[i + 1]
            # stratified points within the cell
            u = (np.arange(samples_per_cell) + rng.random(samples_per_cell)) / samples_per_cell
            xs = a + (c - a) * u
            ys = pmap.apply(xs)
            js = np.clip(np.searchsorted(edges, ys, side="right") - 1, 0, n - 1)
            cnt = np.bincount(js, minlength=n)
            nz = np.nonzero(cnt)[0]
            rows.extend([i] * len(nz))
            cols.extend(nz.tolist())
            vals.extend((cnt[nz] / samples_per_cell).tolist())
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mat.sum_duplicates()
    return mat


def stationary_density(mat: sp.csr_matrix, edges: np.ndarray,
                       tol: float = 1e-12, max_iter: int = 100_000):
    """Fixed density of a row-stochastic Ulam matrix by power iteration.

    Iterates the pushforward mu -> mu @ mat on cell masses until the
    successive L1 difference of the induced densities drops below ``tol``.
    Returns (DensityEstimate, eigenvalue, iterations).
    """
    edges = np.asarray(edges, dtype=float)
    widths = np.diff(edges)
    mu = widths.copy()  # Lebesgue start
    mu /= mu.sum()
    matT = mat.T.tocsr()
    it = 0
    for it in range(1, max_iter + 1):
        nu = matT @ mu
        total = nu.sum()
        diff = float(np.abs(nu / total - mu).sum())
        mu = nu / total
        if diff <= tol:
            break
    else:
        raise ConvergenceError(
            f"power iteration did not reach {tol} in {max_iter} iterations"
        )
    eigenvalue = float((matT @ mu).sum() / mu.sum())
    density = DensityEstimate(edges, mu / widths)
    return density, eigenvalue, it


def invariant_density(pmap: PiecewiseExpandingMap, grid_size: int,
                      tol: float = 1e-12, max_iter: int = 100_000) -> DensityEstimate:
    """Absolutely continuous invariant density via 1D Ulam discretization.

    The dominant eigenvalue of the (row-stochastic) Ulam matrix must equal 1
    within 1e-10; any other outcome signals a defective map specification.
    """
    if grid_size < 16:
        raise ValueError("grid_size must be at least 16")
    edges = np.linspace(0.0, 1.0, grid_size + 1)
    mat = transition_matrix(pmap, edges)
    density, eigenvalue, _ = stationary_density(mat, edges, tol=tol, max_iter=max_iter)
    if abs(eigenvalue - 1.0) > 1e-10:
        raise ConvergenceError(
            f"closed Ulam eigenvalue {eigenvalue} differs from 1 beyond 1e-10"
        )
    return density
