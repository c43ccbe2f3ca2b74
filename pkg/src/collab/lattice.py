"""Finite-torus lattice dynamics coupled by collision.

Sites carry points of [0, 1) evolving under a shared interval map; when the
two members of a nearest-neighbour pair simultaneously occupy their facing
collision zones, their states are exchanged before the map is applied.  The
distinguished focal site uses zones of width ``delta``; all other zones have
width ``epsilon``.  Variants of the step suppress the swaps at the focal site
(the decoupled dynamics) or all swaps (the product dynamics).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from typing import Iterable, Optional, Sequence

import numpy as np

from .interval_map import PiecewiseExpandingMap, mod1_array

__all__ = [
    "CollisionScheme",
    "LatticeState",
    "SwapEvent",
    "collision_pairs",
    "first_hit",
    "in_hole",
    "index_map",
    "step",
    "swap_stage",
    "write_event_log",
]

MODES = ("full_lattice", "isolated_neighborhood")
DYNAMICS = ("full", "product", "decoupled")


def direction_vector(label: int, dimension: int) -> tuple:
    axis = abs(label) - 1
    if not (0 <= axis < dimension) or label == 0:
        raise ValueError(f"direction label {label} invalid in dimension {dimension}")
    vec = [0] * dimension
    vec[axis] = 1 if label > 0 else -1
    return tuple(vec)


@dataclass(frozen=True)
class CollisionScheme:
    """Geometry of the collision zones on a finite torus.

    Parameters
    ----------
    pmap : PiecewiseExpandingMap
        Site dynamics shared by every lattice site.
    dimension, side : int
        Torus Z^d with d = dimension and side length >= 3.
    centers : dict[int, float]
        Zone midpoint a_v per direction label v in {+1,-1,...,+d,-d}.
    epsilon, delta : float
        Bulk and focal zone widths, 0 < delta <= epsilon.
    focal_site : tuple of int
        The distinguished site p*.
    mode : str
        'full_lattice' activates every nearest-neighbour channel;
        'isolated_neighborhood' activates only the 2d channels touching the
        focal site, so the focal box is a closed finite-dimensional system.
    """

    pmap: PiecewiseExpandingMap
    dimension: int
    side: int
    centers: dict
    epsilon: float
    delta: float
    focal_site: tuple = None
    mode: str = "isolated_neighborhood"
    centers_exact: dict = None
    disabled: bool = False  # no active channels at all; for null baselines

    def __post_init__(self):
        d, L = self.dimension, self.side
        if not (1 <= d <= 3):
            raise ValueError("dimension must be 1, 2 or 3")
        if L < 3:
            raise ValueError("torus side must be at least 3")
        if L ** d > 10 ** 6:
            raise ValueError("lattice larger than 10^6 sites; desk scale only")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.focal_site is None:
            object.__setattr__(self, "focal_site", (0,) * d)
        else:
            object.__setattr__(self, "focal_site",
                               tuple(int(c) % L for c in self.focal_site))
        labels = self.direction_labels()
        if set(self.centers) != set(labels):
            raise ValueError(f"centers must cover directions {sorted(labels)}")
        if not (0.0 < self.delta <= self.epsilon):
            raise ValueError("need 0 < delta <= epsilon")
        exact = dict(self.centers_exact or {})
        centers_f = {}
        for v, a in self.centers.items():
            if isinstance(a, (Fraction, int)):
                exact.setdefault(v, Fraction(a))
            elif isinstance(a, str):
                exact.setdefault(v, Fraction(a))
            centers_f[v] = float(exact[v]) if v in exact else float(a)
        object.__setattr__(self, "centers", centers_f)
        object.__setattr__(self, "centers_exact", exact)
        self._validate_zones()

    def _validate_zones(self):
        eps = self.epsilon
        zones = []
        for v, a in self.centers.items():
            lo, hi = a - eps / 2, a + eps / 2
            if not (0.0 < lo and hi < 1.0):
                raise ValueError(f"epsilon zone for direction {v} leaves (0,1)")
            # the center must sit strictly inside one branch interval
            pts = self.pmap.partition_points
            inside = any(pts[i] < a < pts[i + 1] for i in range(len(pts) - 1))
            if not inside:
                raise ValueError(f"center a_{v} = {a} is not interior to a branch")
            zones.append((lo, hi, v))
        zones.sort()
        for (lo1, hi1, v1), (lo2, hi2, v2) in zip(zones, zones[1:]):
            if hi1 > lo2:
                raise ValueError(f"zones for directions {v1} and {v2} overlap")

    # -- geometry ------------------------------------------------------------

    def direction_labels(self) -> tuple:
        return tuple(s * a for a in range(1, self.dimension + 1) for s in (+1, -1))

    @property
    def n_sites(self) -> int:
        return self.side ** self.dimension

    def site_index(self, site: tuple) -> int:
        idx = 0
        for c in site:
            idx = idx * self.side + (int(c) % self.side)
        return idx

    def neighbor(self, site: tuple, label: int) -> tuple:
        vec = direction_vector(label, self.dimension)
        return tuple((c + dv) % self.side for c, dv in zip(site, vec))

    def zone_bounds(self, label: int, width: float) -> tuple:
        a = self.centers[label]
        return a - width / 2, a + width / 2

    def in_zone(self, x: float, label: int, width: float) -> bool:
        lo, hi = self.zone_bounds(label, width)
        return lo <= x < hi

    def pair_width(self, p: tuple, q: tuple) -> float:
        return self.delta if (p == self.focal_site or q == self.focal_site) else self.epsilon

    def edges(self) -> Iterable[tuple]:
        """Active nearest-neighbour edges as (p, q, axis_label, width).

        In isolated_neighborhood mode only the edges touching the focal site
        remain; a pair collides when x_p is in the +axis zone and x_q in the
        -axis zone, both at the edge's width.
        """
        d, L = self.dimension, self.side
        if self.disabled:
            return
        if self.mode == "isolated_neighborhood":
            p_star = self.focal_site
            for a in range(1, d + 1):
                for lab in (a, -a):
                    q = self.neighbor(p_star, lab)
                    p, r = (p_star, q) if lab > 0 else (q, p_star)
                    yield (p, r, a, self.delta)
        else:
            for coords in product(range(L), repeat=d):
                for a in range(1, d + 1):
                    q = self.neighbor(coords, a)
                    yield (coords, q, a, self.pair_width(coords, q))

    def focal_channels(self) -> tuple:
        """The 2d collision channels at the focal site as (label, partner)."""
        if self.disabled:
            return ()
        return tuple((v, self.neighbor(self.focal_site, v))
                     for v in self.direction_labels())

    def to_config(self) -> dict:
        centers = {}
        for v, a in self.centers.items():
            ex = self.centers_exact.get(v)
            centers[f"{v:+d}"] = str(ex) if ex is not None else a
        return {
            "dimension": self.dimension,
            "side": self.side,
            "centers": centers,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "focal_site": list(self.focal_site),
            "mode": self.mode,
            "disabled": self.disabled,
        }

    @classmethod
    def from_config(cls, pmap: PiecewiseExpandingMap, block: dict) -> "CollisionScheme":
        centers = {int(k): v for k, v in block["centers"].items()}
        return cls(
            pmap=pmap,
            dimension=block["dimension"],
            side=block["side"],
            centers=centers,
            epsilon=block["epsilon"],
            delta=block["delta"],
            focal_site=tuple(block.get("focal_site", [0] * block["dimension"])),
            mode=block.get("mode", "isolated_neighborhood"),
            disabled=block.get("disabled", False),
        )


@dataclass(frozen=True)
class LatticeState:
    """A point of I^Lambda on the torus; coordinates are read-only."""

    scheme: CollisionScheme
    coords: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.coords, dtype=float).reshape(
            (self.scheme.side,) * self.scheme.dimension
        ).copy()
        if np.any(arr < 0.0) or np.any(arr >= 1.0):
            raise ValueError("coordinates must lie in [0, 1)")
        arr.flags.writeable = False
        object.__setattr__(self, "coords", arr)

    @classmethod
    def random(cls, scheme: CollisionScheme, rng: np.random.Generator) -> "LatticeState":
        return cls(scheme, rng.random(scheme.n_sites))

    def value(self, site: tuple) -> float:
        return float(self.coords[tuple(c % self.scheme.side for c in site)])

    def replace(self, coords: np.ndarray) -> "LatticeState":
        return LatticeState(self.scheme, coords)


@dataclass(frozen=True)
class SwapEvent:
    """A realized collision: the pair (site, site+direction) exchanged states."""

    step: int
    site: tuple
    direction: int
    focal: bool

    @property
    def csv_row(self) -> str:
        site = ";".join(str(c) for c in self.site)
        return f"{self.step},{site},{self.direction:+d},{int(self.focal)}"


def write_event_log(path, events: Sequence[SwapEvent]) -> None:
    """Persist swap events as CSV rows ``step,site,direction,focal``."""
    with open(path, "w") as fh:
        fh.write("step,site,direction,focal\n")
        for e in events:
            fh.write(e.csv_row + "\n")


def _suppressed(scheme: CollisionScheme, p: tuple, q: tuple, dynamics: str,
                decouple_also: Optional[tuple]) -> bool:
    if dynamics == "product":
        return True
    if dynamics == "full":
        return False
    if dynamics == "decoupled":
        focal = scheme.focal_site
        if p == focal or q == focal:
            return True
        if decouple_also is not None and (p == decouple_also or q == decouple_also):
            return True
        return False
    raise ValueError(f"unknown dynamics {dynamics!r}")


def collision_pairs(state: LatticeState, dynamics: str = "full",
                    decouple_also: Optional[tuple] = None) -> list:
    """Colliding pairs of the current state, canonicalized so the listed
    site precedes its partner in flat site order.

    A pair (p, v) is listed when x_p lies in the zone of direction v and the
    partner x_{p+v} lies in the zone of direction -v, both at the width of
    the edge (delta for focal edges, epsilon otherwise).  Zone disjointness
    makes the result a matching.
    """
    scheme = state.scheme
    out = []
    seen = set()
    for (p, q, axis, width) in scheme.edges():
        if _suppressed(scheme, p, q, dynamics, decouple_also):
            continue
        xp, xq = state.value(p), state.value(q)
        if scheme.in_zone(xp, axis, width) and scheme.in_zone(xq, -axis, width):
            if p in seen or q in seen:
                raise AssertionError("collision matching violated; zones overlap?")
            seen.add(p)
            seen.add(q)
            if scheme.site_index(p) < scheme.site_index(q):
                out.append((p, axis))
            else:
                out.append((q, -axis))
    out.sort(key=lambda pv: (state.scheme.site_index(pv[0]), pv[1]))
    return out


def in_hole(state: LatticeState) -> bool:
    """True when some focal channel collides: x_{p*} in A_{delta,v} and
    x_{p*+v} in A_{delta,-v} for a direction v."""
    scheme = state.scheme
    xf = state.value(scheme.focal_site)
    for v, partner in scheme.focal_channels():
        if scheme.in_zone(xf, v, scheme.delta) and \
                scheme.in_zone(state.value(partner), -v, scheme.delta):
            return True
    return False


def swap_stage(state: LatticeState, dynamics: str = "full",
               decouple_also: Optional[tuple] = None,
               step_index: int = 0):
    """The exchange stage alone: coordinates after the simultaneous swaps
    (before the site map), plus the executed events.  The swap stage is a
    coordinate permutation, so the sorted coordinate multiset is invariant."""
    scheme = state.scheme
    pairs = collision_pairs(state, dynamics=dynamics, decouple_also=decouple_also)
    coords = np.array(state.coords)
    events = []
    for (p, v) in pairs:
        q = scheme.neighbor(p, v)
        coords[p], coords[q] = coords[q], coords[p]
        focal = p == scheme.focal_site or q == scheme.focal_site
        events.append(SwapEvent(step=step_index, site=p, direction=v, focal=focal))
    return coords, events


def step(state: LatticeState, dynamics: str = "full",
         decouple_also: Optional[tuple] = None,
         step_index: int = 0):
    """One update of the lattice: exchange colliding pairs, then apply the
    site map everywhere.  Returns (new_state, executed swap events)."""
    coords, events = swap_stage(state, dynamics=dynamics,
                                decouple_also=decouple_also,
                                step_index=step_index)
    coords = mod1_array(state.scheme.pmap.apply(coords))
    return state.replace(coords), events


def first_hit(state: LatticeState, horizon: int, dynamics: str = "full") -> Optional[int]:
    """Least n >= 0 with the orbit in the rare event, or None within horizon."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    current = state
    for n in range(horizon + 1):
        if in_hole(current):
            return n
        if n < horizon:
            current, _ = step(current, dynamics=dynamics)
    return None


def index_map(state: LatticeState, p: tuple, k: int, variant: str = "psi",
              check: bool = False) -> tuple:
    """Site carrying the orbit of the coordinate started at p after k steps.

    'psi' tracks swaps under the decoupled dynamics (focal swaps never move
    the index); 'psi_tilde' tracks swaps under the full dynamics.  With
    ``check=True`` the defining identity (T^k x)_{site} = tau^k(x_p) is
    asserted within 1e-12.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if variant not in ("psi", "psi_tilde"):
        raise ValueError("variant must be 'psi' or 'psi_tilde'")
    dynamics = "decoupled" if variant == "psi" else "full"
    scheme = state.scheme
    site = tuple(int(c) % scheme.side for c in p)
    value = state.value(site)
    current = state
    for n in range(k):
        pairs = collision_pairs(current, dynamics=dynamics)
        for (r, v) in pairs:
            q = scheme.neighbor(r, v)
            if site == r:
                site = q
                break
            if site == q:
                site = r
                break
        current, _ = step(current, dynamics=dynamics, step_index=n)
        value = scheme.pmap(value)
    if check:
        carried = current.value(site)
        if abs(carried - value) > 1e-12:
            raise AssertionError(
                f"index identity violated: carried {carried} vs tau^k {value}"
            )
    return site
