"""Vectorized trajectory ensembles with reproducible substreams.

Trajectories are processed in fixed-size blocks; block ``b`` draws every
random number it will ever need from a generator seeded statelessly by
``(master_seed, b)``.  Results are therefore bit-identical for any worker
count and any scheduling order, and trajectory ``i`` is reproducible in
isolation (block ``i // block_size``, column ``i % block_size``).

In isolated_neighborhood mode only the focal site and its 2d neighbours can
ever influence a focal collision, and their dynamics is autonomous, so the
engine simulates just those rows; the full-lattice reference path in
:mod:`collab.lattice` is used to cross-check this reduction on subsamples.
"""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .interval_map import MOD_CLAMP, PiecewiseExpandingMap
from .lattice import CollisionScheme, LatticeState

__all__ = ["EnsembleEngine", "RngSpec"]


@dataclass(frozen=True)
class RngSpec:
    """Master seed plus the stateless substream rule.

    Trajectory i belongs to block ``i // block_size``; block b is generated
    by ``default_rng(SeedSequence((master_seed, b)))``.  The block size is
    part of the reproducibility contract and defaults to 65536.
    """

    master_seed: int
    block_size: int = 65536

    def __post_init__(self):
        if not (0 <= self.master_seed < 2 ** 64):
            raise ValueError("master seed must fit in 64 bits")
        if self.block_size < 1:
            raise ValueError("block size must be positive")

    def generator(self, block: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence((self.master_seed, block)))

    def n_blocks(self, n_traj: int) -> int:
        return (n_traj + self.block_size - 1) // self.block_size

    def block_lengths(self, n_traj: int):
        for b in range(self.n_blocks(n_traj)):
            yield b, min(self.block_size, n_traj - b * self.block_size)


def _make_map_kernel(pmap: PiecewiseExpandingMap):
    """In-place vectorized site-map update matching the scalar semantics."""
    branches = pmap.branches
    if all(b.affine for b in branches):
        same_slope = all(b.slope == branches[0].slope for b in branches)
        zero_off = branches[0].offset == 0.0
        if same_slope and zero_off and len(branches) >= 2:
            beta = branches[0].slope

            def kernel(X, tmp):
                np.multiply(X, beta, out=X)
                np.floor(X, out=tmp)
                X -= tmp
                X[X >= 1.0 - MOD_CLAMP] = 0.0

            return kernel

        pts = np.asarray(pmap.partition_points)
        slopes = np.array([b.slope for b in branches])
        offs = np.array([b.offset for b in branches])

        def kernel(X, tmp):
            idx = np.clip(np.searchsorted(pts, X, side="right") - 1, 0, len(branches) - 1)
            np.multiply(X, slopes[idx], out=X)
            X += offs[idx]
            np.floor(X, out=tmp)
            X -= tmp
            X[X >= 1.0 - MOD_CLAMP] = 0.0

        return kernel

    def kernel(X, tmp):  # nonlinear fallback
        X[...] = pmap.apply(X)

    return kernel


class EnsembleEngine:
    """Shared-nothing trajectory ensembles for one collision scheme."""

    def __init__(self, scheme: CollisionScheme, rng: RngSpec):
        self.scheme = scheme
        self.rng = rng
        self._kernel = _make_map_kernel(scheme.pmap)
        d, L = scheme.dimension, scheme.side
        if scheme.mode == "isolated_neighborhood":
            sites = [scheme.focal_site] + [q for _, q in scheme.focal_channels()]
        else:
            from itertools import product
            sites = list(product(range(L), repeat=d))
        self.sim_sites = sites
        self._row_of = {s: r for r, s in enumerate(sites)}
        self._site_rows = np.array([scheme.site_index(s) for s in sites])
        self.focal_row = self._row_of[scheme.focal_site]
        # focal channels as row pairs with delta zone bounds
        self.channels = []
        for v, partner in scheme.focal_channels():
            lo_f, hi_f = scheme.zone_bounds(v, scheme.delta)
            lo_p, hi_p = scheme.zone_bounds(-v, scheme.delta)
            self.channels.append(
                (v, self.focal_row, self._row_of[partner], lo_f, hi_f, lo_p, hi_p)
            )
        # every active edge (for stepping), with widths resolved
        self.edges = []
        for (p, q, axis, width) in scheme.edges():
            lo1, hi1 = scheme.zone_bounds(axis, width)
            lo2, hi2 = scheme.zone_bounds(-axis, width)
            focal = scheme.focal_site in (p, q)
            self.edges.append(
                (self._row_of[p], self._row_of[q], lo1, hi1, lo2, hi2, focal, axis, p)
            )

    # -- block primitives ---------------------------------------------------

    def initial_block(self, block: int, m: int) -> np.ndarray:
        """Product-Lebesgue initial coordinates, full lattice then reduced.

        Always drawing the full block width (then slicing columns) makes a
        trajectory's initial state depend only on (master_seed, index), and
        drawing all L^d rows before slicing keeps the reduced simulation on
        exactly the same trajectories as the full-lattice reference.
        """
        g = self.rng.generator(block)
        full = g.random((self.scheme.n_sites, self.rng.block_size))
        return np.ascontiguousarray(full[self._site_rows][:, :m])

    def initial_state(self, traj: int) -> LatticeState:
        """Full-lattice state of one trajectory, for reference cross-checks."""
        b, j = divmod(traj, self.rng.block_size)
        g = self.rng.generator(b)
        m = self.rng.block_size
        full = g.random((self.scheme.n_sites, m))
        return LatticeState(self.scheme, full[:, j])

    def hole_mask(self, X: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
        """Rare-event indicator per trajectory, gated on the focal row."""
        m = X.shape[1]
        if out is None:
            out = np.zeros(m, dtype=bool)
        else:
            out[:] = False
        xf = X[self.focal_row]
        for (_, rf, rp, lo_f, hi_f, lo_p, hi_p) in self.channels:
            gate = (xf >= lo_f) & (xf < hi_f)
            if gate.any():
                idx = np.nonzero(gate)[0]
                xp = X[rp, idx]
                out[idx[(xp >= lo_p) & (xp < hi_p)]] = True
        return out

    def _swap_edges(self, X: np.ndarray, dynamics: str,
                    decouple_also: Optional[tuple] = None):
        """Apply the simultaneous exchange stage of the chosen variant."""
        if dynamics == "product":
            return
        masks = []
        for (r1, r2, lo1, hi1, lo2, hi2, focal, _axis, p) in self.edges:
            if dynamics == "decoupled":
                if focal:
                    continue
                if decouple_also is not None and decouple_also in (
                    p, self.sim_sites[r2]
                ):
                    continue
            x1 = X[r1]
            gate = (x1 >= lo1) & (x1 < hi1)
            if gate.any():
                idx = np.nonzero(gate)[0]
                x2 = X[r2, idx]
                hit = idx[(x2 >= lo2) & (x2 < hi2)]
                if hit.size:
                    masks.append((r1, r2, hit))
        for (r1, r2, hit) in masks:
            tmp = X[r1, hit].copy()
            X[r1, hit] = X[r2, hit]
            X[r2, hit] = tmp

    def step_block(self, X: np.ndarray, dynamics: str, tmp: np.ndarray,
                   decouple_also: Optional[tuple] = None) -> None:
        """One in-place update: exchange stage, then the site map on all rows."""
        self._swap_edges(X, dynamics, decouple_also)
        self._kernel(X, tmp)

    # -- high-level tasks (single block) -------------------------------------

    def _first_hits_block(self, block: int, m: int, horizon: int,
                          init: str, burn_in: int,
                          dynamics_override: str = None) -> np.ndarray:
        X = self.initial_block(block, m)
        tmp = np.empty_like(X)
        if init == "invariant":
            for _ in range(burn_in):
                self.step_block(X, "decoupled", tmp)
        if dynamics_override is None:
            # survivors are outside the hole, so in isolated mode the full
            # and decoupled updates coincide on them exactly
            dynamics = ("decoupled" if self.scheme.mode ==
                        "isolated_neighborhood" else "full")
        else:
            dynamics = dynamics_override
        times = np.full(m, horizon + 1, dtype=np.int64)  # horizon+1 == censored
        alive = np.arange(m)
        hole = np.empty(m, dtype=bool)
        dead = np.zeros(m, dtype=bool)
        n_dead = 0
        for n in range(horizon + 1):
            width = X.shape[1]
            h = self.hole_mask(X, hole[:width])
            if n_dead:
                h &= ~dead[:width]
            hits = np.nonzero(h)[0]
            if hits.size:
                times[alive[hits]] = n
                dead[hits] = True
                n_dead += hits.size
                # compact lazily: dead columns keep evolving (harmlessly)
                # until they waste a noticeable share of the map work
                if n_dead > max(64, width // 16):
                    keep = ~dead[:width]
                    X = np.ascontiguousarray(X[:, keep])
                    alive = alive[keep]
                    dead[: X.shape[1]] = False
                    n_dead = 0
                    tmp = np.empty_like(X)
                    if X.shape[1] == 0:
                        break
            if n < horizon:
                self.step_block(X, dynamics, tmp)
        return times

    def _count_hits_block(self, block: int, m: int, horizon: int,
                          init: str, burn_in: int):
        X = self.initial_block(block, m)
        tmp = np.empty_like(X)
        if init == "invariant":
            for _ in range(burn_in):
                self.step_block(X, "decoupled", tmp)
        traj_ids, steps = [], []
        hole = np.empty(m, dtype=bool)
        for k in range(1, horizon + 1):
            self.step_block(X, "full", tmp)
            h = self.hole_mask(X, hole)
            if h.any():
                idx = np.nonzero(h)[0]
                traj_ids.append(idx)
                steps.append(np.full(idx.shape, k, dtype=np.int64))
        if traj_ids:
            return np.concatenate(traj_ids), np.concatenate(steps)
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)

    def _occupation_block(self, block: int, m: int, horizon: int,
                          burn_in: int) -> tuple:
        X = self.initial_block(block, m)
        tmp = np.empty_like(X)
        for _ in range(burn_in):
            self.step_block(X, "decoupled", tmp)
        hole = np.empty(m, dtype=bool)
        hits = 0
        for _ in range(horizon):
            self.step_block(X, "decoupled", tmp)
            hits += int(self.hole_mask(X, hole).sum())
        return hits, horizon * m

    def hole_start_block(self, block: int, m: int):
        """Initial coordinates conditioned on the rare event (importance
        sampling start); channels weighted equally, product-Lebesgue bulk.
        Returns (coordinates, chosen channel index per trajectory)."""
        g = self.rng.generator(block)
        B = self.rng.block_size
        X = np.ascontiguousarray(g.random((len(self.sim_sites), B))[:, :m])
        nch = len(self.channels)
        pick = g.integers(0, nch, size=B)[:m]
        u_f = g.random(B)[:m]
        u_p = g.random(B)[:m]
        for c, (_, rf, rp, lo_f, hi_f, lo_p, hi_p) in enumerate(self.channels):
            sel = pick == c
            X[rf, sel] = lo_f + (hi_f - lo_f) * u_f[sel]
            X[rp, sel] = lo_p + (hi_p - lo_p) * u_p[sel]
        return X, pick

    def _beta_block(self, block: int, m: int, k: int, variant: int):
        """Indicator data for the cluster-structure conditional probabilities.

        Starts inside the rare event.  Variant 1 applies one decoupled step
        then k full steps; variant 2 applies k+1 full steps.  Returns the
        final-hit indicator and the intermediate hit count per trajectory.
        """
        X, _pick = self.hole_start_block(block, m)
        tmp = np.empty_like(X)
        hole = np.empty(m, dtype=bool)
        inter = np.zeros(m, dtype=np.int64)
        if variant == 1:
            self.step_block(X, "decoupled", tmp)
            # intermediate sum over i = 0..k-1 of 1_H(T_full^i y)
            for i in range(k):
                inter += self.hole_mask(X, hole)
                self.step_block(X, "full", tmp)
            final = self.hole_mask(X, hole).copy()
        elif variant == 2:
            for i in range(1, k + 1):
                self.step_block(X, "full", tmp)
                inter += self.hole_mask(X, hole)
            self.step_block(X, "full", tmp)
            final = self.hole_mask(X, hole).copy()
        else:
            raise ValueError("variant must be 1 or 2")
        return final, inter

    def _return_index_block(self, block: int, m: int, k: int):
        """Returns-to-the-hole data for the index negligibility check.

        Trajectories start inside the rare event; after k decoupled steps,
        ``returned`` flags re-entry and ``moved`` flags an index that left
        its starting neighbour site.
        """
        X, pick = self.hole_start_block(block, m)
        tmp = np.empty_like(X)
        partner_rows = np.array([c[2] for c in self.channels], dtype=np.int64)
        start = partner_rows[pick]
        S = start.copy()
        for _ in range(k):
            for (r1, r2, lo1, hi1, lo2, hi2, focal, _axis, _p) in self.edges:
                if focal:
                    continue
                x1, x2 = X[r1], X[r2]
                swap = (x1 >= lo1) & (x1 < hi1) & (x2 >= lo2) & (x2 < hi2)
                at1 = swap & (S == r1)
                at2 = swap & (S == r2)
                S[at1] = r2
                S[at2] = r1
            self.step_block(X, "decoupled", tmp)
        hole = np.empty(m, dtype=bool)
        returned = self.hole_mask(X, hole).copy()
        moved = S != start
        return returned, moved

    def _psi_block(self, block: int, m: int, k: int, variant: str):
        """Batch check data for the index-map identity.

        Returns max |carried - tau^k(x_p)| over the block, tracking the
        coordinate started at the focal site's +1 neighbour.
        """
        dynamics = "decoupled" if variant == "psi" else "full"
        start_site = self.scheme.neighbor(self.scheme.focal_site, 1)
        start_row = self._row_of[start_site]
        X = self.initial_block(block, m)
        tmp = np.empty_like(X)
        S = np.full(m, start_row, dtype=np.int64)
        V = X[start_row].copy()
        vt = np.empty_like(V)
        worst = 0.0
        for _ in range(k):
            # index moves with the swap executed at its site
            for (r1, r2, lo1, hi1, lo2, hi2, focal, _axis, _p) in self.edges:
                if dynamics == "decoupled" and focal:
                    continue
                x1, x2 = X[r1], X[r2]
                swap = (x1 >= lo1) & (x1 < hi1) & (x2 >= lo2) & (x2 < hi2)
                at1 = swap & (S == r1)
                at2 = swap & (S == r2)
                S[at1] = r2
                S[at2] = r1
            self.step_block(X, dynamics, tmp)
            self._kernel(V.reshape(1, -1), vt.reshape(1, -1))
            carried = X[S, np.arange(m)]
            worst = max(worst, float(np.max(np.abs(carried - V))))
        return worst

    # -- drivers --------------------------------------------------------------

    def _block_method(self, task: str):
        try:
            return getattr(self, f"_{task}_block")
        except AttributeError:
            raise ValueError(f"unknown task {task!r}") from None

    def run(self, task: str, n_traj: int, workers: int = 1, **kw):
        """Run a block task over all blocks, merging results in block order.

        Worker pools ship (config, block) jobs to subprocesses, which needs a
        config-serializable map; the single-worker path has no such limit.
        """
        blocks = list(self.rng.block_lengths(n_traj))
        if workers <= 1 or len(blocks) == 1:
            fn = self._block_method(task)
            return [fn(b, m, **kw) for b, m in blocks]
        jobs = [(self.scheme.to_config(), self.scheme.pmap.to_config(),
                 self.rng, task, b, m, kw) for b, m in blocks]
        with mp.get_context("spawn").Pool(workers) as pool:
            return pool.map(_run_block_job, jobs)


def _run_block_job(job):
    scheme_cfg, map_cfg, rng, task, block, m, kw = job
    pmap = PiecewiseExpandingMap.from_config(map_cfg)
    scheme = CollisionScheme.from_config(pmap, scheme_cfg)
    engine = EnsembleEngine(scheme, rng)
    return engine._block_method(task)(block, m, **kw)
