"""Discretized configuration spaces over lattice windows.

A window is a box of lattice cells; a configuration is an occupancy vector
over its cells.  States are truncated at a total occupancy ``n_max`` and
enumerated in graded-lexicographic order (by total, then lexicographically
descending), which fixes the layout of every density vector in the package.

The reference law is the Poisson law with atomic intensity ``sum_j v_j
delta_j`` restricted to the truncated state set and renormalized.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import stats
from scipy.special import gammaln

SCHEMA = "nlbbpp/1"
DEFAULT_STATE_CAP = 2_000_000
# above this many grid cells the state lookup is a sorted-key search
DENSE_LOOKUP_CAP = 1 << 22


class SizingError(ValueError):
    """A requested space would exceed the configured state-count cap."""


class WindowMismatchError(ValueError):
    """Two windows are not in the relation an operation requires."""


class _SortedLookup:
    """Flat grid key -> state index (-1 if absent) without a dense table."""

    def __init__(self, keys: np.ndarray):
        self._order = np.argsort(keys)
        self._keys = keys[self._order]

    def __getitem__(self, flat):
        flat = np.asarray(flat, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self._keys, flat), len(self._keys) - 1)
        return np.where(self._keys[pos] == flat, self._order[pos], -1)


def state_count(m: int, n_max: int) -> int:
    """Number of occupancy vectors in N^m with total at most ``n_max``."""
    return math.comb(m + n_max, n_max)


@dataclass(frozen=True)
class LatticeWindow:
    """Box of ``prod(cells_per_axis)`` cells of side ``cell_side``.

    ``origin`` is in units of cells.  Cells are ordered C-style (last axis
    fastest).  ``periodic`` marks a torus identification, which only matters
    for cyclic shifts.
    """

    cells_per_axis: tuple[int, ...]
    cell_side: float = 1.0
    origin: tuple[int, ...] | None = None
    periodic: bool = False

    def __post_init__(self):
        cells = tuple(int(c) for c in self.cells_per_axis)
        if not cells or min(cells) < 1:
            raise ValueError(f"cells_per_axis must be positive, got {cells}")
        if self.cell_side <= 0:
            raise ValueError("cell_side must be positive")
        origin = (0,) * len(cells) if self.origin is None else tuple(int(o) for o in self.origin)
        if len(origin) != len(cells):
            raise ValueError("origin and cells_per_axis differ in dimension")
        object.__setattr__(self, "cells_per_axis", cells)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "cell_side", float(self.cell_side))

    @property
    def dim(self) -> int:
        return len(self.cells_per_axis)

    @property
    def m(self) -> int:
        return math.prod(self.cells_per_axis)

    def volume(self) -> float:
        return self.m * self.cell_side**self.dim

    def cell_volume(self) -> float:
        return self.cell_side**self.dim

    @cached_property
    def cells(self) -> tuple[tuple[int, ...], ...]:
        """Absolute lattice coordinates of the cells, in site order."""
        ranges = [range(o, o + c) for o, c in zip(self.origin, self.cells_per_axis)]
        return tuple(itertools.product(*ranges))

    def site_of(self, cell) -> int:
        """Site index of an absolute cell coordinate."""
        rel = [c - o for c, o in zip(cell, self.origin)]
        if self.periodic:
            rel = [r % n for r, n in zip(rel, self.cells_per_axis)]
        elif any(r < 0 or r >= n for r, n in zip(rel, self.cells_per_axis)):
            raise KeyError(cell)
        return int(np.ravel_multi_index(rel, self.cells_per_axis))

    def disjoint(self, other: "LatticeWindow") -> bool:
        return not set(self.cells) & set(other.cells)

    def contains(self, other: "LatticeWindow") -> bool:
        return set(other.cells) <= set(self.cells)

    def shifted(self, z) -> "LatticeWindow":
        z = tuple(int(a) for a in z)
        return LatticeWindow(self.cells_per_axis, self.cell_side,
                             tuple(o + a for o, a in zip(self.origin, z)), self.periodic)


def line_window(m: int, h: float = 1.0, origin: int = 0, periodic: bool = False) -> LatticeWindow:
    """One-dimensional window of ``m`` cells."""
    return LatticeWindow((m,), h, (origin,), periodic)


def _graded_lex(m: int, n_max: int) -> np.ndarray:
    rows = []
    for k in range(n_max + 1):
        # lexicographically descending compositions of k into m parts
        level = []
        for bars in itertools.combinations(range(k + m - 1), m - 1):
            parts, prev = [], -1
            for b in bars:
                parts.append(b - prev - 1)
                prev = b
            parts.append(k + m - 2 - prev)
            level.append(tuple(parts))
        level.sort(reverse=True)
        rows.extend(level)
    return np.array(rows, dtype=np.int64).reshape(-1, m)


class ConfigSpace:
    """Truncated occupancy states over a window.

    Immutable after construction.  ``up[i, j]`` is the index of
    ``states[i] + e_j`` or -1 when that leaves the truncated set;
    ``down[i, j]`` likewise for removal.
    """

    def __init__(self, window: LatticeWindow, n_max: int, site_volumes=None,
                 state_cap: int = DEFAULT_STATE_CAP):
        if n_max < 1:
            raise ValueError("n_max must be >= 1")
        m = window.m
        S = state_count(m, n_max)
        if S > state_cap:
            raise SizingError(f"{S} states for m={m}, n_max={n_max} exceeds cap {state_cap}")
        self.window = window
        self.n_max = int(n_max)
        if site_volumes is None:
            site_volumes = np.full(m, window.cell_volume())
        self.site_volumes = np.asarray(site_volumes, dtype=float).copy()
        if self.site_volumes.shape != (m,) or np.any(self.site_volumes <= 0):
            raise ValueError("site_volumes must be a positive vector of length m")
        self.site_volumes.flags.writeable = False
        self.states = _graded_lex(m, n_max)
        self.states.flags.writeable = False
        self.totals = self.states.sum(axis=1)
        # lookup over the grid [0, n_max]^m; -1 outside the simplex
        self._grid_shape = (n_max + 1,) * m
        self._flat = np.ravel_multi_index(self.states.T, self._grid_shape)
        if (n_max + 1) ** m <= DENSE_LOOKUP_CAP:
            lookup = np.full((n_max + 1) ** m, -1, dtype=np.int64)
            lookup[self._flat] = np.arange(S)
        else:
            lookup = _SortedLookup(self._flat)
        self._lookup = lookup
        strides = np.array([(n_max + 1) ** (m - 1 - j) for j in range(m)], dtype=np.int64)
        up = np.full((S, m), -1, dtype=np.int64)
        down = np.full((S, m), -1, dtype=np.int64)
        room = self.totals < n_max
        for j in range(m):
            up[room, j] = lookup[self._flat[room] + strides[j]]
            has = self.states[:, j] > 0
            down[has, j] = lookup[self._flat[has] - strides[j]]
        self.up, self.down = up, down
        self.up.flags.writeable = False
        self.down.flags.writeable = False
        self.edge_mask = up >= 0

    @property
    def m(self) -> int:
        return self.window.m

    @property
    def size(self) -> int:
        return len(self.states)

    def __len__(self):
        return self.size

    def __repr__(self):
        return (f"ConfigSpace(cells={self.window.cells_per_axis}, h={self.window.cell_side}, "
                f"n_max={self.n_max}, S={self.size})")

    def index(self, occupancy) -> int:
        occ = np.asarray(occupancy, dtype=np.int64)
        if occ.shape != (self.m,) or occ.min() < 0 or occ.sum() > self.n_max:
            raise KeyError(tuple(occupancy))
        return int(self._lookup[np.ravel_multi_index(occ, self._grid_shape)])

    def same_as(self, other: "ConfigSpace") -> bool:
        return (self.window == other.window and self.n_max == other.n_max
                and np.array_equal(self.site_volumes, other.site_volumes))

    # dense-grid views used for convolutions and per-axis kernels
    def to_grid(self, values) -> np.ndarray:
        values = np.asarray(values)
        grid = np.zeros(((self.n_max + 1) ** self.m,) + values.shape[1:], dtype=values.dtype)
        grid[self._flat] = values
        return grid.reshape(self._grid_shape + values.shape[1:])

    def from_grid(self, grid) -> tuple[np.ndarray, float]:
        """Values at the states plus the total of whatever lies outside the simplex."""
        grid = np.asarray(grid)
        m = self.m
        # pad or crop each axis to n_max + 1
        sl = tuple(slice(0, self.n_max + 1) for _ in range(m))
        total = float(grid.sum())
        grid = grid[sl]
        pad = [(0, self.n_max + 1 - s) for s in grid.shape[:m]]
        grid = np.pad(grid, pad)
        flat = grid.reshape(-1)
        vals = flat[self._flat]
        return vals, total - float(vals.sum())

    @cached_property
    def reference(self) -> "ReferenceMeasure":
        return reference_measure(self)


def build_space(window: LatticeWindow, n_max: int, site_volumes=None,
                state_cap: int = DEFAULT_STATE_CAP) -> ConfigSpace:
    return ConfigSpace(window, n_max, site_volumes, state_cap)


def add_point(space: ConfigSpace, state: int, site: int) -> int | None:
    """Index of ``state + e_site``, or None when the truncation forbids it."""
    i = int(space.up[state, site])
    return None if i < 0 else i


def remove_point(space: ConfigSpace, state: int, site: int) -> int | None:
    i = int(space.down[state, site])
    return None if i < 0 else i


@dataclass(frozen=True)
class ReferenceMeasure:
    space: ConfigSpace
    weights: np.ndarray
    truncation_mass: float


def poisson_log_weights(space: ConfigSpace, intensity_scale: float = 1.0) -> np.ndarray:
    """Unnormalized log Poisson weights of every state at intensity ``c * v_j``."""
    lam = intensity_scale * space.site_volumes
    n = space.states
    return (n * np.log(lam)).sum(axis=1) - gammaln(n + 1).sum(axis=1) - lam.sum()


def reference_measure(space: ConfigSpace) -> ReferenceMeasure:
    logw = poisson_log_weights(space)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    w.flags.writeable = False
    # total occupancy of the untruncated law is Poisson(sum v)
    eps = float(stats.poisson.sf(space.n_max, space.site_volumes.sum()))
    return ReferenceMeasure(space, w, eps)


@dataclass(frozen=True)
class DensityMeasure:
    """Law ``rho * pi`` on a configuration space.

    ``defect`` is the probability mass lost to truncation when the measure
    was produced by a clipping operation (superposition, product, embedding).
    """

    space: ConfigSpace
    rho: np.ndarray
    defect: float = 0.0

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (self.space.size,):
            raise ValueError(f"density has shape {rho.shape}, space has {self.space.size} states")
        if np.any(rho < 0):
            if rho.min() < -1e-12:
                raise ValueError("density must be nonnegative")
            rho = np.maximum(rho, 0.0)
        rho = rho.copy()
        rho.flags.writeable = False
        object.__setattr__(self, "rho", rho)

    @property
    def pi(self) -> np.ndarray:
        return self.space.reference.weights

    @property
    def probabilities(self) -> np.ndarray:
        return self.rho * self.pi

    def mass(self) -> float:
        return float(self.probabilities.sum())

    @classmethod
    def from_probabilities(cls, space: ConfigSpace, p, defect: float = 0.0) -> "DensityMeasure":
        p = np.asarray(p, dtype=float)
        return cls(space, p / space.reference.weights, defect)


def uniform_density(space: ConfigSpace) -> DensityMeasure:
    """The reference law itself."""
    return DensityMeasure(space, np.ones(space.size))


def poisson_density(space: ConfigSpace, c: float) -> DensityMeasure:
    """Truncated Poisson law with site intensities ``c * v_j``."""
    if c <= 0:
        raise ValueError("intensity must be positive")
    # rho(n) proportional to c^{|n|}
    logr = space.totals * math.log(c)
    r = np.exp(logr - logr.max())
    r /= (r * space.reference.weights).sum()
    return DensityMeasure(space, r)


def point_mass(space: ConfigSpace, occupancy) -> DensityMeasure:
    i = space.index(occupancy)
    rho = np.zeros(space.size)
    rho[i] = 1.0 / space.reference.weights[i]
    return DensityMeasure(space, rho)


def random_density(space: ConfigSpace, rng, concentration: float = 1.0) -> DensityMeasure:
    """Dirichlet law whose mean is halfway between the reference and uniform.

    Parameters are ``concentration * (S pi + 1) / 2``; larger concentration
    pulls draws toward that mean.
    """
    alpha = concentration * (space.size * space.reference.weights + 1.0) / 2.0
    p = rng.dirichlet(alpha)
    p = np.maximum(p, 1e-300)
    return DensityMeasure.from_probabilities(space, p / p.sum())


def mixture(measures, weights) -> DensityMeasure:
    weights = np.asarray(weights, dtype=float)
    space = measures[0].space
    rho = sum(w * P.rho for w, P in zip(weights, measures)) / weights.sum()
    return DensityMeasure(space, rho)


def embed(P: DensityMeasure, space: ConfigSpace) -> DensityMeasure:
    """Re-express ``P`` on a space over the same window with another ``n_max``.

    Mass on states missing from the target is dropped and reported as defect.
    """
    src = P.space
    if src.window != space.window or not np.array_equal(src.site_volumes, space.site_volumes):
        raise WindowMismatchError("embed needs the same window and volumes")
    p = np.zeros(space.size)
    keep = src.totals <= space.n_max
    idx = np.array([space.index(s) for s in src.states[keep]], dtype=np.int64)
    p[idx] = P.probabilities[keep]
    lost = float(P.probabilities[~keep].sum())
    p /= p.sum()
    return DensityMeasure.from_probabilities(space, p, P.defect + lost)


def _site_map(parent: LatticeWindow, sub: LatticeWindow) -> np.ndarray:
    if not parent.contains(sub):
        raise WindowMismatchError("sub-window is not contained in the parent window")
    return np.array([parent.site_of(c) for c in sub.cells], dtype=np.int64)


def restrict(P: DensityMeasure, sub: LatticeWindow, n_max: int | None = None,
             tol: float = 1e-12) -> DensityMeasure:
    """Marginal law of the configuration inside ``sub``.

    The result lives on ``sub`` with the parent's ``n_max`` unless a smaller
    one is requested, in which case the marginal must carry at most ``tol``
    mass above it.
    """
    space = P.space
    sites = _site_map(space.window, sub)
    vols = space.site_volumes[sites]
    target = ConfigSpace(sub, space.n_max, vols)
    sub_states = space.states[:, sites]
    p = np.zeros(target.size)
    idx = target._lookup[np.ravel_multi_index(sub_states.T, target._grid_shape)]
    np.add.at(p, idx, P.probabilities)
    out = DensityMeasure.from_probabilities(target, p, P.defect)
    if n_max is not None and n_max != space.n_max:
        small = ConfigSpace(sub, n_max, vols)
        excess = float(p[target.totals > n_max].sum())
        if excess > tol:
            raise WindowMismatchError(f"marginal puts mass {excess:.3g} above n_max={n_max}")
        out = embed(out, small)
    return out


def product(P: DensityMeasure, Q: DensityMeasure, n_max: int | None = None,
            state_cap: int = DEFAULT_STATE_CAP) -> DensityMeasure:
    """Independent product of laws on disjoint windows.

    The joint window is the bounding box of both, which must be exactly
    their union.  The default ``n_max`` is the sum of the factors', so no
    mass is clipped.
    """
    A, B = P.space.window, Q.space.window
    if A.dim != B.dim or A.cell_side != B.cell_side:
        raise WindowMismatchError("windows differ in dimension or cell side")
    if not A.disjoint(B):
        raise WindowMismatchError("product needs disjoint windows")
    lo = tuple(min(a, b) for a, b in zip(A.origin, B.origin))
    hi = tuple(max(a + ca, b + cb) for a, ca, b, cb in
               zip(A.origin, A.cells_per_axis, B.origin, B.cells_per_axis))
    W = LatticeWindow(tuple(h - l for h, l in zip(hi, lo)), A.cell_side, lo)
    if W.m != A.m + B.m:
        raise WindowMismatchError("union of the windows is not a box")
    sa = np.array([W.site_of(c) for c in A.cells])
    sb = np.array([W.site_of(c) for c in B.cells])
    vols = np.empty(W.m)
    vols[sa] = P.space.site_volumes
    vols[sb] = Q.space.site_volumes
    N = P.space.n_max + Q.space.n_max if n_max is None else int(n_max)
    space = ConfigSpace(W, N, vols, state_cap)
    na, nb = space.states[:, sa], space.states[:, sb]
    ok = (na.sum(axis=1) <= P.space.n_max) & (nb.sum(axis=1) <= Q.space.n_max)
    p = np.zeros(space.size)
    ia = P.space._lookup[np.ravel_multi_index(na[ok].T, P.space._grid_shape)]
    ib = Q.space._lookup[np.ravel_multi_index(nb[ok].T, Q.space._grid_shape)]
    p[ok] = P.probabilities[ia] * Q.probabilities[ib]
    kept = p.sum()
    return DensityMeasure.from_probabilities(space, p / kept,
                                             P.defect + Q.defect + max(0.0, 1.0 - kept))


def shift(P: DensityMeasure, z) -> DensityMeasure:
    """Translate the law by the lattice vector ``z``.

    Site order is window-relative, so the density vector is unchanged; only
    the window (and the volumes carried with its cells) moves.
    """
    space = P.space
    moved = ConfigSpace(space.window.shifted(z), space.n_max, space.site_volumes)
    return DensityMeasure(moved, P.rho, P.defect)


def cyclic_site_permutation(window: LatticeWindow, z) -> np.ndarray:
    """``perm[j]`` is the site that cell ``j`` moves to under a torus shift by ``z``."""
    z = np.asarray(z, dtype=np.int64)
    rel = np.array(np.unravel_index(np.arange(window.m), window.cells_per_axis)).T
    moved = (rel + z) % np.array(window.cells_per_axis)
    return np.ravel_multi_index(moved.T, window.cells_per_axis)


def state_permutation(space: ConfigSpace, perm: np.ndarray) -> np.ndarray:
    """Index map ``i -> index(states[i] relabeled by perm)``."""
    moved = np.empty_like(space.states)
    moved[:, perm] = space.states
    return space._lookup[np.ravel_multi_index(moved.T, space._grid_shape)]


def cyclic_shift(P: DensityMeasure, z) -> DensityMeasure:
    """Shift on a periodic window: occupancies are permuted around the torus."""
    space = P.space
    if not space.window.periodic:
        raise WindowMismatchError("cyclic shifts need a periodic window")
    if not np.allclose(space.site_volumes, space.site_volumes[0]):
        raise WindowMismatchError("cyclic shifts need uniform site volumes")
    smap = state_permutation(space, cyclic_site_permutation(space.window, z))
    rho = np.empty_like(P.rho)
    rho[smap] = P.rho
    return DensityMeasure(space, rho, P.defect)


# --- serialization -------------------------------------------------------

def _float_list(a) -> list:
    return [float(x) for x in np.asarray(a).ravel()]


def space_to_dict(space: ConfigSpace) -> dict:
    w = space.window
    return {"schema": SCHEMA, "dim": w.dim, "cells": list(w.cells_per_axis), "h": w.cell_side,
            "origin": list(w.origin), "periodic": w.periodic, "n_max": space.n_max,
            "order": "gradedlex", "site_volumes": _float_list(space.site_volumes)}


def space_from_dict(d: dict) -> ConfigSpace:
    if d.get("order", "gradedlex") != "gradedlex":
        raise ValueError(f"unsupported state order {d['order']!r}")
    w = LatticeWindow(tuple(d["cells"]), d["h"], tuple(d.get("origin", [0] * d["dim"])),
                      d.get("periodic", False))
    if w.dim != d["dim"]:
        raise ValueError("dim does not match cells")
    return ConfigSpace(w, d["n_max"], d.get("site_volumes"))


def measure_to_json(P: DensityMeasure) -> str:
    d = space_to_dict(P.space)
    d["weights"] = [float.hex(float(x)) for x in P.probabilities]
    d["defect"] = P.defect
    return json.dumps(d)


def measure_from_json(text: str) -> DensityMeasure:
    d = json.loads(text)
    space = space_from_dict(d)
    p = np.array([float.fromhex(x) if isinstance(x, str) else float(x) for x in d["weights"]])
    return DensityMeasure.from_probabilities(space, p, d.get("defect", 0.0))
