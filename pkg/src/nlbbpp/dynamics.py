"""Discrete continuity equation and its explicit solutions.

Flux convention: for an edge ``n -> n + e_j`` the velocity ``w[n, j]`` carries
the flux ``w * pi(n) * v_j``; the balance at a state ``m`` reads

    d/dt rho(m) pi(m) = sum_j flux(m - e_j, j) - flux(m, j).

Thinning parameters are retention probabilities throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal, sparse
from scipy.sparse.linalg import expm_multiply
from scipy.stats import binom

from .configspace import (ConfigSpace, DensityMeasure, WindowMismatchError, cyclic_site_permutation,
                          poisson_density, space_from_dict, space_to_dict, state_permutation)
from .mobility import VelocityDensity, zero_velocity

DEFAULT_MAX_DEFECT = 1e-2
SHIFT_TOL = 1e-10


class ClipDefectError(ValueError):
    """Truncation clipped more mass than the configured bound."""


@dataclass(frozen=True)
class CEPath:
    """Densities on knots ``t_0 < ... < t_K`` and velocities on the K intervals."""

    space: ConfigSpace
    knots: np.ndarray
    densities: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        rho = np.asarray(self.densities, dtype=float)
        w = np.asarray(self.velocities, dtype=float)
        K = len(knots) - 1
        if K < 1 or rho.shape != (K + 1, self.space.size) or w.shape != (K, self.space.size, self.space.m):
            raise ValueError("inconsistent path shapes")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "densities", rho)
        object.__setattr__(self, "velocities", w)

    @property
    def K(self) -> int:
        return len(self.knots) - 1

    def density(self, k: int) -> DensityMeasure:
        return DensityMeasure(self.space, self.densities[k])

    def velocity(self, k: int) -> VelocityDensity:
        return VelocityDensity(self.space, self.velocities[k])

    def to_json(self) -> str:
        return json.dumps({"space": space_to_dict(self.space),
                           "knots": self.knots.tolist(),
                           "densities": self.densities.tolist(),
                           "velocities": self.velocities.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "CEPath":
        d = json.loads(text)
        return cls(space_from_dict(d["space"]), d["knots"], d["densities"], d["velocities"])


def divergence(space: ConfigSpace, w) -> np.ndarray:
    """Net inflow ``sum_j flux(m - e_j, j) - flux(m, j)`` at every state."""
    F = np.where(space.edge_mask, w, 0.0) * space.reference.weights[:, None] * space.site_volumes[None, :]
    out = -F.sum(axis=1)
    i, j = np.nonzero(space.edge_mask)
    np.add.at(out, space.up[i, j], F[i, j])
    return out


def ce_residuals(path: CEPath) -> np.ndarray:
    """Per-interval max residual of the discrete continuity equation."""
    pi = path.space.reference.weights
    dt = np.diff(path.knots)
    res = np.empty(path.K)
    for k in range(path.K):
        lhs = (path.densities[k + 1] - path.densities[k]) * pi / dt[k]
        res[k] = np.max(np.abs(lhs - divergence(path.space, path.velocities[k])))
    return res


def ce_residual(path: CEPath) -> float:
    return float(ce_residuals(path).max())


def uniform_knots(K: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, K + 1)


def sample_path(space: ConfigSpace, curve, K: int) -> CEPath:
    """Evaluate ``curve(t) -> (DensityMeasure, VelocityDensity)`` on a uniform grid.

    Densities are taken at the knots, velocities at interval midpoints.
    """
    t = uniform_knots(K)
    dens = np.array([curve(s)[0].rho for s in t])
    mids = 0.5 * (t[1:] + t[:-1])
    vel = np.array([curve(s)[1].w for s in mids])
    return CEPath(space, t, dens, vel)


def poisson_path(space: ConfigSpace, c0: float, c1: float, t: float):
    """Truncated ``Poi^{(1-t)c0 + t c1}`` and the velocity ``(c1 - c0) rho_t``.

    The pair solves the continuity equation up to the reference's truncation mass.
    """
    if c0 <= 0 or c1 <= 0:
        raise ValueError("intensities must be positive")
    P = poisson_density(space, (1 - t) * c0 + t * c1)
    w = (c1 - c0) * np.repeat(P.rho[:, None], space.m, axis=1)
    return P, VelocityDensity(space, w)


def poisson_curve(space: ConfigSpace, c0: float, c1: float, K: int) -> CEPath:
    return sample_path(space, lambda t: poisson_path(space, c0, c1, t), K)


# --- thinning and superposition -----------------------------------------

def _binomial_kernel(N: int, p: float) -> np.ndarray:
    """``B[n, a] = P(Bin(n, p) = a)`` for 0 <= a, n <= N."""
    n = np.arange(N + 1)
    return binom.pmf(n[None, :], n[:, None], p)


def _apply_axes(grid: np.ndarray, kernels) -> np.ndarray:
    """Apply a per-axis transition kernel (rows: from, cols: to) along every axis."""
    out = grid
    for ax, B in enumerate(kernels):
        out = np.moveaxis(np.tensordot(np.moveaxis(out, ax, -1), B, axes=([-1], [0])), -1, ax)
    return out


def _thin_grid(P: DensityMeasure, p: float) -> np.ndarray:
    space = P.space
    B = _binomial_kernel(space.n_max, p)
    return _apply_axes(space.to_grid(P.probabilities), [B] * space.m)


def thinning(P: DensityMeasure, p: float) -> DensityMeasure:
    """Law after keeping each point independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("retention probability must lie in [0, 1]")
    probs, _ = P.space.from_grid(_thin_grid(P, p))
    return DensityMeasure.from_probabilities(P.space, probs / probs.sum(), P.defect)


def _convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return signal.convolve(a, b, mode="full", method="direct")


def _clip(space: ConfigSpace, grid: np.ndarray, max_defect: float, prior: float = 0.0) -> DensityMeasure:
    probs, outside = space.from_grid(grid)
    total = probs.sum() + outside
    defect = max(0.0, outside / total)
    if defect > max_defect:
        raise ClipDefectError(f"clipped mass {defect:.3g} exceeds bound {max_defect:.3g}")
    return DensityMeasure.from_probabilities(space, probs / probs.sum(), prior + defect)


def superpose(P: DensityMeasure, Q: DensityMeasure, max_defect: float = DEFAULT_MAX_DEFECT) -> DensityMeasure:
    """Law of the sum of independent draws from ``P`` and ``Q``; overflow is clipped."""
    if not P.space.same_as(Q.space):
        raise WindowMismatchError("superposition needs a common space")
    space = P.space
    grid = _convolve(space.to_grid(P.probabilities), space.to_grid(Q.probabilities))
    return _clip(space, grid, max_defect, P.defect + Q.defect)


def thinning_interpolation(P0: DensityMeasure, P1: DensityMeasure, t: float,
                           max_defect: float = DEFAULT_MAX_DEFECT) -> DensityMeasure:
    """``P0`` thinned to ``1 - t`` superposed with ``P1`` thinned to ``t``."""
    if t <= 0.0:
        return P0
    if t >= 1.0:
        return P1
    if not P0.space.same_as(P1.space):
        raise WindowMismatchError("interpolation needs a common space")
    space = P0.space
    grid = _convolve(_thin_grid(P0, 1 - t), _thin_grid(P1, t))
    return _clip(space, grid, max_defect, P0.defect + P1.defect)


def thinning_velocity(P0: DensityMeasure, P1: DensityMeasure, t: float,
                      pair_cap: int = 10**8) -> VelocityDensity:
    """Velocity of the thinning interpolation at time ``t`` in (0, 1).

    Label each point with a uniform mark: a ``P0`` point survives while its
    mark exceeds t, a ``P1`` point is present once its mark is below t.  Given
    the configuration, each surviving ``P0`` point leaves and each pending
    ``P1`` point arrives at rate ``1/(1-t)``, which gives

        flux(n, j) = E[#pending P1 at j ; config = n] / (1-t)
                   - E[#surviving P0 at j ; config = n + e_j] / (1-t),

    evaluated by exact convolution over the product law.
    """
    if not 0.0 < t < 1.0:
        raise ValueError("thinning_velocity needs t in (0, 1)")
    if not P0.space.same_as(P1.space):
        raise WindowMismatchError("interpolation needs a common space")
    space = P0.space
    if space.size**2 > pair_cap:
        raise ValueError(f"product law has {space.size**2} pairs, above cap {pair_cap}")
    N, m = space.n_max, space.m
    n = np.arange(N + 1)
    B0 = _binomial_kernel(N, 1 - t)
    B1 = _binomial_kernel(N, t)
    pending = B1 * (n[:, None] - n[None, :]).clip(min=0) / (1 - t)   # [from n, to b]
    g0 = space.to_grid(P0.probabilities)
    g1 = space.to_grid(P1.probabilities)
    thin0 = _apply_axes(g0, [B0] * m)
    thin1 = _apply_axes(g1, [B1] * m)
    F = np.zeros((space.size, m))
    for j in range(m):
        arrive = _apply_axes(g1, [pending if a == j else B1 for a in range(m)])
        up_grid = _convolve(thin0, arrive)
        shape = [1] * m
        shape[j] = N + 1
        leave = thin0 * (n.reshape(shape) / (1 - t))
        down_grid = _convolve(leave, thin1)
        up_vals, _ = space.from_grid(up_grid)
        # down flux at (n, j) is read at n + e_j
        shifted = np.take(down_grid, np.arange(1, down_grid.shape[j]), axis=j)
        down_vals, _ = space.from_grid(shifted)
        F[:, j] = up_vals - down_vals
    F[~space.edge_mask] = 0.0
    return VelocityDensity.from_flux(space, F)


def thinning_curve(P0: DensityMeasure, P1: DensityMeasure, K: int,
                   max_defect: float = DEFAULT_MAX_DEFECT) -> CEPath:
    space = P0.space
    t = uniform_knots(K)
    dens = np.array([thinning_interpolation(P0, P1, s, max_defect).rho for s in t])
    mids = 0.5 * (t[1:] + t[:-1])
    vel = np.array([thinning_velocity(P0, P1, s).w for s in mids])
    return CEPath(space, t, dens, vel)


# --- Ornstein-Uhlenbeck semigroup ----------------------------------------

def ou_generator(space: ConfigSpace) -> sparse.csr_matrix:
    """Generator acting on densities: births at rate v_j (inside the set), deaths at n_j."""
    S, m = space.size, space.m
    rows, cols, vals = [], [], []
    diag = np.zeros(S)
    for j in range(m):
        i = np.nonzero(space.up[:, j] >= 0)[0]
        rows.append(i), cols.append(space.up[i, j]), vals.append(np.full(len(i), space.site_volumes[j]))
        diag[i] -= space.site_volumes[j]
        i = np.nonzero(space.down[:, j] >= 0)[0]
        rate = space.states[i, j].astype(float)
        rows.append(i), cols.append(space.down[i, j]), vals.append(rate)
        diag[i] -= rate
    rows.append(np.arange(S)), cols.append(np.arange(S)), vals.append(diag)
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(S, S))


@lru_cache(maxsize=32)
def _ou_spectrum(space: ConfigSpace):
    L = ou_generator(space).toarray()
    d = np.sqrt(space.reference.weights)
    M = d[:, None] * L / d[None, :]
    lam, U = np.linalg.eigh(0.5 * (M + M.T))
    return np.minimum(lam, 0.0), U, d


def ou_evolve(P: DensityMeasure, t: float, method: str = "generator",
              max_defect: float = 1.0) -> DensityMeasure:
    """Ornstein-Uhlenbeck semigroup applied to ``P`` for time ``t``.

    ``generator`` integrates the truncated reversible birth-death dynamics
    exactly; ``closedform`` thins by ``e^{-t}`` and superposes a truncated
    Poisson law of intensity ``1 - e^{-t}``, clipping the overflow.
    """
    if t < 0:
        raise ValueError("time must be nonnegative")
    if t == 0:
        return P
    space = P.space
    if method == "generator":
        if space.size <= 3000:
            lam, U, d = _ou_spectrum(space)
            rho = (U @ (np.exp(lam * t) * (U.T @ (d * P.rho)))) / d
        else:
            rho = expm_multiply(ou_generator(space) * t, P.rho)
        rho = np.maximum(rho, 0.0)
        rho /= (rho * space.reference.weights).sum()
        return DensityMeasure(space, rho, P.defect)
    if method == "closedform":
        q = math.exp(-t)
        noise = poisson_density(space, 1 - q)
        grid = _convolve(_thin_grid(P, q), space.to_grid(noise.probabilities))
        return _clip(space, grid, max_defect, P.defect)
    raise ValueError(f"unknown method {method!r}")


# --- stationarity --------------------------------------------------------

def shift_velocity(V: VelocityDensity, z) -> VelocityDensity:
    """Cyclic shift of an edge field on a periodic window."""
    space = V.space
    perm = cyclic_site_permutation(space.window, z)
    smap = state_permutation(space, perm)
    w = np.empty_like(V.w)
    w[np.ix_(smap, perm)] = V.w
    return VelocityDensity(space, w)


def is_shift_invariant(V: VelocityDensity, tol: float = SHIFT_TOL) -> tuple[bool, float]:
    """Max deviation of ``V`` from its cyclic shifts; invariant iff below ``tol``."""
    win = V.space.window
    if not win.periodic:
        raise WindowMismatchError("shift invariance is only defined on periodic windows")
    dev = 0.0
    for z in np.ndindex(*win.cells_per_axis):
        dev = max(dev, float(np.max(np.abs(shift_velocity(V, z).w - V.w))))
    return dev < tol, dev
