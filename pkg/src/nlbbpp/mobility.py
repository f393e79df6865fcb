"""Logarithmic mean, the mobility integrand and the Lagrange/action functionals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .configspace import ConfigSpace, DensityMeasure, LatticeWindow, WindowMismatchError, _site_map


def _h_series(s):
    """sinh(s)/s and the two combinations the Hessian needs, stable at s = 0.

    Returns (h, h', h'/s) with h(s) = sinh(s)/s.
    """
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < 1e-3
    s2 = s * s
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        sh, ch = np.sinh(s), np.cosh(s)
        h = np.where(small, 1 + s2 / 6 + s2 * s2 / 120, sh / s)
        hp = np.where(small, s / 3 + s * s2 / 30, (s * ch - sh) / s2)
        hp_s = np.where(small, 1 / 3 + s2 / 30 + s2 * s2 / 840, (s * ch - sh) / (s2 * s))
    return h, hp, hp_s


def log_mean(x, y):
    """Logarithmic mean ``(y - x) / (log y - log x)``; 0 if either argument is 0.

    Works on scalars and arrays; negative input raises ValueError.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("log_mean needs nonnegative arguments")
    pos = (x > 0) & (y > 0)
    out = np.zeros(np.broadcast(x, y).shape)
    xb, yb = np.broadcast_to(x, out.shape)[pos], np.broadcast_to(y, out.shape)[pos]
    s = 0.5 * (np.log(yb) - np.log(xb))
    out[pos] = np.sqrt(xb * yb) * _h_series(s)[0]
    return out if out.ndim else float(out)


def log_mean_derivatives(x, y):
    """theta, its gradient and Hessian entries at positive ``x, y`` (arrays).

    With q = sqrt(xy), s = log(y/x)/2 and h = sinh(s)/s:
    theta = q h, d_x = q (h - h')/(2x), d_y = q (h + h')/(2y) and the Hessian is
    (q h'/(2s)) [[-1/x^2, 1/(xy)], [1/(xy), -1/y^2]].
    """
    q = np.sqrt(x * y)
    s = 0.5 * (np.log(y) - np.log(x))
    h, hp, hp_s = _h_series(s)
    theta = q * h
    tx = q * (h - hp) / (2 * x)
    ty = q * (h + hp) / (2 * y)
    c = q * hp_s / 2
    return theta, tx, ty, -c / x**2, c / (x * y), -c / y**2


def mobility_alpha(x, y, w):
    """``|w|^2 / theta(x, y)`` with 0/0 = 0 and +inf when theta = 0 < |w|."""
    th = np.asarray(log_mean(x, y))
    w = np.asarray(w, dtype=float)
    th, w = np.broadcast_arrays(th, w)
    out = np.zeros(th.shape)
    pos = th > 0
    out[pos] = w[pos] ** 2 / th[pos]
    out[(~pos) & (w != 0)] = np.inf
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class VelocityDensity:
    """Edge field ``w[n, j]`` relative to ``pi (x) v``; zero off the edge set."""

    space: ConfigSpace
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.shape != (self.space.size, self.space.m):
            raise ValueError(f"velocity has shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("velocity entries must be finite")
        w[~self.space.edge_mask] = 0.0
        w.flags.writeable = False
        object.__setattr__(self, "w", w)

    def flux(self) -> np.ndarray:
        """The velocity as a measure on (state, site) pairs."""
        return self.w * self.space.reference.weights[:, None] * self.space.site_volumes[None, :]

    @classmethod
    def from_flux(cls, space: ConfigSpace, F) -> "VelocityDensity":
        F = np.asarray(F, dtype=float)
        return cls(space, F / (space.reference.weights[:, None] * space.site_volumes[None, :]))


def zero_velocity(space: ConfigSpace) -> VelocityDensity:
    return VelocityDensity(space, np.zeros((space.size, space.m)))


def _edge_terms(rho, space: ConfigSpace, w):
    i, j = np.nonzero(space.edge_mask)
    k = space.up[i, j]
    vals = mobility_alpha(rho[i], rho[k], w[i, j])
    return np.atleast_1d(vals) * space.reference.weights[i] * space.site_volumes[j]


def lagrangian(P: DensityMeasure, V: VelocityDensity) -> float:
    """``sum_{n,j} alpha(rho(n), rho(n+e_j), w(n,j)) pi(n) v_j``."""
    if P.space is not V.space and not P.space.same_as(V.space):
        raise WindowMismatchError("density and velocity live on different spaces")
    # fixed-order pairwise summation keeps the result deterministic
    return float(np.sum(_edge_terms(P.rho, P.space, V.w)))


def action(path) -> float:
    """Staggered action ``sum_k dt_k L((rho_k + rho_{k+1})/2, w_{k+1/2})``."""
    t = np.asarray(path.knots, dtype=float)
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise ValueError("time grid must be strictly increasing")
    total = 0.0
    for k in range(len(dt)):
        mid = 0.5 * (path.densities[k] + path.densities[k + 1])
        total += dt[k] * float(np.sum(_edge_terms(mid, path.space, path.velocities[k])))
    return total


def restrict_velocity(V: VelocityDensity, sub: LatticeWindow) -> VelocityDensity:
    """Marginalize the flux onto the sites of ``sub`` (same ``n_max``)."""
    space = V.space
    sites = _site_map(space.window, sub)
    target = ConfigSpace(sub, space.n_max, space.site_volumes[sites])
    idx = target._lookup[np.ravel_multi_index(space.states[:, sites].T, target._grid_shape)]
    F = V.flux()
    G = np.zeros((target.size, target.m))
    for a, j in enumerate(sites):
        np.add.at(G[:, a], idx, F[:, j])
    return VelocityDensity.from_flux(target, G)


def product_velocity(P: DensityMeasure, V: VelocityDensity,
                     Q: DensityMeasure, U: VelocityDensity,
                     joint: ConfigSpace) -> VelocityDensity:
    """Composite field on the union: each factor's flux times the other factor's law."""
    F = np.zeros((joint.size, joint.m))
    for (A, VA), (B, _) in (((P, V), (Q, U)), ((Q, U), (P, V))):
        sa = np.array([joint.window.site_of(c) for c in A.space.window.cells])
        sb = np.array([joint.window.site_of(c) for c in B.space.window.cells])
        na, nb = joint.states[:, sa], joint.states[:, sb]
        ok = (na.sum(axis=1) <= A.space.n_max) & (nb.sum(axis=1) <= B.space.n_max)
        ia = A.space._lookup[np.ravel_multi_index(na[ok].T, A.space._grid_shape)]
        ib = B.space._lookup[np.ravel_multi_index(nb[ok].T, B.space._grid_shape)]
        FA = VA.flux()
        F[np.ix_(np.nonzero(ok)[0], sa)] = FA[ia] * B.probabilities[ib][:, None]
    return VelocityDensity.from_flux(joint, F)


def specific_action(paths, tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Per-volume actions of a family of window paths and their running sup.

    Consecutive windows must be nested, and each smaller path's densities
    must match the marginals of the next larger one within ``tol``.
    """
    from .configspace import restrict

    vals = []
    for a, path in enumerate(paths):
        if a > 0:
            prev = paths[a - 1]
            big, small = path.space.window, prev.space.window
            if big.contains(small) and len(prev.knots) == len(path.knots):
                for rk_small, rk_big in zip(prev.densities, path.densities):
                    marg = restrict(DensityMeasure(path.space, rk_big), small,
                                    n_max=prev.space.n_max, tol=1.0)
                    if np.max(np.abs(marg.probabilities - rk_small * prev.space.reference.weights)) > tol:
                        raise WindowMismatchError("paths are not restrictions of one family")
        vals.append(action(path) / path.space.window.volume())
    vals = np.array(vals)
    return vals, float(vals.max()) if len(vals) else 0.0
