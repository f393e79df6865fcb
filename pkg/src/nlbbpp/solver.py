"""Transport distance W0^2 between laws on one configuration space.

The discrete problem minimizes the staggered action

    sum_k dt * sum_edges c_e * alpha(x_ke, y_ke, w_ke),
    x_ke = (rho_k + rho_{k+1})(n_e) / 2 + eps,  y_ke likewise at n_e + e_j,

over interior knot densities and interval velocities subject to the
discrete continuity equation.  It is jointly convex with linear
constraints.  Two solvers are provided:

* ``newton`` (default): equality-constrained damped Newton on the full
  (rho, w) problem with sparse KKT solves and a fraction-to-boundary rule.
* ``primal-dual``: Chambolle-Pock iterations with an exact projection onto
  the continuity constraint and a per-edge proximal step for the mobility.

All reported action values use the exact logarithmic mean (eps = 0).
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
import scipy.sparse.linalg

from .configspace import ConfigSpace, DensityMeasure, SizingError, WindowMismatchError
from .dynamics import CEPath, ce_residual, uniform_knots
from .mobility import action, log_mean, log_mean_derivatives

log = logging.getLogger(__name__)

DEFAULT_VARIABLE_CAP = 400_000


class TruncationWarning(UserWarning):
    """Marginals charge states at the truncation ceiling."""


class NonConvergenceError(RuntimeError):
    """The solver stopped before meeting its tolerances."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class SolverConfig:
    K: int = 32
    method: str = "newton"
    max_iters: int = 200
    eps0: float = 1e-9
    ce_tol: float = 1e-9
    action_tol: float = 1e-9
    restarts: int = 4
    # log-barrier weights on interior densities, decreased in stages
    barrier: tuple[float, ...] = (1e-6, 1e-8, 1e-10, 1e-12)
    # primal-dual only
    pd_iters: int = 20000
    pd_steps: tuple[float, float] | None = None
    variable_cap: int = DEFAULT_VARIABLE_CAP
    strict: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if min(self.ce_tol, self.action_tol) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class TransportProblem:
    P0: DensityMeasure
    P1: DensityMeasure
    config: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not self.P0.space.same_as(self.P1.space):
            raise WindowMismatchError("marginals live on different spaces")
        for P in (self.P0, self.P1):
            if abs(P.mass() - 1.0) > 1e-10:
                raise ValueError("marginals must be probability laws")

    @property
    def space(self) -> ConfigSpace:
        return self.P0.space

    @property
    def K(self) -> int:
        return self.config.K


@dataclass
class TransportSolution:
    path: CEPath
    action_value: float
    diagnostics: dict

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("converged"))

    def diagnostics_json(self) -> str:
        d = {k: v for k, v in self.diagnostics.items() if k != "action_history"}
        d["action_value"] = self.action_value
        d["action_history_tail"] = self.diagnostics.get("action_history", [])[-10:]
        return json.dumps(d, default=float)


class _Layout:
    """Index bookkeeping for the staggered discretization."""

    def __init__(self, space: ConfigSpace, K: int):
        self.space, self.K = space, K
        S = space.size
        i, j = np.nonzero(space.edge_mask)
        self.tail, self.site, self.head = i, j, space.up[i, j]
        self.c = space.reference.weights[i] * space.site_volumes[j]
        self.S, self.E = S, len(i)
        self.n_rho = (K - 1) * S
        self.n = self.n_rho + K * self.E
        self.dt = 1.0 / K
        pi = space.reference.weights
        # constraints, scaled by dt/pi(s): rho_{k+1} - rho_k - (dt/pi) div(w_k) = 0
        rows, cols, vals = [], [], []
        for k in range(K):
            base = k * S
            if k >= 1:
                rows.append(base + np.arange(S)), cols.append(self.rho_cols(k - 1 + 1)), vals.append(-np.ones(S))
            if k + 1 <= K - 1:
                rows.append(base + np.arange(S)), cols.append(self.rho_cols(k + 1)), vals.append(np.ones(S))
            wc = self.w_cols(k)
            scale = self.dt / pi
            # -div = sum_out c w - sum_in c w
            rows.append(base + self.tail), cols.append(wc), vals.append(self.c * scale[self.tail])
            rows.append(base + self.head), cols.append(wc), vals.append(-self.c * scale[self.head])
        A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(K * S, self.n))
        # the pi-weighted sum of all rows only involves the fixed endpoints
        # (mass conservation), so one row is redundant; dropping the row with
        # the largest weight keeps the implied constraint well conditioned
        drop = (K - 1) * S + int(np.argmax(pi))
        self.keep = np.delete(np.arange(K * S), drop)
        self.A = A[self.keep]
        # barrier weights dt * pi: their total is below one, so the barrier
        # shifts the optimal action by at most about mu
        self.bw = np.tile(self.dt * pi, K - 1)

    def project(self, z, b) -> np.ndarray:
        """Least-norm correction onto ``A z = b``."""
        if not hasattr(self, "_aat"):
            AAt = (self.A @ self.A.T).tocsc()
            self._aat = splu(AAt)
        r = self.A @ z - b
        for _ in range(3):
            z = z - self.A.T @ self._aat.solve(r)
            r = self.A @ z - b
        return z

    def rho_cols(self, k: int) -> np.ndarray:
        """Columns of interior knot k (1 <= k <= K-1)."""
        return (k - 1) * self.S + np.arange(self.S)

    def w_cols(self, k: int) -> np.ndarray:
        return self.n_rho + k * self.E + np.arange(self.E)

    def rhs(self, rho0, rho1) -> np.ndarray:
        b = np.zeros(self.K * self.S)
        b[:self.S] += rho0
        b[(self.K - 1) * self.S:] -= rho1
        return b[self.keep]

    def split(self, z, rho0, rho1):
        rho = np.empty((self.K + 1, self.S))
        rho[0], rho[-1] = rho0, rho1
        rho[1:-1] = z[:self.n_rho].reshape(self.K - 1, self.S)
        w = z[self.n_rho:].reshape(self.K, self.E)
        return rho, w

    def pack(self, rho, w) -> np.ndarray:
        return np.concatenate([rho[1:-1].ravel(), w.ravel()])

    def edge_field(self, w_edges) -> np.ndarray:
        out = np.zeros((self.S, self.space.m))
        out[self.tail, self.site] = w_edges
        return out


def _objective(lay: _Layout, rho, w, eps: float) -> float:
    mid = 0.5 * (rho[1:] + rho[:-1]) + eps
    x, y = mid[:, lay.tail], mid[:, lay.head]
    if np.any(x < 0) or np.any(y < 0):
        return math.inf
    th = log_mean(x, y)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(th > 0, w**2 / th, np.where(w == 0, 0.0, np.inf))
    return float(lay.dt * np.sum(a * lay.c))


def _grad_hess(lay: _Layout, rho, w, eps: float):
    """Gradient and sparse Hessian of the smoothed action."""
    K, S, E = lay.K, lay.S, lay.E
    mid = 0.5 * (rho[1:] + rho[:-1]) + eps
    x, y = mid[:, lay.tail], mid[:, lay.head]
    th, tx, ty, txx, txy, tyy = log_mean_derivatives(x, y)
    s = lay.dt * lay.c
    w2 = w * w
    gx = -s * w2 / th**2 * tx
    gy = -s * w2 / th**2 * ty
    gw = s * 2 * w / th
    hxx = s * (2 * w2 / th**3 * tx * tx - w2 / th**2 * txx)
    hxy = s * (2 * w2 / th**3 * tx * ty - w2 / th**2 * txy)
    hyy = s * (2 * w2 / th**3 * ty * ty - w2 / th**2 * tyy)
    hxw = -s * 2 * w / th**2 * tx
    hyw = -s * 2 * w / th**2 * ty
    hww = s * 2 / th + 0 * w

    g = np.zeros(lay.n)
    rows, cols, vals = [], [], []
    kk = np.arange(K)[:, None]
    # column of the density at knot k (or -1 for the fixed endpoints)
    def rho_col(k, states):
        col = (k - 1) * S + states
        return np.where((k >= 1) & (k <= K - 1), col, -1)

    wcol = lay.n_rho + kk * E + np.arange(E)[None, :]
    # each of x, y averages two knots
    xcols = [rho_col(kk, lay.tail[None, :]), rho_col(kk + 1, lay.tail[None, :])]
    ycols = [rho_col(kk, lay.head[None, :]), rho_col(kk + 1, lay.head[None, :])]
    for cx in xcols:
        ok = cx >= 0
        np.add.at(g, cx[ok], 0.5 * gx[ok])
    for cy in ycols:
        ok = cy >= 0
        np.add.at(g, cy[ok], 0.5 * gy[ok])
    g[wcol.ravel()] += gw.ravel()

    def put(ca, cb, v):
        ok = (ca >= 0) & (cb >= 0)
        rows.append(ca[ok]), cols.append(cb[ok]), vals.append(v[ok])

    for a in xcols:
        for b in xcols:
            put(a, b, 0.25 * hxx)
        for b in ycols:
            put(a, b, 0.25 * hxy)
            put(b, a, 0.25 * hxy)
        put(a, wcol, 0.5 * hxw)
        put(wcol, a, 0.5 * hxw)
    for a in ycols:
        for b in ycols:
            put(a, b, 0.25 * hyy)
        put(a, wcol, 0.5 * hyw)
        put(wcol, a, 0.5 * hyw)
    put(wcol, wcol, hww)
    H = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(lay.n, lay.n))
    return g, H


def _laplacian_velocity(lay: _Layout, rho, weights=None) -> np.ndarray:
    """Per interval, the least-action velocity for fixed densities (theta-weighted Laplacian)."""
    pi = lay.space.reference.weights
    w = np.zeros((lay.K, lay.E))
    S = lay.S
    B = sparse.csr_matrix((np.concatenate([-np.ones(lay.E), np.ones(lay.E)]),
                           (np.concatenate([np.arange(lay.E)] * 2), np.concatenate([lay.tail, lay.head]))),
                          shape=(lay.E, S))
    for k in range(lay.K):
        mid = 0.5 * (rho[k] + rho[k + 1])
        th = log_mean(mid[lay.tail], mid[lay.head]) if weights is None else weights
        th = np.maximum(th, 1e-300)
        b = (rho[k + 1] - rho[k]) * pi / lay.dt
        L = (B.T @ sparse.diags(lay.c * th) @ B).tocsc()
        # pin the potential at state 0
        psi = np.zeros(S)
        if S > 1:
            psi[1:] = splu(L[1:, 1:]).solve(b[1:])
        w[k] = th * (B @ psi)
    return w


def _initial_point(lay: _Layout, rho0, rho1):
    t = uniform_knots(lay.K)[:, None]
    blend = 0.5 * 4 * t * (1 - t)
    rho = (1 - blend) * ((1 - t) * rho0[None, :] + t * rho1[None, :]) + blend
    rho[0], rho[-1] = rho0, rho1
    w = _laplacian_velocity(lay, rho)
    return rho, w


def _kkt_solve(KKT, rhs, n_primal):
    """Solve the scaled KKT system.

    A quasi-definite perturbation (dual block shifted by -1e-8) is factored
    with a symmetric ordering and no pivoting, then iterative refinement
    against the true matrix removes the perturbation.  Falls back to a
    pivoting LU when refinement stalls.
    """
    norm = max(float(np.abs(rhs).max()), 1e-300)
    shift = np.zeros(KKT.shape[0])
    shift[n_primal:] = -1e-8
    try:
        lu = splu((KKT + sparse.diags(shift)).tocsc(), permc_spec="MMD_AT_PLUS_A",
                  options=dict(SymmetricMode=True), diag_pivot_thresh=0.0)
        sol = lu.solve(rhs)
        for _ in range(20):
            res = rhs - KKT @ sol
            if not np.all(np.isfinite(res)) or np.abs(res).max() <= 1e-13 * norm:
                break
            sol = sol + lu.solve(res)
        if np.all(np.isfinite(sol)) and np.abs(KKT @ sol - rhs).max() <= 1e-11 * norm:
            return sol
    except RuntimeError:
        pass
    try:
        return splu(KKT, permc_spec="COLAMD").solve(rhs)
    except RuntimeError:
        return np.linalg.lstsq(KKT.toarray(), rhs, rcond=None)[0]


def _newton(lay: _Layout, rho0, rho1, z, eps, cfg: SolverConfig, history: list, mu: float = 0.0):
    A = lay.A
    b = lay.rhs(rho0, rho1)
    n_rho = lay.n_rho

    def fval(zz):
        f = _objective(lay, *lay.split(zz, rho0, rho1), eps)
        if mu > 0:
            r = zz[:n_rho]
            if np.any(r <= 0):
                return math.inf
            f -= mu * float(lay.bw @ np.log(r))
        return f

    z_proj = lay.project(z, b)
    if np.all(z_proj[:n_rho] > 0):
        z = z_proj
    f = fval(z)
    converged = False
    it = stall = 0
    for it in range(1, cfg.max_iters + 1):
        rho, w = lay.split(z, rho0, rho1)
        g, H = _grad_hess(lay, rho, w, eps)
        if mu > 0:
            r_int = z[:n_rho]
            g[:n_rho] -= mu * lay.bw / r_int
            H = H + sparse.diags(np.concatenate([mu * lay.bw / r_int**2, np.zeros(lay.n - n_rho)]))
        r = A @ z - b
        # symmetric Jacobi scaling; the regularization is relative to each diagonal entry
        hd = np.abs(H.diagonal())
        d = 1.0 / np.sqrt(np.maximum(hd, 1e-30 * max(hd.max(), 1e-300)))
        D = sparse.diags(d)
        As = A @ D
        e = 1.0 / np.maximum(sparse.linalg.norm(As, axis=1), 1e-300)
        As = sparse.diags(e) @ As
        KKT = sparse.bmat([[D @ H @ D + 1e-12 * sparse.eye(lay.n), As.T],
                           [As, -1e-14 * sparse.eye(A.shape[0])]], format="csc")
        rhs = np.concatenate([-d * g, -e * r])
        sol = _kkt_solve(KKT, rhs, lay.n)
        dz = d * sol[:lay.n]
        # drop the part of dz that leaves the affine constraint set (KKT round-off)
        dz = lay.project(z + dz, b) - z
        decrement = float(-g @ dz)
        # keep interior densities positive
        step = 1.0
        drho = dz[:n_rho]
        neg = drho < 0
        if np.any(neg):
            step = min(1.0, 0.995 * float(np.min(-z[:n_rho][neg] / drho[neg])))
        while step > 1e-12:
            z_new = z + step * dz
            z_fix = lay.project(z_new, b)
            if np.all(z_fix[:n_rho] > 0):
                z_new = z_fix
            f_new = fval(z_new)
            if f_new <= f - 1e-4 * step * max(decrement, 0.0) or (
                    abs(f_new - f) <= 1e-15 * max(1.0, abs(f)) and np.linalg.norm(A @ z_new - b) <= np.linalg.norm(r)):
                break
            step *= 0.5
        else:
            break
        z, f_prev, f = z_new, f, f_new
        history.append(f)
        # the Newton decrement bounds the suboptimality (about half of it) of a convex objective
        scale = max(1.0, abs(f))
        if abs(decrement) <= 0.1 * cfg.action_tol * scale:
            converged = True
            break
        stall = stall + 1 if abs(f_prev - f) <= 1e-14 * scale else 0
        if stall >= 3 and abs(decrement) <= cfg.action_tol * scale:
            converged = True
            break
    return z, f, converged, it


def _prox_mobility(x0, y0, w0, tau, iters=60):
    """Proximal map of tau * w^2 / theta(x, y), elementwise.

    For fixed (x, y) the optimal w is w0 theta / (theta + 2 tau); the remaining
    two-variable convex problem is solved by damped Newton steps that keep
    x, y positive.  Edges with tiny |w0| reduce to clipping (x, y) at zero.
    """
    x = np.maximum(x0, 1e-12)
    y = np.maximum(y0, 1e-12)
    active = np.abs(w0) > 1e-300
    for _ in range(iters):
        th, tx, ty, txx, txy, tyy = log_mean_derivatives(x, y)
        d = th + 2 * tau
        q = w0**2 / d**2
        gx = -q * tx + (x - x0) / tau
        gy = -q * ty + (y - y0) / tau
        r = 2 * w0**2 / d**3
        hxx = r * tx * tx - q * txx + 1 / tau
        hxy = r * tx * ty - q * txy
        hyy = r * ty * ty - q * tyy + 1 / tau
        det = hxx * hyy - hxy * hxy
        dx = -(hyy * gx - hxy * gy) / det
        dy = -(hxx * gy - hxy * gx) / det
        # halve until the step stays in the open quadrant
        step = np.ones_like(x)
        for _ in range(60):
            bad = (x + step * dx <= 0) | (y + step * dy <= 0)
            if not bad.any():
                break
            step = np.where(bad, step / 2, step)
        x_new = np.where(active, x + step * dx, x)
        y_new = np.where(active, y + step * dy, y)
        done = np.max(np.abs(x_new - x) + np.abs(y_new - y)) < 1e-14
        x, y = x_new, y_new
        if done:
            break
    x = np.where(active, x, np.maximum(x0, 0.0))
    y = np.where(active, y, np.maximum(y0, 0.0))
    th = log_mean(x, y)
    w = np.where(active, w0 * th / (th + 2 * tau), 0.0)
    return x, y, w


def _primal_dual(lay: _Layout, rho0, rho1, z, cfg: SolverConfig, history: list):
    """Chambolle-Pock on min F(Kz) + G(z): K maps z to per-edge (x, y, w), G is the CE indicator."""
    K, E = lay.K, lay.E
    A = lay.A
    b = lay.rhs(rho0, rho1)
    # linear map z -> edge copies (x, y, w), endpoints enter as constants
    rows, cols, vals = [], [], []
    const = np.zeros(3 * K * E)
    for k in range(K):
        for part, states in ((0, lay.tail), (1, lay.head)):
            r = part * K * E + k * E + np.arange(E)
            for kn in (k, k + 1):
                if 1 <= kn <= K - 1:
                    rows.append(r), cols.append(lay.rho_cols(kn)[states]), vals.append(np.full(E, 0.5))
                else:
                    const[r] += 0.5 * (rho0 if kn == 0 else rho1)[states]
        r = 2 * K * E + k * E + np.arange(E)
        rows.append(r), cols.append(lay.w_cols(k)), vals.append(np.ones(E))
    Kop = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(3 * K * E, lay.n))
    weight = np.tile(lay.dt * lay.c, 3 * K)[:K * E]
    # projection onto {A z = b}
    AAt = splu((A @ A.T + 1e-14 * sparse.eye(A.shape[0])).tocsc())

    def project(v):
        return v - A.T @ AAt.solve(A @ v - b)

    normK = float(sparse.linalg.svds(Kop, k=1, return_singular_vectors=False)[0])
    tau, sigma = cfg.pd_steps or (0.9 / normK, 0.9 / normK)
    z = project(z)
    z_bar = z.copy()
    p = np.zeros(3 * K * E)
    converged, it = False, 0
    f_old = math.inf
    for it in range(1, cfg.pd_iters + 1):
        # dual step: prox of sigma F* via Moreau from prox of F / sigma
        u = p + sigma * (Kop @ z_bar + const)
        ux, uy, uw = u[:K * E] / sigma, u[K * E:2 * K * E] / sigma, u[2 * K * E:] / sigma
        px, py, pw = _prox_mobility(ux, uy, uw, weight / sigma)
        p = u - sigma * np.concatenate([px, py, pw])
        z_new = project(z - tau * (Kop.T @ p))
        z_bar = 2 * z_new - z
        z = z_new
        if it % 50 == 0:
            f = _objective(lay, *lay.split(z, rho0, rho1), 0.0)
            history.append(f)
            if abs(f - f_old) <= cfg.action_tol * max(1.0, abs(f)) and np.isfinite(f):
                converged = True
                break
            f_old = f
    return z, _objective(lay, *lay.split(z, rho0, rho1), 0.0), converged, it


def solve_w0(problem: TransportProblem) -> TransportSolution:
    """Minimize the discrete action between the marginals.

    Returns the best iterate; ``diagnostics['converged']`` reports whether the
    tolerances were met (with ``config.strict`` a NonConvergenceError is raised).
    """
    cfg = problem.config
    space = problem.space
    lay = _Layout(space, cfg.K)
    if lay.n > cfg.variable_cap:
        raise SizingError(f"{lay.n} variables exceed cap {cfg.variable_cap}")
    rho0, rho1 = problem.P0.rho, problem.P1.rho
    ceiling = space.totals == space.n_max
    ceiling_mass = max(problem.P0.probabilities[ceiling].sum(), problem.P1.probabilities[ceiling].sum())
    if ceiling_mass > 1e-8:
        warnings.warn(f"marginals put mass {ceiling_mass:.2e} on ceiling states; truncation may bind",
                      TruncationWarning, stacklevel=2)
    history: list[float] = []
    diag = {"method": cfg.method, "K": cfg.K, "states": space.size, "variables": lay.n,
            "ceiling_mass": float(ceiling_mass)}

    if np.allclose(rho0, rho1, rtol=0, atol=1e-15):
        rho = np.repeat(rho0[None, :], cfg.K + 1, axis=0)
        path = CEPath(space, uniform_knots(cfg.K), rho, np.zeros((cfg.K, space.size, space.m)))
        diag.update(iterations=0, ce_residual=0.0, converged=True, action_history=[0.0], eps_schedule=[])
        return TransportSolution(path, 0.0, diag)

    rho, w = _initial_point(lay, rho0, rho1)
    z = lay.pack(rho, w)
    iters, converged = 0, False
    eps_schedule = []
    if cfg.method == "newton":
        eps = cfg.eps0
        last = None
        for restart in range(cfg.restarts + 1):
            # the first pass follows the barrier path, later ones stay at its end
            for mu in (cfg.barrier if restart == 0 else cfg.barrier[-1:]):
                z, f, ok, n_it = _newton(lay, rho0, rho1, z, eps, cfg, history, mu)
                iters += n_it
            exact = _objective(lay, *lay.split(z, rho0, rho1), 0.0)
            eps_schedule.append((eps, exact))
            # compare the smoothed objective: the unsmoothed one is ill-conditioned
            # when many interior densities sit near zero
            if last is not None and abs(f - last) < 1e-8 * max(1.0, abs(f)) and ok:
                converged = True
                break
            last = f
            eps = eps / 2
    elif cfg.method == "primal-dual":
        z, f, converged, iters = _primal_dual(lay, rho0, rho1, z, cfg, history)
    else:
        raise ValueError(f"unknown method {cfg.method!r}")

    rho, w_edges = lay.split(z, rho0, rho1)
    rho[1:-1] = np.maximum(rho[1:-1], 0.0)
    vel = np.array([lay.edge_field(w_edges[k]) for k in range(cfg.K)])
    path = CEPath(space, uniform_knots(cfg.K), rho, vel)
    value = action(path)
    res = ce_residual(path)
    converged = converged and res <= max(cfg.ce_tol, 1e-9) * max(1.0, float(np.abs(rho).max()))
    diag.update(iterations=iters, ce_residual=res, converged=converged,
                action_history=history, eps_schedule=eps_schedule)
    sol = TransportSolution(path, value, diag)
    if not converged:
        msg = f"solver stopped after {iters} iterations (residual {res:.2e})"
        if cfg.strict:
            raise NonConvergenceError(msg, sol)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return sol


def w0_squared(P0: DensityMeasure, P1: DensityMeasure, K: int = 32, **kwargs) -> float:
    cfg = SolverConfig(K=K, **kwargs)
    return solve_w0(TransportProblem(P0, P1, cfg)).action_value


def geodesic(problem: TransportProblem) -> CEPath:
    """The minimizing path (constant speed up to discretization error)."""
    sol = solve_w0(problem)
    if not sol.converged:
        raise NonConvergenceError("geodesic requested from an unconverged solve", sol)
    return sol.path


def refinement_table(P0: DensityMeasure, P1: DensityMeasure, Ks=(8, 16, 32), **kwargs) -> dict:
    """W0^2 on successively refined grids with Richardson extrapolation (order 2)."""
    values = [w0_squared(P0, P1, K=K, **kwargs) for K in Ks]
    rich = [(4 * values[i + 1] - values[i]) / 3 for i in range(len(Ks) - 1)
            if Ks[i + 1] == 2 * Ks[i]]
    return {"K": list(Ks), "values": values, "richardson": rich,
            "extrapolated": rich[-1] if rich else values[-1]}


def w0_upper_bound_thinning(P0: DensityMeasure, P1: DensityMeasure, K: int = 32) -> float:
    """Action of the sampled thinning path between the marginals.

    The path may visit states up to the sum of the marginals' occupied totals;
    callers compare against the distance on a space that large (see
    ``thinning_space``).
    """
    from .dynamics import thinning_curve

    if np.allclose(P0.rho, P1.rho, rtol=0, atol=1e-15):
        return 0.0
    return action(thinning_curve(P0, P1, K, max_defect=1e-12))


def thinning_space(P0: DensityMeasure, P1: DensityMeasure) -> ConfigSpace:
    """Smallest space over the same window on which the thinning path is not clipped."""
    space = P0.space
    top = lambda P: int(space.totals[P.probabilities > 0].max())
    return ConfigSpace(space.window, max(space.n_max, top(P0) + top(P1)), space.site_volumes)


# ---------------------------------------------------------------------------
# Independent oracle.  Velocities are eliminated in closed form (weighted
# Laplacian solves), densities are parametrized by a pi-weighted softmax and
# the reduced objective is minimized by a generic quasi-Newton then
# trust-region Newton-CG method.  Nothing below reuses the Newton solver or
# the mobility module.

ORACLE_CAP = 5000


def _oracle_theta(x, y):
    """Log mean and partials via log1p; positive arrays only."""
    r = y / x
    u = r - 1.0
    small = np.abs(u) < 1e-4
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(small, 1 - u / 2 + u * u / 3 - u**3 / 4, np.log1p(u) / u)  # log(r)/(r-1)
    th = x / g
    # d theta/dx = (theta/x)(1 - theta/x... ) written via L = log r
    L = np.log(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(small, 0.5 - u / 12 + u * u / 24,
                      (th / x - 1) / L)
        ty = np.where(small, 0.5 + u / 12 - u * u / 12,
                      (1 - th / y) / L)
    return th, tx, ty


class _Reduced:
    def __init__(self, space: ConfigSpace, rho0, rho1, K: int):
        self.K, self.S = K, space.size
        i, j = np.nonzero(space.edge_mask)
        self.i, self.k = i, space.up[i, j]
        pi = space.reference.weights
        self.pi = pi
        self.c = pi[i] * space.site_volumes[j]
        self.rho0, self.rho1 = rho0, rho1
        E = len(i)
        self.B = np.zeros((E, self.S))
        self.B[np.arange(E), self.i] = -1
        self.B[np.arange(E), self.k] = 1
        self.eps = 0.0

    def densities(self, u):
        U = u.reshape(self.K - 1, self.S)
        U = U - U.max(axis=1, keepdims=True)
        e = np.exp(U)
        R = e / (e @ self.pi)[:, None]
        return np.vstack([self.rho0, R, self.rho1])

    def value_grad(self, u):
        K, S = self.K, self.S
        if not np.all(np.isfinite(u)):
            return np.inf, np.zeros_like(u)
        rho = self.densities(u)
        dt = 1.0 / K
        g = np.zeros_like(rho)
        total = 0.0
        for k in range(K):
            mid = 0.5 * (rho[k] + rho[k + 1]) + self.eps
            th, tx, ty = _oracle_theta(mid[self.i], mid[self.k])
            b = (rho[k + 1] - rho[k]) * self.pi / dt
            L = self.B.T @ ((self.c * th)[:, None] * self.B)
            psi = np.zeros(S)
            psi[1:] = np.linalg.solve(L[1:, 1:], b[1:])
            total += dt * float(b @ psi)
            g[k + 1] += 2 * psi * self.pi
            g[k] -= 2 * psi * self.pi
            dth = -dt * self.c * (self.B @ psi) ** 2
            for kk in (k, k + 1):
                np.add.at(g[kk], self.i, 0.5 * dth * tx)
                np.add.at(g[kk], self.k, 0.5 * dth * ty)
        R, G = rho[1:-1], g[1:-1]
        gu = R * G - R * self.pi[None, :] * np.sum(R * G, axis=1, keepdims=True)
        return total, gu.ravel()


def brute_force_w0(problem: TransportProblem, seed: int = 0, restarts: int = 2,
                   eps_schedule=(1e-6, 1e-9, 1e-12), agree_tol: float = 1e-8) -> dict:
    """High-precision reference value of the discrete W0^2 (small instances only).

    Returns ``{"value", "restarts": [...], "agree"}``; the value is the best
    restart evaluated with the exact logarithmic mean.
    """
    from scipy.optimize import minimize

    space, K = problem.space, problem.K
    if space.size * K > ORACLE_CAP:
        raise SizingError(f"oracle limited to S*K <= {ORACLE_CAP}")
    rho0, rho1 = problem.P0.rho, problem.P1.rho
    if np.allclose(rho0, rho1, rtol=0, atol=1e-15):
        return {"value": 0.0, "restarts": [0.0] * restarts, "agree": True}
    if K == 1:
        red = _Reduced(space, rho0, rho1, 1)
        v = red.value_grad(np.zeros(0))[0]
        return {"value": v, "restarts": [v] * restarts, "agree": True}
    rng = np.random.default_rng(seed)
    vals = []
    for r in range(restarts):
        red = _Reduced(space, rho0, rho1, K)
        t = np.linspace(0, 1, K + 1)[1:-1, None]
        init = np.log(0.5 * ((1 - t) * rho0 + t * rho1) + 0.5) + 0.3 * rng.standard_normal((K - 1, space.size))
        u = init.ravel()
        for eps in eps_schedule:
            red.eps = eps
            res = minimize(red.value_grad, u, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 5000})
            u = res.x

            def hessp(x, p, h=1e-6):
                out = (red.value_grad(x + h * p)[1] - red.value_grad(x - h * p)[1]) / (2 * h)
                return np.where(np.isfinite(out), out, 0.0)

            with np.errstate(all="ignore"):
                res = minimize(red.value_grad, u, jac=True, hessp=hessp, method="trust-krylov",
                               options={"gtol": 1e-11, "maxiter": 500})
            if np.isfinite(res.fun) and res.fun <= red.value_grad(u)[0]:
                u = res.x
        red.eps = 0.0
        vals.append(red.value_grad(u)[0])
    best = min(vals)
    agree = (max(vals) - best) <= agree_tol * max(1.0, best)
    return {"value": best, "restarts": vals, "agree": bool(agree)}
