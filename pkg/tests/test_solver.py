import json
import warnings

import numpy as np
import pytest

from nlbbpp.configspace import (DensityMeasure, SizingError, embed, point_mass, poisson_density, product,
                                random_density, shift, uniform_density)
from nlbbpp.dynamics import ce_residual, ou_evolve
from nlbbpp.measures import entropy
from nlbbpp.mobility import action, lagrangian
from nlbbpp.solver import (NonConvergenceError, SolverConfig, TransportProblem, TruncationWarning, brute_force_w0,
                           geodesic, refinement_table, solve_w0, thinning_space, w0_squared,
                           w0_upper_bound_thinning)

from helpers import random_pair, space


def solve(P, Q, K=16, **kw):
    return solve_w0(TransportProblem(P, Q, SolverConfig(K=K, **kw)))


@pytest.fixture(scope="module")
def pair22():
    P, Q = random_pair(2, 2, seed=3)
    return P, Q, solve(P, Q)


def test_equal_marginals_give_zero(rng):
    P, _ = random_pair(2, 2, seed=1)
    sol = solve(P, P)
    assert sol.action_value == 0.0 and sol.converged
    assert np.all(sol.path.densities == P.rho)
    assert brute_force_w0(TransportProblem(P, P, SolverConfig(K=4)))["value"] == 0.0


def test_two_state_matches_oracle():
    sp = space(1, 1)
    P0, P1 = point_mass(sp, (0,)), point_mass(sp, (1,))
    prob = TransportProblem(P0, P1, SolverConfig(K=16))
    ref = brute_force_w0(prob)
    assert ref["agree"]
    assert solve_w0(prob).action_value == pytest.approx(ref["value"], rel=1e-4)


def test_solution_is_feasible_and_exact(pair22):
    P, Q, sol = pair22
    assert sol.converged
    assert sol.diagnostics["ce_residual"] <= 1e-9
    assert ce_residual(sol.path) <= 1e-9
    np.testing.assert_allclose(sol.path.densities[0], P.rho, atol=1e-10)
    np.testing.assert_allclose(sol.path.densities[-1], Q.rho, atol=1e-10)
    assert sol.action_value == action(sol.path)
    assert np.all(sol.path.densities >= 0)
    d = json.loads(sol.diagnostics_json())
    assert d["converged"] and d["action_value"] == sol.action_value


def test_oracle_sandwich(pair22):
    P, Q, sol = pair22
    ref = brute_force_w0(TransportProblem(P, Q, SolverConfig(K=16)))
    assert ref["agree"]
    assert ref["value"] <= sol.action_value * (1 + 1e-8)
    assert sol.action_value == pytest.approx(ref["value"], rel=1e-6)
    big = thinning_space(P, Q)
    P2, Q2 = embed(P, big), embed(Q, big)
    ub = w0_upper_bound_thinning(P2, Q2, K=16)
    assert solve(P2, Q2).action_value <= ub + 1e-6


def test_symmetry(pair22):
    P, Q, sol = pair22
    back = solve(Q, P)
    assert back.action_value == pytest.approx(sol.action_value, rel=1e-6)
    small = TransportProblem(*random_pair(1, 2, seed=5), SolverConfig(K=8))
    swap = TransportProblem(small.P1, small.P0, small.config)
    assert brute_force_w0(swap)["value"] == pytest.approx(brute_force_w0(small)["value"], rel=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_triangle_inequality(seed):
    g = np.random.default_rng(seed)
    sp = space(1, 2)
    P, Q, R = (random_density(sp, g) for _ in range(3))
    d = lambda a, b: np.sqrt(w0_squared(a, b, K=16))
    assert d(P, R) <= d(P, Q) + d(Q, R) + 1e-4


def test_geodesic_constant_speed(pair22):
    P, Q, sol = pair22
    W = sol.action_value
    K = sol.path.K
    L = np.array([lagrangian(DensityMeasure(P.space, 0.5 * (sol.path.densities[k] + sol.path.densities[k + 1])),
                             sol.path.velocity(k)) for k in range(K)])
    # constant speed: every interval carries the same Lagrangian up to discretization
    assert np.max(np.abs(L - W)) <= 2e-2 * W
    mid = sol.path.density(K // 2)
    a, b = w0_squared(P, mid, K=K), w0_squared(mid, Q, K=K)
    disc = abs(w0_squared(P, Q, K=2 * K) - W)
    assert a == pytest.approx(W / 4, rel=1e-2)
    assert abs(a + b - W / 2) <= 2 * disc


def test_geodesic_endpoints_and_convexity(pair22):
    P, Q, sol = pair22
    path = geodesic(TransportProblem(P, Q, SolverConfig(K=16)))
    np.testing.assert_allclose(path.densities[0], P.rho, atol=1e-10)
    np.testing.assert_allclose(path.densities[-1], Q.rho, atol=1e-10)
    right = 0.5 * entropy(P) + 0.5 * entropy(Q) - sol.action_value / 8
    assert entropy(path.density(8)) <= right + 2e-3


def test_thinning_bound_on_poisson_pair():
    sp = space(1, 8)
    # the thinning path can reach twice the ceiling, so compare on that space
    P0, P1 = poisson_density(sp, 1.0), poisson_density(sp, 2.0)
    big = thinning_space(P0, P1)
    P0, P1 = embed(P0, big), embed(P1, big)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w = w0_squared(P0, P1, K=16)
    bounds = [w0_upper_bound_thinning(P0, P1, K) for K in (16, 32, 64, 128)]
    assert min(bounds) >= w
    # the sampled action approaches its limit from below at second order
    steps = np.diff(bounds)
    assert np.all(np.abs(steps[1:]) <= 0.4 * np.abs(steps[:-1]))
    assert w0_upper_bound_thinning(P0, P0, 16) == 0.0


def test_tensorization():
    # factors supported on two points inside a four-point box, so no box binds
    A = space(1, 4)
    g = np.random.default_rng(7)
    P, Q = (embed(random_density(space(1, 2), g), A) for _ in range(2))
    P2, Q2 = (shift(embed(random_density(space(1, 2), g), A), (1,)) for _ in range(2))
    joint = w0_squared(product(P, P2, n_max=4), product(Q, Q2, n_max=4), K=16)
    parts = w0_squared(P, Q, K=16) + w0_squared(P2, Q2, K=16)
    assert abs(joint - parts) <= 1e-2 * parts
    assert abs(joint - parts) <= 1e-6 * parts


@pytest.mark.parametrize("t", [0.1, 0.5, 1.0])
def test_contraction(pair22, t):
    P, Q, sol = pair22
    after = w0_squared(ou_evolve(P, t), ou_evolve(Q, t), K=16)
    assert np.sqrt(after) <= np.exp(-t) * np.sqrt(sol.action_value) * (1 + 1e-2)


def test_refinement_table(pair22):
    P, Q, _ = pair22
    tab = refinement_table(P, Q, Ks=(8, 16, 32))
    v = tab["values"]
    assert len(tab["richardson"]) == 2
    # the grid error shrinks by about four per halving
    assert 3.0 < (v[0] - v[1]) / (v[1] - v[2]) < 5.0
    assert abs(tab["extrapolated"] - v[2]) < abs(v[2] - v[1])


def test_primal_dual_agrees_with_newton():
    P, Q = random_pair(1, 1, seed=2)
    a = solve(P, Q, K=8).action_value
    b = solve(P, Q, K=8, method="primal-dual").action_value
    assert b == pytest.approx(a, rel=1e-6)


def test_sizing_errors():
    P, Q = random_pair(2, 2)
    with pytest.raises(SizingError):
        solve(P, Q, K=16, variable_cap=10)
    big = space(3, 8)
    with pytest.raises(SizingError):
        brute_force_w0(TransportProblem(uniform_density(big), poisson_density(big, 1.2), SolverConfig(K=64)))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(K=0)
    with pytest.raises(ValueError):
        SolverConfig(ce_tol=0.0)
    with pytest.raises(ValueError):
        solve(*random_pair(1, 1), method="simplex")


def test_ceiling_mass_warns():
    sp = space(1, 1)
    with pytest.warns(TruncationWarning):
        solve_w0(TransportProblem(point_mass(sp, (0,)), point_mass(sp, (1,)), SolverConfig(K=4)))


def test_strict_mode_raises_on_non_convergence():
    P, Q = random_pair(1, 2, seed=4)
    with pytest.raises(NonConvergenceError) as err:
        solve(P, Q, K=8, max_iters=1, restarts=0, strict=True)
    assert err.value.solution is not None
