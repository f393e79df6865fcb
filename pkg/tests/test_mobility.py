import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nlbbpp.configspace import ConfigSpace, DensityMeasure, LatticeWindow, product, random_density, uniform_density
from nlbbpp.dynamics import poisson_curve
from nlbbpp.mobility import (VelocityDensity, action, lagrangian, log_mean, log_mean_derivatives,
                             mobility_alpha, product_velocity, restrict_velocity, specific_action,
                             zero_velocity)

from helpers import space

pos = st.floats(1e-6, 1e6)


def test_log_mean_examples():
    assert log_mean(4.0, 1.0) == pytest.approx(2.164042561333445, rel=1e-15)
    assert log_mean(3.0, 3.0) == 3.0
    assert log_mean(0.0, 5.0) == 0.0
    with pytest.raises(ValueError):
        log_mean(-1.0, 1.0)


@given(x=pos, y=pos)
def test_log_mean_bounds_and_symmetry(x, y):
    L = log_mean(x, y)
    assert L == pytest.approx(log_mean(y, x), rel=1e-14)
    assert math.sqrt(x * y) * (1 - 1e-14) <= L <= 0.5 * (x + y) * (1 + 1e-14)
    if abs(math.log(y / x)) > 1e-2:
        assert L == pytest.approx((y - x) / (math.log(y) - math.log(x)), rel=1e-12)


def test_log_mean_near_diagonal_is_smooth():
    x = 2.0
    for d in (1e-4, 1e-7, 1e-10):
        y = x * (1 + d)
        # second-order expansion of the log mean around the diagonal
        expect = x * (1 + d / 2 - d * d / 12)
        assert log_mean(x, y) == pytest.approx(expect, rel=1e-12)


def test_log_mean_derivatives_by_differences():
    x, y = np.array([0.7, 2.0, 1.0]), np.array([1.9, 2.0 + 1e-9, 5.0])
    th, tx, ty, hxx, hxy, hyy = log_mean_derivatives(x, y)
    e = 1e-6
    np.testing.assert_allclose(th, log_mean(x, y), rtol=1e-14)
    np.testing.assert_allclose(tx, (log_mean(x + e, y) - log_mean(x - e, y)) / (2 * e), rtol=1e-7)
    np.testing.assert_allclose(ty, (log_mean(x, y + e) - log_mean(x, y - e)) / (2 * e), rtol=1e-7)
    e = 1e-4
    fd_xx = (log_mean(x + e, y) - 2 * log_mean(x, y) + log_mean(x - e, y)) / e**2
    fd_xy = (log_mean(x + e, y + e) - log_mean(x + e, y - e) - log_mean(x - e, y + e)
             + log_mean(x - e, y - e)) / (4 * e * e)
    np.testing.assert_allclose(hxx, fd_xx, rtol=1e-4, atol=1e-7)
    np.testing.assert_allclose(hxy, fd_xy, rtol=1e-4, atol=1e-7)
    np.testing.assert_allclose(hyy * y**2, hxx * x**2, rtol=1e-12)


def test_alpha_conventions():
    assert mobility_alpha(1.0, 1.0, 0.0) == 0.0
    assert mobility_alpha(0.0, 1.0, 0.0) == 0.0
    assert mobility_alpha(0.0, 1.0, 0.5) == math.inf
    assert mobility_alpha(4.0, 1.0, 2.0) == pytest.approx(4.0 / 2.164042561333445, rel=1e-15)


@given(x=pos, y=pos, w=st.floats(-1e3, 1e3), lam=st.floats(1e-3, 1e3))
def test_alpha_homogeneous(x, y, w, lam):
    a = mobility_alpha(x, y, w)
    assert mobility_alpha(lam * x, lam * y, lam * w) == pytest.approx(lam * a, rel=1e-12, abs=1e-300)


@given(p=st.tuples(pos, pos, st.floats(-10, 10)), q=st.tuples(pos, pos, st.floats(-10, 10)),
       s=st.floats(0, 1))
def test_alpha_jointly_convex(p, q, s):
    mid = [(1 - s) * a + s * b for a, b in zip(p, q)]
    lhs = mobility_alpha(*mid)
    rhs = (1 - s) * mobility_alpha(*p) + s * mobility_alpha(*q)
    assert lhs <= rhs * (1 + 1e-10) + 1e-12


def test_lagrangian_zero_velocity(rng):
    P = random_density(space(2, 3), rng)
    assert lagrangian(P, zero_velocity(P.space)) == 0.0


def test_lagrangian_is_normalization_invariant(rng):
    # doubling rho and w leaves the flux-weighted sum scaled by two
    sp = space(2, 2)
    P = random_density(sp, rng)
    V = VelocityDensity(sp, rng.normal(size=(sp.size, sp.m)))
    L = lagrangian(P, V)
    assert lagrangian(DensityMeasure(sp, 2 * P.rho), VelocityDensity(sp, 2 * V.w)) == pytest.approx(2 * L, rel=1e-13)


def test_lagrangian_by_explicit_sum(rng):
    sp = space(2, 2)
    P = random_density(sp, rng)
    V = VelocityDensity(sp, rng.normal(size=(sp.size, sp.m)))
    pi, v = sp.reference.weights, sp.site_volumes
    total = 0.0
    for n in range(sp.size):
        for j in range(sp.m):
            k = sp.up[n, j]
            if k < 0:
                continue
            a, b = P.rho[n], P.rho[k]
            theta = a if a == b else (b - a) / (math.log(b) - math.log(a))
            total += V.w[n, j] ** 2 / theta * pi[n] * v[j]
    assert lagrangian(P, V) == pytest.approx(total, rel=1e-13)


def test_action_of_poisson_curve():
    # along the linear Poisson path the Lagrangian is (c1-c0)^2 log c / (c - 1)
    sp = space(1, 20)
    path = poisson_curve(sp, 1.0, 2.0, 32)
    direct = 0.0
    for k in range(32):
        mid = DensityMeasure(sp, 0.5 * (path.densities[k] + path.densities[k + 1]))
        direct += lagrangian(mid, path.velocity(k)) / 32
    assert action(path) == pytest.approx(direct, rel=1e-13)
    # int_1^2 log c / (c - 1) dc = pi^2 / 12
    assert action(path) == pytest.approx(math.pi**2 / 12, rel=1e-4)


def test_action_rejects_bad_grid():
    sp = space(1, 3)
    path = poisson_curve(sp, 1.0, 2.0, 4)
    bad = type(path)(sp, [0, 0.5, 0.5, 0.75, 1], path.densities, path.velocities)
    with pytest.raises(ValueError):
        action(bad)


def test_product_velocity_tensorizes(rng):
    A = space(1, 2)
    B = ConfigSpace(LatticeWindow((2,), 1.0, (1,)), 2)
    P, Q = random_density(A, rng), random_density(B, rng)
    V = VelocityDensity(A, rng.normal(size=(A.size, A.m)))
    U = VelocityDensity(B, rng.normal(size=(B.size, B.m)))
    PQ = product(P, Q)
    W = product_velocity(P, V, Q, U, PQ.space)
    assert lagrangian(PQ, W) == pytest.approx(lagrangian(P, V) + lagrangian(Q, U), rel=1e-12)
    back = restrict_velocity(W, A.window)
    # the marginal keeps the joint ceiling; states above A's ceiling carry no flux
    np.testing.assert_allclose(back.flux()[:A.size], V.flux(), atol=1e-14)
    assert np.all(back.flux()[A.size:] == 0)


def test_specific_action_of_nested_family():
    paths = [poisson_curve(space(m, 16), 1.0, 1.5, 4) for m in (1, 2)]
    vals, sup = specific_action(paths, tol=1e-7)
    assert sup == vals.max()
    # knot averages of product laws are not products, so the match is only O(dt^2)
    assert vals[1] == pytest.approx(vals[0], rel=1e-4)
    with pytest.raises(Exception):
        specific_action([paths[0], poisson_curve(space(2, 16), 1.0, 2.5, 4)])


def test_velocity_zero_off_edges():
    sp = space(2, 2)
    V = VelocityDensity(sp, np.ones((sp.size, sp.m)))
    assert np.all(V.w[~sp.edge_mask] == 0)
    with pytest.raises(ValueError):
        VelocityDensity(sp, np.full((sp.size, sp.m), np.nan))
    np.testing.assert_allclose(VelocityDensity.from_flux(sp, V.flux()).w, V.w, rtol=1e-14)
