import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import solve_continuous_are

from roaforge.dynamics import Label, make_system
from roaforge.lqr import (LinearModel, StabilizabilityError, care_residual, char_poly, is_hurwitz,
                          linearize, lqr_for, lqr_roa_estimate, routh_hurwitz, solve_care,
                          solve_lyapunov)
from roaforge.lyapnet import ResidualDynamics
from roaforge.roa import grid_mesh, level_search_values

from helpers import linear_controller_net

DOUBLE_INTEGRATOR = LinearModel(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]]))


def test_pendulum_linearisation():
    lin = linearize(make_system("pendulum"))
    assert np.allclose(lin.A, [[0, 1], [24.525, 0]], atol=1e-6)
    assert np.allclose(lin.B, [[0], [7.8125]], atol=1e-6)


def test_strict_feedback_linearisation():
    lin = linearize(make_system("strict_feedback"))
    assert np.allclose(lin.A, [[0, 0.9, 0], [0, 0, 0.8], [0, 0, 0]], atol=1e-8)
    assert np.allclose(lin.B, [[0], [0], [0.8]], atol=1e-8)


def test_double_integrator_closed_form():
    sol = solve_care(DOUBLE_INTEGRATOR)
    r3 = math.sqrt(3)
    assert np.allclose(sol.P, [[r3, 1], [1, r3]], rtol=0, atol=1e-8)
    assert np.allclose(sol.K, [[1, r3]], rtol=0, atol=1e-8)
    assert sol.riccati_residual <= 1e-8


@pytest.mark.parametrize("name", ["pendulum", "strict_feedback", "cartpole"])
def test_plant_solutions(name):
    spec = make_system(name)
    lin = linearize(spec)
    sol = solve_care(lin)
    n, m = lin.B.shape
    assert sol.riccati_residual <= 1e-8
    assert care_residual(lin.A, lin.B, np.eye(n), np.eye(m), sol.P) == sol.riccati_residual
    assert np.allclose(sol.P, sol.P.T)
    assert np.all(np.linalg.eigvalsh(sol.P) > 0)
    assert np.all(np.linalg.eigvals(lin.A - lin.B @ sol.K).real < 0)
    assert is_hurwitz(lin.A - lin.B @ sol.K)
    ref = solve_continuous_are(lin.A, lin.B, np.eye(n), np.eye(m))
    assert np.allclose(sol.P, ref, rtol=1e-8, atol=1e-8)


def test_pendulum_gain_value():
    K = lqr_for(make_system("pendulum")).K
    assert np.allclose(K, [[6.4338, 1.6270]], atol=5e-4)


@given(st.floats(0.01, 100.0))
def test_common_scaling_keeps_gain(s):
    base = solve_care(DOUBLE_INTEGRATOR)
    scaled = solve_care(DOUBLE_INTEGRATOR, s * np.eye(2), s * np.eye(1))
    assert np.allclose(scaled.P, s * base.P, rtol=1e-9)
    assert np.allclose(scaled.K, base.K, rtol=1e-9)


@pytest.mark.parametrize("name", ["pendulum", "strict_feedback", "cartpole"])
def test_closed_loop_decrease_identity(name):
    lin = linearize(make_system(name))
    sol = solve_care(lin)
    Acl = lin.A - lin.B @ sol.K
    # d/dt x^T P x along x' = Acl x is -x^T (Q + K^T R K) x
    lhs = Acl.T @ sol.P + sol.P @ Acl
    rhs = -(np.eye(len(lin.A)) + sol.K.T @ sol.K)
    assert np.allclose(lhs, rhs, atol=1e-8)


def test_non_stabilisable_pair():
    with pytest.raises(StabilizabilityError):
        solve_care(LinearModel(np.eye(2), np.array([[1.0], [0.0]])))


def test_lyapunov_solver():
    A = np.array([[-1.0, 2.0], [0.0, -3.0]])
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    X = solve_lyapunov(A, Q)
    assert np.allclose(A.T @ X + X @ A + Q, 0, atol=1e-12)


def test_char_poly_examples():
    assert np.allclose(char_poly(np.diag([1.0, 2.0, 3.0])), [1, -6, 11, -6])
    A = np.random.default_rng(0).standard_normal((4, 4))
    assert np.allclose(char_poly(A), np.poly(A), atol=1e-10)


@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_routh_agrees_with_eigenvalues(seed, n):
    A = np.random.default_rng(seed).standard_normal((n, n))
    eig = np.linalg.eigvals(A).real
    if np.min(np.abs(eig)) < 1e-6:
        return
    assert is_hurwitz(A) == bool(np.all(eig < 0))


def test_routh_examples():
    assert routh_hurwitz([1, 3, 3, 1])           # (s+1)^3
    assert not routh_hurwitz([1, 0, 1])          # s^2 + 1
    assert not routh_hurwitz([1, -1, 2])
    assert routh_hurwitz([-1, -2, -1])


# ---------------------------------------------------------------------------
# baseline estimate

def _labelled_mesh(stable=True):
    spec = make_system("pendulum")
    mesh = grid_mesh(spec.state_lo, spec.state_hi, (41, 41))
    mesh.labels = np.full(len(mesh), Label.STABLE if stable else Label.UNSTABLE, dtype=np.int8)
    return spec, mesh


def test_baseline_sweep_uses_quadratic_value():
    spec, mesh = _labelled_mesh()
    sol = lqr_for(spec)
    sol.P = np.eye(2)
    ctrl = linear_controller_net(sol.K)
    res = ResidualDynamics.create(spec, (4,), seed=0)
    report, m2 = lqr_roa_estimate(sol, mesh, ctrl, res, spec, 0.0)
    assert np.allclose(m2.v_values, np.sum(mesh.points ** 2, axis=1))
    blocking = (m2.vdot_values > 0) | m2.boundary_mask
    assert report.c == float(np.nextafter(np.min(m2.v_values[blocking]), -np.inf))


def test_baseline_boundary_limited_when_condition_holds():
    # P = I, every point stable and decreasing: c is the smallest boundary value pi^2
    _, mesh = _labelled_mesh()
    mesh.v_values = np.sum(mesh.points ** 2, axis=1)
    mesh.vdot_values = -np.ones(len(mesh))
    c, _ = level_search_values(mesh, 0.0)
    assert c == float(np.nextafter(math.pi ** 2, -np.inf))


def test_baseline_empty_stable_set():
    spec, mesh = _labelled_mesh(stable=False)
    sol = lqr_for(spec)
    report, _ = lqr_roa_estimate(sol, mesh, linear_controller_net(sol.K),
                                 ResidualDynamics.create(spec, (4,), seed=0), spec, 0.1)
    assert report.ratio_estimated == 0.0 and report.ratio_true == 0.0


def test_baseline_gradient_is_analytic():
    sol = lqr_for(make_system("cartpole"))
    x = np.random.default_rng(0).standard_normal((5, 4))
    h = 1e-6
    fd = np.stack([(sol.value(x + h * e) - sol.value(x - h * e)) / (2 * h) for e in np.eye(4)], axis=1)
    assert np.allclose(sol.grad(x), fd, rtol=1e-6, atol=1e-6)
