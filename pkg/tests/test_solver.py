import numpy as np
import pytest
from numpy.testing import assert_allclose

from solver import ResidualProblem, SolverConfig, jacobian_fd, minimize


def test_identity_residual():
    z, report = minimize(ResidualProblem(dim=1, residual=lambda z: z), [5.0])
    assert_allclose(z, [0.0], atol=1e-8)
    assert report.converged


def test_rosenbrock_residual():
    problem = ResidualProblem(dim=2, residual=lambda z: np.array([z[0] - 1.0, 10.0 * (z[1] - z[0] ** 2)]))
    z, report = minimize(problem, [-1.2, 1.0])
    assert_allclose(z, [1.0, 1.0], atol=1e-6)
    assert report.converged


def test_linear_residual_matches_normal_equations():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(8, 3))
    b = rng.normal(size=8)
    cfg = SolverConfig(gtol=1e-13, xtol=1e-15)
    z, _ = minimize(ResidualProblem(dim=3, residual=lambda z: A @ z - b, jacobian=lambda z: A), np.zeros(3), cfg)
    assert_allclose(z, np.linalg.solve(A.T @ A, A.T @ b), atol=1e-10)


def test_upper_bound_is_active():
    problem = ResidualProblem(dim=1, residual=lambda z: z - 2.0, upper=np.array([1.0]))
    z, report = minimize(problem, [0.0])
    assert_allclose(z, [1.0])
    assert report.converged


def test_penalty_enforces_constraint():
    problem = ResidualProblem(dim=2, residual=lambda z: z - 2.0,
                              constraint=lambda z: z[0] + z[1] - 2.0,
                              constraint_grad=lambda z: np.ones(2))
    z, report = minimize(problem, [0.0, 0.0])
    assert report.constraint_slack <= 1e-6
    assert report.penalty_rounds > 1
    assert_allclose(z, [1.0, 1.0], atol=1e-5)


def test_unsatisfiable_constraint_is_reported():
    problem = ResidualProblem(dim=1, residual=lambda z: z, constraint=lambda z: 1.0)
    _, report = minimize(problem, [0.3])
    assert report.termination == "infeasible_penalty"
    assert not report.converged


def test_non_finite_residual_raises():
    problem = ResidualProblem(dim=1, residual=lambda z: np.array([np.nan]))
    with pytest.raises(FloatingPointError):
        minimize(problem, [1.0])


def test_non_finite_start_is_rejected():
    with pytest.raises(ValueError, match="not finite"):
        minimize(ResidualProblem(dim=1, residual=lambda z: z), [np.inf])


def test_jacobian_fd_linear():
    A = np.array([[1.0, 2.0], [-0.5, 3.0], [0.0, 1.5]])
    J = jacobian_fd(ResidualProblem(dim=2, residual=lambda z: A @ z), np.array([0.3, -0.2]))
    assert_allclose(J, A, atol=1e-8)


def test_jacobian_fd_quadratic():
    J = jacobian_fd(ResidualProblem(dim=1, residual=lambda z: z ** 2), np.array([3.0]))
    assert J[0, 0] == pytest.approx(6.0, abs=1e-4)


def test_jacobian_fd_steps_inside_upper_bound():
    problem = ResidualProblem(dim=1, residual=lambda z: np.sqrt(1.0 - z), upper=np.array([0.5]))
    J = jacobian_fd(problem, np.array([0.5]))
    assert J[0, 0] == pytest.approx(-0.5 / np.sqrt(0.5), rel=1e-4)


def test_invalid_solver_settings():
    with pytest.raises(ValueError):
        SolverConfig(gtol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(damping_up=1.0)
