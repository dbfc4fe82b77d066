import numpy as np
import pytest

from nmelab.quadratic import (
    QuadraticProblem,
    evolve,
    mode_factor,
    step_doubling_closed_form,
    step_doubling_residual,
    trajectory_rows,
)
from nmelab.regularize import Objective, grad_penalty_step, usam_step


def test_plain_gd_halves_each_step():
    prob = QuadraticProblem([1.0], 0.5, eigenvalues=[1.0])
    assert evolve(prob, 2)[2, 0] == 0.25


def test_usam_mode_factor_hand_value():
    # 1 - 0.1 * (2 + 0.05 * 4)
    assert abs(mode_factor(2.0, 0.1, 0.05) - 0.78) < 1e-15


def test_zero_steps_returns_theta0():
    prob = QuadraticProblem([1.0, -2.0], 0.1, eigenvalues=[1.0, 2.0])
    traj = evolve(prob, 0)
    assert traj.shape == (1, 2) and np.array_equal(traj[0], prob.theta0)


def test_eigen_and_matrix_paths_agree(rng):
    a = rng.standard_normal((6, 6))
    h = a @ a.T / 6
    prob = QuadraticProblem(rng.standard_normal(6), 0.05, 0.2, matrix=h)
    e, m = evolve(prob, 100, "eigen"), evolve(prob, 100, "matrix")
    assert np.abs(e - m).max() <= 1e-10 * np.abs(m).max()


def test_closed_form_matches_usam_iterates():
    prob = QuadraticProblem([1.0, 0.5], 0.1, 0.3, eigenvalues=[0.5, 2.0])
    o = Objective(prob.loss_fn(), prob.theta0)
    for _ in range(10):
        usam_step(o, prob.alpha, prob.rho)
    assert np.allclose(o.params, evolve(prob, 10)[-1], rtol=1e-13, atol=0)


def test_p2_penalty_with_half_rho_matches_closed_form():
    prob = QuadraticProblem([1.0, 0.5], 0.1, 0.3, eigenvalues=[0.5, 2.0])
    o = Objective(prob.loss_fn(), prob.theta0)
    for _ in range(10):
        grad_penalty_step(o, prob.alpha, prob.rho / 2, 2)
    assert np.allclose(o.params, evolve(prob, 10)[-1], rtol=1e-13, atol=0)


@pytest.mark.parametrize("alpha_lam, expected", [(0.01, 1.0025e-6), (0.1, 1.025e-3), (1.0, 1.25)])
def test_step_doubling_residual_literals(alpha_lam, expected):
    assert abs(step_doubling_residual(alpha_lam, 1.0) - expected) <= 1e-12 * expected
    assert abs(step_doubling_closed_form(alpha_lam, 1.0) - expected) <= 1e-12 * expected


def test_residual_is_exact_where_float_subtraction_cancels():
    r = step_doubling_residual(1e-6, 1.0)
    expected = 1e-18 + 1e-24 / 4
    assert abs(r - expected) <= 1e-9 * expected


def test_trajectory_rows_layout():
    prob = QuadraticProblem([1.0, 2.0], 0.1, eigenvalues=[1.0, 1.0])
    rows = trajectory_rows(evolve(prob, 1))
    assert [(r["step"], r["mode"]) for r in rows] == [(0, 0), (0, 1), (1, 0), (1, 1)]


@pytest.mark.parametrize("kwargs, match", [
    ({"eigenvalues": [1.0], "matrix": [[1.0]]}, "exactly one"),
    ({}, "exactly one"),
    ({"eigenvalues": [-1.0]}, "nonnegative"),
    ({"matrix": [[1.0, 0.5], [0.0, 1.0]]}, "symmetric"),
    ({"matrix": [[1.0, 0.0], [0.0, -1.0]]}, "semi-definite"),
    ({"eigenvalues": [1.0, 2.0, 3.0]}, "entries"),
])
def test_validation(kwargs, match):
    with pytest.raises(ValueError, match=match):
        QuadraticProblem([1.0, 1.0], 0.1, **kwargs)


def test_invalid_alpha_and_residual_inputs():
    with pytest.raises(ValueError):
        QuadraticProblem([1.0], 0.0, eigenvalues=[1.0])
    with pytest.raises(ValueError):
        step_doubling_residual(0.0, 1.0)
    with pytest.raises(ValueError):
        evolve(QuadraticProblem([1.0], 0.1, eigenvalues=[1.0]), 1, "euler")
