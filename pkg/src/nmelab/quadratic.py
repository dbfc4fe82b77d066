"""Closed-form dynamics of (penalised) gradient descent on L = 0.5 theta^T H theta.

In the eigenbasis of H every mode evolves independently:
``theta_t = (1 - alpha (lam + rho lam^2))^t theta_0``. The ``rho lam^2`` term is
the USAM effective curvature ``H + rho H^2``.

With ``rho = alpha / 2`` one step is close to a plain step with learning rate
``2 alpha``; ``step_doubling_residual`` measures the gap exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tape import Var


@dataclass
class QuadraticProblem:
    """Either ``eigenvalues`` (diagonal H, theta0 in the eigenbasis) or a PSD ``matrix``."""

    theta0: np.ndarray
    alpha: float
    rho: float = 0.0
    eigenvalues: np.ndarray | None = None
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if (self.eigenvalues is None) == (self.matrix is None):
            raise ValueError("give exactly one of eigenvalues or matrix")
        self.theta0 = np.array(self.theta0, dtype=np.float64).reshape(-1)
        if self.eigenvalues is not None:
            self.eigenvalues = np.array(self.eigenvalues, dtype=np.float64).reshape(-1)
            if np.any(self.eigenvalues < 0):
                raise ValueError("eigenvalues must be nonnegative")
            n = self.eigenvalues.size
        else:
            h = np.array(self.matrix, dtype=np.float64)
            if h.ndim != 2 or h.shape[0] != h.shape[1]:
                raise ValueError(f"matrix must be square, got shape {h.shape}")
            if np.max(np.abs(h - h.T), initial=0.0) > 1e-12:
                raise ValueError("matrix must be symmetric within 1e-12")
            if np.linalg.eigvalsh(h).min() < -1e-12 * max(1.0, np.abs(h).max()):
                raise ValueError("matrix must be positive semi-definite")
            self.matrix = h
            n = h.shape[0]
        if self.theta0.size != n:
            raise ValueError(f"theta0 has {self.theta0.size} entries, H is {n}x{n}")
        if self.alpha <= 0 or self.rho < 0:
            raise ValueError("alpha must be positive and rho nonnegative")

    @property
    def hessian(self) -> np.ndarray:
        return np.diag(self.eigenvalues) if self.matrix is None else self.matrix

    def mode_factors(self) -> np.ndarray:
        lam = self.eigenvalues if self.matrix is None else np.linalg.eigvalsh(self.matrix)
        return mode_factor(lam, self.alpha, self.rho)

    def loss_fn(self):
        """Tape closure for 0.5 theta^T H theta."""
        h = self.hessian

        def fn(theta: Var) -> Var:
            return 0.5 * (theta * (h @ theta)).sum()

        return fn


def mode_factor(lam, alpha: float, rho: float = 0.0):
    return 1.0 - alpha * (np.asarray(lam, dtype=np.float64) + rho * np.square(lam))


def evolve(problem: QuadraticProblem, steps: int, method: str = "eigen") -> np.ndarray:
    """Trajectory of shape (steps + 1, n), in the coordinates theta0 was given in.

    ``method="eigen"`` uses the per-mode closed form (diagonalising an explicit
    matrix first); ``method="matrix"`` iterates theta -= alpha (H theta + rho H H theta).
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    t = np.arange(steps + 1)[:, None]
    if method == "matrix":
        h = problem.hessian
        out = np.empty((steps + 1, problem.theta0.size))
        out[0] = problem.theta0
        for i in range(steps):
            hx = h @ out[i]
            out[i + 1] = out[i] - problem.alpha * (hx + problem.rho * (h @ hx))
        return out
    if method != "eigen":
        raise ValueError(f"unknown method {method!r}")
    if problem.matrix is None:
        return mode_factor(problem.eigenvalues, problem.alpha, problem.rho) ** t * problem.theta0
    lam, q = np.linalg.eigh(problem.matrix)
    coords = mode_factor(lam, problem.alpha, problem.rho) ** t * (q.T @ problem.theta0)
    return coords @ q.T


def trajectory_rows(traj: np.ndarray) -> list[dict]:
    return [{"step": s, "mode": m, "value": float(traj[s, m])}
            for s in range(traj.shape[0]) for m in range(traj.shape[1])]


def step_doubling_residual(lam, alpha) -> float:
    """(1 - alpha (lam + alpha lam^2 / 2))^2 - (1 - 2 alpha lam).

    Evaluated in exact rational arithmetic on the binary values of the inputs,
    then rounded once, because the two terms nearly cancel for small alpha lam.
    """
    lam, alpha = Fraction(float(lam)), Fraction(float(alpha))
    if lam <= 0 or alpha <= 0:
        raise ValueError("lambda and alpha must be positive")
    one_step = 1 - alpha * (lam + alpha * lam * lam / 2)
    return float(one_step * one_step - (1 - 2 * alpha * lam))


def step_doubling_closed_form(lam, alpha) -> float:
    """(alpha lam)^3 + (alpha lam)^4 / 4."""
    a = Fraction(float(alpha)) * Fraction(float(lam))
    return float(a ** 3 + a ** 4 / 4)
