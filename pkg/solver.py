import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

TERMINATIONS = ("converged", "max_iter", "stalled", "infeasible_penalty")


@dataclass
class ResidualProblem:
    """Box-constrained least squares ``min |r(z)|^2`` with one optional scalar constraint.

    The constraint ``g(z) <= 0`` enters as the exterior penalty residual
    ``sqrt(penalty * constraint_scale) * max(0, g(z))``.
    """

    dim: int
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    constraint: Optional[Callable[[np.ndarray], float]] = None
    constraint_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    constraint_scale: float = 1.0

    def __post_init__(self):
        self.lower = np.full(self.dim, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(self.dim, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if self.lower.shape != (self.dim,) or self.upper.shape != (self.dim,):
            raise ValueError(f"Bounds must have length {self.dim}")

    def project(self, z) -> np.ndarray:
        return np.clip(np.asarray(z, dtype=float), self.lower, self.upper)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 200
    gtol: float = 1e-8
    xtol: float = 1e-10
    damping_initial: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    damping_max: float = 1e12
    fd_step: float = 1e-6
    penalty_initial: float = 1.0
    penalty_factor: float = 10.0
    penalty_max: float = 1e8
    feasibility_tol: float = 1e-6
    output_box_weight: float = 1e6

    def __post_init__(self):
        for name in ("gtol", "xtol", "damping_initial", "fd_step", "penalty_initial", "feasibility_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"Solver setting {name} must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.damping_up <= 1 or self.damping_down <= 1 or self.penalty_factor <= 1:
            raise ValueError("Damping and penalty factors must exceed 1")


@dataclass(frozen=True)
class SolverReport:
    iterations: int
    gradient_norm: float
    termination: str
    penalty_rounds: int = 0
    constraint_slack: float = 0.0
    objective: float = 0.0

    @property
    def converged(self) -> bool:
        return self.termination == "converged"


def jacobian_fd(problem: ResidualProblem, z, rel_step: float = 1e-6) -> np.ndarray:
    """Forward-difference Jacobian; steps backwards at an active upper bound."""
    z = np.asarray(z, dtype=float)
    r0 = np.asarray(problem.residual(z), dtype=float)
    J = np.empty((r0.size, z.size))
    for i in range(z.size):
        h = rel_step * max(1.0, abs(z[i]))
        if z[i] + h > problem.upper[i]:
            h = -h
        zp = z.copy()
        zp[i] += h
        J[:, i] = (np.asarray(problem.residual(zp), dtype=float) - r0) / h
    return J


def _constraint_grad_fd(problem: ResidualProblem, z: np.ndarray, rel_step: float) -> np.ndarray:
    g0 = problem.constraint(z)
    grad = np.empty(z.size)
    for i in range(z.size):
        h = rel_step * max(1.0, abs(z[i]))
        if z[i] + h > problem.upper[i]:
            h = -h
        zp = z.copy()
        zp[i] += h
        grad[i] = (problem.constraint(zp) - g0) / h
    return grad


def _residual(problem: ResidualProblem, z: np.ndarray, penalty: float) -> np.ndarray:
    r = np.asarray(problem.residual(z), dtype=float)
    if penalty > 0.0:
        g = float(problem.constraint(z))
        r = np.append(r, np.sqrt(penalty * problem.constraint_scale) * max(0.0, g))
    if not np.all(np.isfinite(r)):
        raise FloatingPointError(f"Non-finite residual at z={z}")
    return r


def _jacobian(problem: ResidualProblem, z: np.ndarray, penalty: float, cfg: SolverConfig) -> np.ndarray:
    J = problem.jacobian(z) if problem.jacobian is not None else jacobian_fd(problem, z, cfg.fd_step)
    J = np.asarray(J, dtype=float)
    if penalty > 0.0:
        row = np.zeros(z.size)
        if problem.constraint(z) > 0.0:
            grad = (problem.constraint_grad(z) if problem.constraint_grad is not None
                    else _constraint_grad_fd(problem, z, cfg.fd_step))
            row = np.sqrt(penalty * problem.constraint_scale) * np.asarray(grad, dtype=float)
        J = np.vstack([J, row])
    return J


def _levenberg_marquardt(problem: ResidualProblem, z: np.ndarray, penalty: float,
                         cfg: SolverConfig) -> Tuple[np.ndarray, int, float, str]:
    lam = cfg.damping_initial
    r = _residual(problem, z, penalty)
    f = float(r @ r)
    J = _jacobian(problem, z, penalty, cfg)
    gnorm = np.inf
    for it in range(1, cfg.max_iterations + 1):
        g = J.T @ r
        gnorm = float(np.max(np.abs(z - problem.project(z - g)))) if z.size else 0.0
        if gnorm <= cfg.gtol:
            return z, it - 1, gnorm, "converged"

        # variables pinned at a bound with the gradient pushing outwards stay fixed
        free = ~(((z <= problem.lower) & (g > 0)) | ((z >= problem.upper) & (g < 0)))
        Jf = J[:, free]
        H = Jf.T @ Jf
        scale = np.maximum(np.diag(H), 1e-12)
        rhs = -(Jf.T @ r)
        while True:
            try:
                step_free = scipy.linalg.solve(H + lam * np.diag(scale), rhs, assume_a="pos")
            except (np.linalg.LinAlgError, ValueError):
                step_free = None
            if step_free is not None:
                trial = z.copy()
                trial[free] += step_free
                trial = problem.project(trial)
                dz = trial - z
                if np.linalg.norm(dz) <= cfg.xtol * (np.linalg.norm(z) + cfg.xtol):
                    return z, it, gnorm, "converged"
                r_trial = _residual(problem, trial, penalty)
                f_trial = float(r_trial @ r_trial)
                if f_trial < f:
                    z, r, f = trial, r_trial, f_trial
                    J = _jacobian(problem, z, penalty, cfg)
                    lam = max(lam / cfg.damping_down, 1e-15)
                    break
            lam *= cfg.damping_up
            if lam > cfg.damping_max:
                logger.debug(f"LM stalled at iteration {it}, objective {f:.6g}")
                return z, it, gnorm, "stalled"
    return z, cfg.max_iterations, gnorm, "max_iter"


def minimize(problem: ResidualProblem, z0, cfg: Optional[SolverConfig] = None) -> Tuple[np.ndarray, SolverReport]:
    """Levenberg-Marquardt with Marquardt scaling, box projection and a penalty outer loop.

    Raises:
        ValueError: If the start point is not finite.
        FloatingPointError: If the residual becomes non-finite.
    """
    cfg = cfg or SolverConfig()
    z = problem.project(np.asarray(z0, dtype=float).reshape(problem.dim))
    if not np.all(np.isfinite(z)):
        raise ValueError(f"Start point is not finite: {z}")

    penalty = cfg.penalty_initial if problem.constraint is not None else 0.0
    iterations = 0
    rounds = 0
    slack = 0.0
    while True:
        z, its, gnorm, termination = _levenberg_marquardt(problem, z, penalty, cfg)
        iterations += its
        if problem.constraint is None:
            break
        rounds += 1
        slack = max(0.0, float(problem.constraint(z)))
        if slack <= cfg.feasibility_tol:
            break
        if penalty >= cfg.penalty_max:
            termination = "infeasible_penalty"
            logger.warning(f"Constraint still violated by {slack:.3g} at maximum penalty {penalty:g}")
            break
        penalty = min(penalty * cfg.penalty_factor, cfg.penalty_max)
        logger.debug(f"Penalty raised to {penalty:g}, slack {slack:.3g}")

    r = _residual(problem, z, penalty)
    report = SolverReport(iterations=iterations, gradient_norm=gnorm, termination=termination,
                          penalty_rounds=rounds, constraint_slack=slack, objective=float(r @ r))
    logger.debug(f"minimize: {termination} after {iterations} iterations, objective {report.objective:.6g}")
    return z, report
