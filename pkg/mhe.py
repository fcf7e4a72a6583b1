import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Mapping, Optional, Tuple

import numpy as np

from lyapunov import IossParams, matrix_sqrt
from model import SystemModel, linearize, output, step
from solver import ResidualProblem, SolverConfig, SolverReport, minimize

logger = logging.getLogger(__name__)

COST_VARIANTS = ("fixed", "varying")


def kappa(params: IossParams, variant: str) -> float:
    """Stage-cost factor: max{1, alpha} for the fixed scheme, alpha + 1 for the varying one."""
    if variant == "fixed":
        return max(1.0, params.alpha)
    if variant == "varying":
        return params.alpha + 1.0
    raise ValueError(f"Unknown cost variant: {variant}")


@dataclass(frozen=True, eq=False)
class ConstraintContext:
    """Data of the output-tracking constraint, all indices absolute.

    ``w_star_eps``/``y_star_eps`` cover ``[window_start, eps_mu - 1]``;
    ``tilde_y`` maps each usable ``j`` in ``[t - M_t, mu - 1]`` outside K_s to its
    reference output.
    """

    mu: int
    eps_mu: int
    window_start: int
    w_star_eps: np.ndarray
    y_star_eps: np.ndarray
    meas_eps: Mapping[int, np.ndarray]
    tilde_y: Mapping[int, np.ndarray]

    def __post_init__(self):
        n = self.eps_mu - self.window_start
        if n < 0 or self.eps_mu > self.mu:
            raise ValueError(f"Inconsistent constraint indices: window_start={self.window_start}, eps_mu={self.eps_mu}, mu={self.mu}")
        if len(self.w_star_eps) != n or len(self.y_star_eps) != n:
            raise ValueError(f"Constraint context expects {n} optimal entries, got {len(self.w_star_eps)} / {len(self.y_star_eps)}")
        for j in self.meas_eps:
            if not self.window_start <= j < self.eps_mu:
                raise ValueError(f"Measurement index {j} outside [{self.window_start}, {self.eps_mu - 1}]")


@dataclass(frozen=True, eq=False)
class Window:
    t: int
    M_t: int
    prior: np.ndarray
    inputs: np.ndarray
    ks: FrozenSet[int] = frozenset()
    meas: Mapping[int, np.ndarray] = field(default_factory=dict)
    constraint_ctx: Optional[ConstraintContext] = None
    cost_variant: str = "fixed"

    def __post_init__(self):
        if self.M_t < 1:
            raise ValueError(f"Horizon must be at least 1, got {self.M_t}")
        if self.cost_variant not in COST_VARIANTS:
            raise ValueError(f"Unknown cost variant: {self.cost_variant}")
        inputs = np.asarray(self.inputs, dtype=float)
        inputs = inputs.reshape(self.M_t, -1) if inputs.size else np.zeros((self.M_t, 0))
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "prior", np.asarray(self.prior, dtype=float).reshape(-1))
        object.__setattr__(self, "ks", frozenset(int(j) for j in self.ks))
        for j in list(self.ks) + list(self.meas):
            if not self.t0 <= j < self.t:
                raise ValueError(f"Index {j} lies outside the window [{self.t0}, {self.t - 1}]")

    @property
    def t0(self) -> int:
        return self.t - self.M_t

    def u(self, j: int) -> np.ndarray:
        return self.inputs[j - self.t0]


@dataclass(frozen=True, eq=False)
class Decision:
    x0: np.ndarray
    w_seq: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.x0, float).reshape(-1), np.asarray(self.w_seq, float).reshape(-1)])

    @classmethod
    def from_vector(cls, z: np.ndarray, n_x: int, n_w: int) -> "Decision":
        return cls(x0=z[:n_x].copy(), w_seq=z[n_x:].reshape(-1, n_w).copy())


@dataclass(frozen=True, eq=False)
class EstimateResult:
    window: Window
    x_seq: np.ndarray
    w_seq: np.ndarray
    y_seq: np.ndarray
    cost: float
    report: SolverReport
    lhs: float = 0.0
    rhs: float = 0.0
    constraint_slack: float = 0.0
    warm_start: Optional[Decision] = None
    flagged: bool = False

    @property
    def x_hat(self) -> np.ndarray:
        return self.x_seq[-1]

    @property
    def x_first(self) -> np.ndarray:
        return self.x_seq[0]

    @property
    def decision(self) -> Decision:
        return Decision(self.x_seq[0], self.w_seq)


def rollout(model: SystemModel, window: Window, d: Decision) -> Tuple[np.ndarray, np.ndarray]:
    w_seq = np.asarray(d.w_seq, dtype=float).reshape(window.M_t, model.n_w)
    xs = np.empty((window.M_t + 1, model.n_x))
    ys = np.empty((window.M_t, model.n_y))
    xs[0] = np.asarray(d.x0, dtype=float).reshape(model.n_x)
    for k in range(window.M_t):
        u = window.inputs[k]
        ys[k] = output(model, xs[k], u, w_seq[k])
        xs[k + 1] = step(model, xs[k], u, w_seq[k])
    return xs, ys


def _wq(v, A) -> float:
    v = np.asarray(v, dtype=float).reshape(-1)
    return float(v @ A @ v)


def cost(window: Window, d: Decision, params: IossParams, rolled: np.ndarray) -> float:
    """Discounted MHE objective for a decision and its rolled-out outputs.

    Raises:
        ValueError: If a transmitted index has no stored measurement.
    """
    missing = [j for j in window.ks if j not in window.meas]
    if missing:
        raise ValueError(f"No measurement stored for transmitted indices {sorted(missing)}")
    eta, t = params.eta, window.t
    k = kappa(params, window.cost_variant)
    dx = np.asarray(d.x0, float) - window.prior
    prior_term = 2.0 * eta ** window.M_t * _wq(dx, params.P2)
    w_seq = np.asarray(d.w_seq, dtype=float).reshape(window.M_t, -1)
    stage = 0.0
    for idx in range(window.M_t):
        j = window.t0 + idx
        stage += eta ** (t - j - 1) * 2.0 * _wq(w_seq[idx], params.Q)
    for j in sorted(window.ks):
        stage += eta ** (t - j - 1) * _wq(rolled[j - window.t0] - window.meas[j], params.R)
    return prior_term + k * stage


def extra_constraint_eval(window: Window, rolled: np.ndarray, params: IossParams) -> Tuple[float, float]:
    """Left and right side of the output-tracking constraint; feasible iff lhs <= rhs."""
    ctx = window.constraint_ctx
    if ctx is None:
        raise ValueError("Window carries no constraint context")
    if ctx.mu > window.t:
        raise ValueError(f"mu={ctx.mu} lies after the window end t={window.t}")
    eta, mu = params.eta, ctx.mu
    lhs = 0.0
    for j, y_ref in ctx.tilde_y.items():
        if not window.t0 <= j <= mu - 1 or j in window.ks:
            raise ValueError(f"Reference output index {j} is not in [t-M_t, mu-1] minus K_s")
        lhs += eta ** (mu - j - 1) * _wq(rolled[j - window.t0] - y_ref, params.R)
    acc = 0.0
    for idx in range(ctx.eps_mu - ctx.window_start):
        j = ctx.window_start + idx
        acc += eta ** (mu - j - 1) * 2.0 * _wq(ctx.w_star_eps[idx], params.Q)
    for j, y in ctx.meas_eps.items():
        acc += eta ** (mu - j - 1) * _wq(ctx.y_star_eps[j - ctx.window_start] - y, params.R)
    return lhs, params.alpha * acc


class _ShootingProblem:
    """Stacked weighted residuals of a window over z = [x0, w_0 .. w_{M-1}].

    Sensitivities follow the chain rule along the rollout,
    Sx_{k+1} = A_k Sx_k + B_k E_k and dy_k = C_k Sx_k + D_k E_k.
    """

    def __init__(self, model: SystemModel, window: Window, params: IossParams, cfg: SolverConfig):
        self.model, self.window, self.params, self.cfg = model, window, params, cfg
        M, n_x, n_w = window.M_t, model.n_x, model.n_w
        self.dim = n_x + M * n_w
        k = kappa(params, window.cost_variant)
        eta, t = params.eta, window.t
        self.s_prior = np.sqrt(2.0 * eta ** M) * matrix_sqrt(params.P2)
        self.s_q = matrix_sqrt(params.Q)
        self.s_r = matrix_sqrt(params.R)
        self.w_weights = np.array([np.sqrt(2.0 * k * eta ** (t - (window.t0 + i) - 1)) for i in range(M)])
        self.meas_idx = sorted(window.ks)
        self.y_weights = np.array([np.sqrt(k * eta ** (t - j - 1)) for j in self.meas_idx])
        self.box_rows = model.y_box.is_finite
        self._key = None

    def _evaluate(self, z: np.ndarray, sensitivities: bool):
        key = z.tobytes()
        if self._key == key and (self._dy is not None or not sensitivities):
            return
        model, window = self.model, self.window
        M, n_x, n_w = window.M_t, model.n_x, model.n_w
        w_seq = z[n_x:].reshape(M, n_w)
        xs = np.empty((M + 1, n_x))
        ys = np.empty((M, model.n_y))
        xs[0] = z[:n_x]
        dy = np.empty((M, model.n_y, self.dim)) if sensitivities else None
        Sx = None
        if sensitivities:
            Sx = np.zeros((n_x, self.dim))
            Sx[:, :n_x] = np.eye(n_x)
        for k in range(M):
            u = window.inputs[k]
            ys[k] = output(model, xs[k], u, w_seq[k])
            xs[k + 1] = step(model, xs[k], u, w_seq[k])
            if sensitivities:
                A, B, C, D = linearize(model, xs[k], u, w_seq[k], self.cfg.fd_step)
                cols = slice(n_x + k * n_w, n_x + (k + 1) * n_w)
                dy[k] = C @ Sx
                dy[k][:, cols] += D
                Sx = A @ Sx
                Sx[:, cols] += B
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise FloatingPointError(f"Rollout diverged in window ending at t={window.t}")
        self._key, self.xs, self.ys, self._dy = key, xs, ys, dy

    def residual(self, z: np.ndarray) -> np.ndarray:
        self._evaluate(z, sensitivities=False)
        window, n_x, n_w = self.window, self.model.n_x, self.model.n_w
        blocks = [self.s_prior @ (z[:n_x] - window.prior)]
        w_seq = z[n_x:].reshape(window.M_t, n_w)
        blocks.extend(self.w_weights[i] * (self.s_q @ w_seq[i]) for i in range(window.M_t))
        blocks.extend(self.y_weights[n] * (self.s_r @ (self.ys[j - window.t0] - window.meas[j]))
                      for n, j in enumerate(self.meas_idx))
        if self.box_rows:
            box = self.model.y_box
            excess = np.maximum(self.ys - box.upper, 0.0) + np.minimum(self.ys - box.lower, 0.0)
            blocks.append(np.sqrt(self.cfg.output_box_weight) * excess.reshape(-1))
        return np.concatenate(blocks)

    def jacobian(self, z: np.ndarray) -> np.ndarray:
        self._evaluate(z, sensitivities=True)
        window, n_x, n_w = self.window, self.model.n_x, self.model.n_w
        rows = [np.hstack([self.s_prior, np.zeros((n_x, self.dim - n_x))])]
        for i in range(window.M_t):
            block = np.zeros((n_w, self.dim))
            block[:, n_x + i * n_w:n_x + (i + 1) * n_w] = self.w_weights[i] * self.s_q
            rows.append(block)
        for n, j in enumerate(self.meas_idx):
            rows.append(self.y_weights[n] * (self.s_r @ self._dy[j - window.t0]))
        if self.box_rows:
            box = self.model.y_box
            outside = (self.ys > box.upper) | (self.ys < box.lower)
            rows.append(np.sqrt(self.cfg.output_box_weight) * (self._dy * outside[:, :, None]).reshape(-1, self.dim))
        return np.vstack(rows)

    def constraint(self, z: np.ndarray) -> float:
        self._evaluate(z, sensitivities=False)
        lhs, rhs = extra_constraint_eval(self.window, self.ys, self.params)
        return lhs - rhs

    def constraint_grad(self, z: np.ndarray) -> np.ndarray:
        self._evaluate(z, sensitivities=True)
        ctx, window, eta = self.window.constraint_ctx, self.window, self.params.eta
        grad = np.zeros(self.dim)
        for j, y_ref in ctx.tilde_y.items():
            k = j - window.t0
            grad += 2.0 * eta ** (ctx.mu - j - 1) * ((self.ys[k] - y_ref) @ self.params.R @ self._dy[k])
        return grad

    def to_problem(self) -> ResidualProblem:
        model, M = self.model, self.window.M_t
        lower = np.concatenate([model.x_box.lower, np.tile(model.w_box.lower, M)])
        upper = np.concatenate([model.x_box.upper, np.tile(model.w_box.upper, M)])
        has_ctx = self.window.constraint_ctx is not None
        return ResidualProblem(
            dim=self.dim, residual=self.residual, jacobian=self.jacobian,
            lower=lower, upper=upper,
            constraint=self.constraint if has_ctx else None,
            constraint_grad=self.constraint_grad if has_ctx else None,
            # discounted like the prior weight so that no-event extensions rescale uniformly
            constraint_scale=self.params.eta ** M,
        )


def evaluate_decision(model: SystemModel, window: Window, params: IossParams, d: Decision,
                      report: SolverReport, warm: Optional[Decision], flagged: bool) -> EstimateResult:
    xs, ys = rollout(model, window, d)
    J = cost(window, d, params, ys)
    lhs = rhs = 0.0
    if window.constraint_ctx is not None:
        lhs, rhs = extra_constraint_eval(window, ys, params)
    return EstimateResult(window=window, x_seq=xs, w_seq=np.asarray(d.w_seq, float).reshape(window.M_t, model.n_w),
                          y_seq=ys, cost=J, report=report, lhs=lhs, rhs=rhs,
                          constraint_slack=max(0.0, lhs - rhs), warm_start=warm, flagged=flagged)


def solve(model: SystemModel, window: Window, params: IossParams,
          solver_cfg: Optional[SolverConfig] = None, warm_start: Optional[Decision] = None) -> EstimateResult:
    """Solve the window's NLP from ``warm_start`` (default: prior and zero noise).

    The returned cost never exceeds the cost of a feasible warm start.
    """
    cfg = solver_cfg or SolverConfig()
    if window.prior.size != model.n_x:
        raise ValueError(f"Prior has dimension {window.prior.size}, expected {model.n_x}")
    if window.inputs.shape[1] != model.n_u:
        raise ValueError(f"Window inputs have dimension {window.inputs.shape[1]}, expected {model.n_u}")
    if not model.x_box.contains(window.prior):
        logger.warning(f"Prior {window.prior} lies outside x_box at t={window.t}")
    warm = warm_start or Decision(window.prior.copy(), np.zeros((window.M_t, model.n_w)))

    shooting = _ShootingProblem(model, window, params, cfg)
    problem = shooting.to_problem()
    z, report = minimize(problem, warm.as_vector(), cfg)
    flagged = report.termination != "converged"
    result = evaluate_decision(model, window, params, Decision.from_vector(z, model.n_x, model.n_w), report, warm, flagged)

    warm_vec = problem.project(warm.as_vector())
    candidate = evaluate_decision(model, window, params, Decision.from_vector(warm_vec, model.n_x, model.n_w), report, warm, flagged)
    if candidate.constraint_slack <= cfg.feasibility_tol and candidate.cost < result.cost:
        logger.debug(f"t={window.t}: warm start is cheaper than the solver iterate, keeping it")
        result = candidate
    if flagged:
        logger.warning(f"t={window.t}: solve ended with '{report.termination}' after {report.iterations} iterations")
    logger.debug(f"t={window.t}: M_t={window.M_t}, cost={result.cost:.6g}, slack={result.constraint_slack:.3g}")
    return result
