import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from lyapunov import IossParams
from mhe import EstimateResult
from model import SystemModel, output, step

logger = logging.getLogger(__name__)

DRIFT_CHECK_EVERY = 50
DRIFT_TOL = 1e-9


@dataclass
class EtmState:
    """Plant-side trigger bookkeeping, synchronized up to time ``t``.

    ``ybar_residual_sum`` holds sum eta^(t-j-1) |y_j - ybar_j|_R^2 over the last
    solved window outside K_s, without the factor 2 of the condition.
    ``rhs_scale`` is eta^(t - eps).
    """

    t: int
    eps: int
    delta: int
    d_tilde: float
    x_hat: np.ndarray
    x_anchor: np.ndarray
    window_start: int = 0
    ybar: Dict[int, np.ndarray] = field(default_factory=dict)
    ks_flags: Dict[int, bool] = field(default_factory=dict)
    ybar_residual_sum: float = 0.0
    innov_sum: float = 0.0
    rhs_scale: float = 1.0
    y_hist: Dict[int, np.ndarray] = field(default_factory=dict)
    u_hist: Dict[int, np.ndarray] = field(default_factory=dict)
    x_hat_hist: Dict[int, np.ndarray] = field(default_factory=dict)
    last_lhs: float = 0.0
    last_rhs: float = 0.0
    t_eval: int = 0

    @classmethod
    def initial(cls, x_prior) -> "EtmState":
        x = np.asarray(x_prior, dtype=float).copy()
        return cls(t=0, eps=0, delta=0, d_tilde=0.0, x_hat=x, x_anchor=x.copy(), x_hat_hist={0: x.copy()})


def _wq(v, A) -> float:
    v = np.asarray(v, dtype=float).reshape(-1)
    return float(v @ A @ v)


def open_loop_outputs(model: SystemModel, x_start, inputs) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-noise rollout from ``x_start`` over the given inputs."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.n_u) if model.n_u else np.zeros((len(inputs), 0))
    zero = np.zeros(model.n_w)
    xs = np.empty((len(inputs) + 1, model.n_x))
    ys = np.empty((len(inputs), model.n_y))
    xs[0] = np.asarray(x_start, dtype=float)
    for k, u in enumerate(inputs):
        ys[k] = output(model, xs[k], u, zero)
        xs[k + 1] = step(model, xs[k], u, zero)
    return xs, ys


def resum(state: EtmState, model: SystemModel, params: IossParams) -> Tuple[float, float]:
    """Recompute both running sums at ``state``'s current evaluation time from stored history."""
    t, eta = state.t_eval, params.eta
    ybar_sum = 0.0
    for j, y_ref in state.ybar.items():
        if not state.ks_flags[j]:
            ybar_sum += eta ** (t - j - 1) * _wq(state.y_hist[j] - y_ref, params.R)
    innov = 0.0
    zero = np.zeros(model.n_w)
    for j in range(state.eps, t):
        y_hat = output(model, state.x_hat_hist[j], state.u_hist[j], zero)
        innov += eta ** (t - j - 1) * _wq(state.y_hist[j] - y_hat, params.R)
    return ybar_sum, innov


def evaluate(state: EtmState, t: int, y_prev, u_prev, model: SystemModel, params: IossParams) -> int:
    """Fold y_{t-1} into the running sums and decide gamma_t.

    gamma_t = 0 iff 2 * ybar_sum + innov_sum < eta^(t - eps) * d_tilde.
    """
    if t != state.t + 1:
        raise ValueError(f"Trigger state is synchronized to t={state.t}, cannot evaluate t={t}")
    eta = params.eta
    y_prev = np.asarray(y_prev, dtype=float).reshape(model.n_y)
    u_prev = np.zeros(0) if model.n_u == 0 else np.asarray(u_prev, dtype=float).reshape(model.n_u)
    state.y_hist[t - 1] = y_prev
    state.u_hist[t - 1] = u_prev

    y_hat = output(model, state.x_hat, u_prev, np.zeros(model.n_w))
    state.innov_sum = eta * state.innov_sum + _wq(y_prev - y_hat, params.R)
    state.ybar_residual_sum *= eta
    state.rhs_scale *= eta
    state.t_eval = t

    if t % DRIFT_CHECK_EVERY == 0 and logger.isEnabledFor(logging.DEBUG):
        ybar_sum, innov = resum(state, model, params)
        drift = max(abs(ybar_sum - state.ybar_residual_sum) / max(1.0, ybar_sum),
                    abs(innov - state.innov_sum) / max(1.0, innov))
        if drift > DRIFT_TOL:
            logger.warning(f"t={t}: running trigger sums drifted by {drift:.3g}, resynchronizing")
            state.ybar_residual_sum, state.innov_sum = ybar_sum, innov

    state.last_lhs = 2.0 * state.ybar_residual_sum + state.innov_sum
    state.last_rhs = state.rhs_scale * state.d_tilde
    gamma = 0 if state.last_lhs < state.last_rhs else 1
    state.delta = 0 if gamma else t - state.eps
    logger.debug(f"t={t}: trigger lhs={state.last_lhs:.6g} rhs={state.last_rhs:.6g} gamma={gamma}")
    return gamma


def condition_from_scratch(state: EtmState, model: SystemModel, params: IossParams) -> int:
    """Trigger decision re-derived by full re-summation, for auditing ``evaluate``."""
    ybar_sum, innov = resum(state, model, params)
    lhs = 2.0 * ybar_sum + innov
    return 0 if lhs < params.eta ** (state.t_eval - state.eps) * state.d_tilde else 1


def compute_d(result: EstimateResult, params: IossParams, ks: Optional[Iterable[int]] = None) -> float:
    window = result.window
    ks = window.ks if ks is None else frozenset(ks)
    eps, eta = window.t, params.eta
    d = 0.0
    for idx in range(window.M_t):
        j = window.t0 + idx
        d += 2.0 * eta ** (eps - 1 - j) * _wq(result.w_seq[idx], params.Q)
    for j in sorted(ks):
        d += eta ** (eps - 1 - j) * _wq(window.meas[j] - result.y_seq[j - window.t0], params.R)
    return d


def compute_p(result: EstimateResult, params: IossParams, model: SystemModel,
              ks: Optional[Iterable[int]] = None) -> float:
    window = result.window
    ks = window.ks if ks is None else frozenset(ks)
    eps, eta = window.t, params.eta
    _, ybar = open_loop_outputs(model, result.x_seq[0], window.inputs)
    p = 0.0
    for idx in range(window.M_t):
        j = window.t0 + idx
        if j not in ks:
            p += eta ** (eps - j - 1) * _wq(ybar[idx] - result.y_seq[idx], params.R)
    return p


def update_dtilde(d: float, p: float, alpha: float) -> float:
    return alpha * d - 2.0 * p


def open_loop_predict(state: EtmState, model: SystemModel, u_prev) -> np.ndarray:
    """Advance the plant-side estimate copy by one zero-noise step."""
    x = step(model, state.x_hat, u_prev, np.zeros(model.n_w))
    state.t += 1
    state.x_hat = x
    state.x_hat_hist[state.t] = x
    return x


def apply_feedback(state: EtmState, t: int, d_tilde_next: float, x_first, x_now,
                   window_start: int, ks: Iterable[int], model: SystemModel, params: IossParams) -> None:
    """Reset the trigger after an event at ``t`` using the estimator's feedback."""
    ks = frozenset(ks)
    eta = params.eta
    state.t, state.eps, state.delta = t, t, 0
    state.d_tilde = float(d_tilde_next)
    state.x_hat = np.asarray(x_now, dtype=float).copy()
    state.x_anchor = np.asarray(x_first, dtype=float).copy()
    state.window_start = window_start

    inputs = [state.u_hist[j] for j in range(window_start, t)]
    _, ybar = open_loop_outputs(model, state.x_anchor, inputs) if inputs else (None, np.zeros((0, model.n_y)))
    state.ybar = {window_start + k: ybar[k] for k in range(len(inputs))}
    state.ks_flags = {j: j in ks for j in state.ybar}
    state.ybar_residual_sum = sum(eta ** (t - j - 1) * _wq(state.y_hist[j] - y_ref, params.R)
                                  for j, y_ref in state.ybar.items() if not state.ks_flags[j])
    state.innov_sum = 0.0
    state.rhs_scale = 1.0
    state.x_hat_hist = {t: state.x_hat.copy()}
    for hist in (state.y_hist, state.u_hist):
        for j in [j for j in hist if j < window_start]:
            del hist[j]
    logger.debug(f"t={t}: feedback d_tilde={state.d_tilde:.6g}, ybar sum={state.ybar_residual_sum:.6g}")


def bound_dominance(state: EtmState, result: EstimateResult, p: float, params: IossParams) -> Tuple[float, float]:
    """Exact left side of the unrelaxed condition and its surrogate bound at the current time.

    Returns:
        tuple: ``(exact, bound)``; the surrogate is safe when ``exact <= bound``.
    """
    t, eta = state.t_eval, params.eta
    window = result.window
    exact = state.innov_sum
    for j in state.ybar:
        if not state.ks_flags[j]:
            exact += eta ** (t - j - 1) * _wq(state.y_hist[j] - result.y_seq[j - window.t0], params.R)
    bound = 2.0 * state.ybar_residual_sum + 2.0 * eta ** (t - state.eps) * p + state.innov_sum
    return exact, bound
