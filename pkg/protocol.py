import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set

import numpy as np

from lyapunov import IossParams
from mhe import ConstraintContext, Decision, EstimateResult, Window, evaluate_decision, solve
from model import SystemModel, output
from model import step as model_step
from solver import SolverConfig, SolverReport
from trigger import (EtmState, apply_feedback, bound_dominance, compute_d, compute_p, evaluate,
                     open_loop_predict, update_dtilde)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MeasurementMsg:
    t: int
    y_prev: np.ndarray

    @property
    def payload_size(self) -> int:
        return 1 + np.asarray(self.y_prev).size

    def to_record(self) -> dict:
        return {"t": int(self.t), "y_prev": [float(v) for v in np.ravel(self.y_prev)]}


@dataclass(frozen=True, eq=False)
class FeedbackMsg:
    t: int
    d_tilde_next: float
    x_first: np.ndarray
    x_now: np.ndarray

    @property
    def payload_size(self) -> int:
        return 2 + np.asarray(self.x_first).size + np.asarray(self.x_now).size

    def to_record(self) -> dict:
        return {"t": int(self.t), "d_tilde_next": float(self.d_tilde_next),
                "x_first": [float(v) for v in np.ravel(self.x_first)],
                "x_now": [float(v) for v in np.ravel(self.x_now)]}


@dataclass
class ChannelStats:
    events_total: int = 0
    measurement_msgs: int = 0
    feedback_msgs: int = 0
    payload_scalars: int = 0


class Channel:
    """In-order, exactly-once message queue between plant and estimator."""

    def __init__(self, keep_log: bool = False):
        self._queue = deque()
        self.stats = ChannelStats()
        self.keep_log = keep_log
        self.log: List[dict] = []

    def send(self, msg) -> None:
        if isinstance(msg, MeasurementMsg):
            self.stats.measurement_msgs += 1
            self.stats.events_total += 1
            kind = "measurement"
        elif isinstance(msg, FeedbackMsg):
            self.stats.feedback_msgs += 1
            kind = "feedback"
        else:
            raise TypeError(f"Unsupported message type: {type(msg).__name__}")
        self.stats.payload_scalars += msg.payload_size
        if self.keep_log:
            self.log.append({"kind": kind, **msg.to_record()})
        self._queue.append(msg)

    def receive(self):
        if not self._queue:
            raise RuntimeError("Channel is empty")
        return self._queue.popleft()


def horizon_fixed(t: int, delta_t: int, M: int) -> int:
    return min(t, M + delta_t)


@dataclass
class SchedulerState:
    """Event history and the derived index quantities, one list entry per time step."""

    M: int
    scheme: str = "fixed"
    gamma: List[int] = field(default_factory=lambda: [1])
    eps: List[int] = field(default_factory=lambda: [0])
    delta: List[int] = field(default_factory=lambda: [0])
    horizon: List[int] = field(default_factory=lambda: [0])
    mu: List[Optional[int]] = field(default_factory=lambda: [None])
    sigma: List[int] = field(default_factory=lambda: [0])
    run: List[int] = field(default_factory=lambda: [1])
    ks: Set[int] = field(default_factory=set)
    tau_tilde: Optional[int] = None

    @property
    def t(self) -> int:
        return len(self.gamma) - 1

    def record(self, t: int, gamma: int) -> int:
        """Append gamma_t, update the bookkeeping and return M_t.

        Raises:
            RuntimeError: If mu_t - M_mu != eps_mu - M_eps at a no-event time.
        """
        if t != self.t + 1:
            raise ValueError(f"Scheduler is at t={self.t}, cannot record t={t}")
        self.eps.append(t - 1 if self.gamma[t - 1] == 1 else self.eps[t - 1])
        self.gamma.append(int(gamma))
        self.delta.append(0 if gamma else t - self.eps[t])
        if gamma:
            self.ks.add(t - 1)
            self.run.append(self.run[t - 1] + 1)
        else:
            self.run.append(0)
            if self.tau_tilde is None:
                self.tau_tilde = t
        self.mu.append(t if not gamma else self.mu[t - 1])
        consecutive = min(t, 2 * self.M - 1) + 1
        self.sigma.append(t if gamma and self.run[t] >= consecutive else self.sigma[t - 1])

        if self.scheme == "fixed":
            M_t = horizon_fixed(t, self.delta[t], self.M)
        else:
            M_t = horizon_varying(t, self, self.M)
        self.horizon.append(M_t)
        if not gamma:
            e = self.eps[t]
            if t - M_t != e - self.horizon[e]:
                raise RuntimeError(f"Scheduler identity broken at t={t}: {t - M_t} != {e - self.horizon[e]}")
        return M_t


def horizon_varying(t: int, scheduler: SchedulerState, M: int) -> int:
    """Varying horizon min{t, t - mu_{t-delta_t-M}, t - sigma_t + M}.

    The mu term is dropped while t - delta_t - M precedes the first no-event time.
    """
    candidates = [t, t - scheduler.sigma[t] + M]
    s = t - scheduler.delta[t] - M
    if scheduler.tau_tilde is not None and s >= scheduler.tau_tilde:
        candidates.append(t - scheduler.mu[s])
    return min(candidates)


def prop1_estimates(model: SystemModel, params: IossParams, last: EstimateResult,
                    delta: int, inputs_tail) -> EstimateResult:
    """Extend the last event's solution by ``delta`` zero-noise steps without solving."""
    if delta == 0:
        return last
    w = last.window
    tail = np.asarray(inputs_tail, dtype=float).reshape(-1, model.n_u)[:delta] if model.n_u else np.zeros((delta, 0))
    window = Window(t=w.t + delta, M_t=w.M_t + delta, prior=w.prior, inputs=np.vstack([w.inputs, tail]),
                    ks=w.ks, meas=w.meas, constraint_ctx=w.constraint_ctx, cost_variant=w.cost_variant)
    zero = np.zeros(model.n_w)
    xs = [last.x_seq[-1]]
    ys = []
    for u in tail:
        ys.append(output(model, xs[-1], u, zero))
        xs.append(model_step(model, xs[-1], u, zero))
    return EstimateResult(
        window=window,
        x_seq=np.vstack([last.x_seq, np.array(xs[1:])]),
        w_seq=np.vstack([last.w_seq, np.zeros((delta, model.n_w))]),
        y_seq=np.vstack([last.y_seq, np.array(ys)]),
        cost=params.eta ** delta * last.cost, report=last.report, lhs=last.lhs, rhs=last.rhs,
        constraint_slack=last.constraint_slack, warm_start=last.warm_start, flagged=last.flagged,
    )


class PlantSide:
    def __init__(self, model: SystemModel, params: IossParams, x_prior):
        self.model, self.params = model, params
        self.etm = EtmState.initial(x_prior)

    def decide(self, t: int, y_prev, u_prev) -> int:
        return evaluate(self.etm, t, y_prev, u_prev, self.model, self.params)

    def on_feedback(self, msg: FeedbackMsg, window_start: int, ks) -> None:
        apply_feedback(self.etm, msg.t, msg.d_tilde_next, msg.x_first, msg.x_now,
                       window_start, ks, self.model, self.params)

    def predict(self, u_prev) -> np.ndarray:
        return open_loop_predict(self.etm, self.model, u_prev)


class RemoteSide:
    """Estimator side: received measurements, estimate history and the result archive."""

    def __init__(self, model: SystemModel, params: IossParams, x_prior, inputs: np.ndarray,
                 scheme: str, solver_cfg: SolverConfig, extra_constraint: bool = True):
        self.model, self.params, self.scheme = model, params, scheme
        self.solver_cfg, self.extra_constraint = solver_cfg, extra_constraint
        self.inputs = inputs
        self.measurements: Dict[int, np.ndarray] = {}
        self.accessed: Set[int] = set()
        self.x_hat: List[np.ndarray] = [np.asarray(x_prior, dtype=float).copy()]
        self.archive: Dict[int, EstimateResult] = {}
        self.last_event: Optional[int] = None

    def receive(self, msg: MeasurementMsg) -> None:
        self.measurements[msg.t - 1] = np.asarray(msg.y_prev, dtype=float)

    def measurement(self, j: int) -> np.ndarray:
        if j not in self.measurements:
            raise ValueError(f"Measurement y_{j} was never transmitted")
        self.accessed.add(j)
        return self.measurements[j]

    def predict(self, t: int) -> np.ndarray:
        x = model_step(self.model, self.x_hat[t - 1], self.inputs[t - 1], np.zeros(self.model.n_w))
        self.x_hat.append(x)
        return x

    def warm_start(self, window: Window) -> Optional[Decision]:
        """Previous solution shifted onto the new window, new entries padded with zero noise."""
        if self.last_event is None:
            return None
        last = self.archive[self.last_event]
        t0_prev, eps = last.window.t0, last.window.t
        t0 = window.t0
        if t0_prev <= t0 <= eps:
            x0 = last.x_seq[t0 - t0_prev]
        else:
            x0 = self.x_hat[t0]
        w_seq = np.zeros((window.M_t, self.model.n_w))
        for idx in range(window.M_t):
            j = t0 + idx
            if t0_prev <= j < eps:
                w_seq[idx] = last.w_seq[j - t0_prev]
        return Decision(x0.copy(), w_seq)

    def build_constraint_context(self, t: int, M_t: int, sched: SchedulerState) -> ConstraintContext:
        mu = sched.mu[t]
        eps_mu = sched.eps[mu]
        window_start = mu - sched.horizon[mu]
        res_eps = self.archive.get(eps_mu)
        if res_eps is None or res_eps.window.t0 != window_start:
            raise ValueError(f"t={t}: no archived solution consistent with mu={mu}, eps_mu={eps_mu}")
        eps_prev = (mu - 1) - sched.delta[mu - 1]
        res_prev = self.archive[eps_prev]
        zero = np.zeros(self.model.n_w)
        tilde_y = {}
        dropped = []
        for j in range(t - M_t, mu):
            if j in sched.ks:
                continue
            if j < eps_prev:
                if j < res_prev.window.t0:
                    dropped.append(j)
                    continue
                tilde_y[j] = res_prev.y_seq[j - res_prev.window.t0]
            else:
                tilde_y[j] = output(self.model, self.x_hat[j], self.inputs[j], zero)
        if dropped:
            logger.debug(f"t={t}: no reference output for indices {dropped}, left out of the constraint")
        meas_eps = {j: self.measurement(j) for j in sorted(res_eps.window.ks)}
        return ConstraintContext(mu=mu, eps_mu=eps_mu, window_start=window_start,
                                 w_star_eps=res_eps.w_seq, y_star_eps=res_eps.y_seq,
                                 meas_eps=meas_eps, tilde_y=tilde_y)

    def solve_event(self, t: int, M_t: int, sched: SchedulerState):
        """Build and solve the window at event time ``t``.

        Returns:
            tuple: ``(result, degraded)``; a degraded result is the warm start's
            open-loop rollout, used when the solver fails numerically.
        """
        t0 = t - M_t
        ks = frozenset(j for j in sched.ks if t0 <= j < t)
        meas = {j: self.measurement(j) for j in sorted(ks)}
        ctx = None
        if self.extra_constraint and sched.tau_tilde is not None:
            ctx = self.build_constraint_context(t, M_t, sched)
        window = Window(t=t, M_t=M_t, prior=self.x_hat[t0], inputs=self.inputs[t0:t], ks=ks, meas=meas,
                        constraint_ctx=ctx, cost_variant=self.scheme)
        warm = self.warm_start(window)
        degraded = False
        try:
            result = solve(self.model, window, self.params, self.solver_cfg, warm)
        except (FloatingPointError, np.linalg.LinAlgError) as e:
            logger.error(f"t={t}: solver failed ({e}), continuing with the open-loop warm start")
            warm = warm or Decision(window.prior.copy(), np.zeros((M_t, self.model.n_w)))
            report = SolverReport(iterations=0, gradient_norm=float("nan"), termination="stalled")
            result = evaluate_decision(self.model, window, self.params, warm, report, warm, flagged=True)
            degraded = True

        self.archive[t] = result
        self.last_event = t
        self.x_hat.append(result.x_hat.copy())
        keep_from = t
        if ctx is not None:
            keep_from = min(ctx.eps_mu, (ctx.mu - 1) - sched.delta[ctx.mu - 1])
        for key in [k for k in self.archive if k < keep_from]:
            del self.archive[key]
        return result, degraded


@dataclass
class StepRecord:
    t: int
    gamma: int
    M_t: int
    x_hat: np.ndarray
    y_hat: np.ndarray
    d_tilde: float
    etm_lhs: float
    etm_rhs: float
    cost: float = float("nan")
    termination: str = ""
    iterations: int = 0
    constraint_slack: float = 0.0
    flagged: bool = False
    degraded: bool = False
    audit_diff: float = float("nan")
    bound_exact: float = float("nan")
    bound_value: float = float("nan")


class ProtocolSession:
    """Plant side, remote side, scheduler and channel of one closed-loop run."""

    def __init__(self, model: SystemModel, params: IossParams, x_prior, inputs, scheme: str = "fixed",
                 solver_cfg: Optional[SolverConfig] = None, extra_constraint: bool = True,
                 audit_prop1: int = 0, keep_messages: bool = False):
        if scheme not in ("fixed", "varying"):
            raise ValueError(f"Unknown horizon scheme: {scheme}")
        self.model, self.params, self.scheme = model, params, scheme
        self.solver_cfg = solver_cfg or SolverConfig()
        self.inputs = np.asarray(inputs, dtype=float).reshape(-1, model.n_u) if model.n_u else np.zeros((len(inputs), 0))
        self.audit_prop1 = audit_prop1
        self.plant = PlantSide(model, params, x_prior)
        self.remote = RemoteSide(model, params, x_prior, self.inputs, scheme, self.solver_cfg, extra_constraint)
        self.sched = SchedulerState(M=params.M, scheme=scheme)
        self.channel = Channel(keep_log=keep_messages)
        self.records: List[StepRecord] = []
        self.no_event_steps = 0
        self._p_cache: Dict[int, float] = {}


def _audit_prop1(session: ProtocolSession, t: int) -> float:
    remote, sched = session.remote, session.sched
    last = remote.archive[remote.last_event]
    delta = sched.delta[t]
    shortcut = prop1_estimates(session.model, session.params, last, delta, session.inputs[last.window.t:t])
    if shortcut.window.t0 != t - sched.horizon[t]:
        raise RuntimeError(f"t={t}: shortcut window start {shortcut.window.t0} != t - M_t")
    warm = last.warm_start or Decision(last.window.prior, np.zeros((last.window.M_t, session.model.n_w)))
    padded = Decision(warm.x0, np.vstack([warm.w_seq, np.zeros((delta, session.model.n_w))]))
    explicit = solve(session.model, shortcut.window, session.params, session.solver_cfg, padded)
    diff = float(np.linalg.norm(explicit.x_hat - shortcut.x_hat))
    logger.debug(f"t={t}: explicit solve vs open-loop shortcut differ by {diff:.3g}")
    return diff


def step(session: ProtocolSession, t: int, y_prev) -> StepRecord:
    """One sample period: trigger decision, optional solve and feedback, estimate update."""
    model, params, sched, remote = session.model, session.params, session.sched, session.remote
    u_prev, u_now = session.inputs[t - 1], session.inputs[min(t, len(session.inputs) - 1)]
    etm = session.plant.etm
    d_tilde = etm.d_tilde
    gamma = session.plant.decide(t, y_prev, u_prev)
    record = StepRecord(t=t, gamma=gamma, M_t=0, x_hat=None, y_hat=None, d_tilde=d_tilde,
                        etm_lhs=etm.last_lhs, etm_rhs=etm.last_rhs)

    if remote.last_event is not None and remote.last_event == etm.eps:
        last = remote.archive[etm.eps]
        if etm.eps not in session._p_cache:
            session._p_cache = {etm.eps: compute_p(last, params, model)}
        record.bound_exact, record.bound_value = bound_dominance(etm, last, session._p_cache[etm.eps], params)
        if record.bound_exact > record.bound_value * (1 + 1e-9) + 1e-12:
            logger.warning(f"t={t}: trigger surrogate below the exact condition ({record.bound_value:.6g} < {record.bound_exact:.6g})")

    M_t = sched.record(t, gamma)
    record.M_t = M_t
    if gamma:
        session.channel.send(MeasurementMsg(t, np.asarray(y_prev, dtype=float)))
        remote.receive(session.channel.receive())
        result, degraded = remote.solve_event(t, M_t, sched)
        if degraded:
            d_tilde_next = 0.0
        else:
            d = compute_d(result, params)
            p = compute_p(result, params, model)
            session._p_cache = {t: p}
            d_tilde_next = update_dtilde(d, p, params.alpha)
        session.channel.send(FeedbackMsg(t, d_tilde_next, result.x_first.copy(), result.x_hat.copy()))
        session.plant.on_feedback(session.channel.receive(), t - M_t, sched.ks)
        record.cost = result.cost
        record.termination = result.report.termination
        record.iterations = result.report.iterations
        record.constraint_slack = result.constraint_slack
        record.flagged = result.flagged
        record.degraded = degraded
    else:
        remote.predict(t)
        session.plant.predict(u_prev)
        session.no_event_steps += 1
        last = remote.archive[remote.last_event]
        record.cost = params.eta ** sched.delta[t] * last.cost
        if session.audit_prop1 and session.no_event_steps % session.audit_prop1 == 0:
            record.audit_diff = _audit_prop1(session, t)

    x_hat = remote.x_hat[t]
    if not np.array_equal(x_hat, etm.x_hat):
        raise RuntimeError(f"t={t}: plant-side estimate copy diverged from the remote estimate")
    record.x_hat = x_hat
    record.y_hat = output(model, x_hat, u_now, np.zeros(model.n_w))
    session.records.append(record)
    return record
