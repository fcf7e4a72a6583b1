import numpy as np
import pytest
from numpy.testing import assert_allclose

from lyapunov import IossParams
from mhe import EstimateResult, Window
from solver import SolverReport
from trigger import (EtmState, apply_feedback, compute_d, compute_p, condition_from_scratch, evaluate,
                     open_loop_predict, update_dtilde)

REPORT = SolverReport(iterations=0, gradient_norm=0.0, termination="converged")


def _params(eta=0.9, alpha=5.0):
    return IossParams(P1=[[1.0]], P2=[[1.0]], Q=np.eye(2), R=[[1.0]], eta=eta, alpha=alpha, M=3)


def test_zero_threshold_forces_event(linear):
    state = EtmState.initial([0.0])
    assert evaluate(state, 1, [0.0], None, linear, _params()) == 1


def test_no_residual_and_positive_threshold_skips_event(linear):
    state = EtmState.initial([0.0])
    state.d_tilde = 0.5
    assert evaluate(state, 1, [0.0], None, linear, _params()) == 0
    assert state.delta == 1


def test_condition_example(linear):
    params = _params(eta=0.9)
    state = EtmState(t=2, eps=2, delta=0, d_tilde=0.2, x_hat=np.zeros(1), x_anchor=np.zeros(1),
                     x_hat_hist={2: np.zeros(1)})
    assert evaluate(state, 3, [0.1], None, linear, params) == 0
    open_loop_predict(state, linear, None)
    assert evaluate(state, 4, [0.2], None, linear, params) == 0
    assert state.last_lhs == pytest.approx(0.049)
    assert state.last_rhs == pytest.approx(0.162)


def test_evaluate_requires_consecutive_times(linear):
    with pytest.raises(ValueError, match="synchronized"):
        evaluate(EtmState.initial([0.0]), 3, [0.0], None, linear, _params())


def test_running_sums_agree_with_full_resummation(linear):
    rng = np.random.default_rng(21)
    params = _params(eta=0.85)
    for _ in range(100):
        state = EtmState.initial(rng.normal(size=1))
        window_start = 0
        for t in range(1, 31):
            gamma = evaluate(state, t, rng.normal(size=1) * 0.3, None, linear, params)
            assert gamma == condition_from_scratch(state, linear, params)
            if gamma:
                window_start = max(window_start, t - 3)
                ks = {j for j in range(window_start, t) if rng.random() < 0.5}
                apply_feedback(state, t, rng.uniform(0, 2), rng.normal(size=1), rng.normal(size=1),
                               window_start, ks, linear, params)
            else:
                open_loop_predict(state, linear, None)


def _result(window, x_seq, w_seq, y_seq):
    return EstimateResult(window=window, x_seq=np.asarray(x_seq, float), w_seq=np.asarray(w_seq, float),
                          y_seq=np.asarray(y_seq, float), cost=0.0, report=REPORT)


def test_compute_d_perfect_fit_is_zero():
    window = Window(t=2, M_t=2, prior=[0.0], inputs=np.zeros((2, 0)), ks={1}, meas={1: [0.5]})
    result = _result(window, [[0.0], [0.0], [0.0]], np.zeros((2, 2)), [[0.0], [0.5]])
    assert compute_d(result, _params(eta=0.5)) == 0.0


def test_compute_d_single_term():
    window = Window(t=1, M_t=1, prior=[0.0], inputs=np.zeros((1, 0)))
    result = _result(window, [[0.0], [0.0]], [[np.sqrt(0.5), 0.0]], [[0.0]])
    assert compute_d(result, _params(eta=0.5)) == pytest.approx(1.0)


def test_compute_d_example():
    window = Window(t=2, M_t=2, prior=[0.0], inputs=np.zeros((2, 0)), ks={1}, meas={1: [0.0]})
    result = _result(window, [[0.0], [0.0], [0.0]], [[np.sqrt(0.5), 0.0], [0.0, 0.0]], [[0.0], [np.sqrt(0.2)]])
    assert compute_d(result, _params(eta=0.5)) == pytest.approx(0.7)


def test_compute_p_example(linear):
    window = Window(t=2, M_t=2, prior=[1.0], inputs=np.zeros((2, 0)), ks={1}, meas={1: [0.0]})
    result = _result(window, [[1.0], [0.9], [0.81]], np.zeros((2, 2)), [[1.0 + np.sqrt(0.3)], [0.9]])
    assert compute_p(result, _params(eta=0.5), linear) == pytest.approx(0.15)


def test_compute_p_vanishes_for_zero_noise(linear):
    window = Window(t=3, M_t=3, prior=[1.0], inputs=np.zeros((3, 0)))
    result = _result(window, [[1.0], [0.9], [0.81], [0.729]], np.zeros((3, 2)), [[1.0], [0.9], [0.81]])
    assert compute_p(result, _params(), linear) == pytest.approx(0.0, abs=1e-15)
    assert compute_p(result, _params(), linear, ks={0, 1, 2}) == 0.0


def test_update_dtilde():
    assert update_dtilde(0.0, 0.0, 5.0) == 0.0
    assert update_dtilde(0.7, 0.15, 5.0) == pytest.approx(3.2)
    assert update_dtilde(1.0, 0.1, 0.0) < 0.0


def test_open_loop_predict(reactor):
    state = EtmState.initial([3.0, 1.0])
    assert_allclose(open_loop_predict(state, reactor, None), [2.71328, 1.14336])
    assert state.t == 1
