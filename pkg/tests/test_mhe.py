from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from lyapunov import IossParams
from mhe import ConstraintContext, Decision, Window, _ShootingProblem, cost, extra_constraint_eval, kappa, rollout, solve
from model import NoiseSpec, simulate
from solver import ResidualProblem, SolverConfig, jacobian_fd

NO_INPUT = np.zeros((1, 0))


def _scalar_params(alpha=5.0, eta=0.91, R=2.0):
    return IossParams(P1=[[1.0]], P2=[[1.0]], Q=np.eye(2), R=[[R]], eta=eta, alpha=alpha, M=1)


def test_kappa():
    params = _scalar_params(alpha=0.5)
    assert kappa(params, "fixed") == 1.0
    assert kappa(params, "varying") == 1.5
    with pytest.raises(ValueError):
        kappa(params, "adaptive")


def test_rollout_reactor_single_step(reactor):
    window = Window(t=1, M_t=1, prior=[3.0, 1.0], inputs=NO_INPUT)
    xs, ys = rollout(reactor, window, Decision(np.array([3.0, 1.0]), np.zeros((1, 3))))
    assert_allclose(xs, [[3.0, 1.0], [2.71328, 1.14336]])
    assert_allclose(ys, [[4.0]])


def test_cost_is_zero_at_prior_without_measurements(linear):
    window = Window(t=3, M_t=3, prior=[0.4], inputs=np.zeros((3, 0)))
    d = Decision(np.array([0.4]), np.zeros((3, 2)))
    _, ys = rollout(linear, window, d)
    assert cost(window, d, _scalar_params(), ys) == 0.0


@pytest.mark.parametrize("variant, expected", [("fixed", 11.82), ("varying", 13.82)])
def test_cost_example(linear, variant, expected):
    y_meas = np.array([0.0])
    window = Window(t=1, M_t=1, prior=[0.0], inputs=NO_INPUT, ks={0}, meas={0: y_meas}, cost_variant=variant)
    # x0 = 1: prior offset 1, output residual 1 with R = 2
    d = Decision(np.array([1.0]), np.zeros((1, 2)))
    _, ys = rollout(linear, window, d)
    assert cost(window, d, _scalar_params(), ys) == pytest.approx(expected, rel=1e-12)


def test_cost_needs_stored_measurements(linear):
    window = Window(t=1, M_t=1, prior=[0.0], inputs=NO_INPUT, ks={0})
    d = Decision(np.array([0.0]), np.zeros((1, 2)))
    with pytest.raises(ValueError, match="No measurement"):
        cost(window, d, _scalar_params(), np.zeros((1, 1)))


def test_window_rejects_indices_outside():
    with pytest.raises(ValueError, match="outside the window"):
        Window(t=5, M_t=2, prior=[0.0], inputs=np.zeros((2, 0)), ks={2})


def _constraint_window(alpha):
    ctx = ConstraintContext(mu=2, eps_mu=1, window_start=0,
                            w_star_eps=np.array([[np.sqrt(3.0), 0.0]]), y_star_eps=np.array([[0.0]]),
                            meas_eps={}, tilde_y={0: np.array([1.0]), 1: np.array([3.0])})
    window = Window(t=2, M_t=2, prior=[0.0], inputs=np.zeros((2, 0)), constraint_ctx=ctx)
    params = IossParams(P1=[[1.0]], P2=[[1.0]], Q=np.eye(2), R=[[1.0]], eta=0.5, alpha=alpha, M=2)
    # residuals 1 at lag 1 and 4 at lag 0
    rolled = np.array([[2.0], [5.0]])
    return window, params, rolled


def test_extra_constraint_example():
    window, params, rolled = _constraint_window(alpha=2.0)
    lhs, rhs = extra_constraint_eval(window, rolled, params)
    assert lhs == pytest.approx(4.5)
    assert rhs == pytest.approx(6.0)


def test_extra_constraint_zero_alpha_is_tight():
    window, params, rolled = _constraint_window(alpha=0.0)
    lhs, rhs = extra_constraint_eval(window, rolled, params)
    assert rhs == 0.0
    assert lhs > rhs


def test_extra_constraint_empty_reference_set():
    ctx = ConstraintContext(mu=2, eps_mu=2, window_start=0, w_star_eps=np.zeros((2, 2)),
                            y_star_eps=np.zeros((2, 1)), meas_eps={}, tilde_y={})
    window = Window(t=2, M_t=2, prior=[0.0], inputs=np.zeros((2, 0)), constraint_ctx=ctx)
    lhs, _ = extra_constraint_eval(window, np.ones((2, 1)), _scalar_params())
    assert lhs == 0.0


def test_constraint_context_checks_sizes():
    with pytest.raises(ValueError, match="expects"):
        ConstraintContext(mu=3, eps_mu=2, window_start=0, w_star_eps=np.zeros((1, 2)),
                          y_star_eps=np.zeros((2, 1)), meas_eps={}, tilde_y={})


def _random_window(rng, model, params, M):
    t = M + int(rng.integers(0, 5))
    t0 = t - M
    ks = {j for j in range(t0, t) if rng.random() < 0.5}
    meas = {j: rng.normal(size=model.n_y) for j in ks}
    window = Window(t=t, M_t=M, prior=rng.normal(size=model.n_x), inputs=np.zeros((M, 0)), ks=ks, meas=meas)
    d = Decision(rng.normal(size=model.n_x), rng.normal(size=(M, model.n_w)) * 0.1)
    return window, d


def test_cost_matches_brute_force_sum(linear):
    rng = np.random.default_rng(11)
    for _ in range(100):
        M = int(rng.integers(1, 6))
        params = IossParams(P1=[[2.0]], P2=[[1.5]], Q=np.diag([3.0, 0.5]), R=[[0.7]], eta=0.8,
                            alpha=float(rng.uniform(0, 4)), M=M)
        window, d = _random_window(rng, linear, params, M)
        _, ys = rollout(linear, window, d)
        k = max(1.0, params.alpha)
        expected = 2 * 0.8 ** M * 1.5 * (d.x0[0] - window.prior[0]) ** 2
        for idx in range(M):
            j = window.t0 + idx
            expected += k * 0.8 ** (window.t - j - 1) * 2 * (3.0 * d.w_seq[idx, 0] ** 2 + 0.5 * d.w_seq[idx, 1] ** 2)
        for j in window.ks:
            expected += k * 0.8 ** (window.t - j - 1) * 0.7 * (ys[j - window.t0, 0] - window.meas[j][0]) ** 2
        assert cost(window, d, params, ys) == pytest.approx(expected, rel=1e-12)


def test_extra_constraint_matches_brute_force_sum(linear):
    rng = np.random.default_rng(12)
    for _ in range(100):
        M = int(rng.integers(1, 6))
        alpha = float(rng.uniform(0, 4))
        params = IossParams(P1=[[2.0]], P2=[[1.5]], Q=np.diag([3.0, 0.5]), R=[[0.7]], eta=0.8, alpha=alpha, M=M)
        window, d = _random_window(rng, linear, params, M)
        t0 = window.t0
        mu = int(rng.integers(t0 + 1, window.t + 1))
        eps_mu = int(rng.integers(max(0, mu - 4), mu + 1))
        start = eps_mu - int(rng.integers(0, min(eps_mu, 4) + 1))
        w_star = rng.normal(size=(eps_mu - start, 2))
        y_star = rng.normal(size=(eps_mu - start, 1))
        meas_eps = {j: rng.normal(size=1) for j in range(start, eps_mu) if rng.random() < 0.5}
        tilde_y = {j: rng.normal(size=1) for j in range(t0, mu) if j not in window.ks}
        ctx = ConstraintContext(mu=mu, eps_mu=eps_mu, window_start=start, w_star_eps=w_star, y_star_eps=y_star,
                                meas_eps=meas_eps, tilde_y=tilde_y)
        window = replace(window, constraint_ctx=ctx)
        _, ys = rollout(linear, window, d)
        lhs, rhs = extra_constraint_eval(window, ys, params)

        expected_lhs = sum(0.8 ** (mu - j - 1) * 0.7 * (ys[j - t0, 0] - y[0]) ** 2 for j, y in tilde_y.items())
        acc = 0.0
        for j in range(start, eps_mu):
            w = w_star[j - start]
            acc += 0.8 ** (mu - j - 1) * 2 * (3.0 * w[0] ** 2 + 0.5 * w[1] ** 2)
        for j, y in meas_eps.items():
            acc += 0.8 ** (mu - j - 1) * 0.7 * (y_star[j - start, 0] - y[0]) ** 2
        assert lhs == pytest.approx(expected_lhs, rel=1e-12)
        assert rhs == pytest.approx(alpha * acc, rel=1e-12)


def test_residual_norm_equals_cost(reactor, reactor_params):
    rng = np.random.default_rng(5)
    for _ in range(20):
        M = int(rng.integers(1, 6))
        t = M + 2
        ks = {j for j in range(2, t) if rng.random() < 0.6}
        window = Window(t=t, M_t=M, prior=rng.uniform(1, 3, 2), inputs=np.zeros((M, 0)), ks=ks,
                        meas={j: rng.uniform(2, 4, 1) for j in ks})
        d = Decision(rng.uniform(1, 3, 2), rng.uniform(-1e-3, 1e-3, (M, 3)))
        shooting = _ShootingProblem(reactor, window, reactor_params, SolverConfig())
        r = shooting.residual(d.as_vector())
        _, ys = rollout(reactor, window, d)
        assert float(r @ r) == pytest.approx(cost(window, d, reactor_params, ys), rel=1e-10)


def test_shooting_jacobian_matches_central_differences(reactor, reactor_params):
    rng = np.random.default_rng(8)
    M = 4
    ks = {1, 3}
    window = Window(t=M, M_t=M, prior=[2.0, 1.5], inputs=np.zeros((M, 0)), ks=ks, meas={1: [3.2], 3: [3.0]})
    shooting = _ShootingProblem(reactor, window, reactor_params, SolverConfig())
    z = np.concatenate([rng.uniform(1, 3, 2), rng.uniform(-1e-3, 1e-3, M * 3)])
    J = shooting.jacobian(z)
    central = np.empty_like(J)
    for i in range(z.size):
        h = 1e-6 * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        central[:, i] = (shooting.residual(zp) - shooting.residual(zm)) / (2 * h)
    assert_allclose(J, central, rtol=1e-4, atol=1e-4 * np.max(np.abs(central)))
    forward = jacobian_fd(ResidualProblem(dim=z.size, residual=shooting.residual), z)
    assert_allclose(forward, central, rtol=1e-4, atol=1e-4 * np.max(np.abs(central)))


def test_solve_recovers_truth_from_exact_data(reactor, reactor_params):
    traj = simulate(reactor, [3.0, 1.0], None, NoiseSpec((0.0, 0.0, 0.0)), 6)
    ks = set(range(1, 6))
    window = Window(t=6, M_t=5, prior=traj.states[1], inputs=np.zeros((5, 0)), ks=ks,
                    meas={j: traj.outputs[j] for j in ks})
    result = solve(reactor, window, reactor_params)
    assert np.linalg.norm(result.x_hat - traj.states[6]) <= 1e-6
    assert result.cost == pytest.approx(0.0, abs=1e-12)


def test_solve_linear_matches_weighted_least_squares(linear, unit_params):
    a, eta, t, M, prior = 0.9, 0.9, 3, 3, 0.5
    y = np.array([1.0, 0.7, 0.2])
    rows, rhs = [], []
    # z = [x0, w1_0, w2_0, w1_1, w2_1, w1_2, w2_2]
    row = np.zeros(7)
    row[0] = np.sqrt(2 * eta ** M)
    rows.append(row)
    rhs.append(np.sqrt(2 * eta ** M) * prior)
    for i in range(M):
        for c in (0, 1):
            row = np.zeros(7)
            row[1 + 2 * i + c] = np.sqrt(2 * eta ** (t - i - 1))
            rows.append(row)
            rhs.append(0.0)
    for j in range(M):
        row = np.zeros(7)
        row[0] = a ** j
        for i in range(j):
            row[1 + 2 * i] = a ** (j - 1 - i)
        row[2 + 2 * j] = 1.0
        weight = np.sqrt(eta ** (t - j - 1))
        rows.append(weight * row)
        rhs.append(weight * y[j])
    z_star = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]

    window = Window(t=t, M_t=M, prior=[prior], inputs=np.zeros((M, 0)), ks={0, 1, 2},
                    meas={j: np.array([y[j]]) for j in range(M)})
    result = solve(linear, window, unit_params, SolverConfig(gtol=1e-13, xtol=1e-15))
    assert_allclose(result.decision.as_vector(), z_star, atol=1e-8)


def test_solve_never_worse_than_warm_start(reactor, reactor_params):
    window = Window(t=3, M_t=3, prior=[2.0, 1.2], inputs=np.zeros((3, 0)), ks={0, 1, 2},
                    meas={0: [3.3], 1: [3.1], 2: [3.0]})
    warm = Decision(np.array([2.1, 1.1]), np.zeros((3, 3)))
    _, ys = rollout(reactor, window, warm)
    result = solve(reactor, window, reactor_params, warm_start=warm)
    assert result.cost <= cost(window, warm, reactor_params, ys) + 1e-12


def test_solve_rejects_wrong_prior(reactor, reactor_params):
    window = Window(t=1, M_t=1, prior=[1.0, 2.0, 3.0], inputs=NO_INPUT)
    with pytest.raises(ValueError, match="Prior"):
        solve(reactor, window, reactor_params)
