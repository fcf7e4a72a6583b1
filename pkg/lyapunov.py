import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from model import SystemModel, output, step

logger = logging.getLogger(__name__)

SCHEMES = ("fixed", "varying")
# horizon constant c in c * lambda_max(P2, P1) * eta**M < 1
HORIZON_CONSTANT = {"fixed": 24.0, "varying": 8.0}


@dataclass(frozen=True, eq=False)
class IossParams:
    """Lyapunov / cost parameterization: weights, discount, trigger sensitivity, horizon."""

    P1: np.ndarray
    P2: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    eta: float
    alpha: float = 0.0
    M: int = 1

    def __post_init__(self):
        for name in ("P1", "P2", "Q", "R"):
            value = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            object.__setattr__(self, name, value)
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "M", int(self.M))


@dataclass
class ValidationReport:
    ok: bool = True
    failures: List[str] = field(default_factory=list)

    def fail(self, message: str) -> None:
        self.ok = False
        self.failures.append(message)


@dataclass(frozen=True)
class BoundConstants:
    rho: float
    c_init: float
    c_dist: float
    scheme: str


def _check_symmetric(name: str, A: np.ndarray) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * scale):
        raise ValueError(f"{name} is not symmetric")


def validate(params: IossParams, model: Optional[SystemModel] = None) -> ValidationReport:
    """Check definiteness, ranges and (optionally) dimensions against a model.

    Raises:
        ValueError: If any weight matrix is not symmetric.
    """
    report = ValidationReport()
    for name in ("P1", "P2", "Q", "R"):
        _check_symmetric(name, getattr(params, name))

    for name in ("P1", "P2"):
        A = getattr(params, name)
        eig = np.linalg.eigvalsh(A)
        tol = 1e-12 * max(float(np.trace(A)), 0.0)
        if eig.size == 0 or eig[0] <= tol or np.trace(A) <= 0:
            report.fail(f"{name} is not positive definite (smallest eigenvalue {eig[0] if eig.size else float('nan'):.6g})")
    for name in ("Q", "R"):
        A = getattr(params, name)
        eig = np.linalg.eigvalsh(A)
        tol = 1e-12 * max(float(np.trace(np.abs(A))), 1.0)
        if eig.size and eig[0] < -tol:
            report.fail(f"{name} is not positive semidefinite (smallest eigenvalue {eig[0]:.6g})")
    if not 0.0 <= params.eta < 1.0:
        report.fail(f"eta must lie in [0, 1), got {params.eta}")
    if params.alpha < 0.0:
        report.fail(f"alpha must be nonnegative, got {params.alpha}")
    if params.M < 1:
        report.fail(f"M must be at least 1, got {params.M}")

    if model is not None:
        expected = {"P1": model.n_x, "P2": model.n_x, "Q": model.n_w, "R": model.n_y}
        for name, n in expected.items():
            if getattr(params, name).shape != (n, n):
                report.fail(f"{name} has shape {getattr(params, name).shape}, {model.name} needs ({n}, {n})")

    for failure in report.failures:
        logger.debug(f"Parameter check failed: {failure}")
    return report


def gen_eig_max(A, B) -> float:
    """Largest generalized eigenvalue of (A, B), i.e. of B^-1 A.

    Raises:
        numpy.linalg.LinAlgError: If B is not positive definite.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape != B.shape:
        raise ValueError(f"Matrix shapes differ: {A.shape} vs {B.shape}")
    return float(scipy.linalg.eigh(A, B, eigvals_only=True)[-1])


def min_horizon(params: IossParams, scheme: str = "fixed") -> Tuple[int, float]:
    """Smallest M >= 1 with c * lambda_max(P2, P1) * eta**M < 1, and the implied rate.

    Returns:
        tuple: ``(M, rho)`` with ``rho = (c * lambda_max * eta**M) ** (1 / M)``.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"Unknown horizon scheme: {scheme}")
    if params.eta == 0.0:
        return 1, 0.0
    c = HORIZON_CONSTANT[scheme]
    lam = gen_eig_max(params.P2, params.P1)
    M = 1
    while c * lam * params.eta ** M >= 1.0:
        M += 1
        if M > 10 ** 7:
            raise ValueError(f"No admissible horizon for eta={params.eta}")
    return M, float((c * lam * params.eta ** M) ** (1.0 / M))


def bound_constants(params: IossParams, scheme: str = "fixed") -> BoundConstants:
    """Error-bound constants at the configured horizon ``params.M``.

    Raises:
        ValueError: If ``params.M`` is below the minimum horizon for the scheme.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"Unknown horizon scheme: {scheme}")
    c = HORIZON_CONSTANT[scheme]
    lam = gen_eig_max(params.P2, params.P1)
    factor = c * lam * params.eta ** params.M
    if factor >= 1.0:
        raise ValueError(f"Horizon M={params.M} is below the minimum for the {scheme} scheme")
    rho = factor ** (1.0 / params.M)
    lmax_p2 = float(np.linalg.eigvalsh(params.P2)[-1])
    lmin_p1 = float(np.linalg.eigvalsh(params.P1)[0])
    lmax_q = float(np.linalg.eigvalsh(params.Q)[-1])
    alpha = params.alpha
    if scheme == "fixed":
        c_init = np.sqrt(24.0 * lmax_p2 / lmin_p1)
        c_dist = np.sqrt(3.0 * max(10.0 * alpha + 2.0, 12.0) * lmax_q / lmin_p1)
    else:
        c_init = np.sqrt(8.0 * lmax_p2 / lmin_p1)
        c_dist = np.sqrt((10.0 * alpha + 12.0) * lmax_q / lmin_p1)
    return BoundConstants(rho=float(rho), c_init=float(c_init), c_dist=float(c_dist), scheme=scheme)


def rges_bound(constants: BoundConstants, e0_norm: float, w_norms: Sequence[float], t: int) -> float:
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    w = np.asarray(w_norms, dtype=float)[:t]
    if w.size < t:
        raise ValueError(f"Need {t} disturbance norms, got {w.size}")
    s = np.sqrt(constants.rho)
    lags = np.arange(t - 1, -1, -1)
    return float(constants.c_init * s ** t * e0_norm + constants.c_dist * np.sum(s ** lags * w))


def rges_bound_sequence(constants: BoundConstants, e0_norm: float, w_norms: Sequence[float]) -> np.ndarray:
    """Bound for t = 0..len(w_norms), evaluated recursively."""
    w = np.asarray(w_norms, dtype=float)
    s = np.sqrt(constants.rho)
    bound = np.empty(w.size + 1)
    acc = 0.0
    bound[0] = constants.c_init * e0_norm
    for t in range(1, w.size + 1):
        acc = s * acc + w[t - 1]
        bound[t] = constants.c_init * s ** t * e0_norm + constants.c_dist * acc
    return bound


def matrix_sqrt(A) -> np.ndarray:
    """Symmetric square root S of a PSD matrix, so that v.T A v = |S v|^2."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    eig, vec = np.linalg.eigh(0.5 * (A + A.T))
    return (vec * np.sqrt(np.clip(eig, 0.0, None))) @ vec.T


@dataclass(frozen=True, eq=False)
class LyapunovSample:
    x: np.ndarray
    x_tilde: np.ndarray
    u: np.ndarray
    w: np.ndarray
    w_tilde: np.ndarray


@dataclass
class LyapunovReport:
    n_samples: int
    violations: int
    worst_margin: float
    worst_sample: Optional[LyapunovSample] = None


def _quad(v: np.ndarray, A: np.ndarray) -> float:
    return float(v @ A @ v)


def check_lyapunov_decrease(model: SystemModel, params: IossParams,
                            samples: Sequence[LyapunovSample]) -> LyapunovReport:
    """Sampled check of the dissipation inequality for the quadratic Lyapunov function.

    With P1 == P2 this is exactly W(x+, x~+) <= eta W(x, x~) + |w - w~|_Q^2 + |y - y~|_R^2.
    Otherwise the necessary condition |dx+|_P1^2 <= eta |dx|_P2^2 + ... is tested,
    which follows from the sandwich bounds.
    """
    violations = 0
    worst = np.inf
    worst_sample = None
    for s in samples:
        dx = np.asarray(s.x, float) - np.asarray(s.x_tilde, float)
        dx_next = step(model, s.x, s.u, s.w) - step(model, s.x_tilde, s.u, s.w_tilde)
        dy = output(model, s.x, s.u, s.w) - output(model, s.x_tilde, s.u, s.w_tilde)
        dw = np.asarray(s.w, float) - np.asarray(s.w_tilde, float)
        lhs = _quad(dx_next, params.P1)
        rhs = params.eta * _quad(dx, params.P2) + _quad(dw, params.Q) + _quad(dy, params.R)
        margin = rhs - lhs
        if margin < -1e-12 * max(1.0, abs(rhs)):
            violations += 1
        if margin < worst:
            worst, worst_sample = margin, s
    if violations:
        logger.warning(f"{model.name}: Lyapunov decrease violated in {violations} of {len(samples)} samples (worst margin {worst:.6g})")
    else:
        logger.info(f"{model.name}: Lyapunov decrease holds on all {len(samples)} samples")
    return LyapunovReport(n_samples=len(samples), violations=violations,
                          worst_margin=float(worst) if samples else 0.0, worst_sample=worst_sample)


def sample_pairs(model: SystemModel, n: int, lower, upper, seed: int = 0,
                 noise: Optional[Sequence[float]] = None, inputs=None) -> List[LyapunovSample]:
    """Draw state pairs uniformly in [lower, upper] and disturbances within ``noise``."""
    rng = np.random.default_rng(seed)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (model.n_x,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (model.n_x,))
    amp = np.asarray(noise if noise is not None else model.w_box.upper, dtype=float)
    if not np.all(np.isfinite(amp)):
        raise ValueError("Sampling needs finite disturbance bounds")
    u = np.zeros(model.n_u) if inputs is None else np.asarray(inputs, dtype=float)
    samples = []
    for _ in range(n):
        samples.append(LyapunovSample(
            x=rng.uniform(lower, upper), x_tilde=rng.uniform(lower, upper), u=u,
            w=rng.uniform(-amp, amp), w_tilde=rng.uniform(-amp, amp),
        ))
    return samples


BATCH_REACTOR_P = [[4.539, 4.171], [4.171, 3.834]]


def default_params(model_name: str, alpha: float = 5.0, M: Optional[int] = None,
                   scheme: str = "fixed") -> IossParams:
    """Bundled parameter sets.

    The robot-arm set is a placeholder: it is not a certified Lyapunov function
    and fails the sampled decrease check.
    """
    if model_name == "batch_reactor":
        P = np.array(BATCH_REACTOR_P)
        params = IossParams(P1=P, P2=P, Q=np.diag([1e3, 1e4, 1e3]), R=np.array([[1e3]]),
                            eta=0.91, alpha=alpha, M=1)
    elif model_name == "robot_arm":
        P = 10.0 * np.eye(4)
        params = IossParams(P1=P, P2=P, Q=np.diag([1e4, 1e4, 1e4, 1e4, 4e2, 4e2]),
                            R=4e2 * np.eye(2), eta=0.85, alpha=alpha, M=1)
        logger.warning("robot_arm parameters are placeholders, not a certified Lyapunov function")
    else:
        raise ValueError(f"No bundled parameters for model '{model_name}'")
    if M is None:
        M, _ = min_horizon(params, scheme)
    return IossParams(params.P1, params.P2, params.Q, params.R, params.eta, alpha, M)
