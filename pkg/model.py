import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

Linearization = Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]


@dataclass(frozen=True, eq=False)
class Box:
    """Per-coordinate interval set, infinite bounds allowed."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape:
            raise ValueError(f"Box bounds differ in size: {lower.size} vs {upper.size}")
        if np.any(lower > upper):
            raise ValueError(f"Box lower bound exceeds upper bound: {lower} > {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def unbounded(cls, n: int) -> "Box":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @classmethod
    def symmetric(cls, amplitudes: Sequence[float]) -> "Box":
        a = np.abs(np.asarray(amplitudes, dtype=float))
        return cls(-a, a)

    @property
    def size(self) -> int:
        return self.lower.size

    @property
    def is_finite(self) -> bool:
        return bool(np.any(np.isfinite(self.lower)) or np.any(np.isfinite(self.upper)))

    def contains(self, v, tol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))

    def project(self, v) -> np.ndarray:
        return np.clip(np.asarray(v, dtype=float), self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Discrete-time system x+ = f(x, u, w), y = h(x, u, w) with box sets.

    ``jacobian`` optionally returns ``(df/dx, df/dw, dh/dx, dh/dw)`` at a point;
    models without it are linearised by forward differences.
    """

    name: str
    n_x: int
    n_u: int
    n_w: int
    n_y: int
    f: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    x_box: Box
    u_box: Box
    w_box: Box
    y_box: Box
    jacobian: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], Linearization]] = None

    def __post_init__(self):
        for label, box, n in (("x_box", self.x_box, self.n_x), ("u_box", self.u_box, self.n_u),
                              ("w_box", self.w_box, self.n_w), ("y_box", self.y_box, self.n_y)):
            if box.size != n:
                raise ValueError(f"{self.name}: {label} has {box.size} entries, expected {n}")
        if not self.w_box.contains(np.zeros(self.n_w)):
            raise ValueError(f"{self.name}: the zero disturbance must lie inside w_box")


@dataclass(frozen=True)
class NoiseSpec:
    """Bounded uniform disturbance, i.i.d. per coordinate and step.

    Draws for step ``t`` come from a Philox stream keyed by ``(seed, t)``, so any
    sample can be regenerated without replaying the sequence. From ``cutoff`` on
    the disturbance is zero.
    """

    amplitudes: Tuple[float, ...]
    seed: int = 0
    distribution: str = "uniform"
    cutoff: Optional[int] = None

    def __post_init__(self):
        amplitudes = tuple(float(a) for a in self.amplitudes)
        if any(a < 0 or not np.isfinite(a) for a in amplitudes):
            raise ValueError(f"Noise amplitudes must be finite and nonnegative: {amplitudes}")
        if self.distribution != "uniform":
            raise ValueError(f"Unsupported noise distribution: {self.distribution}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError(f"Noise seed must fit in 64 bits: {self.seed}")
        object.__setattr__(self, "amplitudes", amplitudes)

    def sample(self, t: int) -> np.ndarray:
        a = np.asarray(self.amplitudes)
        if self.cutoff is not None and t >= self.cutoff:
            return np.zeros_like(a)
        rng = np.random.Generator(np.random.Philox(key=(int(self.seed) << 64) | int(t)))
        return rng.uniform(-a, a) if a.size else a.copy()


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    outputs: np.ndarray
    noises: np.ndarray
    inputs: np.ndarray
    box_violations: Tuple[Tuple[int, str], ...] = field(default_factory=tuple)

    @property
    def T(self) -> int:
        return self.outputs.shape[0]


def _vector(label: str, v, n: int) -> np.ndarray:
    if v is None and n == 0:
        return np.zeros(0)
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.size != n:
        raise ValueError(f"{label} has dimension {arr.size}, expected {n}")
    return arr


def step(model: SystemModel, x, u, w) -> np.ndarray:
    x = _vector("state", x, model.n_x)
    u = _vector("input", u, model.n_u)
    w = _vector("disturbance", w, model.n_w)
    return np.asarray(model.f(x, u, w), dtype=float).reshape(model.n_x)


def output(model: SystemModel, x, u, w) -> np.ndarray:
    x = _vector("state", x, model.n_x)
    u = _vector("input", u, model.n_u)
    w = _vector("disturbance", w, model.n_w)
    return np.asarray(model.h(x, u, w), dtype=float).reshape(model.n_y)


def linearize(model: SystemModel, x, u, w, rel_step: float = 1e-6) -> Linearization:
    """Jacobians ``(A, B, C, D)`` of f and h with respect to x and w."""
    x = _vector("state", x, model.n_x)
    u = _vector("input", u, model.n_u)
    w = _vector("disturbance", w, model.n_w)
    if model.jacobian is not None:
        return tuple(np.asarray(m, dtype=float) for m in model.jacobian(x, u, w))

    fx = np.asarray(model.f(x, u, w), dtype=float).reshape(model.n_x)
    hx = np.asarray(model.h(x, u, w), dtype=float).reshape(model.n_y)
    A = np.empty((model.n_x, model.n_x))
    C = np.empty((model.n_y, model.n_x))
    B = np.empty((model.n_x, model.n_w))
    D = np.empty((model.n_y, model.n_w))
    for i in range(model.n_x):
        h = rel_step * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] += h
        A[:, i] = (np.asarray(model.f(xp, u, w)).reshape(model.n_x) - fx) / h
        C[:, i] = (np.asarray(model.h(xp, u, w)).reshape(model.n_y) - hx) / h
    for i in range(model.n_w):
        h = rel_step * max(1.0, abs(w[i]))
        wp = w.copy()
        wp[i] += h
        B[:, i] = (np.asarray(model.f(x, u, wp)).reshape(model.n_x) - fx) / h
        D[:, i] = (np.asarray(model.h(x, u, wp)).reshape(model.n_y) - hx) / h
    return A, B, C, D


def simulate(model: SystemModel, x0, inputs, noise: NoiseSpec, T: int) -> Trajectory:
    """Roll the system forward ``T`` steps under seeded noise.

    Box-set violations are recorded in ``box_violations`` as ``(t, set)`` pairs
    instead of aborting the run.
    """
    if T < 1:
        raise ValueError(f"Simulation length must be at least 1, got {T}")
    if len(noise.amplitudes) != model.n_w:
        raise ValueError(f"Noise has {len(noise.amplitudes)} amplitudes, model expects {model.n_w}")
    if np.any(np.asarray(noise.amplitudes) > model.w_box.upper) or np.any(-np.asarray(noise.amplitudes) < model.w_box.lower):
        raise ValueError(f"Noise amplitudes {noise.amplitudes} exceed the disturbance set of {model.name}")

    x = _vector("initial state", x0, model.n_x)
    if not model.x_box.contains(x):
        raise ValueError(f"Initial state {x} lies outside x_box")
    if inputs is None:
        inputs = np.zeros((T, model.n_u))
    inputs = np.asarray(inputs, dtype=float)
    inputs = inputs.reshape(len(inputs), 0) if model.n_u == 0 else inputs.reshape(-1, model.n_u)
    if inputs.shape[0] < T:
        raise ValueError(f"Need {T} inputs, got {inputs.shape[0]}")

    states = np.empty((T + 1, model.n_x))
    outputs = np.empty((T, model.n_y))
    noises = np.empty((T, model.n_w))
    violations = []
    states[0] = x
    for t in range(T):
        w = noise.sample(t)
        u = inputs[t]
        if not model.u_box.contains(u):
            violations.append((t, "U"))
        noises[t] = w
        outputs[t] = output(model, states[t], u, w)
        if not model.y_box.contains(outputs[t]):
            violations.append((t, "Y"))
        states[t + 1] = step(model, states[t], u, w)
        if not model.x_box.contains(states[t + 1]):
            violations.append((t + 1, "X"))

    if violations:
        logger.warning(f"{model.name}: {len(violations)} box-set violations during simulation, first at t={violations[0][0]} ({violations[0][1]})")
    return Trajectory(states=states, outputs=outputs, noises=noises,
                      inputs=inputs[:T].copy(), box_violations=tuple(violations))


def batch_reactor(k1: float = 0.16, k2: float = 0.0064, tau: float = 0.1,
                  w_bounds: Sequence[float] = (1e-3, 1e-3, 0.1)) -> SystemModel:
    """Euler-discretised reversible reaction 2A <-> B with measured total pressure."""

    def f(x, u, w):
        return np.array([
            x[0] + tau * (-2.0 * k1 * x[0] ** 2 + 2.0 * k2 * x[1]) + w[0],
            x[1] + tau * (k1 * x[0] ** 2 - k2 * x[1]) + w[1],
        ])

    def h(x, u, w):
        return np.array([x[0] + x[1] + w[2]])

    def jacobian(x, u, w):
        A = np.array([[1.0 - 4.0 * tau * k1 * x[0], 2.0 * tau * k2],
                      [2.0 * tau * k1 * x[0], 1.0 - tau * k2]])
        B = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        C = np.array([[1.0, 1.0]])
        D = np.array([[0.0, 0.0, 1.0]])
        return A, B, C, D

    return SystemModel(
        name="batch_reactor", n_x=2, n_u=0, n_w=3, n_y=1, f=f, h=h,
        x_box=Box(np.zeros(2), np.full(2, np.inf)),
        u_box=Box.unbounded(0),
        w_box=Box.symmetric(w_bounds),
        y_box=Box.unbounded(1),
        jacobian=jacobian,
    )


# two-link planar arm, point masses at the link ends
ARM_MASSES = (1.0, 1.0)
ARM_LENGTHS = (1.0, 1.0)
GRAVITY = 9.81


def _arm_terms(q, qd, gravity: bool):
    m1, m2 = ARM_MASSES
    a1, a2 = ARM_LENGTHS
    g = GRAVITY if gravity else 0.0
    c2, s2 = np.cos(q[1]), np.sin(q[1])
    m11 = (m1 + m2) * a1 ** 2 + m2 * a2 ** 2 + 2.0 * m2 * a1 * a2 * c2
    m12 = m2 * a2 ** 2 + m2 * a1 * a2 * c2
    inertia = np.array([[m11, m12], [m12, m2 * a2 ** 2]])
    coriolis = np.array([
        -m2 * a1 * a2 * (2.0 * qd[0] * qd[1] + qd[1] ** 2) * s2,
        m2 * a1 * a2 * qd[0] ** 2 * s2,
    ])
    grav = np.array([
        (m1 + m2) * g * a1 * np.cos(q[0]) + m2 * g * a2 * np.cos(q[0] + q[1]),
        m2 * g * a2 * np.cos(q[0] + q[1]),
    ])
    return inertia, coriolis, grav


def robot_arm_continuous(x, torque=(0.0, 0.0), gravity: bool = True) -> np.ndarray:
    """Continuous-time vector field of the arm, state [q1, q2, dq1, dq2]."""
    x = np.asarray(x, dtype=float)
    q, qd = x[:2], x[2:]
    inertia, coriolis, grav = _arm_terms(q, qd, gravity)
    qdd = np.linalg.solve(inertia, np.asarray(torque, dtype=float) - coriolis - grav)
    return np.concatenate([qd, qdd])


def robot_arm_energy(x, gravity: bool = True) -> float:
    x = np.asarray(x, dtype=float)
    q, qd = x[:2], x[2:]
    inertia, _, _ = _arm_terms(q, qd, gravity)
    m1, m2 = ARM_MASSES
    a1, a2 = ARM_LENGTHS
    g = GRAVITY if gravity else 0.0
    potential = (m1 + m2) * g * a1 * np.sin(q[0]) + m2 * g * a2 * np.sin(q[0] + q[1])
    return float(0.5 * qd @ inertia @ qd + potential)


def robot_arm(tau: float = 0.005, measurement_noise: float = 0.05, process_noise: float = 0.01,
              gravity: bool = True) -> SystemModel:
    """Euler-discretised two-link arm; the input is the joint torque vector."""

    def f(x, u, w):
        return x + tau * robot_arm_continuous(x, u, gravity) + w[:4]

    def h(x, u, w):
        return x[:2] + w[4:]

    return SystemModel(
        name="robot_arm", n_x=4, n_u=2, n_w=6, n_y=2, f=f, h=h,
        x_box=Box.unbounded(4),
        u_box=Box.unbounded(2),
        w_box=Box.symmetric([process_noise] * 4 + [measurement_noise] * 2),
        y_box=Box.unbounded(2),
    )


MODEL_REGISTRY: Dict[str, Callable[..., SystemModel]] = {
    "batch_reactor": batch_reactor,
    "robot_arm": robot_arm,
}


def register_model(name: str, factory: Callable[..., SystemModel]) -> None:
    if name in MODEL_REGISTRY:
        logger.warning(f"Replacing registered model factory: {name}")
    MODEL_REGISTRY[name] = factory


def get_model(name: str, **kwargs) -> SystemModel:
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise ValueError(f"Unknown model '{name}', known models: {', '.join(sorted(MODEL_REGISTRY))}") from None
    logger.debug(f"Building model {name} with options {kwargs}")
    return factory(**kwargs)
