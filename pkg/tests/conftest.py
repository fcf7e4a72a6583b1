import numpy as np
import pytest

from lyapunov import IossParams, default_params
from model import Box, SystemModel, batch_reactor


def scalar_linear(a: float = 0.9) -> SystemModel:
    """x+ = a x + w1, y = x + w2."""
    return SystemModel(
        name="scalar_linear", n_x=1, n_u=0, n_w=2, n_y=1,
        f=lambda x, u, w: np.array([a * x[0] + w[0]]),
        h=lambda x, u, w: np.array([x[0] + w[1]]),
        x_box=Box.unbounded(1), u_box=Box.unbounded(0), w_box=Box.unbounded(2), y_box=Box.unbounded(1),
    )


@pytest.fixture
def reactor():
    return batch_reactor()


@pytest.fixture
def reactor_params():
    return default_params("batch_reactor", alpha=5.0)


@pytest.fixture
def linear():
    return scalar_linear()


@pytest.fixture
def unit_params():
    return IossParams(P1=[[1.0]], P2=[[1.0]], Q=np.eye(2), R=[[1.0]], eta=0.9, alpha=1.0, M=3)
