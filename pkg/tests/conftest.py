import numpy as np
import pytest

from zdpolicy.dynamics import CartpoleParams, cartpole_normal_form, cartpole_system, linear_normal_form
from zdpolicy.ocp import QuadraticCost


@pytest.fixture(scope="session")
def cartpole():
    return cartpole_normal_form()


@pytest.fixture(scope="session")
def cartpole_phys():
    return cartpole_system()


@pytest.fixture(scope="session")
def paper_cost():
    return QuadraticCost.identity(4, 0.01)


@pytest.fixture(scope="session")
def double_integrator():
    return linear_normal_form(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([0.0, 1.0]), 2, "double integrator")


@pytest.fixture(scope="session")
def chain4():
    """Linear relative-degree-2 system with coupled, unstable zero coordinates."""
    a = np.array([[0.0, 1.0, 0.0, 0.0],
                  [0.3, -0.2, 1.0, 0.5],
                  [0.0, 0.4, 0.0, 1.0],
                  [1.0, 0.0, 2.0, 0.1]])
    return linear_normal_form(a, np.array([0.0, 1.0, 0.0, 0.0]), 2, "chain4")


@pytest.fixture(scope="session")
def undamped_params():
    return CartpoleParams(damping_threshold=1e12)
