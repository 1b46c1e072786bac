import numpy as np
import pytest

from eitopt.fem import ContactImpedances, adjacent_protocol
from eitopt.geometry import square_domain, uniform_layout
from eitopt.mesh import generate_mesh


@pytest.fixture(scope="session")
def square():
    return square_domain()


@pytest.fixture(scope="session")
def square_layout(square):
    return uniform_layout(square, [3, 3, 3, 3], 0.075)


@pytest.fixture(scope="session")
def small_mesh(square, square_layout):
    """Coarse 12-electrode square mesh (~130 nodes), fast to solve."""
    return generate_mesh(square, square_layout, 0.25, 0.0375, seed=1)


@pytest.fixture(scope="session")
def tiny_mesh(square, square_layout):
    """Very coarse mesh (< 100 nodes) for dense-oracle comparisons."""
    return generate_mesh(square, square_layout, 0.34, 0.0375, seed=1)


@pytest.fixture(scope="session")
def z12():
    return ContactImpedances.uniform(12, 1e-5)


@pytest.fixture(scope="session")
def proto12():
    return adjacent_protocol(12)


@pytest.fixture(scope="session")
def random_sigma(small_mesh):
    rng = np.random.default_rng(3)
    return 1.0 + 0.5 * rng.random(small_mesh.n_nodes)
