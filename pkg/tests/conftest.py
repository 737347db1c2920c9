import numpy as np
import pytest

from eitlab.fem import ForwardSolver
from eitlab.mesh import build_disk_mesh
from eitlab.phantoms import BACKGROUND_SIGMA


@pytest.fixture(scope="session")
def coarse_mesh():
    return build_disk_mesh(refinement=2)


@pytest.fixture(scope="session")
def fine_mesh():
    return build_disk_mesh(refinement=4)


@pytest.fixture(scope="session")
def coarse_solver(coarse_mesh):
    return ForwardSolver(coarse_mesh)


@pytest.fixture(scope="session")
def sigma_bg(coarse_mesh):
    return np.full(coarse_mesh.n_elements, BACKGROUND_SIGMA)
