import numpy as np
import pytest

from helpers import single_triangle
from thermodamage.mesh import generate_unit_square


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def square4():
    return generate_unit_square(4, ["left"])


@pytest.fixture
def triangle():
    return single_triangle()
