"""Общие фикстуры тестов."""

import numpy as np
import pytest

from .clothsim import ClothSimulator, SimParams, make_grid_cloth
from .evaluation import tiny_ddm, tiny_dpm


@pytest.fixture
def rng():
	return np.random.default_rng(1234)


@pytest.fixture
def cloth():
	"""Ткань 8x8 со стороной 0.4 м."""
	return make_grid_cloth(8, 8, 0.4 / 7)


@pytest.fixture
def small_cloth():
	"""Ткань 4x4 (16 вершин)."""
	return make_grid_cloth(4, 4, 0.1)


@pytest.fixture
def simulator(cloth):
	return ClothSimulator(cloth, SimParams())


@pytest.fixture
def dpm_model():
	return tiny_dpm()


@pytest.fixture
def ddm_model():
	return tiny_ddm()
