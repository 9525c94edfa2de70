import itertools

import numpy as np
import pytest

from .errors import CorrespondenceError, DomainError
from .geometry import ClothMesh, PointCloud, chamfer, emd, fps, load_obj, metric_record, mse, save_obj


def _brute_chamfer(a, b):
	ab = np.mean([min(np.sum((p - q) ** 2) for q in b) for p in a])
	ba = np.mean([min(np.sum((p - q) ** 2) for q in a) for p in b])
	return ab + ba


def _brute_emd(a, b):
	best = np.inf
	for perm in itertools.permutations(range(len(b))):
		best = min(best, np.mean(np.linalg.norm(a - b[list(perm)], axis=1)))
	return best


def test_mse_identical_is_zero(cloth):
	assert mse(cloth, cloth) == 0.0


def test_mse_uniform_shift(cloth):
	shifted = cloth.with_vertices(cloth.vertices + np.array([0.0, 0.0, 0.1]))
	assert mse(cloth, shifted) == pytest.approx(0.01, abs=1e-15)


def test_mse_requires_same_size():
	with pytest.raises(CorrespondenceError):
		mse(np.zeros((4, 3)), np.zeros((5, 3)))


def test_mse_rejects_different_connectivity(cloth):
	other = ClothMesh(cloth.vertices, cloth.edges[:-1], cloth.faces)
	with pytest.raises(CorrespondenceError):
		mse(cloth, other)


def test_chamfer_matches_scan(rng):
	for _ in range(50):
		a = rng.normal(size=(64, 3))
		b = rng.normal(size=(64, 3))
		assert chamfer(a, b) == pytest.approx(_brute_chamfer(a, b), rel=1e-12, abs=1e-12)


def test_chamfer_symmetric_and_zero_on_self(rng):
	a = rng.normal(size=(20, 3))
	b = rng.normal(size=(31, 3))
	assert chamfer(a, a) == 0.0
	assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=1e-12)


def test_chamfer_empty_raises():
	with pytest.raises(DomainError):
		chamfer(np.zeros((0, 3)), np.ones((2, 3)))


def test_emd_matches_brute_force(rng):
	for n in range(1, 8):
		a = rng.normal(size=(n, 3))
		b = rng.normal(size=(n, 3))
		assert emd(a, b) == pytest.approx(_brute_emd(a, b), abs=1e-9)


def test_emd_permutation_invariant(rng):
	a = rng.normal(size=(30, 3))
	perm = rng.permutation(30)
	assert emd(a, a[perm]) == pytest.approx(0.0, abs=1e-12)


def test_emd_downsamples_larger_set(rng):
	a = rng.normal(size=(40, 3))
	b = rng.normal(size=(25, 3))
	assert np.isfinite(emd(a, b))


def test_emd_empty_raises():
	with pytest.raises(DomainError):
		emd(np.zeros((0, 3)), np.zeros((3, 3)))


def test_fps_unique_and_deterministic(rng):
	points = rng.normal(size=(100, 3))
	first = fps(points, 16, seed=3)
	assert len(np.unique(first)) == 16
	assert np.array_equal(first, fps(points, 16, seed=3))


def test_fps_picks_extremes():
	points = np.array([[0.0, 0, 0], [0.1, 0, 0], [1.0, 0, 0], [0.5, 0, 0]])
	assert list(fps(points, 2, start=0)) == [0, 2]


def test_fps_too_many_raises():
	with pytest.raises(DomainError):
		fps(np.zeros((3, 3)), 4)


def test_metric_record_omits_mse_for_unequal_sizes(rng):
	record = metric_record(rng.normal(size=(10, 3)), rng.normal(size=(12, 3)))
	assert set(record) == {"cd", "emd"}
	record = metric_record(rng.normal(size=(10, 3)), rng.normal(size=(10, 3)))
	assert set(record) == {"mse", "cd", "emd"}


def test_point_cloud_rejects_empty_and_nan():
	with pytest.raises(DomainError):
		PointCloud(np.zeros((0, 3)))
	with pytest.raises(DomainError):
		PointCloud(np.array([[0.0, np.nan, 0.0]]))


def test_mesh_rejects_bad_edges():
	vertices = np.zeros((3, 3))
	with pytest.raises(DomainError):
		ClothMesh(vertices, np.array([[0, 3]]), np.zeros((0, 3)))
	with pytest.raises(DomainError):
		ClothMesh(vertices, np.array([[0, 1], [1, 0]]), np.zeros((0, 3)))


def test_with_vertices_shares_connectivity(cloth):
	moved = cloth.with_vertices(cloth.vertices + 1.0)
	assert moved.same_connectivity(cloth)
	assert np.array_equal(moved.rest_lengths, cloth.rest_lengths)
	with pytest.raises(CorrespondenceError):
		cloth.with_vertices(cloth.vertices[:-1])


def test_obj_roundtrip(tmp_path, cloth):
	path = tmp_path / "cloth.obj"
	save_obj(cloth, path)
	loaded = load_obj(path)
	assert np.array_equal(loaded.vertices, cloth.vertices)
	assert np.array_equal(loaded.faces, cloth.faces)
