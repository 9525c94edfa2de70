import numpy as np
import pytest
from pydantic import ValidationError

from .errors import DomainError, EmptyObservationError
from . import observation
from .geometry import PointCloud
from .observation import (
	AugmentParams,
	CameraPose,
	augment,
	interpolate_decode_weights,
	observe_cloud,
	random_camera_rig,
	render_partial_cloud,
	sample_surface,
	tokenize_cloud,
	tokenize_mesh,
	visibility_mask,
)


OVERHEAD = CameraPose(position=(0.0, 0.0, 1.0), look_at=(0.0, 0.0, 0.0), fov_deg=90.0)


def _folded(cloth):
	"""Верхняя половина ткани 8x8 отражена поверх нижней и приподнята на 1 см."""
	vertices = cloth.vertices.copy()
	grid = vertices.reshape(8, 8, 3)
	for i in range(4, 8):
		grid[i] = grid[7 - i] + np.array([0.0, 0.0, 0.01])
	return cloth.with_vertices(grid.reshape(-1, 3))


def test_flat_cloth_fully_visible_from_above(cloth, rng):
	cloud = render_partial_cloud(cloth, [OVERHEAD], 4, rng)
	assert len(cloud) == len(cloth.faces) * 4


def test_folded_cloth_hides_lower_layer(cloth, rng):
	folded = _folded(cloth)
	camera = CameraPose(position=(0.0, -0.3, 1.0), look_at=(0.0, 0.0, 0.0), fov_deg=90.0)
	points, _ = sample_surface(folded, 4, rng)
	visible = visibility_mask(folded, points, camera)
	assert 0.0 < visible.mean() < 0.6
	# все видимые точки нижнего слоя лежат у самого края
	lower = points[:, 2] < 0.005
	assert np.all(points[visible & lower, 1] < -0.19)


def test_fused_cameras_see_at_least_as_much(cloth, rng):
	folded = _folded(cloth)
	one = [CameraPose(position=(0.0, -0.6, 0.6), fov_deg=90.0)]
	two = one + [CameraPose(position=(0.0, 0.6, 0.6), fov_deg=90.0)]
	points, _ = sample_surface(folded, 4, rng)
	mask_one = visibility_mask(folded, points, one[0])
	mask_two = mask_one | visibility_mask(folded, points, two[1])
	assert mask_two.sum() >= mask_one.sum()


def test_camera_looking_away_gives_empty_observation(cloth, rng):
	away = CameraPose(position=(0.0, 0.0, 1.0), look_at=(0.0, 0.0, 2.0))
	with pytest.raises(EmptyObservationError):
		render_partial_cloud(cloth, [away], 2, rng)


def test_render_requires_camera(cloth, rng):
	with pytest.raises(DomainError):
		render_partial_cloud(cloth, [], 2, rng)


def test_camera_rejects_degenerate_pose():
	with pytest.raises(ValidationError):
		CameraPose(position=(0.0, 0.0, 0.0), look_at=(0.0, 0.0, 0.0))


def test_random_rig_looks_at_center(rng):
	center = np.array([0.1, -0.2, 0.0])
	for _ in range(10):
		rig = random_camera_rig(center, rng)
		assert 1 <= len(rig) <= 4
		for camera in rig:
			assert np.allclose(camera.look_at, center)
			assert camera.position[2] > center[2]


def test_augment_zero_ranges_is_identity(rng):
	cloud = PointCloud(rng.normal(size=(50, 3)))
	params = AugmentParams(rot_range_deg=0.0, trans_range_m=0.0, dropout_range=(0.0, 0.0), noise_sigma=0.0)
	assert np.array_equal(augment(cloud, params, rng).points, cloud.points)


def test_augment_rigid_part_preserves_distances(rng):
	cloud = PointCloud(rng.normal(size=(40, 3)))
	params = AugmentParams(rot_range_deg=10.0, trans_range_m=0.05, dropout_range=(0.0, 0.0))
	moved = augment(cloud, params, rng).points
	before = np.linalg.norm(cloud.points[:, None] - cloud.points[None], axis=-1)
	after = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
	assert np.allclose(before, after, atol=1e-12)


def test_augment_dropout_count(rng):
	cloud = PointCloud(rng.normal(size=(200, 3)))
	params = AugmentParams(rot_range_deg=0.0, trans_range_m=0.0, dropout_range=(0.1, 0.1))
	assert len(augment(cloud, params, rng)) == 180


def test_augment_params_validate_dropout():
	with pytest.raises(ValidationError):
		AugmentParams(dropout_range=(0.5, 0.2))
	with pytest.raises(ValidationError):
		AugmentParams(rotation=3.0)


def test_tokenize_cloud_groups(rng):
	points = rng.uniform(-0.2, 0.2, size=(300, 3))
	patches = tokenize_cloud(points, n_groups=32, group_size=16, radius=0.15, rng=0)
	assert patches.neighborhoods.shape == (32, 16)
	assert len(np.unique(patches.center_indices)) == 32
	distances = np.linalg.norm(points[patches.neighborhoods] - patches.centers[:, None], axis=-1)
	assert np.all(distances <= 0.15 + 1e-12)
	assert np.array_equal(patches.neighborhoods[:, 0], patches.center_indices)


def test_tokenize_cloud_pads_sparse_neighborhoods():
	points = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
	patches = tokenize_cloud(points, n_groups=2, group_size=3, radius=0.1, rng=0)
	for center, group in zip(patches.center_indices, patches.neighborhoods):
		assert np.all(group == center)


def test_tokenize_cloud_too_few_points():
	with pytest.raises(DomainError):
		tokenize_cloud(np.zeros((4, 3)), n_groups=8)


def test_tokenize_mesh_partitions_vertices(cloth):
	patches = tokenize_mesh(cloth, n_patches=16, seed=0)
	members = np.sort(np.concatenate(patches.groups))
	assert np.array_equal(members, np.arange(cloth.n_vertices))
	again = tokenize_mesh(cloth, cloth.vertices + 1.0, n_patches=16, seed=0)
	assert np.array_equal(again.assignment, patches.assignment)
	index, mask = patches.padded_groups()
	assert index.shape[0] == 16 and mask.sum() == cloth.n_vertices


def test_tokenize_mesh_rejects_too_many_patches(small_cloth):
	with pytest.raises(DomainError):
		tokenize_mesh(small_cloth, n_patches=17)


def test_decode_weights_normalized_and_exact_at_centers(cloth):
	patches = tokenize_mesh(cloth, n_patches=16, seed=0)
	index, weights = interpolate_decode_weights(cloth, patches, k=3)
	assert index.shape == weights.shape == (cloth.n_vertices, 3)
	assert np.allclose(weights.sum(axis=1), 1.0)
	for patch, vertex in enumerate(patches.center_indices):
		assert index[vertex, 0] == patch
		assert weights[vertex, 0] == 1.0


def test_observe_cloud_resamples_cameras_after_empty_render(small_cloth, rng, monkeypatch):
	calls = []
	original = observation.random_camera_rig

	def rig_looking_away_first(center, rng, n_cameras=(1, 4)):
		calls.append(n_cameras)
		if len(calls) == 1:
			return [CameraPose(position=(0.0, 0.0, 1.0), look_at=(0.0, 0.0, 2.0))]
		return original(center, rng, n_cameras)

	monkeypatch.setattr(observation, "random_camera_rig", rig_looking_away_first)
	cloud = observe_cloud(small_cloth, rng, 4)
	assert len(calls) >= 2
	assert len(cloud) > 0


def test_observe_cloud_gives_up_after_retries(small_cloth, rng):
	away = CameraPose(position=(0.0, 0.0, 1.0), look_at=(0.0, 0.0, 2.0))
	with pytest.raises(EmptyObservationError):
		observe_cloud(small_cloth, rng, 2, cameras=[away], max_retries=2)


def test_observe_cloud_resamples_small_clouds(small_cloth, rng, monkeypatch):
	calls = []
	original = observation.random_camera_rig

	def counting_rig(center, rng, n_cameras=(1, 4)):
		calls.append(n_cameras)
		return original(center, rng, n_cameras)

	monkeypatch.setattr(observation, "random_camera_rig", counting_rig)
	with pytest.raises(EmptyObservationError):
		observe_cloud(small_cloth, rng, 2, min_points=10**6, max_retries=3)
	assert len(calls) == 4
	cloud = observe_cloud(small_cloth, rng, 4, cameras=[OVERHEAD], min_points=8)
	assert len(cloud) >= 8
