import numpy as np
import pytest
from pydantic import ValidationError

from . import planner
from .clothsim import ClothSimulator, SimParams
from .errors import CorrespondenceError, DomainError, PlanningError
from .geometry import mse
from .planner import (
	DdmOracle,
	EpisodeResult,
	MpcConfig,
	PlannerConfig,
	SimulatorOracle,
	evaluate_samples,
	fold_target,
	grasp_probabilities,
	informed_direction,
	initial_mean,
	mpc_episode,
	plan,
	random_episode,
	success_curve,
	trajectory_costs,
	update_distribution,
)


class PointMassOracle:
	"""Вся ткань сдвигается на накопленное действие."""

	thread_safe = True

	def __call__(self, history, grasp_index, deltas):
		offsets = np.cumsum(np.asarray(deltas), axis=1)
		return np.asarray(history)[-1][None, None] + offsets[:, :, None, :]


class TargetOracle:
	"""Любая последовательность сразу приводит в цель."""

	thread_safe = False

	def __init__(self, target):
		self.target = target

	def __call__(self, history, grasp_index, deltas):
		count, length = np.asarray(deltas).shape[:2]
		return np.broadcast_to(self.target.vertices, (count, length) + self.target.vertices.shape)


def _shifted(mesh, offset):
	return mesh.with_vertices(mesh.vertices + np.asarray(offset))


def test_planner_config_validation():
	with pytest.raises(ValidationError):
		PlannerConfig(n_samples=15)
	with pytest.raises(ValidationError):
		PlannerConfig(action_bounds=(0.05, -0.05))
	assert PlannerConfig().mid_magnitude == pytest.approx(0.035)


def test_grasp_probabilities_prefer_large_displacement(cloth):
	vertices = cloth.vertices.copy()
	vertices[10, 2] += 0.1
	probs = grasp_probabilities(cloth, cloth.with_vertices(vertices), 0.05)
	assert probs.sum() == pytest.approx(1.0)
	assert int(np.argmax(probs)) == 10
	assert np.allclose(np.delete(probs, 10), probs[0])


def test_grasp_probabilities_need_same_connectivity(cloth, small_cloth):
	with pytest.raises(CorrespondenceError):
		grasp_probabilities(cloth, small_cloth, 0.05)


def test_informed_mean_points_toward_target(cloth):
	config = PlannerConfig()
	target = _shifted(cloth, [0.1, 0.0, 0.0])
	direction = informed_direction(cloth, target, 0, 10, 1e-3)
	assert direction[0] > 0
	assert direction[1:] == pytest.approx([0.0, 0.0], abs=1e-12)
	mean = initial_mean(direction, config)
	assert mean.shape == (5, 3)
	assert np.allclose(mean, [[0.035, 0.0, 0.0]] * 5)
	assert np.array_equal(initial_mean(np.zeros(3), config), np.zeros((5, 3)))
	with pytest.raises(DomainError):
		informed_direction(cloth, target, 0, 65, 1e-3)


def test_update_distribution_weights():
	samples = np.arange(12.0).reshape(3, 2, 2)
	mean, std = update_distribution(samples, np.zeros(3), 1.0)
	assert np.allclose(mean, samples.mean(axis=0))
	assert np.allclose(std, samples.std(axis=0))
	mean, std = update_distribution(samples, np.array([5.0, 0.0, 5.0]), 1e-3)
	assert np.allclose(mean, samples[1])
	assert np.allclose(std, 0.0)


def test_trajectory_costs_smoothness(cloth):
	config = PlannerConfig(w_mse=0.0, w_cd=0.0, w_smooth=1.0)
	final = np.broadcast_to(cloth.vertices, (2,) + cloth.vertices.shape)
	deltas = np.zeros((2, 3, 3))
	deltas[1, 1, 0] = 0.02
	costs = trajectory_costs(final, cloth, deltas, config)
	assert costs[0] == 0.0
	assert costs[1] == pytest.approx(2 * 0.02 ** 2)


def test_exact_oracle_keeps_informed_mean(cloth, rng):
	target = _shifted(cloth, [0.1, 0.05, 0.0])
	config = PlannerConfig(n_iterations=3, n_samples=8)
	result = plan(TargetOracle(target), cloth.vertices[None], target, config, rng, grasp_index=0)
	direction = informed_direction(cloth, target, 0, config.informed_k, config.epsilon)
	assert result.best_cost == 0.0
	assert np.allclose(result.deltas, initial_mean(direction, config))
	assert all(a.grasp_index == 0 for a in result.best_actions)


def test_std_is_annealed(cloth, rng):
	target = _shifted(cloth, [0.05, 0.0, 0.0])
	config = PlannerConfig(n_iterations=5, n_samples=8)
	result = plan(PointMassOracle(), cloth.vertices[None], target, config, rng)
	assert len(result.std_history) == 5
	expected = 0.1 * 1.0 * 0.8 * 0.6 * 0.4 * 0.2
	assert np.allclose(result.std_history[-1], expected)
	assert all(b <= a for a, b in zip(result.cost_history, result.cost_history[1:]))


def test_point_mass_reaches_target(cloth, rng):
	target = _shifted(cloth, [0.1, 0.0, 0.0])
	config = PlannerConfig(seq_length=3)
	result = plan(PointMassOracle(), cloth.vertices[None], target, config, rng)
	mean_cost = trajectory_costs(
		PointMassOracle()(cloth.vertices[None], None, initial_mean(np.array([1.0, 0.0, 0.0]), config)[None])[:, -1],
		target,
		initial_mean(np.array([1.0, 0.0, 0.0]), config)[None],
		config,
	)[0]
	assert result.best_cost <= mean_cost
	reached = cloth.vertices + result.deltas.sum(axis=0)
	assert np.sqrt(mse(reached, target.vertices)) < 0.02


def test_parallel_evaluation_matches_serial(cloth, rng):
	samples = rng.uniform(-0.05, 0.05, size=(8, 3, 3))
	history = cloth.vertices[None]
	serial = evaluate_samples(PointMassOracle(), history, 0, samples, workers=1)
	parallel = evaluate_samples(PointMassOracle(), history, 0, samples, workers=3)
	assert np.array_equal(serial, parallel)


def test_failing_sample_is_reported(cloth):
	def oracle(history, grasp_index, deltas):
		if np.any(deltas[:, 0, 0] > 1.0):
			raise ValueError("вне области")
		return PointMassOracle()(history, grasp_index, deltas)

	samples = np.zeros((4, 2, 3))
	samples[2, 0, 0] = 2.0
	with pytest.raises(PlanningError) as info:
		evaluate_samples(oracle, cloth.vertices[None], 0, samples)
	assert info.value.sample_id == 2


def test_simulator_oracle_batches(simulator, cloth, rng):
	deltas = rng.uniform(-0.03, 0.03, size=(3, 2, 3))
	deltas[..., 2] = np.abs(deltas[..., 2])
	frames = SimulatorOracle(simulator)(cloth.vertices[None], 5, deltas)
	assert frames.shape == (3, 2, 64, 3)
	assert np.allclose(frames[:, -1, 5], cloth.vertices[5] + deltas.sum(axis=1))


def test_ddm_oracle_shape(ddm_model, rng):
	history = ddm_model.canonical.vertices[None]
	frames = DdmOracle(ddm_model, rng, sampling_steps=2)(history, 0, np.zeros((3, 3, 3)))
	assert frames.shape == (3, 3, 16, 3)


def test_fold_target_diagonal(cloth):
	target = fold_target(cloth, "diagonal", lift=0.01)
	moved = np.flatnonzero(target.vertices[:, 2] - cloth.vertices[:, 2] > 0.005)
	assert len(moved) == 28
	assert np.allclose(target.vertices[moved, 2], cloth.vertices[moved, 2] + 0.01)
	rel = target.vertices - cloth.vertices.mean(axis=0)
	assert np.all(rel[:, 0] + rel[:, 1] <= 1e-9)


def test_fold_target_half(cloth):
	target = fold_target(cloth, "half", lift=0.0)
	rel = target.vertices - cloth.vertices.mean(axis=0)
	assert np.all(rel[:, 1] <= 1e-9)
	assert target.same_connectivity(cloth)
	with pytest.raises(DomainError):
		fold_target(cloth, "quarter")


def test_success_curve():
	episodes = [EpisodeResult([1.0, 0.5, 0.1], True, 2), EpisodeResult([1.0, 0.9], False, None)]
	assert success_curve(episodes, [0.2, 0.6, 0.95]) == [(0.2, 0.5), (0.6, 0.5), (0.95, 1.0)]
	assert episodes[0].reduction == pytest.approx(0.9)


def test_episode_at_target_succeeds_immediately(small_cloth, rng):
	simulator = ClothSimulator(small_cloth, SimParams())
	result = mpc_episode(simulator, small_cloth, small_cloth, PlannerConfig(), rng)
	assert result.success and result.success_step == 0
	assert result.emd == [0.0]


def test_mpc_episode_records_steps(small_cloth, rng):
	simulator = ClothSimulator(small_cloth, SimParams())
	target = fold_target(small_cloth, "half")
	config = PlannerConfig(n_iterations=1, n_samples=4, seq_length=2, informed_k=4)
	result = mpc_episode(simulator, small_cloth, target, config, rng, MpcConfig(max_steps=2, success_ratio=0.01))
	assert result.error is None
	assert len(result.emd) == 3
	assert len(result.grasps) == 2
	assert len(result.actions) == 4
	assert set(result.to_dict()) == {"emd", "success", "success_step", "grasps", "actions", "failure_step", "error"}


def test_random_episode_stays_in_bounds(small_cloth, rng):
	simulator = ClothSimulator(small_cloth, SimParams())
	target = fold_target(small_cloth, "diagonal")
	config = PlannerConfig(seq_length=3)
	result = random_episode(simulator, small_cloth, target, config, rng, MpcConfig(max_steps=2, success_ratio=0.01))
	assert len(result.emd) == 3
	assert np.all(np.abs(result.actions) <= 0.05)


def test_perception_is_conditioned_on_model_canonical(small_cloth, dpm_model, rng, monkeypatch):
	seen = []

	def exact_estimate(model, canonical, cloud, rng, n_samples=1, sampling_steps=None):
		seen.append((canonical, len(cloud)))
		return small_cloth

	monkeypatch.setattr(planner, "estimate_state", exact_estimate)
	simulator = ClothSimulator(small_cloth, SimParams())
	target = fold_target(small_cloth, "half")
	config = PlannerConfig(n_iterations=1, n_samples=4, seq_length=2, informed_k=4)
	mpc = MpcConfig(max_steps=1, success_ratio=0.01, samples_per_face=4)
	result = mpc_episode(simulator, small_cloth, target, config, rng, mpc, dpm=dpm_model)
	assert result.error is None
	assert seen
	for canonical, n_points in seen:
		assert canonical is dpm_model.canonical
		assert n_points >= dpm_model.config.n_groups
