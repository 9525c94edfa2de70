import numpy as np
import pytest
from pydantic import ValidationError

from .clothsim import ActionStep
from .dynamics import (
	N_FEATURES,
	DdmConfig,
	Transition,
	ddm_denoise,
	grasp_mask,
	mask_to_index,
	predict,
	predict_batch,
	rollout_autoregressive,
	train_ddm,
	transitions_from_trajectory,
)
from .errors import CorrespondenceError, DomainError
from .evaluation import run_gradcheck
from .neural.layers import FourierEmbedderConfig
from .training import TrainConfig


def _history(model, rng):
	canonical = model.canonical.vertices
	return canonical + rng.normal(0.0, 0.005, size=(model.config.n_history_frames,) + canonical.shape)


def test_features_layout(ddm_model, rng):
	history = _history(ddm_model, rng)[None]
	deltas = np.array([[[0.01, 0.0, 0.02], [0.0, 0.03, 0.0]]])
	condition = ddm_model.prepare_condition(history, deltas, grasp_mask(16, 3)[None])
	features = ddm_model.features(np.zeros((1, 2, 16, 3)), condition)
	assert features.shape == (1, 4, 16, N_FEATURES)
	drive = features[..., 11:14]
	assert np.allclose(drive[0, 2:, 3], np.cumsum(deltas[0], axis=0) / ddm_model.config.motion_scale)
	assert np.array_equal(drive[0, :2], np.zeros((2, 16, 3)))
	assert np.array_equal(np.delete(drive[0], 3, axis=1), np.zeros((4, 15, 3)))
	assert np.array_equal(features[0, :, 0, 10], [0.0, 0.0, 1.0, 1.0])


def test_features_carry_frame_positions(ddm_model, rng):
	history = _history(ddm_model, rng)[None]
	condition = ddm_model.prepare_condition(history, np.zeros((1, 2, 3)), grasp_mask(16, None)[None])
	features = ddm_model.features(np.zeros((1, 2, 16, 3)), condition)
	positions = features[0, :, :, 14:17]
	assert np.array_equal(positions[:2], condition.history[0])
	assert np.array_equal(positions[2], condition.history[0, -1])
	assert np.array_equal(positions[3], condition.history[0, -1])
	assert np.array_equal(features[0, 0, :, :3], condition.history[0, -1])


def test_denoiser_output_shape(ddm_model, rng):
	out = ddm_denoise(ddm_model, rng.normal(size=(2, 16, 3)), 4, _history(ddm_model, rng), np.zeros((2, 3)), grasp_mask(16, None))
	assert out.shape == (2, 16, 3)
	with pytest.raises(DomainError):
		ddm_denoise(ddm_model, rng.normal(size=(3, 16, 3)), 4, _history(ddm_model, rng), np.zeros((2, 3)), grasp_mask(16, None))


def test_condition_validates_shapes(ddm_model, rng):
	history = _history(ddm_model, rng)
	with pytest.raises(DomainError):
		ddm_model.prepare_condition(history[None, :1], np.zeros((1, 2, 3)), np.zeros((1, 16)))
	with pytest.raises(CorrespondenceError):
		ddm_model.prepare_condition(history[None, :, :15], np.zeros((1, 2, 3)), np.zeros((1, 15)))
	with pytest.raises(DomainError):
		ddm_model.prepare_condition(history[None], np.zeros((1, 3, 3)), np.zeros((1, 16)))


def test_residual_roundtrip(ddm_model, rng):
	history = _history(ddm_model, rng)[None]
	future = rng.normal(size=(1, 2, 16, 3))
	residual = ddm_model.to_residual(future, history)
	assert np.allclose(ddm_model.from_residual(residual, history), future)


def test_grasp_mask_conversion():
	assert mask_to_index(grasp_mask(16, 7)) == 7
	assert mask_to_index(grasp_mask(16, None)) is None
	with pytest.raises(DomainError):
		mask_to_index(np.ones(16))


def test_predict_batch_shapes_and_reproducibility(ddm_model, rng):
	history = _history(ddm_model, rng)
	deltas = rng.uniform(-0.05, 0.05, size=(5, 2, 3))
	first = predict_batch(ddm_model, history, deltas, 0, np.random.default_rng(3), sampling_steps=4)
	second = predict_batch(ddm_model, history, deltas, 0, np.random.default_rng(3), sampling_steps=4)
	assert first.shape == (5, 2, 16, 3)
	assert np.array_equal(first, second)


def test_predict_returns_meshes(ddm_model, rng):
	meshes = predict(ddm_model, _history(ddm_model, rng), np.zeros((2, 3)), grasp_mask(16, 2), rng)
	assert len(meshes) == 2
	assert all(m.same_connectivity(ddm_model.canonical) for m in meshes)


def test_rollout_pads_to_chunks(ddm_model, rng):
	actions = [ActionStep(1, np.array([0.02, 0.0, 0.0]))] * 3
	frames = rollout_autoregressive(ddm_model, _history(ddm_model, rng), actions, rng, sampling_steps=3)
	assert len(frames) == 3
	assert all(np.all(np.isfinite(f.vertices)) for f in frames)
	with pytest.raises(DomainError):
		rollout_autoregressive(ddm_model, _history(ddm_model, rng), [], rng)


def test_transitions_skip_mixed_grasp(rng):
	states = rng.normal(size=(7, 16, 3))
	deltas = rng.normal(size=(6, 3))
	grasp = np.array([2, 2, 2, -1, -1, -1])
	transitions = transitions_from_trajectory(states, deltas, grasp, history=1, future=2)
	assert len(transitions) == 4
	assert [t.grasp_index for t in transitions] == [2, 2, None, None]
	first = transitions[0]
	assert np.array_equal(first.history, states[[0, 0]])
	assert np.array_equal(first.future, states[1:3])
	assert np.array_equal(transitions[2].history, states[2:4])
	with pytest.raises(DomainError):
		transitions_from_trajectory(states[:-1], deltas, grasp)


def test_transition_validation(rng):
	history = rng.normal(size=(2, 16, 3))
	future = rng.normal(size=(2, 16, 3))
	with pytest.raises(DomainError):
		Transition(history, np.zeros((3, 3)), None, future)
	with pytest.raises(DomainError):
		Transition(history, np.zeros((2, 3)), 16, future)
	with pytest.raises(CorrespondenceError):
		Transition(history, np.zeros((2, 3)), None, future[:, :8])


def test_train_ddm_records_losses(ddm_model, rng):
	states = ddm_model.canonical.vertices + rng.normal(0.0, 0.01, size=(7, 16, 3))
	transitions = transitions_from_trajectory(states, rng.uniform(-0.05, 0.05, (6, 3)), np.zeros(6, dtype=int), 1, 2)
	result = train_ddm(ddm_model, transitions, TrainConfig(steps=4, batch_size=2, warmup=0, log_every=2))
	assert len(result.losses) == 4
	assert np.all(np.isfinite(result.losses))


def test_config_requires_matching_token_width():
	with pytest.raises(ValidationError):
		DdmConfig(action_embedder=FourierEmbedderConfig(out_dim=36))


def test_ddm_parameter_gradients():
	results = run_gradcheck("ddm", seed=0)
	failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
	assert results and not failed
