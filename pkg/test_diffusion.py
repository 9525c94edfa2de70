import numpy as np
import pytest
from pydantic import ValidationError

from .diffusion import NoiseSchedule, ScheduleConfig, forward_noise, sample, step_embedding, training_loss
from .errors import DomainError, SamplingError
from .neural.tensor import Tensor


def _oracle(s0, schedule):
	"""Денойзер, знающий чистые данные: возвращает точный шум."""
	def model(noisy, k, condition):
		ab = schedule.alpha_bar(np.asarray(k)).reshape(-1, *([1] * (noisy.ndim - 1)))
		return Tensor((noisy - np.sqrt(ab) * s0) / np.sqrt(1.0 - ab))
	return model


def test_linear_schedule():
	schedule = NoiseSchedule.linear(100)
	assert schedule.T == 100
	assert schedule.betas[0] == pytest.approx(1e-4)
	assert schedule.betas[-1] == pytest.approx(0.02)
	assert np.all(np.diff(schedule.alphas_bar) < 0)
	assert schedule.alpha_bar(1) == pytest.approx(1.0 - 1e-4)
	with pytest.raises(DomainError):
		schedule.alpha_bar(0)
	with pytest.raises(DomainError):
		schedule.alpha_bar(101)


def test_respaced_schedule_keeps_alpha_bar():
	full = NoiseSchedule.linear(100)
	short = full.respaced(10)
	assert short.T == 10
	assert short.timesteps[0] == 1 and short.timesteps[-1] == 100
	assert np.allclose(short.alphas_bar, full.alpha_bar(short.timesteps))
	assert np.allclose(np.cumprod(1.0 - short.betas), short.alphas_bar)
	assert full.respaced(100) is full
	with pytest.raises(DomainError):
		full.respaced(101)


def test_schedule_dict_roundtrip():
	schedule = NoiseSchedule.linear(20).respaced(5)
	restored = NoiseSchedule.from_dict(schedule.to_dict())
	assert np.allclose(restored.alphas_bar, schedule.alphas_bar)
	assert np.array_equal(restored.timesteps, schedule.timesteps)


def test_schedule_config_validation():
	with pytest.raises(ValidationError):
		ScheduleConfig(n_steps=10, sampling_steps=11)
	with pytest.raises(ValidationError):
		ScheduleConfig(beta_start=0.02, beta_end=0.01)
	with pytest.raises(ValidationError):
		ScheduleConfig(kind="cosine")


@pytest.mark.parametrize("k", [1, 50, 100])
def test_forward_noise_marginals(rng, k):
	schedule = NoiseSchedule.linear(100)
	s0 = np.array([0.3, -0.7, 1.2])
	eps = rng.standard_normal((200000, 3))
	noisy = forward_noise(np.broadcast_to(s0, eps.shape), k, eps, schedule)
	ab = schedule.alpha_bar(k)
	assert np.allclose(noisy.mean(axis=0), np.sqrt(ab) * s0, atol=0.01)
	assert np.allclose(noisy.var(axis=0), 1.0 - ab, atol=0.01)


def test_forward_noise_per_sample_steps(rng):
	schedule = NoiseSchedule.linear(10)
	s0 = rng.normal(size=(3, 4, 3))
	eps = rng.normal(size=s0.shape)
	k = np.array([1, 5, 10])
	noisy = forward_noise(s0, k, eps, schedule)
	for i in range(3):
		assert np.allclose(noisy[i], forward_noise(s0[i], k[i], eps[i], schedule))
	with pytest.raises(DomainError):
		forward_noise(s0, k, eps[:2], schedule)


@pytest.mark.parametrize("n_steps", [1, 2, 5, 10])
def test_sampling_with_exact_noise_recovers_data(rng, n_steps):
	schedule = NoiseSchedule.linear(n_steps, 1e-4, 0.2) if n_steps > 1 else NoiseSchedule.linear(1, 0.1, 0.1)
	s0 = rng.normal(size=(2, 5, 3))
	result = sample(_oracle(s0, schedule), None, s0.shape, schedule, rng)
	assert np.allclose(result, s0, atol=1e-8)


def test_respaced_sampling_with_exact_noise(rng):
	full = NoiseSchedule.linear(100)
	s0 = rng.normal(size=(1, 4, 3))
	result = sample(_oracle(s0, full), None, s0.shape, full.respaced(7), rng, posterior_variance=False)
	assert np.allclose(result, s0, atol=1e-8)


def test_training_loss_is_zero_for_exact_noise(rng):
	schedule = NoiseSchedule.linear(10)
	s0 = rng.normal(size=(4, 6, 3))
	assert training_loss(_oracle(s0, schedule), s0, None, rng, schedule).item() < 1e-20


def test_sampling_rejects_non_finite_output(rng):
	schedule = NoiseSchedule.linear(10)

	def broken(noisy, k, condition):
		return Tensor(np.full(noisy.shape, np.nan))

	with pytest.raises(SamplingError) as info:
		sample(broken, None, (1, 2, 3), schedule, rng)
	assert info.value.k == 10


def test_step_embedding():
	embedding = step_embedding(np.array([0, 7]), 8)
	assert embedding.shape == (2, 8)
	assert np.array_equal(embedding[0, 0::2], np.zeros(4))
	assert np.array_equal(embedding[0, 1::2], np.ones(4))
	assert embedding[1, 0] == pytest.approx(np.sin(7.0))
	with pytest.raises(DomainError):
		step_embedding(3, 7)
