"""DDPM: расписание шума, прямое зашумление, функция потерь и предковое сэмплирование."""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Protocol, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import DomainError, SamplingError
from .neural.tensor import Tensor, mse_loss, no_grad


logger = logging.getLogger(__name__)


class ScheduleConfig(BaseModel):
	model_config = ConfigDict(extra="forbid")

	n_steps: int = Field(default=100, ge=1)
	beta_start: float = Field(default=1e-4, gt=0, lt=1)
	beta_end: float = Field(default=0.02, gt=0, lt=1)
	kind: str = "linear"
	sampling_steps: Optional[int] = Field(default=None, ge=1, description="Число обратных шагов (по умолчанию T)")
	posterior_variance: bool = True

	@model_validator(mode="after")
	def _check(self):
		if self.kind != "linear":
			raise ValueError(f"Неизвестный тип расписания {self.kind!r}")
		if self.n_steps > 1 and self.beta_end <= self.beta_start:
			raise ValueError("beta_end должен быть больше beta_start")
		if self.sampling_steps is not None and self.sampling_steps > self.n_steps:
			raise ValueError("sampling_steps не может превышать n_steps")
		return self


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
	"""β_k и ᾱ_k = Π(1 − β_s); timesteps - исходные номера шагов (для пересэмплированных расписаний)."""

	betas: np.ndarray
	alphas_bar: np.ndarray
	timesteps: np.ndarray
	kind: str = "linear"

	@classmethod
	def linear(cls, n_steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
		betas = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
		return cls(betas, np.cumprod(1.0 - betas), np.arange(1, n_steps + 1))

	@classmethod
	def from_config(cls, config: ScheduleConfig) -> "NoiseSchedule":
		return cls.linear(config.n_steps, config.beta_start, config.beta_end)

	@property
	def T(self) -> int:
		return len(self.betas)

	def alpha_bar(self, k: Union[int, np.ndarray]) -> np.ndarray:
		"""ᾱ по номеру шага k ∈ [1, T]."""
		k = np.asarray(k)
		if np.any(k < 1) or np.any(k > self.T):
			raise DomainError(f"Шаг диффузии вне диапазона [1, {self.T}]: {k}")
		return self.alphas_bar[k - 1]

	def respaced(self, n: int) -> "NoiseSchedule":
		"""Расписание из n шагов с теми же значениями ᾱ в выбранных точках."""
		if not 1 <= n <= self.T:
			raise DomainError(f"Нельзя пересэмплировать {self.T} шагов в {n}")
		if n == self.T:
			return self
		positions = np.unique(np.round(np.linspace(0, self.T - 1, n)).astype(np.int64))
		alphas_bar = self.alphas_bar[positions]
		previous = np.concatenate([[1.0], alphas_bar[:-1]])
		betas = 1.0 - alphas_bar / previous
		return NoiseSchedule(betas, alphas_bar, self.timesteps[positions], self.kind)

	def to_dict(self) -> Dict[str, Any]:
		return {
			"kind": self.kind,
			"betas": self.betas.tolist(),
			"timesteps": self.timesteps.tolist(),
		}

	@classmethod
	def from_dict(cls, payload: Dict[str, Any]) -> "NoiseSchedule":
		betas = np.asarray(payload["betas"], dtype=np.float64)
		timesteps = np.asarray(payload.get("timesteps", np.arange(1, len(betas) + 1)), dtype=np.int64)
		return cls(betas, np.cumprod(1.0 - betas), timesteps, payload.get("kind", "linear"))


class Denoiser(Protocol):
	def __call__(self, noisy: np.ndarray, k: np.ndarray, condition: Any) -> Tensor:
		...


def forward_noise(s0: np.ndarray, k: Union[int, np.ndarray], eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
	"""√ᾱ_k·s0 + √(1−ᾱ_k)·ε; k может быть вектором длины B по ведущей оси."""
	s0 = np.asarray(s0, dtype=np.float64)
	eps = np.asarray(eps, dtype=np.float64)
	if s0.shape != eps.shape:
		raise DomainError(f"Формы s0 {s0.shape} и eps {eps.shape} не совпадают")
	ab = schedule.alpha_bar(k)
	if ab.ndim:
		ab = ab.reshape(ab.shape + (1,) * (s0.ndim - ab.ndim))
	return np.sqrt(ab) * s0 + np.sqrt(1.0 - ab) * eps


def step_embedding(k: Union[int, np.ndarray], dim: int) -> np.ndarray:
	"""Синусоидальный эмбеддинг шага: чередование [sin(k·f_i), cos(k·f_i)], f_i = 10000^(−i/(dim/2))."""
	if dim % 2:
		raise DomainError(f"Размерность эмбеддинга шага должна быть чётной, получено {dim}")
	k = np.asarray(k, dtype=np.float64)
	freqs = 10000.0 ** (-np.arange(dim // 2) / (dim // 2))
	phase = k[..., None] * freqs
	out = np.empty(k.shape + (dim,))
	out[..., 0::2] = np.sin(phase)
	out[..., 1::2] = np.cos(phase)
	return out


def training_loss(
	model: Denoiser,
	s0: np.ndarray,
	condition: Any,
	rng: np.random.Generator,
	schedule: NoiseSchedule,
) -> Tensor:
	"""Средний квадрат ошибки предсказания шума на случайном шаге k ~ U[1, T].

	Args:
		model: Денойзер (noisy, k, condition) → ε̂
		s0: Чистые данные (B, ...)
		condition: Условие, передаётся модели как есть
		rng: Генератор случайных чисел
		schedule: Расписание шума
	"""
	s0 = np.asarray(s0, dtype=np.float64)
	k = rng.integers(1, schedule.T + 1, size=len(s0))
	eps = rng.standard_normal(s0.shape)
	noisy = forward_noise(s0, k, eps, schedule)
	return mse_loss(model(noisy, schedule.timesteps[k - 1], condition), eps)


def sample(
	model: Denoiser,
	condition: Any,
	shape: Tuple[int, ...],
	schedule: NoiseSchedule,
	rng: np.random.Generator,
	deterministic_last_step: bool = True,
	posterior_variance: bool = True,
) -> np.ndarray:
	"""Предковое сэмплирование DDPM от чистого шума до оценки s0.

	Args:
		model: Денойзер
		condition: Условие
		shape: Форма выборки (B, ...)
		schedule: Расписание (можно пересэмплированное)
		rng: Генератор случайных чисел
		deterministic_last_step: Не добавлять шум на последнем шаге
		posterior_variance: σ² из апостериорного распределения (иначе σ² = β)

	Returns:
		Оценка s0 формы shape
	"""
	s = rng.standard_normal(shape)
	batch = shape[0]
	for i in reversed(range(schedule.T)):
		timestep = int(schedule.timesteps[i])
		with no_grad():
			eps_hat = np.asarray(model(s, np.full(batch, timestep), condition).data)
		if not np.isfinite(eps_hat).all():
			raise SamplingError(timestep)
		beta = schedule.betas[i]
		ab = schedule.alphas_bar[i]
		mean = (s - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
		if i == 0 and deterministic_last_step:
			s = mean
			continue
		if posterior_variance:
			ab_prev = schedule.alphas_bar[i - 1] if i > 0 else 1.0
			variance = beta * (1.0 - ab_prev) / (1.0 - ab)
		else:
			variance = beta
		s = mean + np.sqrt(variance) * rng.standard_normal(shape)
	return s


def sampling_schedule(schedule: NoiseSchedule, steps: Optional[int]) -> NoiseSchedule:
	return schedule if steps is None else schedule.respaced(steps)
