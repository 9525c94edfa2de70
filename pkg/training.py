"""Общий цикл обучения денойзеров (DPM и DDM)."""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .diffusion import NoiseSchedule, training_loss
from .errors import DomainError, TrainingDivergedError
from .neural.layers import Module
from .neural.optim import AdamW, clip_grad_norm, lr_at


logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
	"""Настольные гиперпараметры обучения."""

	model_config = ConfigDict(extra="forbid")

	steps: int = Field(default=2000, ge=1)
	batch_size: int = Field(default=16, ge=1)
	lr: float = Field(default=1e-3, gt=0)
	warmup: int = Field(default=100, ge=0)
	min_lr_ratio: float = Field(default=0.05, ge=0, le=1)
	weight_decay: float = Field(default=0.0, ge=0)
	grad_clip: float = Field(default=1.0, ge=0, description="0 - без ограничения")
	log_every: int = Field(default=100, ge=1)
	seed: int = 0


@dataclass
class TrainResult:
	losses: List[float] = field(default_factory=list)

	def smoothed(self, window: int = 100) -> np.ndarray:
		"""Скользящее среднее кривой потерь."""
		losses = np.asarray(self.losses)
		if len(losses) == 0:
			return losses
		window = min(window, len(losses))
		kernel = np.ones(window) / window
		return np.convolve(losses, kernel, mode="valid")

	@property
	def final_smoothed(self) -> float:
		values = self.smoothed()
		return float(values[-1]) if len(values) else float("nan")


# (индексы батча) -> (s0, condition)
BatchFn = Callable[[np.ndarray], Any]


def fit_denoiser(
	model: Module,
	n_samples: int,
	batch_fn: BatchFn,
	schedule: NoiseSchedule,
	config: TrainConfig,
) -> TrainResult:
	"""Минимизировать ε-потерю AdamW с прогревом и косинусным затуханием.

	Args:
		model: Денойзер-модуль
		n_samples: Размер обучающего набора
		batch_fn: Собирает (s0, condition) по индексам
		schedule: Расписание шума
		config: Гиперпараметры

	Returns:
		TrainResult с потерей на каждом шаге
	"""
	if n_samples < 1:
		raise DomainError("Пустой обучающий набор")
	rng = np.random.default_rng(config.seed)
	params = model.parameters()
	optimizer = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
	result = TrainResult()
	batch = min(config.batch_size, n_samples)
	for step in range(config.steps):
		idx = rng.choice(n_samples, size=batch, replace=False)
		s0, condition = batch_fn(idx)
		optimizer.zero_grad()
		loss = training_loss(model, s0, condition, rng, schedule)
		value = loss.item()
		if not np.isfinite(value):
			raise TrainingDivergedError(step)
		loss.backward()
		if config.grad_clip > 0:
			clip_grad_norm(params, config.grad_clip)
		optimizer.step(lr_at(step, config.lr, config.warmup, config.steps, config.min_lr_ratio))
		result.losses.append(value)
		if (step + 1) % config.log_every == 0:
			logger.info(f"Шаг {step + 1}/{config.steps}: loss={value:.4f}, сглаженная={result.final_smoothed:.4f}")
	return result
