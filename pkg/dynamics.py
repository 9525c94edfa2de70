"""Диффузионная модель динамики (DDM): j будущих кадров по истории, действию и маске захвата."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .clothsim import ActionStep
from .diffusion import NoiseSchedule, ScheduleConfig, sample, sampling_schedule, step_embedding
from .errors import CorrespondenceError, DomainError
from .geometry import ClothMesh
from .neural.layers import (
	MLP,
	FourierActionEmbedder,
	FourierEmbedderConfig,
	LayerNorm,
	Linear,
	Module,
	TransformerBlock,
	TransformerConfig,
)
from .neural.tensor import Tensor, concat, silu
from .observation import interpolate_decode_weights, tokenize_mesh
from .perception import VertexPatches, normalized_canonical, scene_scale
from .training import TrainConfig, TrainResult, fit_denoiser


logger = logging.getLogger(__name__)

N_FEATURES = 17


class DdmConfig(BaseModel):
	"""История i=3 (четыре кадра), будущее j=5."""

	model_config = ConfigDict(extra="forbid")

	transformer: TransformerConfig = Field(default_factory=lambda: TransformerConfig(cross_attn_dim=48))
	action_embedder: FourierEmbedderConfig = Field(default_factory=FourierEmbedderConfig)
	schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
	history: int = Field(default=3, ge=0, description="i: число прошлых кадров помимо текущего")
	future: int = Field(default=5, ge=1, description="j: число предсказываемых кадров")
	n_patches: int = Field(default=16, ge=1)
	patch_seed: int = 0
	motion_scale: float = Field(default=0.1, gt=0, description="Масштаб смещений относительно последнего кадра, м")
	vertex_hidden: int = Field(default=64, ge=1)
	step_dim: int = Field(default=32, ge=2)
	decode_k: int = Field(default=3, ge=1)
	seed: int = 0

	@model_validator(mode="after")
	def _check_dims(self):
		if self.action_embedder.out_dim != self.transformer.cross_attn_dim:
			raise ValueError("action_embedder.out_dim должен совпадать с transformer.cross_attn_dim")
		return self

	@property
	def n_history_frames(self) -> int:
		return self.history + 1


@dataclass(frozen=True, eq=False)
class Transition:
	"""Обучающая запись динамики.

	Attributes:
		history: Кадры s_{t−i..t} (i+1, Nv, 3)
		deltas: Смещения захвата на каждый будущий кадр (j, 3)
		grasp_index: Захваченная вершина или None (только успокоение)
		future: Кадры s_{t+1..t+j} (j, Nv, 3)
	"""

	history: np.ndarray
	deltas: np.ndarray
	grasp_index: Optional[int]
	future: np.ndarray

	def __post_init__(self):
		history = np.asarray(self.history, dtype=np.float64)
		future = np.asarray(self.future, dtype=np.float64)
		deltas = np.asarray(self.deltas, dtype=np.float64).reshape(-1, 3)
		if history.ndim != 3 or future.ndim != 3 or history.shape[1:] != future.shape[1:]:
			raise CorrespondenceError(f"Кадры истории {history.shape} и будущего {future.shape} несовместимы")
		if len(deltas) != len(future):
			raise DomainError(f"Действий {len(deltas)}, а будущих кадров {len(future)}")
		if self.grasp_index is not None and not 0 <= self.grasp_index < history.shape[1]:
			raise DomainError(f"Индекс захвата {self.grasp_index} вне диапазона")
		object.__setattr__(self, "history", history)
		object.__setattr__(self, "future", future)
		object.__setattr__(self, "deltas", deltas)

	@property
	def n_vertices(self) -> int:
		return self.history.shape[1]

	@property
	def grasp_mask(self) -> np.ndarray:
		return grasp_mask(self.n_vertices, self.grasp_index)


def grasp_mask(n_vertices: int, grasp_index: Optional[int]) -> np.ndarray:
	mask = np.zeros(n_vertices)
	if grasp_index is not None:
		mask[grasp_index] = 1.0
	return mask


def mask_to_index(mask: np.ndarray) -> Optional[int]:
	mask = np.asarray(mask)
	nonzero = np.flatnonzero(mask)
	if len(nonzero) > 1:
		raise DomainError("Маска захвата должна содержать не больше одной вершины")
	return int(nonzero[0]) if len(nonzero) else None


@dataclass(frozen=True, eq=False)
class DynamicsCondition:
	"""Нормализованная история, маска и действия пакета."""

	history: np.ndarray  # (B, H, Nv, 3) в нормализованных координатах
	masks: np.ndarray  # (B, Nv)
	deltas: np.ndarray  # (B, j, 3), метры
	origins: np.ndarray  # (B, 3), центроид последнего кадра

	def subset(self, idx: np.ndarray) -> "DynamicsCondition":
		return DynamicsCondition(self.history[idx], self.masks[idx], self.deltas[idx], self.origins[idx])


class DdmModel(Module):
	"""ε_θ^d над остатками будущих кадров относительно последнего кадра истории."""

	def __init__(self, canonical: ClothMesh, config: Optional[DdmConfig] = None):
		self.config = config or DdmConfig()
		cfg = self.config
		if cfg.n_patches > canonical.n_vertices:
			raise DomainError(f"Патчей {cfg.n_patches} больше, чем вершин {canonical.n_vertices}")
		rng = np.random.default_rng(cfg.seed)
		tcfg = cfg.transformer
		dim = tcfg.inner_dim
		frames = cfg.n_history_frames + cfg.future
		self.canonical = canonical
		self.scale = scene_scale(canonical)
		self.canonical_normalized = normalized_canonical(canonical, self.scale)
		self.patches = tokenize_mesh(canonical, None, cfg.n_patches, cfg.patch_seed)
		decode_index, decode_weights = interpolate_decode_weights(canonical, self.patches, cfg.decode_k)
		self.schedule = NoiseSchedule.from_config(cfg.schedule)

		self.vertex_mlp = MLP([N_FEATURES, cfg.vertex_hidden, dim], rng, activation=tcfg.activation)
		self.vertex_patches = VertexPatches(self.canonical_normalized, self.patches, decode_index, decode_weights, dim, rng)
		self.action_embedder = FourierActionEmbedder(cfg.action_embedder, rng)
		self.action_position = Tensor(rng.normal(0.0, 0.02, size=(cfg.future, tcfg.cross_attn_dim)), requires_grad=True)
		self.cond_pool = Linear(tcfg.cross_attn_dim, tcfg.cond_dim, rng)
		self.step_mlp = MLP([cfg.step_dim, tcfg.cond_dim, tcfg.cond_dim], rng, activation="silu")
		self.blocks = [TransformerBlock(tcfg, dim, rng, cross=True, temporal_frames=frames) for _ in range(tcfg.n_layers)]
		self.final_norm = LayerNorm(dim)
		self.head = MLP([2 * dim, dim, 3], rng, activation=tcfg.activation, zero_last=True)
		logger.debug(f"DDM: {self.n_parameters()} параметров, {frames} кадров")

	def check_canonical(self, canonical: ClothMesh):
		if not canonical.same_connectivity(self.canonical):
			raise CorrespondenceError("Шаблон не совпадает с разбиением модели")

	def prepare_condition(self, history: np.ndarray, deltas: np.ndarray, masks: np.ndarray) -> DynamicsCondition:
		"""history (B, H, Nv, 3) в метрах → нормализованное условие."""
		cfg = self.config
		history = np.asarray(history, dtype=np.float64)
		deltas = np.asarray(deltas, dtype=np.float64)
		masks = np.asarray(masks, dtype=np.float64)
		if history.ndim != 4 or history.shape[1] != cfg.n_history_frames:
			raise DomainError(f"Ожидалось {cfg.n_history_frames} кадров истории, получено {history.shape}")
		if history.shape[2:] != self.canonical_normalized.shape:
			raise CorrespondenceError(f"Кадры истории не совпадают с шаблоном: {history.shape}")
		if deltas.shape[1:] != (cfg.future, 3):
			raise DomainError(f"Ожидалось {cfg.future} действий на запись, получено {deltas.shape}")
		if masks.shape != history.shape[:1] + history.shape[2:3]:
			raise DomainError(f"Маска захвата должна иметь форму (B, Nv), получено {masks.shape}")
		origins = history[:, -1].mean(axis=1)
		normalized = (history - origins[:, None, None, :]) / self.scale
		return DynamicsCondition(normalized, masks, deltas, origins)

	def features(self, noisy: np.ndarray, condition: DynamicsCondition) -> np.ndarray:
		"""Признаки вершин всех кадров (B, H + j, Nv, N_FEATURES).

		Каналы: положение в последнем кадре, остаток (история - реальный, будущее - зашумлённый),
		каноническое положение, маска захвата, признак будущего кадра, накопленное смещение захвата,
		положение кадра истории.
		"""
		cfg = self.config
		history = condition.history
		batch, n_hist, nv, _ = history.shape
		frames = n_hist + cfg.future
		last = history[:, -1]
		motion = cfg.motion_scale / self.scale
		residual = np.concatenate([(history - last[:, None]) / motion, noisy], axis=1)
		cumulative = np.cumsum(condition.deltas, axis=1) / cfg.motion_scale
		drive = np.zeros((batch, frames, 3))
		drive[:, n_hist:] = cumulative
		is_future = np.zeros(frames)
		is_future[n_hist:] = 1.0
		positions = np.concatenate([history, np.broadcast_to(last[:, None], (batch, cfg.future, nv, 3))], axis=1)
		mask = condition.masks[:, None, :, None]
		parts = [
			np.broadcast_to(last[:, None], (batch, frames, nv, 3)),
			residual,
			np.broadcast_to(self.canonical_normalized, (batch, frames, nv, 3)),
			np.broadcast_to(mask, (batch, frames, nv, 1)),
			np.broadcast_to(is_future[None, :, None, None], (batch, frames, nv, 1)),
			drive[:, :, None, :] * mask,
			positions,
		]
		return np.concatenate(parts, axis=-1)

	def forward(self, noisy: np.ndarray, k: np.ndarray, condition: DynamicsCondition) -> Tensor:
		"""Шум (B, j, Nv, 3) для зашумлённых остатков будущих кадров (B, j, Nv, 3)."""
		cfg = self.config
		noisy = np.asarray(noisy, dtype=np.float64)
		expected = (cfg.future,) + self.canonical_normalized.shape
		if noisy.ndim != 4 or noisy.shape[1:] != expected:
			raise DomainError(f"Ожидались будущие кадры (B, {cfg.future}, Nv, 3), получено {noisy.shape}")
		batch = noisy.shape[0]
		h = self.vertex_mlp(Tensor(self.features(noisy, condition)))
		tokens = self.action_embedder(condition.deltas) + self.action_position
		pooled = self.cond_pool(tokens.mean(axis=1))
		step = self.step_mlp(Tensor(step_embedding(np.broadcast_to(np.asarray(k), (batch,)), cfg.step_dim)))
		cond = silu(pooled + step)
		x = self.vertex_patches.pool(h)
		for block in self.blocks:
			x = block(x, cond, tokens)
		n_hist = cfg.n_history_frames
		up = self.vertex_patches.upsample(self.final_norm(x[:, n_hist:]))
		return self.head(concat([up, h[:, n_hist:]], axis=-1))

	def to_residual(self, future: np.ndarray, history: np.ndarray) -> np.ndarray:
		"""Будущие кадры (B, j, Nv, 3) в метрах → остатки, которые диффундирует модель."""
		return (np.asarray(future) - np.asarray(history)[:, -1:]) / self.config.motion_scale

	def from_residual(self, residual: np.ndarray, history: np.ndarray) -> np.ndarray:
		return np.asarray(history)[:, -1:] + np.asarray(residual) * self.config.motion_scale


def _history_array(history: Union[Sequence[ClothMesh], np.ndarray]) -> np.ndarray:
	if isinstance(history, np.ndarray):
		return np.asarray(history, dtype=np.float64)
	return np.stack([m.vertices for m in history])


def ddm_denoise(
	model: DdmModel,
	noisy_future: np.ndarray,
	k: int,
	history: Union[Sequence[ClothMesh], np.ndarray],
	action: np.ndarray,
	grasp_mask_: np.ndarray,
) -> Tensor:
	"""Предсказанный шум (j, Nv, 3) для одной записи."""
	hist = _history_array(history)
	noisy = np.asarray(noisy_future, dtype=np.float64)
	if noisy.ndim != 3 or len(noisy) != model.config.future:
		raise DomainError(f"Ожидалось {model.config.future} будущих кадров, получено {noisy.shape}")
	condition = model.prepare_condition(hist[None], np.asarray(action)[None], np.asarray(grasp_mask_)[None])
	out = model(noisy[None], np.array([k]), condition)
	return out[0]


def predict_batch(
	model: DdmModel,
	history: np.ndarray,
	deltas: np.ndarray,
	grasp_index: Optional[int],
	rng: np.random.Generator,
	sampling_steps: Optional[int] = None,
) -> np.ndarray:
	"""Будущие кадры для K кандидатных последовательностей действий.

	Args:
		model: Обученная DDM
		history: Общая история (H, Nv, 3) или своя для каждого кандидата (K, H, Nv, 3)
		deltas: Кандидаты (K, j, 3)
		grasp_index: Захваченная вершина или None
		rng: Генератор случайных чисел
		sampling_steps: Число обратных шагов

	Returns:
		Кадры (K, j, Nv, 3) в метрах
	"""
	history = np.asarray(history, dtype=np.float64)
	deltas = np.asarray(deltas, dtype=np.float64)
	count = len(deltas)
	histories = history if history.ndim == 4 else np.broadcast_to(history, (count,) + history.shape)
	n_vertices = histories.shape[2]
	masks = np.broadcast_to(grasp_mask(n_vertices, grasp_index), (count, n_vertices))
	condition = model.prepare_condition(histories, deltas, masks)
	schedule = sampling_schedule(model.schedule, sampling_steps or model.config.schedule.sampling_steps)
	shape = (count, model.config.future) + model.canonical_normalized.shape
	residual = sample(model, condition, shape, schedule, rng, posterior_variance=model.config.schedule.posterior_variance)
	return model.from_residual(residual, histories)


def predict(
	model: DdmModel,
	history: Union[Sequence[ClothMesh], np.ndarray],
	action: np.ndarray,
	grasp_mask_: np.ndarray,
	rng: np.random.Generator,
	sampling_steps: Optional[int] = None,
) -> List[ClothMesh]:
	"""j будущих сеток со связностью шаблона."""
	hist = _history_array(history)
	frames = predict_batch(model, hist, np.asarray(action)[None], mask_to_index(grasp_mask_), rng, sampling_steps)[0]
	return [model.canonical.with_vertices(f) for f in frames]


def rollout_autoregressive(
	model: DdmModel,
	initial_history: Union[Sequence[ClothMesh], np.ndarray],
	actions: Sequence[ActionStep],
	rng: np.random.Generator,
	sampling_steps: Optional[int] = None,
) -> List[ClothMesh]:
	"""Скользящее окно: предсказать j кадров, добавить их в историю, следующий кусок действий.

	Последовательность дополняется нулевыми действиями до кратной j, лишние кадры отбрасываются.
	"""
	if not actions:
		raise DomainError("Пустая последовательность действий")
	j = model.config.future
	history = _history_array(initial_history)
	padded = list(actions)
	while len(padded) % j:
		padded.append(ActionStep(padded[-1].grasp_index, np.zeros(3)))
	outputs: List[ClothMesh] = []
	for start in range(0, len(padded), j):
		chunk = padded[start:start + j]
		grasp = next((a.grasp_index for a in chunk if a.grasp_index is not None), None)
		deltas = np.stack([np.asarray(a.delta, dtype=np.float64) for a in chunk])
		meshes = predict(model, history, deltas, grasp_mask(history.shape[1], grasp), rng, sampling_steps)
		outputs.extend(meshes)
		window = np.concatenate([history, np.stack([m.vertices for m in meshes])])
		history = window[-len(history):]
		logger.debug(f"Авторегрессия: кадры {start + 1}..{start + j}")
	return outputs[: len(actions)]


def transitions_from_trajectory(
	states: np.ndarray,
	deltas: np.ndarray,
	grasp: np.ndarray,
	history: int = 3,
	future: int = 5,
	stride: int = 1,
) -> List[Transition]:
	"""Окна (история, действия, будущее) по траектории.

	Args:
		states: Кадры (n + 1, Nv, 3): начальное состояние и по одному после каждого действия
		deltas: Действия (n, 3)
		grasp: Индекс захвата на каждом действии, −1 - отпущено
		history: i
		future: j
		stride: Шаг окна

	Returns:
		Окна с единым режимом захвата в будущем; начало траектории дополняется повтором s_0
	"""
	states = np.asarray(states, dtype=np.float64)
	n = len(deltas)
	if len(states) != n + 1:
		raise DomainError(f"Ожидалось {n + 1} кадров, получено {len(states)}")
	padded = np.concatenate([np.repeat(states[:1], history, axis=0), states])
	result = []
	for t in range(0, n - future + 1, stride):
		window = grasp[t:t + future]
		if np.any(window != window[0]):
			continue
		g = None if window[0] < 0 else int(window[0])
		result.append(Transition(padded[t:t + history + 1], deltas[t:t + future], g, states[t + 1:t + 1 + future]))
	return result


def dynamics_arrays(model: DdmModel, transitions: Sequence[Transition]) -> Tuple[np.ndarray, DynamicsCondition]:
	if not transitions:
		raise DomainError("Пустой набор переходов")
	history = np.stack([t.history for t in transitions])
	condition = model.prepare_condition(
		history,
		np.stack([t.deltas for t in transitions]),
		np.stack([t.grasp_mask for t in transitions]),
	)
	s0 = model.to_residual(np.stack([t.future for t in transitions]), history)
	return s0, condition


def train_ddm(model: DdmModel, transitions: Sequence[Transition], config: Optional[TrainConfig] = None) -> TrainResult:
	"""Обучить DDM той же ε-потерей по шуму будущих кадров."""
	config = config or TrainConfig()
	s0, condition = dynamics_arrays(model, transitions)
	logger.info(f"Обучение DDM на {len(transitions)} переходах, {config.steps} шагов")
	return fit_denoiser(model, len(transitions), lambda idx: (s0[idx], condition.subset(idx)), model.schedule, config)
