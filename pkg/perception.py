"""Диффузионная модель восприятия (DPM): полная сетка по частичному облаку и шаблону."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .diffusion import NoiseSchedule, ScheduleConfig, sample, sampling_schedule, step_embedding
from .errors import CorrespondenceError, DomainError
from .geometry import ClothMesh, PointCloud, chamfer
from .neural.layers import MLP, LayerNorm, Linear, Module, PatchEncoder, TransformerBlock, TransformerConfig
from .neural.tensor import Tensor, concat, reshape, silu, take, tmax
from .observation import PatchSet, interpolate_decode_weights, tokenize_cloud, tokenize_mesh
from .training import TrainConfig, TrainResult, fit_denoiser


logger = logging.getLogger(__name__)

MASKED = -1e9


class DpmConfig(BaseModel):
	"""Настольная DPM: 2 слоя, 4 головы, ширина 64, 16 патчей на ткани 8x8."""

	model_config = ConfigDict(extra="forbid")

	transformer: TransformerConfig = Field(default_factory=TransformerConfig)
	schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
	n_patches: int = Field(default=16, ge=1)
	patch_seed: int = 0
	n_groups: int = Field(default=32, ge=1)
	group_size: int = Field(default=16, ge=1)
	radius: float = Field(default=0.15, gt=0, description="Радиус KNN-групп облака, м")
	encoder_hidden: List[int] = Field(default_factory=lambda: [32])
	vertex_hidden: int = Field(default=64, ge=1)
	step_dim: int = Field(default=32, ge=2)
	decode_k: int = Field(default=3, ge=1)
	seed: int = 0


@dataclass(frozen=True, eq=False)
class CloudCondition:
	"""Токенизированные и нормализованные облака пакета."""

	points: np.ndarray  # (B, G, K, 3)
	centers: np.ndarray  # (B, G, 3)
	centroids: np.ndarray  # (B, 3), метры
	scale: float

	def subset(self, idx: np.ndarray) -> "CloudCondition":
		return CloudCondition(self.points[idx], self.centers[idx], self.centroids[idx], self.scale)

	def repeat(self, n: int) -> "CloudCondition":
		return CloudCondition(
			np.repeat(self.points, n, axis=0),
			np.repeat(self.centers, n, axis=0),
			np.repeat(self.centroids, n, axis=0),
			self.scale,
		)


def scene_scale(canonical: ClothMesh) -> float:
	return canonical.bbox_diagonal()


def normalized_canonical(canonical: ClothMesh, scale: float) -> np.ndarray:
	vertices = canonical.vertices
	return (vertices - vertices.mean(axis=0)) / scale


class VertexPatches(Module):
	"""Вершинные признаки → max-pool по ячейкам Вороного канонического разбиения → апсемплинг обратно."""

	def __init__(self, canonical_normalized: np.ndarray, patches: PatchSet, decode_index: np.ndarray, decode_weights: np.ndarray, dim: int, rng: np.random.Generator):
		self.group_index, mask = patches.padded_groups()
		self.group_bias = np.where(mask, 0.0, MASKED)[None, :, :, None]
		self.decode_index = decode_index
		self.decode_weights = decode_weights[None, :, :, None]
		centers = canonical_normalized[patches.center_indices]
		self.center_features = centers
		self.center_embed = Linear(3, dim, rng)

	def pool(self, h: Tensor) -> Tensor:
		"""(..., Nv, D) → (..., P, D)."""
		p, width = self.group_index.shape
		gathered = take(h, self.group_index.reshape(-1), axis=-2)
		gathered = reshape(gathered, h.shape[:-2] + (p, width, h.shape[-1]))
		bias = self.group_bias.reshape((1,) * (h.ndim - 2) + self.group_bias.shape[1:])
		return tmax(gathered + bias, axis=-2) + self.center_embed(Tensor(self.center_features))

	def upsample(self, x: Tensor) -> Tensor:
		"""(..., P, D) → (..., Nv, D) взвешенной интерполяцией по k центрам."""
		nv, k = self.decode_index.shape
		gathered = take(x, self.decode_index.reshape(-1), axis=-2)
		gathered = reshape(gathered, x.shape[:-2] + (nv, k, x.shape[-1]))
		weights = self.decode_weights.reshape((1,) * (x.ndim - 2) + self.decode_weights.shape[1:])
		return (gathered * weights).sum(axis=-2)


class DpmModel(Module):
	"""ε_θ^p(s_k, k | s_c, e_pc)."""

	def __init__(self, canonical: ClothMesh, config: Optional[DpmConfig] = None):
		self.config = config or DpmConfig()
		cfg = self.config
		if cfg.n_patches > canonical.n_vertices:
			raise DomainError(f"Патчей {cfg.n_patches} больше, чем вершин {canonical.n_vertices}")
		rng = np.random.default_rng(cfg.seed)
		tcfg = cfg.transformer
		dim = tcfg.inner_dim
		self.canonical = canonical
		self.scale = scene_scale(canonical)
		self.canonical_normalized = normalized_canonical(canonical, self.scale)
		self.patches = tokenize_mesh(canonical, None, cfg.n_patches, cfg.patch_seed)
		decode_index, decode_weights = interpolate_decode_weights(canonical, self.patches, cfg.decode_k)
		self.schedule = NoiseSchedule.from_config(cfg.schedule)

		self.vertex_mlp = MLP([6, cfg.vertex_hidden, dim], rng, activation=tcfg.activation)
		self.vertex_patches = VertexPatches(self.canonical_normalized, self.patches, decode_index, decode_weights, dim, rng)
		self.cloud_encoder = PatchEncoder([3] + list(cfg.encoder_hidden) + [tcfg.cross_attn_dim], rng, activation=tcfg.activation)
		self.cloud_position = Linear(3, tcfg.cross_attn_dim, rng)
		self.cond_pool = Linear(tcfg.cross_attn_dim, tcfg.cond_dim, rng)
		self.step_mlp = MLP([cfg.step_dim, tcfg.cond_dim, tcfg.cond_dim], rng, activation="silu")
		self.blocks = [TransformerBlock(tcfg, dim, rng, cross=True) for _ in range(tcfg.n_layers)]
		self.final_norm = LayerNorm(dim)
		self.head = MLP([2 * dim, dim, 3], rng, activation=tcfg.activation, zero_last=True)
		logger.debug(f"DPM: {self.n_parameters()} параметров, {cfg.n_patches} патчей")

	def check_canonical(self, canonical: ClothMesh):
		if not canonical.same_connectivity(self.canonical):
			raise CorrespondenceError("Шаблон не совпадает с разбиением модели")

	def prepare_condition(self, clouds: Sequence[PointCloud]) -> CloudCondition:
		"""Токенизировать облака и перевести их в нормализованную систему (центроид, масштаб сцены)."""
		cfg = self.config
		points, centers, centroids = [], [], []
		for cloud in clouds:
			raw = cloud.points
			if len(raw) < cfg.n_groups:
				raise DomainError(f"Облако из {len(raw)} точек меньше числа групп {cfg.n_groups}")
			patches = tokenize_cloud(raw, cfg.n_groups, cfg.group_size, cfg.radius, cfg.patch_seed)
			centroid = raw.mean(axis=0)
			normalized = (raw - centroid) / self.scale
			points.append(normalized[patches.neighborhoods])
			centers.append(normalized[patches.center_indices])
			centroids.append(centroid)
		return CloudCondition(np.stack(points), np.stack(centers), np.stack(centroids), self.scale)

	def condition_vector(self, tokens: Tensor, k: np.ndarray) -> Tensor:
		pooled = self.cond_pool(tokens.mean(axis=1))
		step = self.step_mlp(Tensor(step_embedding(k, self.config.step_dim)))
		return silu(pooled + step)

	def cloud_tokens(self, condition: CloudCondition) -> Tensor:
		centers = Tensor(condition.centers)
		return self.cloud_encoder(Tensor(condition.points), centers) + self.cloud_position(centers)

	def forward(self, noisy: np.ndarray, k: np.ndarray, condition: CloudCondition) -> Tensor:
		"""Предсказанный шум (B, Nv, 3) для нормализованных зашумлённых вершин (B, Nv, 3)."""
		noisy = np.asarray(noisy, dtype=np.float64)
		if noisy.ndim != 3 or noisy.shape[1:] != self.canonical_normalized.shape:
			raise DomainError(f"Ожидались вершины (B, {self.canonical.n_vertices}, 3), получено {noisy.shape}")
		batch = noisy.shape[0]
		canonical = np.broadcast_to(self.canonical_normalized, noisy.shape)
		h = self.vertex_mlp(Tensor(np.concatenate([noisy, canonical], axis=-1)))
		tokens = self.cloud_tokens(condition)
		cond = self.condition_vector(tokens, np.broadcast_to(np.asarray(k), (batch,)))
		x = self.vertex_patches.pool(h)
		for block in self.blocks:
			x = block(x, cond, tokens)
		up = self.vertex_patches.upsample(self.final_norm(x))
		return self.head(concat([up, h], axis=-1))

	def normalize(self, vertices: np.ndarray, centroids: np.ndarray) -> np.ndarray:
		return (np.asarray(vertices) - centroids[:, None, :]) / self.scale

	def denormalize(self, vertices: np.ndarray, centroids: np.ndarray) -> np.ndarray:
		return np.asarray(vertices) * self.scale + centroids[:, None, :]


def dpm_denoise(model: DpmModel, noisy_vertices: np.ndarray, k: int, canonical: ClothMesh, cloud: PointCloud) -> Tensor:
	"""Предсказанный шум (Nv, 3) для одного состояния в нормализованных координатах."""
	model.check_canonical(canonical)
	noisy = np.asarray(noisy_vertices, dtype=np.float64)
	if noisy.shape != (canonical.n_vertices, 3):
		raise CorrespondenceError(f"Ожидалось {canonical.n_vertices} вершин, получено {noisy.shape}")
	condition = model.prepare_condition([cloud])
	out = model(noisy[None], np.array([k]), condition)
	return reshape(out, out.shape[1:])


def estimate_state(
	model: DpmModel,
	canonical: ClothMesh,
	cloud: PointCloud,
	rng: np.random.Generator,
	n_samples: int = 1,
	sampling_steps: Optional[int] = None,
) -> ClothMesh:
	"""Оценка состояния g: O → S; при n_samples > 1 - лучший по Chamfer до облака.

	Args:
		model: Обученная DPM
		canonical: Шаблон (связность модели)
		cloud: Частичное наблюдение
		rng: Генератор случайных чисел
		n_samples: Число кандидатов
		sampling_steps: Число обратных шагов (по умолчанию T)

	Returns:
		Сетка со связностью шаблона
	"""
	model.check_canonical(canonical)
	if n_samples < 1:
		raise DomainError("n_samples должен быть не меньше 1")
	condition = model.prepare_condition([cloud]).repeat(n_samples)
	schedule = sampling_schedule(model.schedule, sampling_steps or model.config.schedule.sampling_steps)
	samples = sample(
		model, condition, (n_samples,) + model.canonical_normalized.shape, schedule, rng,
		posterior_variance=model.config.schedule.posterior_variance,
	)
	candidates = model.denormalize(samples, condition.centroids)
	if n_samples == 1:
		best = 0
	else:
		costs = [chamfer(c, cloud) for c in candidates]
		best = int(np.argmin(costs))
		logger.debug(f"Лучший из {n_samples} кандидатов: {best}, Chamfer {costs[best]:.3e}")
	return canonical.with_vertices(candidates[best])


@dataclass(frozen=True, eq=False)
class PerceptionPair:
	cloud: PointCloud
	mesh: ClothMesh


def perception_arrays(model: DpmModel, pairs: Sequence[PerceptionPair]) -> Tuple[np.ndarray, CloudCondition]:
	"""Нормализованные целевые вершины (N, Nv, 3) и токенизированные условия."""
	if not pairs:
		raise DomainError("Пустой набор пар")
	for pair in pairs:
		if not pair.mesh.same_connectivity(model.canonical):
			raise CorrespondenceError("Сетка пары не совпадает со связностью шаблона")
	condition = model.prepare_condition([p.cloud for p in pairs])
	s0 = model.normalize(np.stack([p.mesh.vertices for p in pairs]), condition.centroids)
	return s0, condition


def train_dpm(model: DpmModel, pairs: Sequence[PerceptionPair], config: Optional[TrainConfig] = None) -> TrainResult:
	"""Обучить DPM ε-потерей на парах (облако, сетка)."""
	config = config or TrainConfig()
	s0, condition = perception_arrays(model, pairs)
	logger.info(f"Обучение DPM на {len(pairs)} парах, {config.steps} шагов")
	return fit_denoiser(model, len(pairs), lambda idx: (s0[idx], condition.subset(idx)), model.schedule, config)
