"""Строительные блоки трансформера: внимание, AdaLN, PointNet-патчи, фурье-эмбеддинг действий."""

import logging
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import ShapeError
from .tensor import ACTIVATIONS, Tensor, layer_norm, matmul, reshape, softmax, swap_last, tmax, transpose


logger = logging.getLogger(__name__)


class TransformerConfig(BaseModel):
	"""Гиперпараметры трансформера (настольный масштаб по умолчанию)."""

	model_config = ConfigDict(extra="forbid")

	n_heads: int = Field(default=4, ge=1)
	head_dim: int = Field(default=16, ge=1)
	n_layers: int = Field(default=2, ge=1)
	inner_dim: int = Field(default=64, ge=1)
	cross_attn_dim: int = Field(default=64, ge=1)
	cond_dim: int = Field(default=64, ge=1)
	dropout: float = Field(default=0.0, ge=0.0, le=0.0, description="Dropout не поддерживается")
	activation: str = "gelu"
	mlp_ratio: int = Field(default=2, ge=1)

	@model_validator(mode="after")
	def _check_inner(self):
		if self.inner_dim != self.n_heads * self.head_dim:
			raise ValueError(f"inner_dim={self.inner_dim} должен равняться n_heads*head_dim={self.n_heads * self.head_dim}")
		if self.activation not in ACTIVATIONS:
			raise ValueError(f"Неизвестная активация {self.activation!r}")
		return self


class FourierEmbedderConfig(BaseModel):
	"""Фурье-эмбеддинг действий: F частот на ось, выход D₃."""

	model_config = ConfigDict(extra="forbid")

	n_frequencies: int = Field(default=8, ge=1)
	out_dim: int = Field(default=48, ge=6)
	mlp_hidden: List[int] = Field(default_factory=lambda: [64, 64])
	action_scale: float = Field(default=0.05, gt=0, description="Нормализация действий, м")

	@model_validator(mode="after")
	def _check_out_dim(self):
		if self.out_dim % 6 != 0:
			raise ValueError("out_dim должен делиться на 6")
		return self


class Module:
	"""Базовый класс: параметры - атрибуты-тензоры с requires_grad, вложенные модули и их списки."""

	def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
		for name, value in vars(self).items():
			full = f"{prefix}{name}"
			if isinstance(value, Tensor) and value.requires_grad:
				yield full, value
			elif isinstance(value, Module):
				yield from value.named_parameters(f"{full}.")
			elif isinstance(value, (list, tuple)):
				for i, item in enumerate(value):
					if isinstance(item, Module):
						yield from item.named_parameters(f"{full}.{i}.")

	def parameters(self) -> List[Tensor]:
		return [p for _, p in self.named_parameters()]

	def zero_grad(self):
		for p in self.parameters():
			p.grad = None

	def state_dict(self) -> Dict[str, np.ndarray]:
		return {name: p.data.copy() for name, p in self.named_parameters()}

	def load_state_dict(self, state: Dict[str, np.ndarray]):
		params = dict(self.named_parameters())
		missing = set(params) - set(state)
		unexpected = set(state) - set(params)
		if missing or unexpected:
			raise ShapeError(f"Несовпадение параметров: нет {sorted(missing)}, лишние {sorted(unexpected)}")
		for name, p in params.items():
			value = np.asarray(state[name], dtype=np.float64)
			if value.shape != p.shape:
				raise ShapeError(f"Параметр {name}: ожидалась форма {p.shape}, получено {value.shape}")
			p.data = value.copy()

	def n_parameters(self) -> int:
		return int(sum(p.size for p in self.parameters()))

	def __call__(self, *args, **kwargs):
		return self.forward(*args, **kwargs)


def parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
	return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
	def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, zero_init: bool = False):
		self.in_dim, self.out_dim = in_dim, out_dim
		if zero_init:
			self.weight = parameter(np.zeros((in_dim, out_dim)))
		else:
			self.weight = parameter(rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, out_dim)))
		self.bias = parameter(np.zeros(out_dim)) if bias else None

	def forward(self, x: Tensor) -> Tensor:
		if x.shape[-1] != self.in_dim:
			raise ShapeError(f"Linear ожидает последнюю ось {self.in_dim}, получено {x.shape}")
		out = matmul(x, self.weight)
		return out + self.bias if self.bias is not None else out


class MLP(Module):
	"""Полносвязная сеть; активация между слоями, последний слой линейный."""

	def __init__(self, dims: Sequence[int], rng: np.random.Generator, activation: str = "gelu", zero_last: bool = False):
		if len(dims) < 2:
			raise ShapeError("MLP требует хотя бы входную и выходную размерности")
		self.activation = activation
		self.layers = [
			Linear(dims[i], dims[i + 1], rng, zero_init=zero_last and i == len(dims) - 2)
			for i in range(len(dims) - 1)
		]

	def forward(self, x: Tensor) -> Tensor:
		act = ACTIVATIONS[self.activation]
		for i, layer in enumerate(self.layers):
			x = layer(x)
			if i < len(self.layers) - 1:
				x = act(x)
		return x


class LayerNorm(Module):
	def __init__(self, dim: int):
		self.weight = parameter(np.ones(dim))
		self.bias = parameter(np.zeros(dim))

	def forward(self, x: Tensor) -> Tensor:
		return layer_norm(x) * self.weight + self.bias


class AdaLayerNorm(Module):
	"""LN(x)·(1 + γ(c)) + β(c); отображение c → (γ, β) инициализировано нулями."""

	def __init__(self, dim: int, cond_dim: int, rng: np.random.Generator):
		self.dim = dim
		self.modulation = Linear(cond_dim, 2 * dim, rng, zero_init=True)

	def forward(self, x: Tensor, cond: Tensor) -> Tensor:
		if cond.ndim != 2 or cond.shape[0] != x.shape[0]:
			raise ShapeError(f"Условие AdaLN должно иметь форму (B, C), получено {cond.shape} при x {x.shape}")
		mod = self.modulation(cond)
		target = (x.shape[0],) + (1,) * (x.ndim - 2) + (self.dim,)
		gamma = reshape(mod[:, : self.dim], target)
		beta = reshape(mod[:, self.dim:], target)
		return layer_norm(x) * (gamma + 1.0) + beta


def _split_heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
	"""(..., T, H·d) → (..., H, T, d)."""
	lead = x.shape[:-1]
	x = reshape(x, lead + (n_heads, head_dim))
	nd = x.ndim
	return transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
	"""(..., H, T, d) → (..., T, H·d)."""
	nd = x.ndim
	x = transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
	return reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tuple[Tensor, Tensor]:
	"""softmax(Q·Kᵀ/√d)·V; возвращает (выход, веса)."""
	scale = 1.0 / np.sqrt(q.shape[-1])
	weights = softmax(matmul(q, swap_last(k)) * scale, axis=-1)
	return matmul(weights, v), weights


class MultiHeadSelfAttention(Module):
	"""Многоголовое самовнимание без позиционных членов (эквивариантно к перестановке токенов)."""

	def __init__(self, dim: int, n_heads: int, head_dim: int, rng: np.random.Generator, zero_out: bool = False):
		inner = n_heads * head_dim
		self.n_heads, self.head_dim = n_heads, head_dim
		self.w_q = Linear(dim, inner, rng, bias=False)
		self.w_k = Linear(dim, inner, rng, bias=False)
		self.w_v = Linear(dim, inner, rng, bias=False)
		self.w_out = Linear(inner, dim, rng, zero_init=zero_out)
		self.last_weights: Optional[np.ndarray] = None

	def forward(self, x: Tensor) -> Tensor:
		q = _split_heads(self.w_q(x), self.n_heads, self.head_dim)
		k = _split_heads(self.w_k(x), self.n_heads, self.head_dim)
		v = _split_heads(self.w_v(x), self.n_heads, self.head_dim)
		out, weights = attention(q, k, v)
		self.last_weights = weights.data
		return self.w_out(_merge_heads(out))


class CrossAttention(Module):
	"""Запросы из скрытых состояний, ключи и значения из токенов условия (B, M, Dc)."""

	def __init__(self, dim: int, cond_dim: int, n_heads: int, head_dim: int, rng: np.random.Generator, zero_out: bool = False):
		inner = n_heads * head_dim
		self.n_heads, self.head_dim, self.cond_dim = n_heads, head_dim, cond_dim
		self.w_q = Linear(dim, inner, rng, bias=False)
		self.w_k = Linear(cond_dim, inner, rng, bias=False)
		self.w_v = Linear(cond_dim, inner, rng, bias=False)
		self.w_out = Linear(inner, dim, rng, zero_init=zero_out)
		self.last_weights: Optional[np.ndarray] = None

	def forward(self, x: Tensor, cond: Tensor) -> Tensor:
		if cond.ndim != 3 or cond.shape[-1] != self.cond_dim or cond.shape[0] != x.shape[0]:
			raise ShapeError(f"Токены условия должны иметь форму (B, M, {self.cond_dim}), получено {cond.shape}")
		q = _split_heads(self.w_q(x), self.n_heads, self.head_dim)
		k = _split_heads(self.w_k(cond), self.n_heads, self.head_dim)
		v = _split_heads(self.w_v(cond), self.n_heads, self.head_dim)
		if x.ndim > 3:
			extra = (1,) * (x.ndim - 3)
			k = reshape(k, k.shape[:1] + extra + k.shape[1:])
			v = reshape(v, v.shape[:1] + extra + v.shape[1:])
		out, weights = attention(q, k, v)
		self.last_weights = weights.data
		return self.w_out(_merge_heads(out))


class PatchEncoder(Module):
	"""PointNet на патч: общий MLP по точкам в координатах относительно центра, затем max-pool."""

	def __init__(self, dims: Sequence[int], rng: np.random.Generator, activation: str = "gelu"):
		self.mlp = MLP(dims, rng, activation=activation)

	def forward(self, points: Tensor, centers: Tensor) -> Tensor:
		"""points (B, G, K, 3), centers (B, G, 3) → (B, G, D₁)."""
		if points.ndim != 4 or centers.ndim != 3 or points.shape[:2] != centers.shape[:2]:
			raise ShapeError(f"Ожидались точки (B,G,K,3) и центры (B,G,3), получено {points.shape}, {centers.shape}")
		relative = points - reshape(centers, centers.shape[:2] + (1, centers.shape[-1]))
		return tmax(self.mlp(relative), axis=2)


def fourier_features(actions: np.ndarray, n_frequencies: int) -> np.ndarray:
	"""sin/cos(2π f_d a) по каждой оси, f_d = 100^(d/F); раскладка [sin..., cos...] на ось."""
	actions = np.asarray(actions, dtype=np.float64)
	if actions.shape[-1] != 3:
		raise ShapeError(f"Действия должны быть 3-векторами, получено {actions.shape}")
	freqs = 100.0 ** (np.arange(n_frequencies) / n_frequencies)
	phase = 2.0 * np.pi * actions[..., :, None] * freqs
	features = np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)
	return features.reshape(actions.shape[:-1] + (6 * n_frequencies,))


class FourierActionEmbedder(Module):
	def __init__(self, config: FourierEmbedderConfig, rng: np.random.Generator):
		self.config = config
		dims = [6 * config.n_frequencies] + list(config.mlp_hidden) + [config.out_dim]
		self.mlp = MLP(dims, rng, activation="silu")

	def features(self, actions: np.ndarray) -> np.ndarray:
		return fourier_features(np.asarray(actions) / self.config.action_scale, self.config.n_frequencies)

	def forward(self, actions: np.ndarray) -> Tensor:
		"""actions (B, N, 3) в метрах → (B, N, D₃)."""
		return self.mlp(Tensor(self.features(actions)))


class TemporalAttention(Module):
	"""Самовнимание вдоль оси кадров для каждого пространственного токена: x + Attn(x + pos)."""

	def __init__(self, dim: int, n_heads: int, head_dim: int, max_frames: int, rng: np.random.Generator, zero_out: bool = False):
		self.max_frames = max_frames
		self.position = parameter(rng.normal(0.0, 0.02, size=(max_frames, dim)))
		self.attn = MultiHeadSelfAttention(dim, n_heads, head_dim, rng, zero_out=zero_out)

	def attend(self, x: Tensor) -> Tensor:
		"""Только слагаемое внимания, x (B, F, T, D)."""
		if x.ndim != 4:
			raise ShapeError(f"Ожидалось (B, F, T, D), получено {x.shape}")
		frames = x.shape[1]
		if frames > self.max_frames:
			raise ShapeError(f"Кадров {frames} больше max_frames={self.max_frames}")
		pos = reshape(self.position[:frames], (1, frames, 1, x.shape[-1]))
		per_token = transpose(x + pos, (0, 2, 1, 3))
		return transpose(self.attn(per_token), (0, 2, 1, 3))

	def forward(self, x: Tensor) -> Tensor:
		return x + self.attend(x)


class TransformerBlock(Module):
	"""AdaLN-блок: самовнимание, [временное внимание], [кросс-внимание], MLP.

	Все ветки, кроме самовнимания, обнулены при инициализации, поэтому свежий блок
	равен x + MHSA(LN(x)) независимо от условия.
	"""

	def __init__(
		self,
		config: TransformerConfig,
		dim: int,
		rng: np.random.Generator,
		cross: bool = True,
		temporal_frames: int = 0,
	):
		self.norm_attn = AdaLayerNorm(dim, config.cond_dim, rng)
		self.attn = MultiHeadSelfAttention(dim, config.n_heads, config.head_dim, rng)
		self.temporal = None
		if temporal_frames:
			self.norm_temporal = AdaLayerNorm(dim, config.cond_dim, rng)
			self.temporal = TemporalAttention(dim, config.n_heads, config.head_dim, temporal_frames, rng, zero_out=True)
		self.cross = None
		if cross:
			self.norm_cross = AdaLayerNorm(dim, config.cond_dim, rng)
			self.cross = CrossAttention(dim, config.cross_attn_dim, config.n_heads, config.head_dim, rng, zero_out=True)
		self.norm_mlp = AdaLayerNorm(dim, config.cond_dim, rng)
		self.mlp = MLP([dim, config.mlp_ratio * dim, dim], rng, activation=config.activation, zero_last=True)

	def forward(self, x: Tensor, cond: Tensor, tokens: Optional[Tensor] = None) -> Tensor:
		x = x + self.attn(self.norm_attn(x, cond))
		if self.temporal is not None:
			x = x + self.temporal.attend(self.norm_temporal(x, cond))
		if self.cross is not None:
			if tokens is None:
				raise ShapeError("Блоку с кросс-вниманием нужны токены условия")
			x = x + self.cross(self.norm_cross(x, cond), tokens)
		return x + self.mlp(self.norm_mlp(x, cond))
