"""Проверка градиентов центральными конечными разностями и реестр дифференцируемых операций."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .layers import (
	AdaLayerNorm,
	CrossAttention,
	FourierActionEmbedder,
	FourierEmbedderConfig,
	Linear,
	Module,
	MultiHeadSelfAttention,
	PatchEncoder,
	TemporalAttention,
	TransformerBlock,
	TransformerConfig,
)
from .tensor import Tensor, no_grad


logger = logging.getLogger(__name__)

FD_STEP = 1e-5
ERROR_FLOOR = 1e-3
PASS_THRESHOLD = 1e-4

LossFn = Callable[[List[Tensor]], Tensor]


@dataclass
class GradcheckResult:
	name: str
	max_rel_error: float
	n_checked: int

	@property
	def passed(self) -> bool:
		return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < PASS_THRESHOLD


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
	scale = np.maximum(ERROR_FLOOR, np.maximum(np.abs(analytic), np.abs(numeric)))
	return np.abs(analytic - numeric) / scale


def _entries(size: int, max_entries: Optional[int], rng: Optional[np.random.Generator]) -> np.ndarray:
	if max_entries is None or size <= max_entries:
		return np.arange(size)
	rng = rng or np.random.default_rng(0)
	return np.sort(rng.choice(size, size=max_entries, replace=False))


def check_gradients(
	fn: LossFn,
	arrays: Sequence[np.ndarray],
	h: float = FD_STEP,
	max_entries: Optional[int] = None,
	rng: Optional[np.random.Generator] = None,
) -> Tuple[float, int]:
	"""Сравнить аналитический градиент по входам с центральными разностями.

	Args:
		fn: Функция списка тензоров, возвращающая скаляр
		arrays: Точки проверки
		h: Шаг разностей
		max_entries: Сколько элементов каждого входа проверять (None - все)
		rng: Выбор проверяемых элементов

	Returns:
		(максимальная относительная ошибка, число проверенных элементов)
	"""
	inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
	fn(inputs).backward()
	worst, count = 0.0, 0
	for i, x in enumerate(inputs):
		analytic = np.zeros_like(x.data) if x.grad is None else x.grad
		flat = x.data.reshape(-1)
		for j in _entries(flat.size, max_entries, rng):
			original = flat[j]
			with no_grad():
				flat[j] = original + h
				plus = fn([Tensor(t.data) for t in inputs]).item()
				flat[j] = original - h
				minus = fn([Tensor(t.data) for t in inputs]).item()
			flat[j] = original
			numeric = (plus - minus) / (2.0 * h)
			worst = max(worst, float(relative_error(analytic.reshape(-1)[j], numeric)))
			count += 1
	return worst, count


def check_module_gradients(
	module: Module,
	loss_fn: Callable[[], Tensor],
	h: float = FD_STEP,
	max_entries: Optional[int] = 4,
	rng: Optional[np.random.Generator] = None,
) -> Tuple[float, int]:
	"""То же для параметров модуля (по max_entries элементов на параметр)."""
	module.zero_grad()
	loss_fn().backward()
	rng = rng or np.random.default_rng(0)
	worst, count = 0.0, 0
	for name, p in module.named_parameters():
		analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
		flat = p.data.reshape(-1)
		for j in _entries(flat.size, max_entries, rng):
			original = flat[j]
			with no_grad():
				flat[j] = original + h
				plus = loss_fn().item()
				flat[j] = original - h
				minus = loss_fn().item()
			flat[j] = original
			error = float(relative_error(analytic.reshape(-1)[j], (plus - minus) / (2.0 * h)))
			if error > worst:
				logger.debug(f"{name}[{j}]: относительная ошибка {error:.3e}")
			worst = max(worst, error)
			count += 1
	module.zero_grad()
	return worst, count


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
	return (out * weights).sum()


def _unary(op: Callable[[Tensor], Tensor], positive: bool = False):
	def build(rng):
		x = rng.normal(size=(3, 4))
		if positive:
			x = np.abs(x) + 0.5
		w = rng.normal(size=(3, 4))
		return (lambda t: _weighted(op(t[0]), w)), [x]
	return build


def _binary(op: Callable[[Tensor, Tensor], Tensor], broadcast: bool = True, safe_denominator: bool = False):
	def build(rng):
		a = rng.normal(size=(2, 3, 4))
		b = rng.normal(size=(3, 1) if broadcast else (2, 3, 4))
		if safe_denominator:
			b = np.sign(b) * (np.abs(b) + 0.5)
		w = rng.normal(size=(2, 3, 4))
		return (lambda t: _weighted(op(t[0], t[1]), w)), [a, b]
	return build


def _shaped(shape, out_shape, op):
	def build(rng):
		w = rng.normal(size=out_shape)
		return (lambda t: _weighted(op(t[0]), w)), [rng.normal(size=shape)]
	return build


def _layer(factory, input_shapes, out_shape, call):
	"""Градиент по входам слоя со случайными (ненулевыми) весами."""
	def build(rng):
		layer = factory(rng)
		for p in layer.parameters():
			if not np.any(p.data):
				p.data = rng.normal(0.0, 0.3, size=p.shape)
		w = rng.normal(size=out_shape)
		arrays = [rng.normal(size=s) for s in input_shapes]
		return (lambda t: _weighted(call(layer, t), w)), arrays
	return build


def _tiny_config() -> TransformerConfig:
	return TransformerConfig(n_heads=2, head_dim=3, n_layers=1, inner_dim=6, cross_attn_dim=5, cond_dim=4)


OP_REGISTRY: Dict[str, Callable] = {
	"add": _binary(T.add),
	"sub": _binary(T.sub),
	"mul": _binary(T.mul),
	"div": _binary(T.div, safe_denominator=True),
	"neg": _unary(T.neg),
	"pow": _unary(lambda x: T.power(x, 3.0)),
	"exp": _unary(T.exp),
	"log": _unary(T.log, positive=True),
	"tanh": _unary(T.tanh),
	"sin": _unary(T.sin),
	"cos": _unary(T.cos),
	"gelu": _unary(T.gelu),
	"silu": _unary(T.silu),
	"matmul": lambda rng: (
		(lambda w: (lambda t: _weighted(T.matmul(t[0], t[1]), w)))(rng.normal(size=(2, 3, 5))),
		[rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))],
	),
	"sum": _shaped((3, 4, 2), (3, 2), lambda x: T.tsum(x, axis=1)),
	"mean": _shaped((3, 4, 2), (3, 4), lambda x: T.mean(x, axis=-1)),
	"max": _shaped((3, 5, 2), (3, 2), lambda x: T.tmax(x, axis=1)),
	"reshape": _shaped((3, 4), (2, 6), lambda x: T.reshape(x, (2, 6))),
	"transpose": _shaped((2, 3, 4), (4, 2, 3), lambda x: T.transpose(x, (2, 0, 1))),
	"gather": _shaped((5, 3), (4, 3), lambda x: T.take(x, np.array([0, 2, 2, 4]), axis=0)),
	"concat": lambda rng: (
		(lambda w: (lambda t: _weighted(T.concat([t[0], t[1]], axis=1), w)))(rng.normal(size=(2, 5))),
		[rng.normal(size=(2, 3)), rng.normal(size=(2, 2))],
	),
	"stack": lambda rng: (
		(lambda w: (lambda t: _weighted(T.stack([t[0], t[1]], axis=1), w)))(rng.normal(size=(3, 2, 4))),
		[rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
	),
	"softmax": _shaped((3, 5), (3, 5), lambda x: T.softmax(x, axis=-1)),
	"layer_norm": _shaped((3, 6), (3, 6), T.layer_norm),
	"mse": lambda rng: ((lambda t: T.mse_loss(t[0], t[1])), [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))]),
	"linear": _layer(lambda rng: Linear(4, 3, rng), [(2, 5, 4)], (2, 5, 3), lambda l, t: l(t[0])),
	"mhsa": _layer(
		lambda rng: MultiHeadSelfAttention(6, 2, 3, rng), [(2, 4, 6)], (2, 4, 6), lambda l, t: l(t[0])
	),
	"cross_attention": _layer(
		lambda rng: CrossAttention(6, 5, 2, 3, rng), [(2, 4, 6), (2, 3, 5)], (2, 4, 6), lambda l, t: l(t[0], t[1])
	),
	"ada_layer_norm": _layer(
		lambda rng: AdaLayerNorm(6, 4, rng), [(2, 3, 6), (2, 4)], (2, 3, 6), lambda l, t: l(t[0], t[1])
	),
	"patch_encoder": _layer(
		lambda rng: PatchEncoder([3, 8, 5], rng), [(2, 3, 4, 3), (2, 3, 3)], (2, 3, 5), lambda l, t: l(t[0], t[1])
	),
	"temporal_attention": _layer(
		lambda rng: TemporalAttention(6, 2, 3, 4, rng), [(2, 3, 2, 6)], (2, 3, 2, 6), lambda l, t: l(t[0])
	),
	"fourier_mlp": _layer(
		lambda rng: FourierActionEmbedder(FourierEmbedderConfig(n_frequencies=2, out_dim=6, mlp_hidden=[5]), rng).mlp,
		[(2, 3, 12)],
		(2, 3, 6),
		lambda l, t: l(t[0]),
	),
	"transformer_block": _layer(
		lambda rng: TransformerBlock(_tiny_config(), 6, rng, cross=True, temporal_frames=3),
		[(2, 3, 4, 6), (2, 4), (2, 2, 5)],
		(2, 3, 4, 6),
		lambda l, t: l(t[0], t[1], t[2]),
	),
}


def run_op_checks(seed: int = 0, names: Optional[Sequence[str]] = None) -> List[GradcheckResult]:
	"""Проверить все (или выбранные) операции реестра."""
	results = []
	for name in names or OP_REGISTRY:
		rng = np.random.default_rng([seed, len(results)])
		fn, arrays = OP_REGISTRY[name](rng)
		error, count = check_gradients(fn, arrays)
		results.append(GradcheckResult(name, error, count))
		logger.debug(f"gradcheck {name}: {error:.3e} по {count} элементам")
	return results
