"""Тензор с обратным режимом автодифференцирования поверх numpy (float64)."""

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit

from ..errors import ShapeError


_state = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int]


def is_grad_enabled() -> bool:
	return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
	"""Не записывать граф (в пределах текущего потока)."""
	previous = is_grad_enabled()
	_state.enabled = False
	try:
		yield
	finally:
		_state.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
	while grad.ndim > len(shape):
		grad = grad.sum(axis=0)
	for axis, size in enumerate(shape):
		if size == 1 and grad.shape[axis] != 1:
			grad = grad.sum(axis=axis, keepdims=True)
	return grad


class Tensor:
	"""Плотный n-мерный массив с необязательным градиентом."""

	__slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

	def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
		self.data = np.asarray(data, dtype=np.float64)
		self.grad: Optional[np.ndarray] = None
		self.requires_grad = bool(requires_grad)
		self._parents: Tuple["Tensor", ...] = ()
		self._backward: Optional[Callable] = None
		self.name = name

	def __repr__(self) -> str:
		return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

	@property
	def shape(self) -> Tuple[int, ...]:
		return self.data.shape

	@property
	def ndim(self) -> int:
		return self.data.ndim

	@property
	def size(self) -> int:
		return self.data.size

	def numpy(self) -> np.ndarray:
		return self.data

	def item(self) -> float:
		return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

	def detach(self) -> "Tensor":
		return Tensor(self.data)

	def zero_grad(self):
		self.grad = None

	@staticmethod
	def _result(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
		track = is_grad_enabled() and any(p.requires_grad for p in parents)
		out = Tensor(data, requires_grad=track)
		if track:
			out._parents = tuple(parents)
			out._backward = backward
		return out

	def backward(self, grad: Optional[np.ndarray] = None):
		"""Распространить градиент до листьев с requires_grad.

		Градиенты листьев накапливаются (повторное использование параметра суммирует пути).
		"""
		if grad is None:
			if self.size != 1:
				raise ShapeError(f"backward без градиента требует скаляр, форма {self.shape}")
			grad = np.ones_like(self.data)
		if not self.requires_grad:
			return
		order = []
		visited = set()
		stack = [(self, False)]
		while stack:
			node, expanded = stack.pop()
			if expanded:
				order.append(node)
				continue
			if id(node) in visited:
				continue
			visited.add(id(node))
			stack.append((node, True))
			for parent in node._parents:
				if parent.requires_grad and id(parent) not in visited:
					stack.append((parent, False))
		grads = {id(self): np.asarray(grad, dtype=np.float64)}
		for node in reversed(order):
			g = grads.pop(id(node), None)
			if g is None:
				continue
			if node._backward is None:
				node.grad = g.copy() if node.grad is None else node.grad + g
				continue
			for parent, pg in zip(node._parents, node._backward(g)):
				if pg is None or not parent.requires_grad:
					continue
				key = id(parent)
				grads[key] = grads[key] + pg if key in grads else pg

	# арифметика

	def __add__(self, other):
		return add(self, other)

	def __radd__(self, other):
		return add(other, self)

	def __sub__(self, other):
		return sub(self, other)

	def __rsub__(self, other):
		return sub(other, self)

	def __mul__(self, other):
		return mul(self, other)

	def __rmul__(self, other):
		return mul(other, self)

	def __truediv__(self, other):
		return div(self, other)

	def __rtruediv__(self, other):
		return div(other, self)

	def __neg__(self):
		return neg(self)

	def __pow__(self, exponent: float):
		return power(self, exponent)

	def __matmul__(self, other):
		return matmul(self, other)

	def __getitem__(self, key):
		return index(self, key)

	def sum(self, axis=None, keepdims: bool = False):
		return tsum(self, axis, keepdims)

	def mean(self, axis=None, keepdims: bool = False):
		return mean(self, axis, keepdims)

	def max(self, axis=None, keepdims: bool = False):
		return tmax(self, axis, keepdims)

	def reshape(self, *shape):
		if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
			shape = tuple(shape[0])
		return reshape(self, shape)

	def transpose(self, *axes):
		if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
			axes = tuple(axes[0])
		return transpose(self, axes or None)

	def exp(self):
		return exp(self)

	def log(self):
		return log(self)

	def tanh(self):
		return tanh(self)


def as_tensor(value: ArrayLike) -> Tensor:
	return value if isinstance(value, Tensor) else Tensor(value)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
	a, b = as_tensor(a), as_tensor(b)

	def backward(g):
		return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

	return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
	a, b = as_tensor(a), as_tensor(b)

	def backward(g):
		return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

	return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
	a, b = as_tensor(a), as_tensor(b)

	def backward(g):
		return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

	return Tensor._result(a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
	a, b = as_tensor(a), as_tensor(b)

	def backward(g):
		return (
			_unbroadcast(g / b.data, a.shape),
			_unbroadcast(-g * a.data / (b.data * b.data), b.shape),
		)

	return Tensor._result(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
	return Tensor._result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
	exponent = float(exponent)
	return Tensor._result(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def exp(a: Tensor) -> Tensor:
	out = np.exp(a.data)
	return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
	return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
	out = np.tanh(a.data)
	return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a: Tensor) -> Tensor:
	return Tensor._result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
	return Tensor._result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def gelu(a: Tensor) -> Tensor:
	"""Точный GELU: x·Φ(x)."""
	x = a.data
	cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
	pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
	return Tensor._result(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def silu(a: Tensor) -> Tensor:
	x = a.data
	sig = expit(x)
	return Tensor._result(x * sig, (a,), lambda g: (g * (sig + x * sig * (1.0 - sig)),))


def relu(a: Tensor) -> Tensor:
	return Tensor._result(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


ACTIVATIONS = {"gelu": gelu, "silu": silu, "relu": relu, "tanh": tanh}


def matmul(a: Tensor, b: Tensor) -> Tensor:
	a, b = as_tensor(a), as_tensor(b)
	if a.ndim < 2 or b.ndim < 2:
		raise ShapeError(f"matmul требует матрицы, получено {a.shape} и {b.shape}")
	if a.shape[-1] != b.shape[-2]:
		raise ShapeError(f"Несовместимые формы для matmul: {a.shape} @ {b.shape}")

	def backward(g):
		ga = g @ np.swapaxes(b.data, -1, -2)
		gb = np.swapaxes(a.data, -1, -2) @ g
		return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

	return Tensor._result(a.data @ b.data, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
	def backward(g):
		if axis is not None and not keepdims:
			g = np.expand_dims(g, axis)
		return (np.broadcast_to(g, a.shape).copy(),)

	return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
	count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
	return tsum(a, axis, keepdims) * (1.0 / count)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
	out = a.data.max(axis=axis, keepdims=True)
	mask = (a.data == out).astype(np.float64)
	mask /= mask.sum(axis=axis, keepdims=True)

	def backward(g):
		if axis is not None and not keepdims:
			g = np.expand_dims(g, axis)
		elif axis is None:
			g = np.reshape(g, (1,) * a.ndim)
		return (g * mask,)

	result = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis=axis))
	return Tensor._result(result, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
	return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
	axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
	inverse = tuple(np.argsort(axes))
	return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swap_last(a: Tensor) -> Tensor:
	axes = list(range(a.ndim))
	axes[-1], axes[-2] = axes[-2], axes[-1]
	return transpose(a, axes)


def index(a: Tensor, key) -> Tensor:
	"""Индексирование numpy (включая продвинутое); градиент через np.add.at."""
	def backward(g):
		out = np.zeros_like(a.data)
		np.add.at(out, key, g)
		return (out,)

	return Tensor._result(a.data[key], (a,), backward)


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
	"""Выборка по индексам вдоль оси (gather)."""
	axis = axis % a.ndim
	key = (slice(None),) * axis + (np.asarray(indices, dtype=np.int64),)
	return index(a, key)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
	tensors = [as_tensor(t) for t in tensors]
	axis = axis % tensors[0].ndim
	sizes = [t.shape[axis] for t in tensors]
	splits = np.cumsum(sizes)[:-1]

	def backward(g):
		return tuple(np.split(g, splits, axis=axis))

	return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
	tensors = [as_tensor(t) for t in tensors]

	def backward(g):
		return tuple(np.moveaxis(g, axis, 0))

	return Tensor._result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
	shifted = a.data - a.data.max(axis=axis, keepdims=True)
	e = np.exp(shifted)
	out = e / e.sum(axis=axis, keepdims=True)

	def backward(g):
		return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

	return Tensor._result(out, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
	"""Нормализация по последней оси без аффинных параметров."""
	mu = a.data.mean(axis=-1, keepdims=True)
	centered = a.data - mu
	inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
	normed = centered * inv_std

	def backward(g):
		g_mean = g.mean(axis=-1, keepdims=True)
		gx_mean = np.mean(g * normed, axis=-1, keepdims=True)
		return (inv_std * (g - g_mean - normed * gx_mean),)

	return Tensor._result(normed, (a,), backward)


def mse_loss(prediction: Tensor, target: ArrayLike) -> Tensor:
	diff = prediction - as_tensor(target)
	return mean(diff * diff)
