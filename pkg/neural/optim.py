"""AdamW, расписание learning rate (прогрев + косинус) и ограничение нормы градиента."""

import math
from typing import Dict, List, Sequence

import numpy as np

from .tensor import Tensor


def lr_at(step: int, base_lr: float, warmup: int, total: int, min_ratio: float = 0.0) -> float:
	"""Линейный прогрев до base_lr, затем косинусное затухание до base_lr·min_ratio."""
	if warmup > 0 and step < warmup:
		return base_lr * (step + 1) / warmup
	span = max(total - warmup, 1)
	progress = min(max(step - warmup, 0) / span, 1.0)
	cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
	return base_lr * (min_ratio + (1.0 - min_ratio) * cosine)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
	"""Масштабировать градиенты так, чтобы глобальная норма не превышала max_norm.

	Returns:
		Норма до ограничения
	"""
	total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
	if max_norm > 0 and total > max_norm:
		scale = max_norm / (total + 1e-12)
		for p in params:
			if p.grad is not None:
				p.grad = p.grad * scale
	return total


class AdamW:
	"""Adam с развязанным weight decay."""

	def __init__(
		self,
		params: Sequence[Tensor],
		lr: float = 1e-3,
		betas=(0.9, 0.999),
		eps: float = 1e-8,
		weight_decay: float = 0.0,
	):
		self.params: List[Tensor] = list(params)
		self.lr = lr
		self.beta1, self.beta2 = betas
		self.eps = eps
		self.weight_decay = weight_decay
		self.t = 0
		self.m: Dict[int, np.ndarray] = {id(p): np.zeros_like(p.data) for p in self.params}
		self.v: Dict[int, np.ndarray] = {id(p): np.zeros_like(p.data) for p in self.params}

	def zero_grad(self):
		for p in self.params:
			p.grad = None

	def step(self, lr: float = None):
		lr = self.lr if lr is None else lr
		self.t += 1
		c1 = 1.0 - self.beta1 ** self.t
		c2 = 1.0 - self.beta2 ** self.t
		for p in self.params:
			if p.grad is None:
				continue
			m, v = self.m[id(p)], self.v[id(p)]
			m *= self.beta1
			m += (1.0 - self.beta1) * p.grad
			v *= self.beta2
			v += (1.0 - self.beta2) * p.grad * p.grad
			if self.weight_decay:
				p.data = p.data * (1.0 - lr * self.weight_decay)
			p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
