"""Пружинный симулятор ткани (полунеявный Эйлер) - оракул переходов T.

Пружины трёх типов (растяжение, сдвиг, изгиб через две вершины), гравитация,
вязкое затухание, жёсткая фиксация захваченной вершины и проекция на плоскость пола
с кулоновским трением. Все операции векторизованы по ведущей пакетной оси, что
позволяет планировщику прогонять K траекторий за один вызов.
"""

import logging
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import DomainError, SimulationBlowupError
from .geometry import EDGE_BEND, EDGE_SHEAR, EDGE_STRUCTURAL, ClothMesh


logger = logging.getLogger(__name__)


class SimParams(BaseModel):
	"""Физические параметры симуляции."""

	model_config = ConfigDict(extra="forbid")

	stretch_stiffness: float = Field(default=1e3, ge=0, description="Н/м")
	shear_stiffness: float = Field(default=1e3, ge=0, description="Н/м")
	bend_stiffness: float = Field(default=1e-3, ge=0, description="Н/м")
	damping: float = Field(default=1e-2, ge=0, description="Вязкое затухание, 1/с")
	spring_damping: float = Field(default=2.0, ge=0, description="Демпфер вдоль пружин, Н·с/м")
	density: float = Field(default=1e3, gt=0, description="кг/м³")
	thickness: float = Field(default=1e-3, gt=0, description="м")
	friction: float = Field(default=0.5, ge=0)
	gravity: float = Field(default=-9.81, description="м/с², ось z")
	dt: float = Field(default=1e-3, gt=0, description="Длительность одного step, с")
	substeps: int = Field(default=10, ge=1)
	ground_height: float = Field(default=0.0)
	collision_margin: float = Field(default=1e-3, ge=0)
	steps_per_action: int = Field(default=10, ge=1, description="Вызовов step на одно действие")
	settle_steps: int = Field(default=20, ge=0, description="Вызовов step на успокоение после действия")

	@property
	def floor(self) -> float:
		return self.ground_height + self.collision_margin


@dataclass(frozen=True)
class GraspConstraint:
	"""Захват: вершина жёстко переносится в target_position."""

	vertex_index: int
	target_position: np.ndarray


@dataclass(frozen=True, eq=False)
class ActionStep:
	"""Смещение точки захвата за один шаг действия (grasp_index=None - захват отпущен)."""

	grasp_index: Optional[int]
	delta: np.ndarray

	def magnitude(self) -> float:
		return float(np.linalg.norm(self.delta))

	def within_bounds(self, a_min: float, a_max: float) -> bool:
		return a_min - 1e-12 <= self.magnitude() <= a_max + 1e-12


@dataclass(frozen=True, eq=False)
class ClothState:
	"""Сетка плюс скорости вершин."""

	mesh: ClothMesh
	velocities: np.ndarray

	@classmethod
	def at_rest(cls, mesh: ClothMesh) -> "ClothState":
		return cls(mesh, np.zeros_like(mesh.vertices))


DEFAULT_REST_HEIGHT = 1e-3


def make_grid_cloth(rows: int, cols: int, spacing: float, height: float = DEFAULT_REST_HEIGHT) -> ClothMesh:
	"""Плоская квадратная сетка-шаблон s_c, центрированная в начале координат.

	Args:
		rows: Число рядов вершин
		cols: Число столбцов вершин
		spacing: Шаг сетки, м
		height: Высота плоскости ткани (по умолчанию - лежит на полу)

	Returns:
		ClothMesh со структурными, сдвиговыми и изгибными рёбрами
	"""
	if rows < 2 or cols < 2:
		raise DomainError("Сетка должна быть не меньше 2x2")
	if spacing <= 0:
		raise DomainError("Шаг сетки должен быть положительным")
	r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
	vertices = np.stack([
		(c.ravel() - (cols - 1) / 2.0) * spacing,
		(r.ravel() - (rows - 1) / 2.0) * spacing,
		np.full(rows * cols, float(height)),
	], axis=1)

	def vid(i, j):
		return i * cols + j

	edges: List[Tuple[int, int]] = []
	kinds: List[int] = []
	faces: List[Tuple[int, int, int]] = []
	for i in range(rows):
		for j in range(cols):
			if j + 1 < cols:
				edges.append((vid(i, j), vid(i, j + 1)))
				kinds.append(EDGE_STRUCTURAL)
			if i + 1 < rows:
				edges.append((vid(i, j), vid(i + 1, j)))
				kinds.append(EDGE_STRUCTURAL)
	for i in range(rows - 1):
		for j in range(cols - 1):
			a, b, d, e = vid(i, j), vid(i, j + 1), vid(i + 1, j), vid(i + 1, j + 1)
			edges += [(a, e), (b, d)]
			kinds += [EDGE_SHEAR, EDGE_SHEAR]
			faces += [(a, b, e), (a, e, d)]
	for i in range(rows):
		for j in range(cols):
			if j + 2 < cols:
				edges.append((vid(i, j), vid(i, j + 2)))
				kinds.append(EDGE_BEND)
			if i + 2 < rows:
				edges.append((vid(i, j), vid(i + 2, j)))
				kinds.append(EDGE_BEND)
	return ClothMesh(vertices, np.asarray(edges), np.asarray(faces), np.asarray(kinds))


def mesh_area(mesh: ClothMesh) -> float:
	if len(mesh.faces) == 0:
		return 0.0
	v = mesh.vertices
	a, b, c = v[mesh.faces[:, 0]], v[mesh.faces[:, 1]], v[mesh.faces[:, 2]]
	return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())


class ClothSimulator:
	"""Интегратор для одной ткани (топология и массы вычисляются один раз)."""

	def __init__(self, mesh: ClothMesh, params: Optional[SimParams] = None):
		self.mesh = mesh
		self.params = params or SimParams()
		p = self.params
		stiffness_by_kind = {
			EDGE_STRUCTURAL: p.stretch_stiffness,
			EDGE_SHEAR: p.shear_stiffness,
			EDGE_BEND: p.bend_stiffness,
		}
		self.stiffness = np.array([stiffness_by_kind[int(k)] for k in mesh.edge_kinds], dtype=np.float64)
		self.rest = mesh.rest_lengths
		self.i = mesh.edges[:, 0]
		self.j = mesh.edges[:, 1]
		nv, ne = mesh.n_vertices, len(mesh.edges)
		# F = A @ f, где f - сила на первую вершину ребра
		self.incidence = np.zeros((nv, ne))
		self.incidence[self.i, np.arange(ne)] += 1.0
		self.incidence[self.j, np.arange(ne)] -= 1.0
		area = mesh_area(mesh)
		if area <= 0:
			area = 1e-4 * nv
		self.mass = p.density * p.thickness * area / nv
		logger.debug(f"Симулятор: {nv} вершин, {ne} пружин, масса вершины {self.mass:.3e} кг")

	def forces(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
		"""Суммарные силы (..., Nv, 3)."""
		p = self.params
		d = x[..., self.j, :] - x[..., self.i, :]
		length = np.linalg.norm(d, axis=-1)
		direction = d / np.maximum(length, 1e-12)[..., None]
		magnitude = self.stiffness * (length - self.rest)
		if p.spring_damping > 0:
			rel_v = v[..., self.j, :] - v[..., self.i, :]
			magnitude = magnitude + p.spring_damping * np.sum(rel_v * direction, axis=-1)
		f = magnitude[..., None] * direction
		total = np.matmul(self.incidence, f)
		total[..., 2] += self.mass * p.gravity
		if p.damping > 0:
			total -= p.damping * self.mass * v
		return total

	def _collide(self, x: np.ndarray, v: np.ndarray):
		p = self.params
		floor = p.floor
		below = x[..., 2] < floor
		if not below.any():
			return
		vn = v[..., 2]
		removed = np.where(below, np.maximum(-vn, 0.0), 0.0)
		x[..., 2] = np.where(below, floor, x[..., 2])
		v[..., 2] = np.where(below & (vn < 0), 0.0, vn)
		speed = np.linalg.norm(v[..., :2], axis=-1)
		scale = np.where(below, np.maximum(0.0, 1.0 - p.friction * removed / np.maximum(speed, 1e-12)), 1.0)
		v[..., :2] *= scale[..., None]

	def step_batch(
		self,
		x: np.ndarray,
		v: np.ndarray,
		grasp_index: Optional[int] = None,
		target: Optional[np.ndarray] = None,
		step_id: Optional[int] = None,
	) -> Tuple[np.ndarray, np.ndarray]:
		"""Продвинуть пакет состояний на dt.

		Args:
			x: Позиции (..., Nv, 3)
			v: Скорости (..., Nv, 3)
			grasp_index: Захваченная вершина или None
			target: Цель захвата (..., 3), достигается точно в конце шага
			step_id: Номер шага для сообщения об ошибке

		Returns:
			Новые (x, v)
		"""
		p = self.params
		h = p.dt / p.substeps
		x = np.array(x, dtype=np.float64, copy=True)
		v = np.array(v, dtype=np.float64, copy=True)
		if grasp_index is not None:
			if not 0 <= grasp_index < self.mesh.n_vertices:
				raise DomainError(f"Некорректный индекс захвата {grasp_index}")
			target = np.asarray(target, dtype=np.float64)
			start = x[..., grasp_index, :].copy()
		for s in range(p.substeps):
			f = self.forces(x, v)
			if not np.isfinite(f).all():
				raise SimulationBlowupError(_first_bad_vertex(f), step_id)
			v = v + (h / self.mass) * f
			previous = x[..., grasp_index, :].copy() if grasp_index is not None else None
			x = x + h * v
			self._collide(x, v)
			if grasp_index is not None:
				if s == p.substeps - 1:
					position = target
				else:
					position = start + (target - start) * ((s + 1) / p.substeps)
				x[..., grasp_index, :] = position
				v[..., grasp_index, :] = (position - previous) / h
		if not np.isfinite(x).all():
			raise SimulationBlowupError(_first_bad_vertex(x), step_id)
		return x, v

	def step(self, state: ClothState, grasp: Optional[GraspConstraint] = None) -> ClothState:
		"""Один шаг dt для одиночного состояния."""
		if grasp is None:
			x, v = self.step_batch(state.mesh.vertices, state.velocities)
		else:
			x, v = self.step_batch(state.mesh.vertices, state.velocities, grasp.vertex_index, grasp.target_position)
		return ClothState(state.mesh.with_vertices(x), v)

	def run_actions(
		self,
		x: np.ndarray,
		v: np.ndarray,
		grasp_indices: Sequence[Optional[int]],
		deltas: np.ndarray,
	) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
		"""Прогнать последовательность действий для пакета состояний.

		Args:
			x: Позиции (..., Nv, 3)
			v: Скорости (..., Nv, 3)
			grasp_indices: Индекс захвата на каждом шаге действия (None - отпущено)
			deltas: Смещения (..., L, 3), ведущие оси совпадают с x

		Returns:
			(кадры (..., L, Nv, 3) после успокоения, итоговые x, v)
		"""
		p = self.params
		deltas = np.asarray(deltas, dtype=np.float64)
		frames = []
		current = None
		target = None
		for t, g in enumerate(grasp_indices):
			if g is None:
				current = None
				for s in range(p.steps_per_action + p.settle_steps):
					x, v = self.step_batch(x, v, step_id=t)
			else:
				g = int(g)
				if g != current:
					current = g
					target = x[..., g, :].copy()
				new_target = target + deltas[..., t, :]
				new_target[..., 2] = np.maximum(new_target[..., 2], p.floor)
				for s in range(p.steps_per_action):
					if s == p.steps_per_action - 1:
						waypoint = new_target
					else:
						waypoint = target + (new_target - target) * ((s + 1) / p.steps_per_action)
					x, v = self.step_batch(x, v, g, waypoint, step_id=t)
				for s in range(p.settle_steps):
					x, v = self.step_batch(x, v, g, new_target, step_id=t)
				target = new_target
			frames.append(x.copy())
		return np.stack(frames, axis=-3), x, v


def _first_bad_vertex(values: np.ndarray) -> int:
	bad = ~np.isfinite(values).all(axis=-1)
	flat = np.argwhere(bad)
	return int(flat[0][-1]) if len(flat) else -1


def step(state: ClothState, params: SimParams, grasp: Optional[GraspConstraint] = None) -> ClothState:
	"""Один шаг dt (функциональная форма)."""
	return ClothSimulator(state.mesh, params).step(state, grasp)


def rollout(
	state: ClothState,
	params: SimParams,
	actions: Sequence[ActionStep],
	simulator: Optional[ClothSimulator] = None,
) -> List[ClothMesh]:
	"""Применить последовательность действий; по одной сетке на шаг действия.

	Args:
		state: Начальное состояние
		params: Параметры симуляции
		actions: Непустая последовательность действий
		simulator: Готовый симулятор той же ткани (необязательно)

	Returns:
		Список сеток после успокоения каждого шага
	"""
	if not actions:
		raise DomainError("Пустая последовательность действий")
	sim = simulator or ClothSimulator(state.mesh, params)
	deltas = np.stack([np.asarray(a.delta, dtype=np.float64) for a in actions])
	grasps = [a.grasp_index for a in actions]
	try:
		frames, _, _ = sim.run_actions(state.mesh.vertices, state.velocities, grasps, deltas)
	except SimulationBlowupError as e:
		logger.warning(f"Симуляция разошлась на шаге действия {e.step}, вершина {e.vertex}")
		raise
	return [state.mesh.with_vertices(f) for f in frames]


def rollout_state(
	state: ClothState,
	actions: Sequence[ActionStep],
	simulator: ClothSimulator,
) -> Tuple[List[ClothMesh], ClothState]:
	"""Как rollout, но дополнительно возвращает итоговое состояние со скоростями."""
	deltas = np.stack([np.asarray(a.delta, dtype=np.float64) for a in actions])
	frames, x, v = simulator.run_actions(
		state.mesh.vertices, state.velocities, [a.grasp_index for a in actions], deltas
	)
	return [state.mesh.with_vertices(f) for f in frames], ClothState(state.mesh.with_vertices(x), v)


def settle_tail(n: int) -> List[ActionStep]:
	"""Отпущенный захват, нулевые действия."""
	return [ActionStep(None, np.zeros(3)) for _ in range(n)]


def _unit(vec: np.ndarray, fallback: np.ndarray) -> np.ndarray:
	norm = np.linalg.norm(vec)
	return vec / norm if norm > 1e-12 else fallback


def _keep_above_floor(position: np.ndarray, delta: np.ndarray, floor: float, horizontal: np.ndarray) -> np.ndarray:
	"""Если шаг уходит под пол - заменяем его горизонтальным той же длины."""
	if position[2] + delta[2] >= floor:
		return delta
	flat = np.array([delta[0], delta[1], 0.0])
	return np.linalg.norm(delta) * _unit(flat, horizontal)


def _directional_sequence(mesh: ClothMesh, n: int, magnitudes: np.ndarray, rng: np.random.Generator, floor: float) -> List[ActionStep]:
	g = int(rng.integers(mesh.n_vertices))
	position = mesh.vertices[g].copy()
	mode = str(rng.choice(["fold", "pick", "drag"]))
	theta = rng.uniform(0.0, 2.0 * np.pi)
	horizontal = np.array([np.cos(theta), np.sin(theta), 0.0])
	if mode == "fold":
		towards = mesh.vertices.mean(axis=0) - position
		towards[2] = 0.0
		base = _unit(towards, horizontal)
		jitter = rng.uniform(-np.pi / 6, np.pi / 6)
		c, s = np.cos(jitter), np.sin(jitter)
		horizontal = np.array([c * base[0] - s * base[1], s * base[0] + c * base[1], 0.0])
	up = np.array([0.0, 0.0, 1.0])
	n_up = max(1, n // 3)
	steps = []
	for t in range(n):
		if mode == "fold":
			elevation = np.deg2rad(60.0 - 120.0 * t / max(n - 1, 1))
		elif mode == "pick":
			elevation = np.deg2rad(rng.uniform(75.0, 90.0)) if t < n_up else np.deg2rad(rng.uniform(-5.0, 5.0))
		else:
			elevation = np.deg2rad(rng.uniform(0.0, 10.0))
		direction = np.cos(elevation) * horizontal + np.sin(elevation) * up
		delta = magnitudes[t] * _unit(direction, up)
		delta = _keep_above_floor(position, delta, floor, horizontal)
		position = position + delta
		steps.append(ActionStep(g, delta))
	return steps


def _arc_length(src: np.ndarray, dst: np.ndarray, height: float, resolution: int = 512) -> Tuple[float, np.ndarray, np.ndarray]:
	u = np.linspace(0.0, 1.0, resolution + 1)
	curve = src + u[:, None] * (dst - src)
	curve[:, 2] += height * 4.0 * u * (1.0 - u)
	seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
	cumulative = np.concatenate([[0.0], np.cumsum(seg)])
	return float(cumulative[-1]), curve, cumulative


def _pairwise_sequence(mesh: ClothMesh, n: int, rng: np.random.Generator, magnitude: Tuple[float, float]) -> List[ActionStep]:
	lo, hi = magnitude
	span = hi - lo
	# запас, чтобы хорды кусков дуги остались внутри [lo, hi]
	lo_step, hi_step = lo + 0.1 * span, hi - 0.1 * span
	src = int(rng.integers(mesh.n_vertices))
	distances = np.linalg.norm(mesh.vertices - mesh.vertices[src], axis=1)
	feasible = (distances >= 0.5 * lo_step * n) & (distances <= hi_step * n)
	if feasible.any():
		weights = np.where(feasible, distances, 0.0)
		dst = int(rng.choice(mesh.n_vertices, p=weights / weights.sum()))
	else:
		dst = int(np.argmax(distances))
		logger.debug(f"Нет подходящей пары для {n} шагов, берём самую дальнюю вершину {dst}")
	p_src, p_dst = mesh.vertices[src], mesh.vertices[dst]
	chord = float(np.linalg.norm(p_dst - p_src))
	low = max(lo_step * n, chord)
	high = max(min(hi_step * n, 2.0 * chord), low)
	wanted = rng.uniform(low, high)
	h_lo, h_hi = 0.0, max(wanted, 1e-6)
	for _ in range(60):
		h_mid = 0.5 * (h_lo + h_hi)
		if _arc_length(p_src, p_dst, h_mid)[0] < wanted:
			h_lo = h_mid
		else:
			h_hi = h_mid
	total, curve, cumulative = _arc_length(p_src, p_dst, 0.5 * (h_lo + h_hi))
	marks = np.linspace(0.0, total, n + 1)
	waypoints = np.stack([np.interp(marks, cumulative, curve[:, axis]) for axis in range(3)], axis=1)
	waypoints[0] = p_src
	waypoints[-1] = p_dst
	return [ActionStep(src, d) for d in np.diff(waypoints, axis=0)]


def sample_action_sequence(
	mesh: ClothMesh,
	strategy: Literal["directional", "pairwise"],
	rng: np.random.Generator,
	magnitude: Tuple[float, float] = (0.02, 0.05),
	length: Tuple[int, int] = (15, 35),
	floor: float = DEFAULT_REST_HEIGHT,
) -> List[ActionStep]:
	"""Случайная последовательность действий для сбора данных.

	Args:
		mesh: Текущее состояние ткани
		strategy: directional (складывание / подъём / протаскивание) или pairwise (вершина на вершину по дуге)
		rng: Генератор случайных чисел
		magnitude: Диапазон длины шага, м
		length: Диапазон длины последовательности (включительно)
		floor: Минимальная высота точки захвата

	Returns:
		Список ActionStep с единым индексом захвата
	"""
	if mesh.n_vertices == 0:
		raise DomainError("Пустая сетка")
	n = int(rng.integers(length[0], length[1] + 1))
	if strategy == "directional":
		magnitudes = rng.uniform(magnitude[0], magnitude[1], n)
		return _directional_sequence(mesh, n, magnitudes, rng, floor)
	if strategy == "pairwise":
		return _pairwise_sequence(mesh, n, rng, magnitude)
	raise DomainError(f"Неизвестная стратегия {strategy!r}")
