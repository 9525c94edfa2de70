"""MPPI/CEM-планировщик с выбором точки захвата и информированным начальным средним."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .clothsim import ActionStep, ClothSimulator, ClothState, rollout_state
from .dynamics import DdmModel, predict_batch
from .errors import CorrespondenceError, DomainError, PlanningError
from .geometry import ClothMesh, chamfer, emd, mse
from .observation import CameraPose, observe_cloud
from .perception import DpmModel, estimate_state


logger = logging.getLogger(__name__)


class PlannerConfig(BaseModel):
	"""Гиперпараметры планирования: N=5, K=16, L=5, σ₀=0.1, τ=1.0."""

	model_config = ConfigDict(extra="forbid")

	n_iterations: int = Field(default=5, ge=1)
	n_samples: int = Field(default=16, ge=2)
	seq_length: int = Field(default=5, ge=1)
	action_bounds: Tuple[float, float] = (-0.05, 0.05)
	step_magnitude: Tuple[float, float] = (0.02, 0.05)
	init_std: float = Field(default=0.1, gt=0)
	temperature: float = Field(default=1.0, gt=0)
	cost_scale: float = Field(default=1000.0, gt=0, description="Перевод стоимости (м²) в единицы температуры")
	w_mse: float = Field(default=1.0, ge=0)
	w_cd: float = Field(default=1.0, ge=0)
	w_smooth: float = Field(default=0.1, ge=0)
	grasp_temperature: float = Field(default=0.05, gt=0)
	informed_k: int = Field(default=10, ge=1)
	epsilon: float = Field(default=1e-3, ge=0)
	refit_std: bool = False
	workers: int = Field(default=1, ge=1)

	@model_validator(mode="after")
	def _check(self):
		if self.n_samples % 2:
			raise ValueError("n_samples должен быть чётным (половина MPPI, половина равномерных)")
		lo, hi = self.action_bounds
		if lo >= hi:
			raise ValueError("action_bounds: нижняя граница должна быть меньше верхней")
		return self

	@property
	def mid_magnitude(self) -> float:
		return 0.5 * (self.step_magnitude[0] + self.step_magnitude[1])


@dataclass
class PlanResult:
	best_actions: List[ActionStep]
	best_cost: float
	cost_history: List[float]
	grasp_index: int
	std_history: List[np.ndarray] = field(default_factory=list)

	@property
	def deltas(self) -> np.ndarray:
		return np.stack([a.delta for a in self.best_actions])


class DynamicsOracle(Protocol):
	"""(история (H, Nv, 3), захват, действия (K, L, 3)) → состояния после каждого шага (K, L, Nv, 3)."""

	thread_safe: bool

	def __call__(self, history: np.ndarray, grasp_index: Optional[int], deltas: np.ndarray) -> np.ndarray:
		...


class SimulatorOracle:
	"""Симулятор как оракул переходов (пакетно по K)."""

	thread_safe = True

	def __init__(self, simulator: ClothSimulator, velocities: Optional[np.ndarray] = None):
		self.simulator = simulator
		self.velocities = velocities

	def __call__(self, history: np.ndarray, grasp_index: Optional[int], deltas: np.ndarray) -> np.ndarray:
		deltas = np.asarray(deltas, dtype=np.float64)
		count, length = deltas.shape[:2]
		current = np.asarray(history)[-1]
		x = np.broadcast_to(current, (count,) + current.shape)
		v = np.zeros_like(x) if self.velocities is None else np.broadcast_to(self.velocities, x.shape)
		frames, _, _ = self.simulator.run_actions(x, v, [grasp_index] * length, deltas)
		return frames


class DdmOracle:
	"""Обученная DDM как оракул: куски по j действий, история сдвигается для каждого кандидата."""

	thread_safe = False

	def __init__(self, model: DdmModel, rng: np.random.Generator, sampling_steps: Optional[int] = None):
		self.model = model
		self.rng = rng
		self.sampling_steps = sampling_steps

	def __call__(self, history: np.ndarray, grasp_index: Optional[int], deltas: np.ndarray) -> np.ndarray:
		deltas = np.asarray(deltas, dtype=np.float64)
		count, length = deltas.shape[:2]
		j = self.model.config.future
		n_hist = self.model.config.n_history_frames
		history = np.asarray(history, dtype=np.float64)[-n_hist:]
		if len(history) < n_hist:
			history = np.concatenate([np.repeat(history[:1], n_hist - len(history), axis=0), history])
		window = np.broadcast_to(history, (count,) + history.shape).copy()
		padded = np.concatenate([deltas, np.zeros((count, (-length) % j, 3))], axis=1)
		frames = []
		for start in range(0, padded.shape[1], j):
			chunk = predict_batch(self.model, window, padded[:, start:start + j], grasp_index, self.rng, self.sampling_steps)
			frames.append(chunk)
			window = np.concatenate([window, chunk], axis=1)[:, -n_hist:]
		return np.concatenate(frames, axis=1)[:, :length]


def grasp_probabilities(current: ClothMesh, target: ClothMesh, temperature: float) -> np.ndarray:
	"""p(i) ∝ exp(‖s_tⁱ − s_cⁱ‖ / τ_g)."""
	if not current.same_connectivity(target):
		raise CorrespondenceError("Текущее и целевое состояния имеют разную связность")
	displacement = np.linalg.norm(target.vertices - current.vertices, axis=1)
	logits = displacement / temperature
	weights = np.exp(logits - logits.max())
	return weights / weights.sum()


def select_grasp(current: ClothMesh, target: ClothMesh, temperature: float, rng: np.random.Generator) -> int:
	"""Выбрать точку захвата из температурного softmax по смещениям."""
	probs = grasp_probabilities(current, target, temperature)
	return int(rng.choice(len(probs), p=probs))


def informed_direction(current: ClothMesh, target: ClothMesh, grasp_index: int, k: int, epsilon: float) -> np.ndarray:
	"""d_main = Σ wᵢ (целевое − текущее) по k вершинам с наибольшей ошибкой, wᵢ = 1/(‖p_g − pᵢ‖ + ε)."""
	if k > current.n_vertices:
		raise DomainError(f"informed_k={k} больше числа вершин {current.n_vertices}")
	displacement = target.vertices - current.vertices
	error = np.sum(displacement * displacement, axis=1)
	top = np.argsort(-error, kind="stable")[:k]
	distance = np.linalg.norm(current.vertices[top] - current.vertices[grasp_index], axis=1)
	weights = 1.0 / np.maximum(distance + epsilon, 1e-12)
	return (weights[:, None] * displacement[top]).sum(axis=0)


def initial_mean(direction: np.ndarray, config: PlannerConfig) -> np.ndarray:
	"""Начальное среднее (L, 3): единичное направление, умноженное на среднюю величину шага."""
	norm = np.linalg.norm(direction)
	step = direction / norm * config.mid_magnitude if norm > 1e-12 else np.zeros(3)
	return np.clip(np.tile(step, (config.seq_length, 1)), *config.action_bounds)


def update_distribution(
	samples: np.ndarray,
	costs: np.ndarray,
	temperature: float,
	cost_scale: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
	"""Экспоненциально взвешенные среднее и стандартное отклонение сэмплов.

	Веса exp(−(C − C_min)·cost_scale/τ); при τ → 0 среднее совпадает с лучшим сэмплом.
	"""
	costs = np.asarray(costs, dtype=np.float64)
	weights = np.exp(-(costs - costs.min()) * cost_scale / temperature)
	weights /= weights.sum()
	mean = np.einsum("k,klc->lc", weights, samples)
	std = np.sqrt(np.einsum("k,klc->lc", weights, (samples - mean) ** 2))
	return mean, std


def trajectory_costs(final: np.ndarray, target: ClothMesh, deltas: np.ndarray, config: PlannerConfig) -> np.ndarray:
	"""Стоимость w_mse·MSE + w_cd·CD + w_smooth·Σ‖a_{t+1} − a_t‖² для каждого кандидата."""
	smooth = np.sum(np.diff(deltas, axis=1) ** 2, axis=(1, 2))
	costs = config.w_smooth * smooth
	for i, vertices in enumerate(final):
		if config.w_mse:
			costs[i] += config.w_mse * mse(vertices, target.vertices)
		if config.w_cd:
			costs[i] += config.w_cd * chamfer(vertices, target.vertices)
	return costs


def _evaluate(dynamics: DynamicsOracle, history: np.ndarray, grasp_index: int, samples: np.ndarray, offset: int) -> np.ndarray:
	try:
		return dynamics(history, grasp_index, samples)[:, -1]
	except Exception as e:
		if len(samples) == 1:
			raise PlanningError(offset, e) from e
		# найти конкретный сэмпл
		for i in range(len(samples)):
			try:
				dynamics(history, grasp_index, samples[i:i + 1])
			except Exception as inner:
				raise PlanningError(offset + i, inner) from inner
		raise PlanningError(offset, e) from e


def evaluate_samples(
	dynamics: DynamicsOracle,
	history: np.ndarray,
	grasp_index: int,
	samples: np.ndarray,
	workers: int = 1,
) -> np.ndarray:
	"""Финальные состояния (K, Nv, 3); параллельно по кускам, если оракул это допускает."""
	if workers <= 1 or not getattr(dynamics, "thread_safe", False):
		return _evaluate(dynamics, history, grasp_index, samples, 0)
	chunks = np.array_split(np.arange(len(samples)), workers)
	with ThreadPoolExecutor(max_workers=workers) as pool:
		futures = [
			pool.submit(_evaluate, dynamics, history, grasp_index, samples[idx], int(idx[0]))
			for idx in chunks if len(idx)
		]
		return np.concatenate([f.result() for f in futures])


def plan(
	dynamics: DynamicsOracle,
	history: np.ndarray,
	target: ClothMesh,
	config: PlannerConfig,
	rng: np.random.Generator,
	grasp_index: Optional[int] = None,
) -> PlanResult:
	"""Алгоритм MPPI с отжигом разброса.

	Args:
		dynamics: Оракул переходов
		history: Кадры состояния (H, Nv, 3), последний - текущий
		target: Целевая сетка
		config: Гиперпараметры
		rng: Генератор случайных чисел
		grasp_index: Точка захвата (по умолчанию выбирается softmax-стратегией)

	Returns:
		PlanResult с лучшей последовательностью за все итерации
	"""
	history = np.asarray(history, dtype=np.float64)
	current = target.with_vertices(history[-1])
	if grasp_index is None:
		grasp_index = select_grasp(current, target, config.grasp_temperature, rng)
	k = min(config.informed_k, current.n_vertices)
	mean = initial_mean(informed_direction(current, target, grasp_index, k, config.epsilon), config)
	std = np.full((config.seq_length, 3), config.init_std)
	lo, hi = config.action_bounds
	half = config.n_samples // 2
	shape = (config.seq_length, 3)
	best_cost, best = np.inf, None
	result = PlanResult([], np.inf, [], grasp_index)
	for i in range(config.n_iterations):
		gaussian = mean + std * rng.standard_normal((half,) + shape)
		gaussian[0] = mean
		uniform = rng.uniform(lo, hi, size=(config.n_samples - half,) + shape)
		samples = np.clip(np.concatenate([gaussian, uniform]), lo, hi)
		final = evaluate_samples(dynamics, history, grasp_index, samples, config.workers)
		costs = trajectory_costs(final, target, samples, config)
		winner = int(np.argmin(costs))
		if costs[winner] < best_cost:
			best_cost, best = float(costs[winner]), samples[winner].copy()
		result.cost_history.append(best_cost)
		mean, fitted = update_distribution(samples, costs, config.temperature, config.cost_scale)
		std = (fitted if config.refit_std else std) * (1.0 - i / config.n_iterations)
		result.std_history.append(std.copy())
		logger.debug(f"Итерация {i}: лучшая стоимость {best_cost:.6f}")
	result.best_actions = [ActionStep(grasp_index, a) for a in best]
	result.best_cost = best_cost
	return result


class MpcConfig(BaseModel):
	model_config = ConfigDict(extra="forbid")

	max_steps: int = Field(default=20, ge=1)
	success_ratio: float = Field(default=0.2, gt=0, lt=1, description="Успех: EMD ≤ ratio·EMD₀")
	execute_steps: Optional[int] = Field(default=None, ge=1, description="Сколько действий плана исполнять (по умолчанию L)")
	samples_per_face: int = Field(default=8, ge=1)
	perception_samples: int = Field(default=1, ge=1)


@dataclass
class EpisodeResult:
	emd: List[float]
	success: bool
	success_step: Optional[int]
	grasps: List[int] = field(default_factory=list)
	actions: List[List[float]] = field(default_factory=list)
	failure_step: Optional[int] = None
	error: Optional[str] = None

	@property
	def reduction(self) -> float:
		"""Доля снижения EMD к концу эпизода."""
		if not self.emd or self.emd[0] == 0:
			return 1.0
		return 1.0 - min(self.emd) / self.emd[0]

	def to_dict(self) -> dict:
		return {
			"emd": self.emd,
			"success": self.success,
			"success_step": self.success_step,
			"grasps": self.grasps,
			"actions": self.actions,
			"failure_step": self.failure_step,
			"error": self.error,
		}


def _run_episode(
	simulator: ClothSimulator,
	initial: ClothMesh,
	target: ClothMesh,
	policy: Callable[[List[np.ndarray], ClothState], Tuple[int, np.ndarray]],
	mpc: MpcConfig,
	n_history: int,
	observe: Callable[[ClothState], ClothMesh],
) -> EpisodeResult:
	state = ClothState.at_rest(initial)
	emd0 = emd(initial, target)
	threshold = mpc.success_ratio * emd0
	result = EpisodeResult([emd0], emd0 <= threshold, 0 if emd0 <= threshold else None)
	if result.success:
		return result
	estimate = observe(state)
	history = [estimate.vertices] * n_history
	for step in range(1, mpc.max_steps + 1):
		try:
			grasp, deltas = policy(history, state)
			actions = [ActionStep(grasp, d) for d in deltas]
			_, state = rollout_state(state, actions, simulator)
		except Exception as e:
			logger.error(f"Эпизод остановлен на шаге {step}: {e}")
			result.failure_step, result.error = step, str(e)
			break
		distance = emd(state.mesh, target)
		result.emd.append(distance)
		result.grasps.append(grasp)
		result.actions.extend(np.asarray(deltas).tolist())
		logger.info(f"MPC шаг {step}: EMD {distance:.4f} (цель ≤ {threshold:.4f})")
		if distance <= threshold:
			result.success, result.success_step = True, step
			break
		estimate = observe(state)
		history = (history + [estimate.vertices])[-n_history:]
	return result


def mpc_episode(
	simulator: ClothSimulator,
	initial: ClothMesh,
	target: ClothMesh,
	config: PlannerConfig,
	rng: np.random.Generator,
	mpc: Optional[MpcConfig] = None,
	ddm: Optional[DdmModel] = None,
	dpm: Optional[DpmModel] = None,
	cameras: Optional[Sequence[CameraPose]] = None,
) -> EpisodeResult:
	"""Цикл наблюдение → оценка → выбор захвата → план → исполнение в симуляторе.

	Args:
		simulator: Симулятор-среда (и оракул, если ddm не задана)
		initial: Начальное состояние
		target: Целевое состояние
		config: Гиперпараметры планировщика
		rng: Генератор случайных чисел
		mpc: Параметры эпизода
		ddm: Модель динамики (иначе - оракул-симулятор)
		dpm: Модель восприятия (иначе - точное состояние)
		cameras: Камеры для DPM (по умолчанию случайный набор на каждом шаге)

	Returns:
		EpisodeResult с EMD на каждом шаге
	"""
	mpc = mpc or MpcConfig()
	execute = min(mpc.execute_steps or config.seq_length, config.seq_length)
	oracle = SimulatorOracle(simulator) if ddm is None else DdmOracle(ddm, rng)
	n_history = 1 if ddm is None else ddm.config.n_history_frames

	def observe(state: ClothState) -> ClothMesh:
		if dpm is None:
			return state.mesh
		cloud = observe_cloud(state.mesh, rng, mpc.samples_per_face, min_points=dpm.config.n_groups, cameras=cameras)
		return estimate_state(dpm, dpm.canonical, cloud, rng, mpc.perception_samples)

	def policy(history: List[np.ndarray], state: ClothState) -> Tuple[int, np.ndarray]:
		if isinstance(oracle, SimulatorOracle) and dpm is None:
			oracle.velocities = state.velocities
		current = target.with_vertices(history[-1])
		grasp = select_grasp(current, target, config.grasp_temperature, rng)
		result = plan(oracle, np.stack(history), target, config, rng, grasp)
		return grasp, result.deltas[:execute]

	return _run_episode(simulator, initial, target, policy, mpc, n_history, observe)


def random_episode(
	simulator: ClothSimulator,
	initial: ClothMesh,
	target: ClothMesh,
	config: PlannerConfig,
	rng: np.random.Generator,
	mpc: Optional[MpcConfig] = None,
) -> EpisodeResult:
	"""Базовая линия: случайная вершина и равномерные действия в пределах границ."""
	mpc = mpc or MpcConfig()
	execute = min(mpc.execute_steps or config.seq_length, config.seq_length)

	def policy(history: List[np.ndarray], state: ClothState) -> Tuple[int, np.ndarray]:
		grasp = int(rng.integers(initial.n_vertices))
		return grasp, rng.uniform(*config.action_bounds, size=(execute, 3))

	return _run_episode(simulator, initial, target, policy, mpc, 1, lambda state: state.mesh)


def success_curve(episodes: Sequence[EpisodeResult], ratios: Sequence[float]) -> List[Tuple[float, float]]:
	"""Доля успешных эпизодов для набора порогов (доля от начального EMD)."""
	curve = []
	for ratio in ratios:
		hits = [bool(e.emd) and (e.emd[0] == 0 or min(e.emd) <= ratio * e.emd[0]) for e in episodes]
		curve.append((float(ratio), float(np.mean(hits)) if hits else 0.0))
	return curve


def fold_target(mesh: ClothMesh, kind: str = "diagonal", lift: float = 0.01) -> ClothMesh:
	"""Геометрическая цель складывания: половина ткани отражается поверх другой и приподнимается на lift.

	diagonal - относительно диагонали x + y = 0 через центр, half - относительно оси y = 0.
	"""
	vertices = mesh.vertices.copy()
	center = vertices.mean(axis=0)
	rel = vertices - center
	if kind == "diagonal":
		moving = rel[:, 0] + rel[:, 1] > 1e-9
		x, y = rel[moving, 0], rel[moving, 1]
		rel[moving, 0], rel[moving, 1] = -y, -x
	elif kind == "half":
		moving = rel[:, 1] > 1e-9
		rel[moving, 1] = -rel[moving, 1]
	else:
		raise DomainError(f"Неизвестный тип складывания {kind!r}")
	rel[moving, 2] += lift
	return mesh.with_vertices(rel + center)
