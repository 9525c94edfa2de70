"""Инструменты clothdiff для MCP: метрики, оценка состояния, прогноз динамики, планирование."""

import asyncio
import json
import logging
import threading
from typing import Any, Callable, Dict, List, Optional, Tuple, Type

import numpy as np
from mcp import types
from pydantic import BaseModel, ConfigDict, Field

from .clothsim import ActionStep, ClothSimulator, SimParams
from .config import Config
from .datasets import ClothSpec
from .dynamics import DdmModel, rollout_autoregressive
from .errors import ConfigError, CorrespondenceError
from .geometry import PointCloud, metric_record
from .perception import DpmModel, estimate_state
from .persistence import load_checkpoint
from .planner import PlannerConfig, SimulatorOracle, plan


logger = logging.getLogger(__name__)

Points = List[List[float]]


class MetricsArgs(BaseModel):
	model_config = ConfigDict(extra="forbid")

	a: Points = Field(description="Первое множество точек (N, 3)")
	b: Points = Field(description="Второе множество точек (M, 3)")


class EstimateArgs(BaseModel):
	model_config = ConfigDict(extra="forbid")

	cloud: Points = Field(description="Частичное облако точек (N, 3), метры")
	n_samples: int = Field(default=1, ge=1, le=16)
	sampling_steps: Optional[int] = Field(default=None, ge=1)


class PredictArgs(BaseModel):
	model_config = ConfigDict(extra="forbid")

	history: List[Points] = Field(description="Кадры истории (H, Nv, 3), последний - текущий")
	actions: Points = Field(description="Смещения захвата (L, 3), метры")
	grasp_index: Optional[int] = Field(default=None, ge=0)
	sampling_steps: Optional[int] = Field(default=None, ge=1)


class PlanArgs(BaseModel):
	model_config = ConfigDict(extra="forbid")

	current: Points = Field(description="Текущие вершины ткани (Nv, 3)")
	target: Points = Field(description="Целевые вершины (Nv, 3)")
	grasp_index: Optional[int] = Field(default=None, ge=0)
	planner: PlannerConfig = Field(default_factory=PlannerConfig)


def _points(values: Points, name: str) -> np.ndarray:
	array = np.asarray(values, dtype=np.float64)
	if array.ndim != 2 or array.shape[1] != 3 or len(array) == 0:
		raise CorrespondenceError(f"{name}: ожидался массив (N, 3), получено {array.shape}")
	return array


class ClothToolbox:
	"""Исполнитель инструментов поверх моделей и симулятора ткани."""

	def __init__(self, config: Config):
		"""Инициализация инструментов.

		Args:
			config: Конфигурация (пути к чекпоинтам, ткань для планирования, сид)
		"""
		self.config = config
		self.cloth = ClothSpec(rows=config.cloth_rows, cols=config.cloth_cols, size=config.cloth_size)
		self.sim_params = SimParams()
		self._dpm: Optional[DpmModel] = None
		self._ddm: Optional[DdmModel] = None
		self._simulator: Optional[ClothSimulator] = None
		self._lock = threading.Lock()
		self._calls = 0
		self._tools: Dict[str, Tuple[Type[BaseModel], Callable[[Any], dict], str]] = {
			"cloth_metrics": (MetricsArgs, self.cloth_metrics, "MSE (при равном числе точек), Chamfer и EMD между двумя множествами точек"),
			"estimate_state": (EstimateArgs, self.estimate_state, "Полное состояние ткани по частичному облаку точек (DPM)"),
			"predict_dynamics": (PredictArgs, self.predict_dynamics, "Будущие кадры ткани по истории и действиям (DDM)"),
			"plan_actions": (PlanArgs, self.plan_actions, "План действий захвата к целевому состоянию (MPPI с симулятором)"),
		}
		logger.debug(f"Ткань для планирования: {config.cloth_rows}x{config.cloth_cols}, {config.cloth_size} м")

	def _rng(self) -> np.random.Generator:
		with self._lock:
			self._calls += 1
			return np.random.default_rng([self.config.seed, self._calls])

	def _model(self, attribute: str, path: Optional[str], kind: type):
		with self._lock:
			model = getattr(self, attribute)
			if model is None:
				if not path:
					raise ConfigError(f"Не задан чекпоинт для {kind.__name__}")
				model = load_checkpoint(path)
				if not isinstance(model, kind):
					raise ConfigError(f"Чекпоинт {path} не является {kind.__name__}")
				setattr(self, attribute, model)
				logger.info(f"Загружен чекпоинт {path}")
			return model

	@property
	def dpm(self) -> DpmModel:
		return self._model("_dpm", self.config.dpm_checkpoint, DpmModel)

	@property
	def ddm(self) -> DdmModel:
		return self._model("_ddm", self.config.ddm_checkpoint, DdmModel)

	@property
	def simulator(self) -> ClothSimulator:
		with self._lock:
			if self._simulator is None:
				self._simulator = ClothSimulator(self.cloth.build(self.sim_params), self.sim_params)
			return self._simulator

	@property
	def tool_names(self) -> List[str]:
		return list(self._tools)

	def check_health(self) -> Dict[str, Any]:
		"""Состояние: какие модели настроены и загружены."""
		return {
			"dpm": {"configured": bool(self.config.dpm_checkpoint), "loaded": self._dpm is not None},
			"ddm": {"configured": bool(self.config.ddm_checkpoint), "loaded": self._ddm is not None},
			"cloth": self.cloth.model_dump(),
		}

	def cloth_metrics(self, args: MetricsArgs) -> dict:
		return metric_record(_points(args.a, "a"), _points(args.b, "b"))

	def estimate_state(self, args: EstimateArgs) -> dict:
		model = self.dpm
		cloud = PointCloud(_points(args.cloud, "cloud"))
		mesh = estimate_state(model, model.canonical, cloud, self._rng(), args.n_samples, args.sampling_steps)
		return {"vertices": mesh.vertices.tolist(), "n_vertices": mesh.n_vertices}

	def predict_dynamics(self, args: PredictArgs) -> dict:
		model = self.ddm
		history = np.asarray(args.history, dtype=np.float64)
		deltas = _points(args.actions, "actions")
		actions = [ActionStep(args.grasp_index, d) for d in deltas]
		frames = rollout_autoregressive(model, history, actions, self._rng(), args.sampling_steps)
		return {"frames": [f.vertices.tolist() for f in frames]}

	def plan_actions(self, args: PlanArgs) -> dict:
		simulator = self.simulator
		current = _points(args.current, "current")
		target_vertices = _points(args.target, "target")
		if current.shape != simulator.mesh.vertices.shape or target_vertices.shape != current.shape:
			raise CorrespondenceError(
				f"Ожидалось {simulator.mesh.n_vertices} вершин ткани, получено {len(current)} и {len(target_vertices)}"
			)
		target = simulator.mesh.with_vertices(target_vertices)
		result = plan(SimulatorOracle(simulator), current[None], target, args.planner, self._rng(), args.grasp_index)
		return {
			"grasp_index": result.grasp_index,
			"actions": result.deltas.tolist(),
			"best_cost": result.best_cost,
			"cost_history": result.cost_history,
		}

	async def list_tools(self) -> List[types.Tool]:
		"""Описания инструментов со схемами аргументов.

		Returns:
			Список инструментов MCP
		"""
		return [
			types.Tool(name=name, description=description, inputSchema=model.model_json_schema())
			for name, (model, _, description) in self._tools.items()
		]

	async def run_tool(self, name: str, arguments: Optional[Dict[str, Any]]) -> dict:
		"""Выполнить инструмент в рабочем потоке; ошибки пробрасываются."""
		if name not in self._tools:
			raise ConfigError(f"Неизвестный инструмент: {name}")
		model, handler, _ = self._tools[name]
		args = model.model_validate(arguments or {})
		return await asyncio.to_thread(handler, args)

	async def call_tool(self, name: str, arguments: Optional[Dict[str, Any]]) -> types.CallToolResult:
		"""Вызвать инструмент.

		Args:
			name: Имя инструмента
			arguments: Аргументы инструмента

		Returns:
			Результат с JSON в текстовом содержимом; isError при ошибке
		"""
		try:
			payload = await self.run_tool(name, arguments)
			return types.CallToolResult(
				content=[types.TextContent(type="text", text=json.dumps(payload, ensure_ascii=False))],
				isError=False,
			)
		except Exception as e:
			logger.error(f"Сбой инструмента {name}: {e}")
			return types.CallToolResult(
				content=[types.TextContent(type="text", text=f"Ошибка выполнения инструмента: {e}")],
				isError=True,
			)
