"""Оценка чекпоинтов на наборах данных, CSV-ряды для графиков и проверка градиентов."""

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .clothsim import ActionStep, make_grid_cloth
from .datasets import Trajectory, load_pairs, load_trajectories
from .diffusion import ScheduleConfig
from .dynamics import DdmConfig, DdmModel, grasp_mask, rollout_autoregressive
from .errors import ConfigError
from .geometry import PointCloud, metric_record, mse
from .neural.gradcheck import GradcheckResult, check_module_gradients, run_op_checks
from .neural.layers import FourierEmbedderConfig, Module, TransformerConfig
from .neural.tensor import Tensor
from .perception import DpmConfig, DpmModel, PerceptionPair, estimate_state
from .persistence import checkpoint_kind, load_checkpoint, write_json


logger = logging.getLogger(__name__)

CI_Z = 1.96
METRICS = ("mse", "cd", "emd")


class EvaluateConfig(BaseModel):
	model_config = ConfigDict(extra="forbid")

	seed: int = 0
	n_samples: int = Field(default=1, ge=1, description="Кандидатов DPM на облако")
	sampling_steps: Optional[int] = Field(default=None, ge=1)
	rollout_steps: int = Field(default=20, ge=1, description="Горизонт авторегрессии DDM")
	start_step: int = Field(default=0, ge=0, description="С какого кадра траектории начинать прогноз")
	max_records: Optional[int] = Field(default=None, ge=1)
	workers: int = Field(default=1, ge=1)


def summarize(values: Sequence[float]) -> Dict[str, float]:
	"""Среднее и полуширина 95% интервала 1.96·s/√n (0 при n=1)."""
	values = np.asarray(values, dtype=np.float64)
	n = len(values)
	if n == 0:
		return {"mean": float("nan"), "ci95": float("nan"), "n": 0}
	ci = CI_Z * float(np.std(values, ddof=1)) / np.sqrt(n) if n > 1 else 0.0
	return {"mean": float(values.mean()), "ci95": float(ci), "n": n}


def _summarize_records(records: List[Dict[str, float]], prefix: str = "") -> Dict[str, Dict[str, float]]:
	result = {}
	for metric in METRICS:
		key = prefix + metric
		values = [r[key] for r in records if key in r]
		if values:
			result[metric] = summarize(values)
	return result


def _map_records(fn, items: Sequence[Any], workers: int) -> List[Any]:
	indexed = list(enumerate(items))
	if workers > 1:
		with ThreadPoolExecutor(max_workers=workers) as pool:
			return list(pool.map(lambda pair: fn(*pair), indexed))
	return [fn(i, item) for i, item in indexed]


def canonical_at_centroid(model: DpmModel, cloud: PointCloud) -> np.ndarray:
	"""Базовая линия восприятия: шаблон, перенесённый в центроид облака."""
	vertices = model.canonical.vertices
	return vertices - vertices.mean(axis=0) + cloud.points.mean(axis=0)


def evaluate_perception(
	model: DpmModel,
	pairs: Sequence[PerceptionPair],
	config: Optional[EvaluateConfig] = None,
) -> Tuple[dict, List[dict]]:
	"""MSE/CD/EMD оценки состояния и базовой линии по каждой паре."""
	config = config or EvaluateConfig()

	def run(i: int, pair: PerceptionPair) -> dict:
		rng = np.random.default_rng([config.seed, i])
		estimate = estimate_state(model, model.canonical, pair.cloud, rng, config.n_samples, config.sampling_steps)
		record = {"record": i, **metric_record(estimate, pair.mesh)}
		baseline = metric_record(canonical_at_centroid(model, pair.cloud), pair.mesh)
		record.update({f"baseline_{k}": v for k, v in baseline.items()})
		logger.debug(f"Пара {i}: MSE {record['mse']:.3e}, базовая {record['baseline_mse']:.3e}")
		return record

	records = _map_records(run, pairs, config.workers)
	report = {
		"kind": "dpm",
		"n_records": len(records),
		"metrics": _summarize_records(records),
		"baseline": _summarize_records(records, "baseline_"),
	}
	return report, records


def _initial_history(traj: Trajectory, start: int, n_frames: int) -> np.ndarray:
	indices = np.clip(np.arange(start - n_frames + 1, start + 1), 0, None)
	return traj.states[indices]


def evaluate_dynamics(
	model: DdmModel,
	trajectories: Sequence[Trajectory],
	config: Optional[EvaluateConfig] = None,
) -> Tuple[dict, List[dict]]:
	"""Авторегрессионный прогноз по траекториям: ошибки по шагам и базовая линия нулевой скорости."""
	config = config or EvaluateConfig()
	j = model.config.future

	def run(i: int, traj: Trajectory) -> dict:
		rng = np.random.default_rng([config.seed, i])
		start = min(config.start_step, len(traj.deltas) - 1)
		horizon = min(config.rollout_steps, len(traj.deltas) - start)
		actions = [
			ActionStep(None if g < 0 else int(g), d)
			for g, d in zip(traj.grasp[start:start + horizon], traj.deltas[start:start + horizon])
		]
		history = _initial_history(traj, start, model.config.n_history_frames)
		predicted = rollout_autoregressive(model, history, actions, rng, config.sampling_steps)
		truth = traj.states[start + 1:start + 1 + horizon]
		last = traj.states[start]
		curve = [mse(p.vertices, t) for p, t in zip(predicted, truth)]
		baseline_curve = [mse(last, t) for t in truth]
		record = {"record": i, "horizon": horizon, "chunk_mse": float(np.mean(curve[:j]))}
		record.update(metric_record(predicted[-1], truth[-1]))
		record.update({f"baseline_{k}": v for k, v in metric_record(last, truth[-1]).items()})
		record["mse_curve"] = curve
		record["baseline_mse_curve"] = baseline_curve
		logger.debug(f"Траектория {i}: MSE на шаге {horizon} {curve[-1]:.3e}, базовая {baseline_curve[-1]:.3e}")
		return record

	records = _map_records(run, trajectories, config.workers)
	report = {
		"kind": "ddm",
		"n_records": len(records),
		"metrics": _summarize_records(records),
		"baseline": _summarize_records(records, "baseline_"),
		"chunk_mse": summarize([r["chunk_mse"] for r in records]),
		"curves": {
			"mse": _step_curve([r["mse_curve"] for r in records]),
			"baseline_mse": _step_curve([r["baseline_mse_curve"] for r in records]),
		},
	}
	return report, records


def _step_curve(series: Sequence[Sequence[float]], carry_last: bool = False) -> List[dict]:
	"""Сводка по шагам 1..N; короткие ряды либо выпадают, либо продлеваются последним значением."""
	length = max((len(s) for s in series), default=0)
	curve = []
	for t in range(length):
		if carry_last:
			values = [s[min(t, len(s) - 1)] for s in series if len(s)]
		else:
			values = [s[t] for s in series if len(s) > t]
		curve.append({"step": t + 1, **summarize(values)})
	return curve


def evaluate(ckpt: Union[str, Path], data: Union[str, Path], config: Optional[EvaluateConfig] = None) -> Tuple[dict, List[dict]]:
	"""Оценить чекпоинт на совместимом наборе данных.

	Args:
		ckpt: Каталог чекпоинта DPM или DDM
		data: Каталог набора данных
		config: Параметры оценки

	Returns:
		(отчёт {metric: {mean, ci95, n}} с базовыми линиями, записи по каждому элементу набора)
	"""
	config = config or EvaluateConfig()
	kind = checkpoint_kind(ckpt)
	if kind == "dpm":
		manifest, items = load_pairs(data)
	elif kind == "ddm":
		manifest, items = load_trajectories(data)
	else:
		raise ConfigError(f"Неизвестный тип чекпоинта: {kind!r}")
	model = load_checkpoint(ckpt)
	if not manifest.cloth.build(manifest.sim).same_connectivity(model.canonical):
		raise ConfigError("Ткань набора данных не совпадает с шаблоном чекпоинта")
	if config.max_records:
		items = items[: config.max_records]
	logger.info(f"Оценка {kind} на {len(items)} записях из {data}")
	if kind == "dpm":
		return evaluate_perception(model, items, config)
	return evaluate_dynamics(model, items, config)


def write_report(report: dict, records: List[dict], out_dir: Union[str, Path]) -> Path:
	"""report.json и records.csv (одна строка на запись, кривые не выводятся)."""
	out = Path(out_dir)
	write_json(out / "report.json", report)
	columns = sorted({k for r in records for k, v in r.items() if not isinstance(v, list)})
	if "record" in columns:
		columns.remove("record")
		columns.insert(0, "record")
	with open(out / "records.csv", "w", newline="", encoding="utf-8") as f:
		writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
		writer.writeheader()
		for record in records:
			writer.writerow({k: _format(record.get(k, "")) for k in columns})
	logger.info(f"Отчёт записан в {out}")
	return out / "report.json"


def _format(value) -> str:
	if isinstance(value, float):
		return format(value, ".17g")
	return str(value)


def _episode_series(payload: dict, metric: str) -> List[Sequence[float]]:
	if "episodes" in payload:
		return [e[metric][1:] for e in payload["episodes"]]
	return [payload[metric][1:]]


def plot_emit(payload: dict, metric: str = "emd") -> str:
	"""CSV step,{metric}_mean,{metric}_ci95 из отчёта evaluate или результата эпизода(ов).

	Для эпизодов шаг 0 (начальное расстояние) не выводится; завершившиеся раньше
	эпизоды продлеваются последним значением.
	"""
	if "curves" in payload:
		if metric not in payload["curves"]:
			raise ConfigError(f"В отчёте нет кривой {metric!r}")
		curve = payload["curves"][metric]
	elif "episodes" in payload or metric in payload:
		curve = _step_curve(_episode_series(payload, metric), carry_last=True)
	else:
		raise ConfigError(f"Нет ряда {metric!r} для вывода")
	buffer = io.StringIO()
	writer = csv.writer(buffer, lineterminator="\n")
	writer.writerow(["step", f"{metric}_mean", f"{metric}_ci95"])
	for point in curve:
		writer.writerow([int(point["step"]), _format(float(point["mean"])), _format(float(point["ci95"]))])
	return buffer.getvalue()


def _randomize_zero_parameters(module: Module, rng: np.random.Generator):
	for p in module.parameters():
		if not np.any(p.data):
			p.data = rng.normal(0.0, 0.3, size=p.shape)


def _tiny_transformer(cross_dim: int) -> TransformerConfig:
	return TransformerConfig(n_heads=2, head_dim=4, n_layers=1, inner_dim=8, cross_attn_dim=cross_dim, cond_dim=8)


def tiny_dpm(seed: int = 0) -> DpmModel:
	"""DPM на сетке 4x4 (16 вершин)."""
	config = DpmConfig(
		transformer=_tiny_transformer(8),
		schedule=ScheduleConfig(n_steps=10),
		n_patches=4,
		n_groups=4,
		group_size=4,
		encoder_hidden=[8],
		vertex_hidden=8,
		step_dim=8,
		seed=seed,
	)
	return DpmModel(make_grid_cloth(4, 4, 0.1), config)


def tiny_ddm(seed: int = 0) -> DdmModel:
	"""DDM на сетке 4x4: один кадр истории сверх текущего, два будущих."""
	config = DdmConfig(
		transformer=_tiny_transformer(12),
		action_embedder=FourierEmbedderConfig(n_frequencies=2, out_dim=12, mlp_hidden=[8]),
		schedule=ScheduleConfig(n_steps=10),
		history=1,
		future=2,
		n_patches=4,
		vertex_hidden=8,
		step_dim=8,
		seed=seed,
	)
	return DdmModel(make_grid_cloth(4, 4, 0.1), config)


def _dpm_loss(model: DpmModel, rng: np.random.Generator):
	canonical = model.canonical.vertices
	cloud = PointCloud(canonical[rng.choice(len(canonical), size=12, replace=False)] + rng.normal(0, 0.01, (12, 3)))
	condition = model.prepare_condition([cloud, cloud])
	noisy = rng.normal(size=(2,) + canonical.shape)
	k = np.array([3, 7])
	weights = rng.normal(size=noisy.shape)
	return lambda: (model(noisy, k, condition) * weights).sum()


def _ddm_loss(model: DdmModel, rng: np.random.Generator):
	cfg = model.config
	canonical = model.canonical.vertices
	history = canonical + rng.normal(0, 0.01, size=(2, cfg.n_history_frames) + canonical.shape)
	deltas = rng.uniform(-0.05, 0.05, size=(2, cfg.future, 3))
	masks = np.stack([grasp_mask(len(canonical), 0), grasp_mask(len(canonical), None)])
	condition = model.prepare_condition(history, deltas, masks)
	noisy = rng.normal(size=(2, cfg.future) + canonical.shape)
	k = np.array([2, 9])
	weights = rng.normal(size=noisy.shape)
	return lambda: (model(noisy, k, condition) * weights).sum()


def run_gradcheck(scope: Literal["ops", "dpm", "ddm"] = "ops", seed: int = 0) -> List[GradcheckResult]:
	"""Проверить градиенты операций или параметров миниатюрной модели (Nv=16)."""
	if scope == "ops":
		return run_op_checks(seed)
	rng = np.random.default_rng(seed)
	if scope == "dpm":
		model = tiny_dpm(seed)
		loss_fn = _dpm_loss(model, rng)
	elif scope == "ddm":
		model = tiny_ddm(seed)
		loss_fn = _ddm_loss(model, rng)
	else:
		raise ConfigError(f"Неизвестная область проверки: {scope!r}")
	_randomize_zero_parameters(model, rng)
	results = []
	for name, parameter in model.named_parameters():
		model.zero_grad()
		error, count = check_module_gradients(_Single(parameter), loss_fn, max_entries=3, rng=rng)
		results.append(GradcheckResult(f"{scope}.{name}", error, count))
	failed = [r.name for r in results if not r.passed]
	logger.info(f"gradcheck {scope}: {len(results) - len(failed)}/{len(results)} параметров прошли")
	return results


class _Single(Module):
	"""Модуль-обёртка, видящий один параметр модели."""

	def __init__(self, parameter: Tensor):
		self.parameter = parameter
