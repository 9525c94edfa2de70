"""Генерация и загрузка наборов данных (траектории динамики, пары облако–сетка)."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .clothsim import (
	ClothSimulator,
	ClothState,
	SimParams,
	make_grid_cloth,
	rollout_state,
	sample_action_sequence,
	settle_tail,
)
from .dynamics import Transition, transitions_from_trajectory
from .errors import ConfigError, NumericalError, SimulationBlowupError
from .geometry import ClothMesh, PointCloud
from .observation import AugmentParams, observe_cloud
from .perception import PerceptionPair
from .persistence import read_json, read_tensor, write_json, write_tensor


logger = logging.getLogger(__name__)

MAX_RETRIES = 3


class ClothSpec(BaseModel):
	model_config = ConfigDict(extra="forbid")

	rows: int = Field(default=8, ge=2)
	cols: int = Field(default=8, ge=2)
	size: float = Field(default=0.4, gt=0, description="Сторона квадратной ткани, м")

	def build(self, sim: Optional[SimParams] = None) -> ClothMesh:
		spacing = self.size / (max(self.rows, self.cols) - 1)
		height = (sim or SimParams()).floor
		return make_grid_cloth(self.rows, self.cols, spacing, height)


class GenDataConfig(BaseModel):
	"""Конфиг gen-data (неизвестные ключи отклоняются)."""

	model_config = ConfigDict(extra="forbid")

	kind: Literal["dynamics", "perception"] = "dynamics"
	n_records: int = Field(default=10, ge=1, description="По умолчанию - быстрый прогон; полные наборы: 2000 траекторий, 1000 пар")
	cloth: ClothSpec = Field(default_factory=ClothSpec)
	sim: SimParams = Field(default_factory=SimParams)
	augment: AugmentParams = Field(default_factory=AugmentParams)
	strategies: List[Literal["directional", "pairwise"]] = Field(default_factory=lambda: ["directional", "pairwise"])
	length: Tuple[int, int] = (15, 35)
	magnitude: Tuple[float, float] = (0.02, 0.05)
	settle_tail: int = Field(default=5, ge=0, description="Шагов без захвата после траектории")
	deform_length: Tuple[int, int] = (5, 15)
	samples_per_face: int = Field(default=8, ge=1)
	min_points: int = Field(default=32, ge=1, description="Минимум точек облака (n_groups DPM); меньшие облака пересэмплируются")
	n_cameras: Tuple[int, int] = (1, 4)
	seed: int = 0
	workers: int = Field(default=1, ge=1)


class RecordEntry(BaseModel):
	model_config = ConfigDict(extra="forbid")

	path: str
	seed: int = Field(description="Главный сид набора")
	index: int = Field(ge=0, description="Номер записи; генератор default_rng([seed, index])")
	strategy: str
	length: int
	n_points: Optional[int] = None


class DatasetManifest(BaseModel):
	model_config = ConfigDict(extra="forbid")

	kind: Literal["dynamics", "perception"]
	cloth: ClothSpec
	sim: SimParams
	augment: AugmentParams
	records: List[RecordEntry] = Field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Trajectory:
	"""Кадры (n + 1, Nv, 3), действия (n, 3), захват на каждом шаге (−1 - отпущен)."""

	states: np.ndarray
	deltas: np.ndarray
	grasp: np.ndarray
	strategy: str = ""
	index: int = 0

	def transitions(self, history: int = 3, future: int = 5, stride: int = 1) -> List[Transition]:
		return transitions_from_trajectory(self.states, self.deltas, self.grasp, history, future, stride)


def _record_rng(seed: int, index: int) -> np.random.Generator:
	return np.random.default_rng([seed, index])


def _simulate(config: GenDataConfig, simulator: ClothSimulator, rng: np.random.Generator, length: Tuple[int, int], tail: int):
	"""Одна траектория с повторами при расхождении симуляции."""
	canonical = simulator.mesh
	for attempt in range(MAX_RETRIES + 1):
		strategy = config.strategies[int(rng.integers(len(config.strategies)))]
		actions = sample_action_sequence(canonical, strategy, rng, config.magnitude, length, config.sim.floor)
		actions = actions + settle_tail(tail)
		try:
			frames, final = rollout_state(ClothState.at_rest(canonical), actions, simulator)
			return strategy, actions, frames, final
		except SimulationBlowupError as e:
			logger.warning(f"Попытка {attempt + 1}: {e}; траектория пересэмплируется")
	raise NumericalError(f"Симуляция разошлась {MAX_RETRIES + 1} раз подряд")


def generate_trajectory(config: GenDataConfig, index: int, simulator: Optional[ClothSimulator] = None) -> Trajectory:
	"""Траектория динамики с хвостом успокоения."""
	simulator = simulator or ClothSimulator(config.cloth.build(config.sim), config.sim)
	rng = _record_rng(config.seed, index)
	strategy, actions, frames, _ = _simulate(config, simulator, rng, config.length, config.settle_tail)
	states = np.stack([simulator.mesh.vertices] + [f.vertices for f in frames])
	deltas = np.stack([a.delta for a in actions])
	grasp = np.array([-1 if a.grasp_index is None else a.grasp_index for a in actions], dtype=np.int64)
	return Trajectory(states, deltas, grasp, strategy, index)


def generate_pair(config: GenDataConfig, index: int, simulator: Optional[ClothSimulator] = None) -> Tuple[PerceptionPair, str]:
	"""Случайная деформация, рендер частичного облака с нескольких камер и аугментация."""
	simulator = simulator or ClothSimulator(config.cloth.build(config.sim), config.sim)
	rng = _record_rng(config.seed, index)
	strategy, _, _, final = _simulate(config, simulator, rng, config.deform_length, config.settle_tail)
	mesh = final.mesh
	cloud = observe_cloud(mesh, rng, config.samples_per_face, config.n_cameras, config.augment, config.min_points)
	return PerceptionPair(cloud, mesh), strategy


def _write_record(config: GenDataConfig, out: Path, index: int, simulator: ClothSimulator) -> RecordEntry:
	if config.kind == "dynamics":
		traj = generate_trajectory(config, index, simulator)
		name = f"traj_{index:04d}"
		write_tensor(out / name / "states.cdt", traj.states)
		write_tensor(out / name / "actions.cdt", traj.deltas)
		write_tensor(out / name / "grasp.cdt", traj.grasp.astype(np.float64))
		return RecordEntry(path=name, seed=config.seed, index=index, strategy=traj.strategy, length=len(traj.deltas))
	pair, strategy = generate_pair(config, index, simulator)
	name = f"pair_{index:04d}"
	write_tensor(out / name / "cloud.cdt", pair.cloud.points)
	write_tensor(out / name / "vertices.cdt", pair.mesh.vertices)
	return RecordEntry(path=name, seed=config.seed, index=index, strategy=strategy, length=1, n_points=len(pair.cloud))


def gen_data(config: GenDataConfig, out_dir: Union[str, Path]) -> DatasetManifest:
	"""Сгенерировать набор данных в каталог.

	Каждая запись использует собственный генератор default_rng([seed, index]),
	поэтому результат не зависит от числа потоков.

	Args:
		config: Конфиг генерации
		out_dir: Каталог набора

	Returns:
		Манифест (также записан в manifest.json)
	"""
	out = Path(out_dir)
	out.mkdir(parents=True, exist_ok=True)
	simulator = ClothSimulator(config.cloth.build(config.sim), config.sim)
	indices = range(config.n_records)
	if config.workers > 1:
		with ThreadPoolExecutor(max_workers=config.workers) as pool:
			records = list(pool.map(lambda i: _write_record(config, out, i, simulator), indices))
	else:
		records = []
		for i in indices:
			records.append(_write_record(config, out, i, simulator))
			logger.info(f"Запись {i + 1}/{config.n_records} готова")
	manifest = DatasetManifest(
		kind=config.kind, cloth=config.cloth, sim=config.sim, augment=config.augment, records=records,
	)
	write_json(out / "manifest.json", manifest.model_dump(mode="json"))
	logger.info(f"Набор {config.kind}: {len(records)} записей в {out}")
	return manifest


def load_manifest(data_dir: Union[str, Path]) -> DatasetManifest:
	data_dir = Path(data_dir)
	try:
		manifest = DatasetManifest.model_validate(read_json(data_dir / "manifest.json"))
	except ValueError as e:
		raise ConfigError(f"Некорректный манифест набора {data_dir}: {e}") from e
	for record in manifest.records:
		if not (data_dir / record.path).is_dir():
			raise ConfigError(f"Запись {record.path} из манифеста не найдена")
	return manifest


def canonical_mesh(manifest: DatasetManifest) -> ClothMesh:
	return manifest.cloth.build(manifest.sim)


def load_trajectories(data_dir: Union[str, Path]) -> Tuple[DatasetManifest, List[Trajectory]]:
	data_dir = Path(data_dir)
	manifest = load_manifest(data_dir)
	if manifest.kind != "dynamics":
		raise ConfigError(f"Ожидался набор dynamics, получен {manifest.kind}")
	trajectories = []
	for record in manifest.records:
		base = data_dir / record.path
		trajectories.append(Trajectory(
			read_tensor(base / "states.cdt"),
			read_tensor(base / "actions.cdt"),
			read_tensor(base / "grasp.cdt").astype(np.int64),
			record.strategy,
			record.index,
		))
	return manifest, trajectories


def load_pairs(data_dir: Union[str, Path]) -> Tuple[DatasetManifest, List[PerceptionPair]]:
	data_dir = Path(data_dir)
	manifest = load_manifest(data_dir)
	if manifest.kind != "perception":
		raise ConfigError(f"Ожидался набор perception, получен {manifest.kind}")
	canonical = canonical_mesh(manifest)
	pairs = []
	for record in manifest.records:
		base = data_dir / record.path
		pairs.append(PerceptionPair(
			PointCloud(read_tensor(base / "cloud.cdt")),
			canonical.with_vertices(read_tensor(base / "vertices.cdt")),
		))
	return manifest, pairs
