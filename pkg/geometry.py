"""Сетки, облака точек и метрики сравнения форм (MSE, Chamfer, EMD)."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import CorrespondenceError, DomainError


logger = logging.getLogger(__name__)

EDGE_STRUCTURAL = 0
EDGE_SHEAR = 1
EDGE_BEND = 2

EMD_MAX_POINTS = 512


@dataclass(frozen=True, eq=False)
class ClothMesh:
	"""Состояние ткани: вершины и неизменная связность.

	Все состояния одного экземпляра ткани разделяют массивы edges/faces/edge_kinds/rest_lengths.
	"""

	vertices: np.ndarray
	edges: np.ndarray
	faces: np.ndarray
	edge_kinds: Optional[np.ndarray] = None
	rest_lengths: Optional[np.ndarray] = None

	def __post_init__(self):
		vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
		edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
		faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
		nv = len(vertices)
		if edges.size and (edges.min() < 0 or edges.max() >= nv):
			raise DomainError("Индекс ребра вне диапазона вершин")
		if faces.size and (faces.min() < 0 or faces.max() >= nv):
			raise DomainError("Индекс грани вне диапазона вершин")
		if edges.size:
			undirected = np.sort(edges, axis=1)
			if len(np.unique(undirected, axis=0)) != len(undirected):
				raise DomainError("Дублирующиеся неориентированные рёбра")
			if np.any(undirected[:, 0] == undirected[:, 1]):
				raise DomainError("Ребро-петля")
		kinds = self.edge_kinds
		kinds = np.zeros(len(edges), dtype=np.int64) if kinds is None else np.asarray(kinds, dtype=np.int64)
		if len(kinds) != len(edges):
			raise DomainError("edge_kinds не совпадает с числом рёбер")
		rest = self.rest_lengths
		if rest is None:
			rest = np.linalg.norm(vertices[edges[:, 1]] - vertices[edges[:, 0]], axis=1) if len(edges) else np.zeros(0)
		rest = np.asarray(rest, dtype=np.float64)
		if len(rest) != len(edges):
			raise DomainError("rest_lengths не совпадает с числом рёбер")
		object.__setattr__(self, "vertices", vertices)
		object.__setattr__(self, "edges", edges)
		object.__setattr__(self, "faces", faces)
		object.__setattr__(self, "edge_kinds", kinds)
		object.__setattr__(self, "rest_lengths", rest)

	@property
	def n_vertices(self) -> int:
		return len(self.vertices)

	def with_vertices(self, vertices: np.ndarray) -> "ClothMesh":
		"""Новое состояние той же ткани (связность общая)."""
		vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
		if len(vertices) != self.n_vertices:
			raise CorrespondenceError(f"Ожидалось {self.n_vertices} вершин, получено {len(vertices)}")
		return ClothMesh(vertices, self.edges, self.faces, self.edge_kinds, self.rest_lengths)

	def same_connectivity(self, other: "ClothMesh") -> bool:
		return (
			self.n_vertices == other.n_vertices
			and np.array_equal(self.edges, other.edges)
			and np.array_equal(self.faces, other.faces)
		)

	def bbox_diagonal(self) -> float:
		return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


@dataclass(frozen=True, eq=False)
class PointCloud:
	"""Частичное наблюдение: M точек в метрах."""

	points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

	def __post_init__(self):
		points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
		if len(points) < 1:
			raise DomainError("Облако точек пустое")
		if not np.isfinite(points).all():
			raise DomainError("Облако точек содержит нечисловые координаты")
		object.__setattr__(self, "points", points)

	def __len__(self) -> int:
		return len(self.points)


PointsLike = Union[ClothMesh, PointCloud, np.ndarray]


def as_points(value: PointsLike) -> np.ndarray:
	"""Привести сетку/облако/массив к массиву (M, 3)."""
	if isinstance(value, ClothMesh):
		return value.vertices
	if isinstance(value, PointCloud):
		return value.points
	return np.asarray(value, dtype=np.float64).reshape(-1, 3)


def mse(a: PointsLike, b: PointsLike) -> float:
	"""Средняя квадратичная ошибка вершин при известном соответствии."""
	if isinstance(a, ClothMesh) and isinstance(b, ClothMesh) and not a.same_connectivity(b):
		raise CorrespondenceError("Сетки имеют разную связность")
	pa, pb = as_points(a), as_points(b)
	if pa.shape != pb.shape:
		raise CorrespondenceError(f"Разное число вершин: {len(pa)} и {len(pb)}")
	return float(np.mean(np.sum((pa - pb) ** 2, axis=1)))


def chamfer(a: PointsLike, b: PointsLike) -> float:
	"""Двунаправленное среднее квадратов расстояний до ближайшего соседа."""
	pa, pb = as_points(a), as_points(b)
	if len(pa) == 0 or len(pb) == 0:
		raise DomainError("Chamfer не определён для пустого множества")
	d2 = cdist(pa, pb, "sqeuclidean")
	return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def fps(points: PointsLike, n: int, seed: int = 0, start: Optional[int] = None) -> np.ndarray:
	"""Сэмплирование наиболее удалённых точек.

	Первая точка выбирается сидированным генератором (или задаётся start),
	равенства расстояний разрешаются в пользу меньшего индекса.

	Args:
		points: Исходные точки
		n: Сколько индексов выбрать
		seed: Сид для выбора первой точки
		start: Явный индекс первой точки

	Returns:
		Массив из n различных индексов
	"""
	pts = as_points(points)
	m = len(pts)
	if n > m:
		raise DomainError(f"Нельзя выбрать {n} точек из {m}")
	if n <= 0:
		return np.zeros(0, dtype=np.int64)
	first = int(np.random.default_rng(seed).integers(m)) if start is None else int(start)
	selected = np.empty(n, dtype=np.int64)
	selected[0] = first
	min_d = np.sum((pts - pts[first]) ** 2, axis=1)
	min_d[first] = -1.0
	for i in range(1, n):
		idx = int(np.argmax(min_d))
		selected[i] = idx
		min_d = np.minimum(min_d, np.sum((pts - pts[idx]) ** 2, axis=1))
		min_d[selected[: i + 1]] = -1.0
	return selected


def emd(a: PointsLike, b: PointsLike, seed: int = 0) -> float:
	"""Earth Mover's Distance через точное назначение (венгерский алгоритм).

	Большее множество прореживается FPS до размера меньшего, оба - не более EMD_MAX_POINTS.
	"""
	pa, pb = as_points(a), as_points(b)
	if len(pa) == 0 or len(pb) == 0:
		raise DomainError("EMD не определён для пустого множества")
	n = min(len(pa), len(pb), EMD_MAX_POINTS)
	if len(pa) > n:
		pa = pa[fps(pa, n, seed=seed)]
	if len(pb) > n:
		pb = pb[fps(pb, n, seed=seed)]
	if len(pa) != len(pb):
		raise DomainError("Размеры множеств не совпадают после прореживания")
	cost = cdist(pa, pb, "euclidean")
	rows, cols = linear_sum_assignment(cost)
	return float(cost[rows, cols].sum() / len(pa))


def metric_record(prediction: PointsLike, truth: PointsLike) -> Dict[str, float]:
	"""JSON-запись {"mse", "cd", "emd"}; mse только при равном числе точек."""
	record: Dict[str, float] = {}
	pa, pb = as_points(prediction), as_points(truth)
	if pa.shape == pb.shape:
		record["mse"] = mse(pa, pb)
	record["cd"] = chamfer(pa, pb)
	record["emd"] = emd(pa, pb)
	return record


def unique_face_edges(faces: np.ndarray) -> np.ndarray:
	"""Уникальные неориентированные рёбра треугольников."""
	faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
	pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
	return np.unique(np.sort(pairs, axis=1), axis=0)


def load_obj(path: Union[str, Path]) -> ClothMesh:
	"""Прочитать OBJ (только строки v/f, треугольники)."""
	vertices = []
	faces = []
	for line in Path(path).read_text(encoding="utf-8").splitlines():
		parts = line.split()
		if not parts:
			continue
		if parts[0] == "v":
			vertices.append([float(x) for x in parts[1:4]])
		elif parts[0] == "f":
			if len(parts) != 4:
				raise DomainError(f"Поддерживаются только треугольники: {line!r}")
			faces.append([int(token.split("/")[0]) - 1 for token in parts[1:4]])
	faces_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
	logger.debug(f"Загружен OBJ {path}: {len(vertices)} вершин, {len(faces)} граней")
	return ClothMesh(np.asarray(vertices), unique_face_edges(faces_arr), faces_arr)


def save_obj(mesh: ClothMesh, path: Union[str, Path]):
	"""Записать сетку в OBJ."""
	lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
	lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.faces]
	Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
