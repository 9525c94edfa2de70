"""Синтетические частичные облака точек, аугментация и токенизация (FPS / KNN / Вороной)."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.distance import cdist
from scipy.spatial.transform import Rotation

from .errors import DomainError, EmptyObservationError
from .geometry import ClothMesh, PointCloud, as_points, fps


logger = logging.getLogger(__name__)

RAY_EPSILON = 1e-6
DECODE_EPSILON = 1e-8
OBSERVE_RETRIES = 3

RngLike = Union[np.random.Generator, int, None]


class CameraPose(BaseModel):
	"""Камера глубины: положение, точка наведения, горизонтальный угол обзора, разрешение."""

	model_config = ConfigDict(extra="forbid")

	position: Tuple[float, float, float]
	look_at: Tuple[float, float, float] = (0.0, 0.0, 0.0)
	fov_deg: float = Field(default=60.0, gt=0, lt=180)
	resolution: Tuple[int, int] = (640, 480)

	@model_validator(mode="after")
	def _check_direction(self):
		if np.allclose(self.position, self.look_at):
			raise ValueError("position совпадает с look_at")
		return self

	def basis(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
		"""Ортонормированный базис камеры (right, up, forward)."""
		forward = np.asarray(self.look_at, dtype=np.float64) - np.asarray(self.position, dtype=np.float64)
		forward /= np.linalg.norm(forward)
		world_up = np.array([0.0, 0.0, 1.0])
		if abs(forward @ world_up) > 0.999:
			world_up = np.array([0.0, 1.0, 0.0])
		right = np.cross(forward, world_up)
		right /= np.linalg.norm(right)
		up = np.cross(right, forward)
		return right, up, forward

	def in_frustum(self, points: np.ndarray) -> np.ndarray:
		right, up, forward = self.basis()
		rel = points - np.asarray(self.position, dtype=np.float64)
		depth = rel @ forward
		tan_h = np.tan(np.deg2rad(self.fov_deg) / 2.0)
		tan_v = tan_h * self.resolution[1] / self.resolution[0]
		safe = np.maximum(depth, 1e-12)
		return (depth > 0) & (np.abs(rel @ right) / safe <= tan_h) & (np.abs(rel @ up) / safe <= tan_v)


class AugmentParams(BaseModel):
	"""Диапазоны аугментации наблюдения."""

	model_config = ConfigDict(extra="forbid")

	rot_range_deg: float = Field(default=1.5, ge=0)
	trans_range_m: float = Field(default=0.005, ge=0)
	dropout_range: Tuple[float, float] = (0.1, 0.2)
	noise_sigma: float = Field(default=0.0, ge=0)

	@model_validator(mode="after")
	def _check_dropout(self):
		lo, hi = self.dropout_range
		if not (0.0 <= lo <= hi < 1.0):
			raise ValueError("dropout_range должен лежать в [0, 1)")
		return self


@dataclass(frozen=True, eq=False)
class PatchSet:
	"""Разбиение точек на патчи вокруг центров FPS.

	Attributes:
		centers: Координаты центров (G, 3)
		center_indices: Индексы центров в исходных точках
		assignment: Ячейка Вороного каждой точки
		groups: Члены каждой ячейки (разбиение множества точек)
		neighborhoods: KNN-группы фиксированного размера (G, K) - только для облаков
	"""

	centers: np.ndarray
	center_indices: np.ndarray
	assignment: np.ndarray
	groups: List[np.ndarray]
	neighborhoods: Optional[np.ndarray] = None

	@property
	def n_patches(self) -> int:
		return len(self.centers)

	def padded_groups(self) -> Tuple[np.ndarray, np.ndarray]:
		"""Ячейки Вороного, дополненные до общей длины.

		Returns:
			(индексы (G, Lmax), маска валидности (G, Lmax))
		"""
		width = max(len(g) for g in self.groups)
		index = np.zeros((self.n_patches, width), dtype=np.int64)
		mask = np.zeros((self.n_patches, width), dtype=bool)
		for i, members in enumerate(self.groups):
			index[i, : len(members)] = members
			index[i, len(members):] = members[0]
			mask[i, : len(members)] = True
		return index, mask


def _seed_from(rng: RngLike) -> int:
	if isinstance(rng, np.random.Generator):
		return int(rng.integers(2**31 - 1))
	return int(rng or 0)


def _voronoi(points: np.ndarray, centers: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
	distances = cdist(points, centers, "sqeuclidean")
	assignment = np.argmin(distances, axis=1)
	groups = [np.flatnonzero(assignment == g) for g in range(len(centers))]
	return assignment, groups


def sample_surface(mesh: ClothMesh, samples_per_face: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
	"""Равномерные точки на каждом треугольнике.

	Returns:
		(точки (F·S, 3), индекс грани каждой точки)
	"""
	faces = mesh.faces
	if len(faces) == 0:
		raise DomainError("У сетки нет граней")
	n = len(faces) * samples_per_face
	face_ids = np.repeat(np.arange(len(faces)), samples_per_face)
	r1 = np.sqrt(rng.random(n))
	r2 = rng.random(n)
	a = mesh.vertices[faces[face_ids, 0]]
	b = mesh.vertices[faces[face_ids, 1]]
	c = mesh.vertices[faces[face_ids, 2]]
	points = (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c
	return points, face_ids


def _occluded(origin: np.ndarray, points: np.ndarray, triangles: np.ndarray, chunk: int = 256) -> np.ndarray:
	"""Möller–Trumbore для отрезков origin→point против всех треугольников."""
	v0, v1, v2 = triangles[:, 0], triangles[:, 1], triangles[:, 2]
	e1, e2 = v1 - v0, v2 - v0
	s = origin - v0
	q_all = np.cross(s, e1)
	result = np.zeros(len(points), dtype=bool)
	for start in range(0, len(points), chunk):
		direction = points[start:start + chunk] - origin
		p = np.cross(direction[:, None, :], e2[None, :, :])
		det = np.einsum("tk,ptk->pt", e1, p)
		parallel = np.abs(det) < 1e-15
		inv = np.where(parallel, 0.0, 1.0 / np.where(parallel, 1.0, det))
		u = np.einsum("tk,ptk->pt", s, p) * inv
		v = np.einsum("pk,tk->pt", direction, q_all) * inv
		t = np.einsum("tk,tk->t", e2, q_all)[None, :] * inv
		hit = (~parallel) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > RAY_EPSILON) & (t < 1.0 - RAY_EPSILON)
		result[start:start + chunk] = hit.any(axis=1)
	return result


def visibility_mask(mesh: ClothMesh, points: np.ndarray, camera: CameraPose) -> np.ndarray:
	"""Какие точки видны камере (в пирамиде обзора и не загорожены)."""
	triangles = mesh.vertices[mesh.faces]
	mask = camera.in_frustum(points)
	if mask.any():
		candidates = np.flatnonzero(mask)
		blocked = _occluded(np.asarray(camera.position, dtype=np.float64), points[candidates], triangles)
		mask[candidates[blocked]] = False
	return mask


def render_partial_cloud(
	mesh: ClothMesh,
	cameras: Sequence[CameraPose],
	samples_per_face: int,
	rng: np.random.Generator,
) -> PointCloud:
	"""Частичное облако: точки поверхности, видимые хотя бы одной камерой.

	Args:
		mesh: Состояние ткани (с гранями)
		cameras: Непустой набор камер
		samples_per_face: Число сэмплов на треугольник
		rng: Генератор случайных чисел

	Returns:
		Объединённое облако видимых точек
	"""
	if not cameras:
		raise DomainError("Нужна хотя бы одна камера")
	points, _ = sample_surface(mesh, samples_per_face, rng)
	visible = np.zeros(len(points), dtype=bool)
	for camera in cameras:
		visible |= visibility_mask(mesh, points, camera)
	if not visible.any():
		raise EmptyObservationError("Ни одна точка не видна")
	logger.debug(f"Видно {int(visible.sum())} из {len(points)} точек с {len(cameras)} камер")
	return PointCloud(points[visible])


def random_camera_rig(
	center: np.ndarray,
	rng: np.random.Generator,
	n_cameras: Tuple[int, int] = (1, 4),
	distance: Tuple[float, float] = (0.6, 1.0),
	elevation_deg: Tuple[float, float] = (35.0, 80.0),
	fov_deg: float = 60.0,
) -> List[CameraPose]:
	"""Случайный набор камер, равномерно разнесённых по азимуту вокруг ткани."""
	count = int(rng.integers(n_cameras[0], n_cameras[1] + 1))
	phase = rng.uniform(0.0, 2.0 * np.pi)
	center = np.asarray(center, dtype=np.float64)
	cameras = []
	for i in range(count):
		azimuth = phase + 2.0 * np.pi * i / count + rng.uniform(-0.2, 0.2)
		elevation = np.deg2rad(rng.uniform(*elevation_deg))
		radius = rng.uniform(*distance)
		offset = radius * np.array([
			np.cos(elevation) * np.cos(azimuth),
			np.cos(elevation) * np.sin(azimuth),
			np.sin(elevation),
		])
		cameras.append(CameraPose(position=tuple(center + offset), look_at=tuple(center), fov_deg=fov_deg))
	return cameras


def augment(cloud: PointCloud, params: AugmentParams, rng: np.random.Generator) -> PointCloud:
	"""Жёсткое возмущение, прореживание и шум.

	Поворот вокруг центроида и сдвиг применяются до шума; нулевые диапазоны
	дают побитово исходное облако.
	"""
	points = cloud.points.copy()
	if params.rot_range_deg > 0:
		axis = rng.normal(size=3)
		axis /= np.linalg.norm(axis)
		angle = np.deg2rad(rng.uniform(-params.rot_range_deg, params.rot_range_deg))
		centroid = points.mean(axis=0)
		points = Rotation.from_rotvec(axis * angle).apply(points - centroid) + centroid
	if params.trans_range_m > 0:
		points = points + rng.uniform(-params.trans_range_m, params.trans_range_m, size=3)
	lo, hi = params.dropout_range
	rate = rng.uniform(lo, hi) if hi > lo else lo
	if rate > 0:
		keep = max(1, int(round(len(points) * (1.0 - rate))))
		points = points[np.sort(rng.choice(len(points), size=keep, replace=False))]
	if params.noise_sigma > 0:
		points = points + rng.normal(scale=params.noise_sigma, size=points.shape)
	return PointCloud(points)


def observe_cloud(
	mesh: ClothMesh,
	rng: np.random.Generator,
	samples_per_face: int,
	n_cameras: Tuple[int, int] = (1, 4),
	augment_params: Optional[AugmentParams] = None,
	min_points: int = 1,
	cameras: Optional[Sequence[CameraPose]] = None,
	max_retries: int = OBSERVE_RETRIES,
) -> PointCloud:
	"""Рендер, аугментация и проверка размера облака с повторами.

	Пустой рендер или облако меньше min_points пересэмплируются: каждая попытка
	берёт новый random_camera_rig (или заданные cameras с новыми точками поверхности).

	Args:
		mesh: Состояние ткани
		rng: Генератор случайных чисел
		samples_per_face: Число сэмплов на треугольник
		n_cameras: Диапазон числа камер случайного набора
		augment_params: Аугментация (None - без неё)
		min_points: Минимальный размер облака (для DPM - n_groups)
		cameras: Фиксированные камеры вместо случайного набора
		max_retries: Повторов сверх первой попытки

	Returns:
		Облако не меньше min_points точек
	"""
	for attempt in range(max_retries + 1):
		rig = list(cameras) if cameras else random_camera_rig(mesh.vertices.mean(axis=0), rng, n_cameras)
		try:
			cloud = render_partial_cloud(mesh, rig, samples_per_face, rng)
		except EmptyObservationError as e:
			logger.warning(f"Попытка {attempt + 1}: {e}; камеры пересэмплируются")
			continue
		if augment_params is not None:
			cloud = augment(cloud, augment_params, rng)
		if len(cloud) >= min_points:
			return cloud
		logger.warning(f"Попытка {attempt + 1}: в облаке {len(cloud)} точек, нужно не меньше {min_points}")
	raise EmptyObservationError(f"Облако из {min_points}+ точек не получено за {max_retries + 1} попыток")


def tokenize_cloud(
	cloud: Union[PointCloud, np.ndarray],
	n_groups: int = 32,
	group_size: int = 16,
	radius: float = 0.15,
	rng: RngLike = None,
) -> PatchSet:
	"""Центры FPS и KNN-группы фиксированного размера в пределах радиуса.

	Недостающие члены группы (меньше group_size соседей в радиусе) заполняются
	ближайшей точкой, то есть самим центром.
	"""
	points = as_points(cloud)
	if n_groups > len(points):
		raise DomainError(f"Облако из {len(points)} точек меньше числа групп {n_groups}")
	center_indices = fps(points, n_groups, seed=_seed_from(rng))
	centers = points[center_indices]
	distances = cdist(centers, points, "euclidean")
	order = np.argsort(distances, axis=1, kind="stable")[:, :group_size]
	nearest = order[:, :1]
	within = np.take_along_axis(distances, order, axis=1) <= radius
	neighborhoods = np.where(within, order, nearest)
	if neighborhoods.shape[1] < group_size:
		pad = np.repeat(nearest, group_size - neighborhoods.shape[1], axis=1)
		neighborhoods = np.concatenate([neighborhoods, pad], axis=1)
	assignment, groups = _voronoi(points, centers)
	return PatchSet(centers, center_indices, assignment, groups, neighborhoods)


def tokenize_mesh(
	mesh_canonical: ClothMesh,
	mesh_state: Optional[np.ndarray] = None,
	n_patches: int = 16,
	seed: int = 0,
) -> PatchSet:
	"""Непересекающиеся патчи вершин, построенные только в каноническом пространстве.

	Args:
		mesh_canonical: Шаблон s_c
		mesh_state: Вершины деформированного состояния (только проверка размера)
		n_patches: Число патчей
		seed: Сид FPS

	Returns:
		PatchSet с центрами в каноническом пространстве
	"""
	vertices = mesh_canonical.vertices
	if n_patches > len(vertices):
		raise DomainError(f"Патчей {n_patches} больше, чем вершин {len(vertices)}")
	if mesh_state is not None and len(as_points(mesh_state)) != len(vertices):
		raise DomainError("Состояние и шаблон имеют разное число вершин")
	center_indices = fps(vertices, n_patches, seed=seed)
	centers = vertices[center_indices]
	assignment, groups = _voronoi(vertices, centers)
	return PatchSet(centers, center_indices, assignment, groups)


def interpolate_decode_weights(
	mesh_canonical: ClothMesh,
	patchset: PatchSet,
	k: int = 3,
) -> Tuple[np.ndarray, np.ndarray]:
	"""Веса обратных расстояний до k ближайших центров.

	Returns:
		(индексы патчей (Nv, k), веса (Nv, k), сумма по строке равна 1)
	"""
	k = min(k, patchset.n_patches)
	distances = cdist(mesh_canonical.vertices, patchset.centers, "euclidean")
	index = np.argsort(distances, axis=1, kind="stable")[:, :k]
	nearest = np.take_along_axis(distances, index, axis=1)
	weights = 1.0 / (nearest + DECODE_EPSILON)
	weights /= weights.sum(axis=1, keepdims=True)
	exact = nearest[:, 0] == 0.0
	if exact.any():
		weights[exact] = 0.0
		weights[exact, 0] = 1.0
	return index, weights
