"""Двоичный формат тензоров CDTENSOR и чекпоинты моделей (манифест JSON + файлы параметров)."""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .dynamics import DdmConfig, DdmModel
from .errors import ConfigError, DomainError
from .geometry import ClothMesh
from .perception import DpmConfig, DpmModel


logger = logging.getLogger(__name__)

MAGIC = b"CDTENSOR"
VERSION = 1
DTYPE_CODES: Dict[int, np.dtype] = {
	0: np.dtype("<f8"),
	1: np.dtype("<f4"),
	2: np.dtype("u1"),
}
CODE_BY_DTYPE = {dtype: code for code, dtype in DTYPE_CODES.items()}

PathLike = Union[str, Path]


def encode_tensor(array: np.ndarray) -> bytes:
	"""magic | u32 версия | u32 код типа | u32 ndim | ndim × u64 размеры | данные (little-endian, C-порядок)."""
	array = np.asarray(array)
	if array.dtype.kind == "f" and array.dtype.itemsize == 8:
		dtype = DTYPE_CODES[0]
	elif array.dtype.kind == "f" and array.dtype.itemsize == 4:
		dtype = DTYPE_CODES[1]
	elif array.dtype == np.uint8 or array.dtype == np.bool_:
		dtype = DTYPE_CODES[2]
	else:
		raise DomainError(f"Неподдерживаемый тип тензора: {array.dtype}")
	header = MAGIC + struct.pack("<III", VERSION, CODE_BY_DTYPE[dtype], array.ndim)
	header += struct.pack(f"<{array.ndim}Q", *array.shape)
	return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_tensor(payload: bytes) -> np.ndarray:
	if payload[:8] != MAGIC:
		raise DomainError("Неверная сигнатура CDTENSOR")
	version, code, ndim = struct.unpack_from("<III", payload, 8)
	if version != VERSION:
		raise DomainError(f"Неподдерживаемая версия CDTENSOR: {version}")
	if code not in DTYPE_CODES:
		raise DomainError(f"Неизвестный код типа: {code}")
	offset = 20
	shape = struct.unpack_from(f"<{ndim}Q", payload, offset)
	offset += 8 * ndim
	dtype = DTYPE_CODES[code]
	count = int(np.prod(shape, dtype=np.int64))
	if len(payload) - offset != count * dtype.itemsize:
		raise DomainError("Размер данных CDTENSOR не совпадает с формой")
	return np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


def write_tensor(path: PathLike, array: np.ndarray):
	path = Path(path)
	path.parent.mkdir(parents=True, exist_ok=True)
	path.write_bytes(encode_tensor(array))


def read_tensor(path: PathLike) -> np.ndarray:
	path = Path(path)
	if not path.exists():
		raise ConfigError(f"Файл тензора не найден: {path}")
	return decode_tensor(path.read_bytes())


def write_json(path: PathLike, payload) -> None:
	path = Path(path)
	path.parent.mkdir(parents=True, exist_ok=True)
	path.write_text(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")


def read_json(path: PathLike):
	path = Path(path)
	if not path.exists():
		raise ConfigError(f"Файл не найден: {path}")
	try:
		return json.loads(path.read_text(encoding="utf-8"))
	except json.JSONDecodeError as e:
		raise ConfigError(f"Некорректный JSON в {path}: {e}") from e


def mesh_to_manifest(mesh: ClothMesh, directory: Path, stem: str) -> dict:
	write_tensor(directory / f"{stem}_vertices.cdt", mesh.vertices)
	write_tensor(directory / f"{stem}_rest.cdt", mesh.rest_lengths)
	return {
		"vertices": f"{stem}_vertices.cdt",
		"rest_lengths": f"{stem}_rest.cdt",
		"edges": mesh.edges.tolist(),
		"faces": mesh.faces.tolist(),
		"edge_kinds": mesh.edge_kinds.tolist(),
	}


def mesh_from_manifest(entry: dict, directory: Path) -> ClothMesh:
	return ClothMesh(
		read_tensor(directory / entry["vertices"]),
		np.asarray(entry["edges"], dtype=np.int64),
		np.asarray(entry["faces"], dtype=np.int64),
		np.asarray(entry["edge_kinds"], dtype=np.int64),
		read_tensor(directory / entry["rest_lengths"]),
	)


def save_checkpoint(model, directory: PathLike, extra: dict = None) -> Path:
	"""Сохранить DPM/DDM: manifest.json, params/*.cdt, канонический шаблон.

	Args:
		model: DpmModel или DdmModel
		directory: Каталог чекпоинта
		extra: Дополнительные поля манифеста (кривая потерь и т.п.)

	Returns:
		Путь к манифесту
	"""
	directory = Path(directory)
	if isinstance(model, DpmModel):
		kind = "dpm"
	elif isinstance(model, DdmModel):
		kind = "ddm"
	else:
		raise DomainError(f"Неизвестный тип модели: {type(model).__name__}")
	parameters = {}
	for name, array in model.state_dict().items():
		filename = f"params/{name}.cdt"
		write_tensor(directory / filename, array)
		parameters[name] = filename
	manifest = {
		"kind": kind,
		"config": model.config.model_dump(mode="json"),
		"schedule": model.schedule.to_dict(),
		"canonical": mesh_to_manifest(model.canonical, directory, "canonical"),
		"parameters": parameters,
	}
	if extra:
		manifest.update(extra)
	path = directory / "manifest.json"
	write_json(path, manifest)
	logger.info(f"Чекпоинт {kind} сохранён в {directory} ({len(parameters)} тензоров)")
	return path


def load_checkpoint(directory: PathLike):
	"""Загрузить модель из каталога чекпоинта."""
	directory = Path(directory)
	manifest = read_json(directory / "manifest.json")
	kind = manifest.get("kind")
	canonical = mesh_from_manifest(manifest["canonical"], directory)
	if kind == "dpm":
		model = DpmModel(canonical, DpmConfig.model_validate(manifest["config"]))
	elif kind == "ddm":
		model = DdmModel(canonical, DdmConfig.model_validate(manifest["config"]))
	else:
		raise ConfigError(f"Неизвестный тип чекпоинта: {kind!r}")
	model.load_state_dict({name: read_tensor(directory / file) for name, file in manifest["parameters"].items()})
	logger.debug(f"Загружен чекпоинт {kind} из {directory}")
	return model


def checkpoint_kind(directory: PathLike) -> str:
	return read_json(Path(directory) / "manifest.json").get("kind", "")
