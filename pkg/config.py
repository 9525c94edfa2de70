"""Конфигурация clothdiff."""

import json
from pathlib import Path
from typing import Optional, Type, TypeVar, Union

from pydantic import BaseModel, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError


ModelT = TypeVar("ModelT", bound=BaseModel)


class Config(BaseSettings):
	"""Настройки процесса (переменные окружения CLOTHDIFF_*)."""

	# Воспроизводимость
	seed: int = Field(default=0, description="Главный сид (CLOTHDIFF_SEED)")
	workers: int = Field(default=1, ge=1, description="Потоки gen-data и evaluate по умолчанию (CLOTHDIFF_WORKERS)")

	# Настройки логирования
	log_level: str = Field(default="INFO", description="Уровень логирования")

	# Настройки сервера инструментов
	host: str = Field(default="127.0.0.1", description="Хост для HTTP-сервера")
	port: int = Field(default=8000, description="Порт для HTTP-сервера")
	server_name: str = Field(default="clothdiff tools", description="Имя MCP-сервера")
	server_version: str = Field(default="1.0.0", description="Версия MCP-сервера")
	dpm_checkpoint: Optional[str] = Field(default=None, description="Чекпоинт модели восприятия")
	ddm_checkpoint: Optional[str] = Field(default=None, description="Чекпоинт модели динамики")

	# Ткань для инструмента планирования
	cloth_rows: int = Field(default=8, ge=2)
	cloth_cols: int = Field(default=8, ge=2)
	cloth_size: float = Field(default=0.4, gt=0, description="Сторона квадратной ткани, м")

	model_config = SettingsConfigDict(env_file=".env", env_prefix="CLOTHDIFF_", extra="ignore")


def get_config() -> Config:
	"""Получить конфигурацию."""
	return Config()


def load_json_config(source: Union[str, Path, dict, None], model: Type[ModelT]) -> ModelT:
	"""Прочитать и провалидировать JSON-конфиг подкоманды.

	Args:
		source: Путь к JSON-файлу, уже разобранный словарь или None (значения по умолчанию)
		model: Pydantic-модель конфига (extra="forbid")

	Returns:
		Экземпляр модели
	"""
	if source is None:
		return model()
	if isinstance(source, dict):
		payload = source
	else:
		path = Path(source)
		if not path.exists():
			raise ConfigError(f"Файл конфигурации не найден: {path}")
		try:
			payload = json.loads(path.read_text(encoding="utf-8"))
		except json.JSONDecodeError as e:
			raise ConfigError(f"Некорректный JSON в {path}: {e}") from e
	try:
		return model.model_validate(payload)
	except ValidationError as e:
		raise ConfigError(f"Ошибка конфигурации {model.__name__}: {e}") from e
