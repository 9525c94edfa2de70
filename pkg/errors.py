"""Иерархия исключений clothdiff."""

from typing import Optional


class ClothDiffError(Exception):
	"""Базовое исключение пакета."""


class ConfigError(ClothDiffError):
	"""Ошибка конфигурации (код выхода 2)."""


class DomainError(ClothDiffError, ValueError):
	"""Аргумент вне области определения операции."""


class CorrespondenceError(DomainError):
	"""Нет поточечного соответствия между двумя сетками."""


class ShapeError(ClothDiffError, ValueError):
	"""Несовместимые формы тензоров."""


class EmptyObservationError(ClothDiffError):
	"""Ни одна точка поверхности не видна с заданных камер."""


class NumericalError(ClothDiffError):
	"""Численный сбой (код выхода 3)."""


class SimulationBlowupError(NumericalError):
	"""В симуляции появились NaN/Inf."""

	def __init__(self, vertex: int, step: Optional[int] = None):
		self.vertex = vertex
		self.step = step
		where = f" на шаге {step}" if step is not None else ""
		super().__init__(f"Симуляция разошлась: вершина {vertex}{where}")


class SamplingError(NumericalError):
	"""Модель вернула NaN/Inf во время обратной диффузии."""

	def __init__(self, k: int):
		self.k = k
		super().__init__(f"Нечисловой выход модели на шаге диффузии k={k}")


class TrainingDivergedError(NumericalError):
	"""Функция потерь стала NaN/Inf."""

	def __init__(self, step: int):
		self.step = step
		super().__init__(f"Функция потерь разошлась на шаге {step}")


class PlanningError(ClothDiffError):
	"""Оракул динамики не смог оценить траекторию."""

	def __init__(self, sample_id: int, cause: Exception):
		self.sample_id = sample_id
		super().__init__(f"Оракул динамики упал на сэмпле {sample_id}: {cause}")
