"""Командная строка clothdiff: данные, обучение, оценка, планирование и сервер инструментов."""

import argparse
import asyncio
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .clothsim import ActionStep, ClothSimulator, ClothState, SimParams, rollout_state
from .config import get_config, load_json_config
from .datasets import ClothSpec, GenDataConfig, gen_data, load_pairs, load_trajectories
from .dynamics import DdmConfig, DdmModel, rollout_autoregressive, train_ddm
from .errors import ConfigError, NumericalError
from .evaluation import EvaluateConfig, evaluate, plot_emit, run_gradcheck, write_report
from .geometry import ClothMesh, PointCloud, load_obj, save_obj
from .http_server import run_http_server
from .perception import DpmConfig, DpmModel, estimate_state, train_dpm
from .persistence import load_checkpoint, read_json, read_tensor, save_checkpoint, write_json, write_tensor
from .planner import MpcConfig, PlannerConfig, fold_target, mpc_episode, random_episode, success_curve
from .stdio_server import run_stdio_server
from .training import TrainConfig


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

logger = logging.getLogger(__name__)


class TrainDpmJob(BaseModel):
	model_config = ConfigDict(extra="forbid")

	model: DpmConfig = Field(default_factory=DpmConfig)
	train: TrainConfig = Field(default_factory=TrainConfig)


class TrainDdmJob(BaseModel):
	model_config = ConfigDict(extra="forbid")

	model: DdmConfig = Field(default_factory=DdmConfig)
	train: TrainConfig = Field(default_factory=TrainConfig)
	stride: int = Field(default=1, ge=1, description="Шаг окна переходов по траектории")


class FoldTask(BaseModel):
	"""Задача складывания для подкоманды plan."""

	model_config = ConfigDict(extra="forbid")

	cloth: ClothSpec = Field(default_factory=ClothSpec)
	sim: SimParams = Field(default_factory=SimParams)
	fold: Literal["diagonal", "half"] = "diagonal"
	lift: float = Field(default=0.01, ge=0)
	planner: PlannerConfig = Field(default_factory=PlannerConfig)
	mpc: MpcConfig = Field(default_factory=MpcConfig)
	episodes: int = Field(default=1, ge=1)
	seed: int = 0
	success_ratios: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.5])


def setup_logging(level: str = "INFO"):
	"""Настройка логирования.

	Args:
		level: Уровень логирования
	"""
	logging.basicConfig(
		level=getattr(logging, level.upper()),
		format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
		handlers=[
			logging.StreamHandler(sys.stderr)  # stdout занят JSON-выводом и stdio-транспортом
		],
		force=True,
	)


def create_parser() -> argparse.ArgumentParser:
	"""Создание парсера аргументов командной строки."""
	parser = argparse.ArgumentParser(
		prog="clothdiff",
		description="Диффузионные модели восприятия и динамики ткани и планировщик MPPI",
		formatter_class=argparse.RawDescriptionHelpFormatter,
		epilog="""
Примеры использования:

  python -m clothdiff gen-data --config gen.json --out data/dyn
  python -m clothdiff train-ddm --data data/dyn --out ckpt/ddm
  python -m clothdiff evaluate --ckpt ckpt/ddm --data data/dyn_test --out reports/ddm
  python -m clothdiff plan --task fold.json --out episodes.json
  python -m clothdiff plot-emit --input episodes.json --metric emd
  python -m clothdiff serve http --port 8000

Переменные окружения:
  CLOTHDIFF_SEED            - Главный сид (переопределяет сиды в конфигах)
  CLOTHDIFF_LOG_LEVEL       - Уровень логирования (по умолчанию: INFO)
  CLOTHDIFF_WORKERS         - Потоки gen-data и evaluate, если конфиг не задаёт workers
  CLOTHDIFF_DPM_CHECKPOINT  - Чекпоинт DPM для сервера инструментов
  CLOTHDIFF_DDM_CHECKPOINT  - Чекпоинт DDM для сервера инструментов
  CLOTHDIFF_HOST / _PORT    - Адрес HTTP-сервера

Коды выхода: 0 - успех, 2 - ошибка конфигурации, 3 - численный сбой, 1 - прочее.
		"""
	)
	parser.add_argument("--env-file", type=str, help="Путь к .env файлу с конфигурацией")
	parser.add_argument("--log-level", type=str, choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Уровень логирования")
	parser.add_argument("--seed", type=int, help="Главный сид")
	sub = parser.add_subparsers(dest="command", required=True)

	p = sub.add_parser("gen-data", help="Сгенерировать набор данных")
	p.add_argument("--config", type=str, help="JSON GenDataConfig")
	p.add_argument("--out", type=str, required=True)

	for name, help_text in (("train-dpm", "Обучить модель восприятия"), ("train-ddm", "Обучить модель динамики")):
		p = sub.add_parser(name, help=help_text)
		p.add_argument("--data", type=str, required=True)
		p.add_argument("--config", type=str, help="JSON с разделами model и train")
		p.add_argument("--out", type=str, required=True)

	p = sub.add_parser("estimate", help="Оценить состояние по облаку точек")
	p.add_argument("--ckpt", type=str, required=True)
	p.add_argument("--canonical", type=str, help="Шаблон .obj (по умолчанию - шаблон из чекпоинта)")
	p.add_argument("--cloud", type=str, required=True, help="Облако (N, 3) в формате CDTENSOR")
	p.add_argument("--n-samples", type=int, default=1)
	p.add_argument("--out", type=str, required=True, help="Выходной .obj или .cdt")

	p = sub.add_parser("rollout", help="Прогноз DDM или симуляция по последовательности действий")
	p.add_argument("--ckpt", type=str, help="Чекпоинт DDM (без него - физический симулятор)")
	p.add_argument("--history", type=str, required=True, help="Кадры (H, Nv, 3) в формате CDTENSOR")
	p.add_argument("--actions", type=str, required=True, help="Смещения (L, 3) в формате CDTENSOR")
	p.add_argument("--grasp", type=int, help="Индекс захваченной вершины")
	p.add_argument("--config", type=str, help="JSON FoldTask (ткань и физика для симулятора)")
	p.add_argument("--out", type=str, required=True, help="Кадры (L, Nv, 3) в формате CDTENSOR")

	p = sub.add_parser("plan", help="Эпизоды MPC на задаче складывания")
	p.add_argument("--task", type=str, help="JSON FoldTask")
	p.add_argument("--dynamics", choices=["sim", "ddm"], help="Модель переходов (по умолчанию ddm, если задан --ddm)")
	p.add_argument("--perception", choices=["oracle", "dpm"], help="Источник состояния (по умолчанию dpm, если задан --dpm)")
	p.add_argument("--ddm", type=str, help="Чекпоинт DDM (без него - оракул-симулятор)")
	p.add_argument("--dpm", type=str, help="Чекпоинт DPM (без него - точное состояние)")
	p.add_argument("--random-baseline", action="store_true", help="Случайные действия вместо планировщика")
	p.add_argument("--out", type=str, required=True)

	p = sub.add_parser("evaluate", help="Метрики чекпоинта на наборе данных")
	p.add_argument("--ckpt", type=str, required=True)
	p.add_argument("--data", type=str, required=True)
	p.add_argument("--config", type=str, help="JSON EvaluateConfig")
	p.add_argument("--out", type=str, required=True)

	p = sub.add_parser("gradcheck", help="Проверка градиентов конечными разностями")
	p.add_argument("--scope", choices=["ops", "dpm", "ddm"], default="ops")
	p.add_argument("--out", type=str, help="Отчёт JSON (по умолчанию stdout)")

	p = sub.add_parser("plot-emit", help="CSV-ряд для графика из отчёта или эпизодов")
	p.add_argument("--input", type=str, required=True)
	p.add_argument("--metric", type=str, default="emd")
	p.add_argument("--out", type=str, help="Файл CSV (по умолчанию stdout)")

	p = sub.add_parser("serve", help="Сервер MCP-инструментов")
	p.add_argument("mode", nargs="?", default="stdio", choices=["stdio", "http"])
	p.add_argument("--host", type=str, help="Хост для HTTP-сервера")
	p.add_argument("--port", type=int, help="Порт для HTTP-сервера")
	p.add_argument("--dpm", type=str, help="Чекпоинт DPM")
	p.add_argument("--ddm", type=str, help="Чекпоинт DDM")
	return parser


def _seed_override() -> Optional[int]:
	value = os.environ.get("CLOTHDIFF_SEED")
	if value is None:
		return None
	try:
		return int(value)
	except ValueError as e:
		raise ConfigError(f"CLOTHDIFF_SEED должен быть целым числом: {value!r}") from e


def _with_seed(config: BaseModel, seed: Optional[int]) -> BaseModel:
	return config if seed is None else config.model_copy(update={"seed": seed})


def _with_workers(config: BaseModel) -> BaseModel:
	"""Число потоков из окружения, если JSON-конфиг его не задаёт."""
	if "workers" in config.model_fields_set:
		return config
	return config.model_copy(update={"workers": get_config().workers})


def _load_model(path: str, kind: type, label: str):
	model = load_checkpoint(path)
	if not isinstance(model, kind):
		raise ConfigError(f"Чекпоинт {path} не является {label}")
	return model


def _print_json(payload):
	print(json.dumps(payload, ensure_ascii=False, indent=2))


def cmd_gen_data(args, seed: Optional[int]) -> int:
	config = _with_workers(_with_seed(load_json_config(args.config, GenDataConfig), seed))
	manifest = gen_data(config, args.out)
	_print_json({"kind": manifest.kind, "records": len(manifest.records), "out": args.out})
	return EXIT_OK


def cmd_train_dpm(args, seed: Optional[int]) -> int:
	job = load_json_config(args.config, TrainDpmJob)
	manifest, pairs = load_pairs(args.data)
	model = DpmModel(manifest.cloth.build(manifest.sim), job.model)
	result = train_dpm(model, pairs, _with_seed(job.train, seed))
	save_checkpoint(model, args.out, {"losses": result.losses, "dataset": str(args.data)})
	_print_json({"final_smoothed_loss": result.final_smoothed, "out": args.out})
	return EXIT_OK


def cmd_train_ddm(args, seed: Optional[int]) -> int:
	job = load_json_config(args.config, TrainDdmJob)
	manifest, trajectories = load_trajectories(args.data)
	model = DdmModel(manifest.cloth.build(manifest.sim), job.model)
	transitions = [
		t for traj in trajectories
		for t in traj.transitions(job.model.history, job.model.future, job.stride)
	]
	logger.info(f"Переходов: {len(transitions)} из {len(trajectories)} траекторий")
	result = train_ddm(model, transitions, _with_seed(job.train, seed))
	save_checkpoint(model, args.out, {"losses": result.losses, "dataset": str(args.data)})
	_print_json({"final_smoothed_loss": result.final_smoothed, "transitions": len(transitions), "out": args.out})
	return EXIT_OK


def _canonical_from_obj(model: DpmModel, path: str) -> ClothMesh:
	"""Шаблон из файла: вершины файла, связность модели (грани должны совпадать)."""
	if not Path(path).exists():
		raise ConfigError(f"Шаблон не найден: {path}")
	mesh = load_obj(path)
	if mesh.n_vertices != model.canonical.n_vertices or not np.array_equal(mesh.faces, model.canonical.faces):
		raise ConfigError(f"Шаблон {path} не совпадает с разбиением модели")
	return model.canonical.with_vertices(mesh.vertices)


def cmd_estimate(args, seed: Optional[int]) -> int:
	model = _load_model(args.ckpt, DpmModel, "DPM")
	canonical = _canonical_from_obj(model, args.canonical) if args.canonical else model.canonical
	rng = np.random.default_rng(seed or 0)
	mesh = estimate_state(model, canonical, PointCloud(read_tensor(args.cloud)), rng, args.n_samples)
	if args.out.endswith(".obj"):
		save_obj(mesh, args.out)
	else:
		write_tensor(args.out, mesh.vertices)
	_print_json({"n_vertices": mesh.n_vertices, "out": args.out})
	return EXIT_OK


def cmd_rollout(args, seed: Optional[int]) -> int:
	history = read_tensor(args.history)
	deltas = read_tensor(args.actions)
	if history.ndim == 2:
		history = history[None]
	actions = [ActionStep(args.grasp, d) for d in deltas]
	if args.ckpt:
		model = _load_model(args.ckpt, DdmModel, "DDM")
		frames = rollout_autoregressive(model, history, actions, np.random.default_rng(seed or 0))
	else:
		task = load_json_config(args.config, FoldTask)
		canonical = task.cloth.build(task.sim)
		simulator = ClothSimulator(canonical, task.sim)
		frames, _ = rollout_state(ClothState.at_rest(canonical.with_vertices(history[-1])), actions, simulator)
	write_tensor(args.out, np.stack([f.vertices for f in frames]))
	_print_json({"frames": len(frames), "out": args.out})
	return EXIT_OK


def _plan_models(args) -> Tuple[Optional[DdmModel], Optional[DpmModel]]:
	"""Модели для plan: --dynamics/--perception выбирают явно, иначе решает наличие чекпоинта."""
	dynamics = args.dynamics or ("ddm" if args.ddm else "sim")
	perception = args.perception or ("dpm" if args.dpm else "oracle")
	if dynamics == "ddm" and not args.ddm:
		raise ConfigError("--dynamics ddm требует --ddm")
	if perception == "dpm" and not args.dpm:
		raise ConfigError("--perception dpm требует --dpm")
	if dynamics == "sim" and args.ddm:
		logger.warning(f"--dynamics sim: чекпоинт {args.ddm} не используется")
	if perception == "oracle" and args.dpm:
		logger.warning(f"--perception oracle: чекпоинт {args.dpm} не используется")
	ddm = _load_model(args.ddm, DdmModel, "DDM") if dynamics == "ddm" else None
	dpm = _load_model(args.dpm, DpmModel, "DPM") if perception == "dpm" else None
	logger.info(f"Планирование: динамика {dynamics}, восприятие {perception}")
	return ddm, dpm


def cmd_plan(args, seed: Optional[int]) -> int:
	task = _with_seed(load_json_config(args.task, FoldTask), seed)
	canonical = task.cloth.build(task.sim)
	target = fold_target(canonical, task.fold, task.lift)
	simulator = ClothSimulator(canonical, task.sim)
	ddm, dpm = _plan_models(args)
	episodes = []
	for i in range(task.episodes):
		rng = np.random.default_rng([task.seed, i])
		if args.random_baseline:
			result = random_episode(simulator, canonical, target, task.planner, rng, task.mpc)
		else:
			result = mpc_episode(simulator, canonical, target, task.planner, rng, task.mpc, ddm, dpm)
		logger.info(f"Эпизод {i}: EMD {result.emd[0]:.4f} → {result.emd[-1]:.4f}, успех {result.success}")
		episodes.append(result)
	payload = {
		"task": task.model_dump(mode="json"),
		"episodes": [e.to_dict() for e in episodes],
		"success_rate": float(np.mean([e.success for e in episodes])),
		"success_curve": success_curve(episodes, task.success_ratios),
	}
	write_json(args.out, payload)
	_print_json({"success_rate": payload["success_rate"], "episodes": len(episodes), "out": args.out})
	if all(e.error for e in episodes):
		raise NumericalError(f"Все эпизоды остановлены ошибкой: {episodes[0].error}")
	return EXIT_OK


def cmd_evaluate(args, seed: Optional[int]) -> int:
	config = _with_workers(_with_seed(load_json_config(args.config, EvaluateConfig), seed))
	report, records = evaluate(args.ckpt, args.data, config)
	write_report(report, records, args.out)
	_print_json({"metrics": report["metrics"], "baseline": report["baseline"]})
	return EXIT_OK


def cmd_gradcheck(args, seed: Optional[int]) -> int:
	results = run_gradcheck(args.scope, seed or 0)
	payload = {
		"scope": args.scope,
		"n_checked": len(results),
		"passed": all(r.passed for r in results),
		"results": [
			{"name": r.name, "max_rel_error": r.max_rel_error, "n_entries": r.n_checked, "passed": r.passed}
			for r in results
		],
	}
	if args.out:
		write_json(args.out, payload)
	_print_json(payload)
	for r in results:
		if not r.passed:
			logger.error(f"gradcheck: {r.name} - относительная ошибка {r.max_rel_error:.3e}")
	return EXIT_OK if payload["passed"] else EXIT_FAILURE


def cmd_plot_emit(args, seed: Optional[int]) -> int:
	text = plot_emit(read_json(args.input), args.metric)
	if args.out:
		Path(args.out).write_text(text, encoding="utf-8")
	else:
		sys.stdout.write(text)
	return EXIT_OK


def cmd_serve(args, seed: Optional[int]) -> int:
	if args.host:
		os.environ["CLOTHDIFF_HOST"] = args.host
	if args.port:
		os.environ["CLOTHDIFF_PORT"] = str(args.port)
	if args.dpm:
		os.environ["CLOTHDIFF_DPM_CHECKPOINT"] = args.dpm
	if args.ddm:
		os.environ["CLOTHDIFF_DDM_CHECKPOINT"] = args.ddm
	config = get_config()
	logger.debug(f"Запуск сервера в режиме: {args.mode}")
	try:
		if args.mode == "stdio":
			asyncio.run(run_stdio_server(config))
		else:
			logger.debug(f"HTTP-сервер будет запущен на {config.host}:{config.port}")
			asyncio.run(run_http_server(config))
	except KeyboardInterrupt:
		logger.debug("Получен сигнал прерывания, завершение работы...")
	return EXIT_OK


COMMANDS = {
	"gen-data": cmd_gen_data,
	"train-dpm": cmd_train_dpm,
	"train-ddm": cmd_train_ddm,
	"estimate": cmd_estimate,
	"rollout": cmd_rollout,
	"plan": cmd_plan,
	"evaluate": cmd_evaluate,
	"gradcheck": cmd_gradcheck,
	"plot-emit": cmd_plot_emit,
	"serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
	"""Разобрать аргументы, выполнить подкоманду и вернуть код выхода."""
	parser = create_parser()
	args = parser.parse_args(argv)

	if args.env_file:
		env_path = Path(args.env_file)
		if env_path.exists():
			load_dotenv(env_path)
		else:
			print(f"Предупреждение: файл {args.env_file} не найден", file=sys.stderr)
	else:
		load_dotenv()

	# Аргументы командной строки переопределяют окружение до создания Config
	if args.seed is not None:
		os.environ["CLOTHDIFF_SEED"] = str(args.seed)
	if args.log_level:
		os.environ["CLOTHDIFF_LOG_LEVEL"] = args.log_level

	try:
		config = get_config()
	except ValidationError as e:
		print(f"Ошибка конфигурации: {e}", file=sys.stderr)
		return EXIT_CONFIG
	setup_logging(config.log_level)
	logger.debug(f"Команда: {args.command}, аргументы: {args}")

	try:
		return COMMANDS[args.command](args, _seed_override())
	except (ConfigError, ValidationError) as e:
		logger.error(f"Ошибка конфигурации: {e}")
		return EXIT_CONFIG
	except NumericalError as e:
		logger.error(f"Численный сбой: {e}")
		return EXIT_NUMERICAL
	except Exception as e:
		logger.error(f"Критическая ошибка: {e}")
		return EXIT_FAILURE


if __name__ == "__main__":
	sys.exit(main())
