"""HTTP-транспорт инструментов ткани: Streamable HTTP на /mcp/ и REST-маршруты."""

import logging
from contextlib import asynccontextmanager
from typing import Any, Dict, Optional

import uvicorn
from fastapi import Body, FastAPI, HTTPException
from mcp.server.streamable_http_manager import StreamableHTTPSessionManager
from pydantic import ValidationError
from starlette.types import Receive, Scope, Send

from .config import Config
from .errors import ClothDiffError, NumericalError
from .mcp_server import ClothMCPServer


logger = logging.getLogger(__name__)

MCP_PATH = "/mcp/"


class ClothHttpServer:
	"""FastAPI-приложение поверх общего набора инструментов ткани."""

	def __init__(self, config: Config):
		"""Собрать приложение.

		Args:
			config: Конфигурация (адрес, чекпоинты, ткань для планирования)
		"""
		self.config = config
		self.mcp = ClothMCPServer(config)
		self.toolbox = self.mcp.toolbox
		self.sessions = StreamableHTTPSessionManager(self.mcp.server)
		self.app = FastAPI(
			title="clothdiff",
			description="Восприятие, динамика и планирование ткани как MCP-инструменты",
			version=config.server_version,
			lifespan=self._sessions_lifespan,
		)
		# С завершающим слэшем, чтобы не было 307 редиректов
		self.app.mount(MCP_PATH, self._mcp_endpoint)
		self._add_routes()

	@asynccontextmanager
	async def _sessions_lifespan(self, app: FastAPI):
		async with self.sessions.run():
			logger.info(f"Сессии MCP доступны на {MCP_PATH}")
			yield
		logger.info("Менеджер сессий MCP остановлен")

	async def _mcp_endpoint(self, scope: Scope, receive: Receive, send: Send) -> None:
		try:
			await self.sessions.handle_request(scope, receive, send)
		except Exception as e:
			logger.error(f"Сбой MCP-запроса {scope.get('path')}: {e}")
			raise

	def _add_routes(self):
		app = self.app

		@app.get("/")
		async def index() -> Dict[str, Any]:
			return {
				"message": "clothdiff MCP server",
				"endpoints": {"info": "/info", "health": "/health", "tools": "/tools/{name}", "streamable_http": MCP_PATH},
			}

		@app.get("/info")
		async def info() -> Dict[str, Any]:
			tools = await self.toolbox.list_tools()
			return {
				"name": self.config.server_name,
				"version": self.config.server_version,
				"tools": [tool.name for tool in tools],
				"transports": {"streamable_http": {"endpoint": MCP_PATH}},
			}

		@app.get("/health")
		async def health() -> Dict[str, Any]:
			try:
				return {"status": "healthy", "models": self.toolbox.check_health()}
			except Exception as e:
				logger.error(f"Состояние моделей недоступно: {e}")
				return {"status": "unhealthy", "error_details": str(e)}

		@app.post("/tools/{name}")
		async def call(name: str, arguments: Optional[Dict[str, Any]] = Body(default=None)) -> Dict[str, Any]:
			"""Вызов инструмента без MCP-сессии: 404 для неизвестного, 422/400/500 по типу ошибки."""
			if name not in self.toolbox.tool_names:
				raise HTTPException(status_code=404, detail=f"Неизвестный инструмент: {name}")
			try:
				return await self.toolbox.run_tool(name, arguments)
			except ValidationError as e:
				raise HTTPException(status_code=422, detail=str(e)) from e
			except NumericalError as e:
				raise HTTPException(status_code=500, detail=str(e)) from e
			except ClothDiffError as e:
				raise HTTPException(status_code=400, detail=str(e)) from e

	async def serve(self):
		server = uvicorn.Server(uvicorn.Config(
			app=self.app,
			host=self.config.host,
			port=self.config.port,
			log_level=self.config.log_level.lower(),
			access_log=True,
		))
		logger.info(f"HTTP-сервер инструментов: http://{self.config.host}:{self.config.port}")
		await server.serve()


async def run_http_server(config: Config):
	"""Запуск HTTP-сервера.

	Args:
		config: Конфигурация сервера
	"""
	await ClothHttpServer(config).serve()
