"""MCP-сервер с инструментами clothdiff."""

import json
import logging
from contextlib import asynccontextmanager
from typing import Any, AsyncIterator, Dict, List, Optional

from mcp import types
from mcp.server import Server
from mcp.server.lowlevel import NotificationOptions
from mcp.server.models import InitializationOptions

from .config import Config
from .toolbox import ClothToolbox


logger = logging.getLogger(__name__)


class ClothMCPServer:
	"""Низкоуровневый MCP-сервер над ClothToolbox; общий для stdio и HTTP."""

	def __init__(self, config: Config, toolbox: Optional[ClothToolbox] = None):
		"""Инициализация сервера.

		Args:
			config: Конфигурация сервера
			toolbox: Готовый набор инструментов (по умолчанию создаётся из config)
		"""
		self.config = config
		self.toolbox = toolbox or ClothToolbox(config)
		self.server = Server(name=config.server_name, version=config.server_version, lifespan=self._session)
		self.server.list_tools()(self._list_tools)
		self.server.call_tool()(self._call_tool)

	@asynccontextmanager
	async def _session(self, server: Server) -> AsyncIterator[Dict[str, Any]]:
		health = self.toolbox.check_health()
		logger.info(
			f"Сессия MCP: DPM {'есть' if health['dpm']['configured'] else 'нет'}, "
			f"DDM {'есть' if health['ddm']['configured'] else 'нет'}"
		)
		yield {"toolbox": self.toolbox}
		logger.debug("Сессия MCP закрыта")

	async def _list_tools(self) -> List[types.Tool]:
		return await self.toolbox.list_tools()

	async def _call_tool(self, name: str, arguments: Dict[str, Any]) -> List[types.TextContent]:
		"""Исключение инструмента сервер превращает в результат с isError."""
		logger.debug(f"Инструмент {name}, аргументы: {sorted(arguments or {})}")
		try:
			payload = await self.toolbox.run_tool(name, arguments)
		except Exception as e:
			logger.error(f"Инструмент {name} завершился ошибкой: {e}")
			raise
		return [types.TextContent(type="text", text=json.dumps(payload, ensure_ascii=False))]

	def get_initialization_options(self) -> InitializationOptions:
		return InitializationOptions(
			server_name=self.config.server_name,
			server_version=self.config.server_version,
			capabilities=self.server.get_capabilities(
				notification_options=NotificationOptions(),
				experimental_capabilities={},
			),
		)
