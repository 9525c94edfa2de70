"""stdio-транспорт инструментов clothdiff (stdout занят протоколом, логи идут в stderr)."""

import logging

from mcp.server.stdio import stdio_server

from .config import Config
from .mcp_server import ClothMCPServer


logger = logging.getLogger(__name__)


async def run_stdio_server(config: Config):
	"""Обслуживать одну MCP-сессию через stdin/stdout до её закрытия.

	Args:
		config: Конфигурация сервера
	"""
	cloth_server = ClothMCPServer(config)
	logger.info(f"MCP stdio: {config.server_name} v{config.server_version}")
	async with stdio_server() as (incoming, outgoing):
		try:
			await cloth_server.server.run(incoming, outgoing, cloth_server.get_initialization_options())
		except Exception as e:
			logger.error(f"Сессия stdio прервана: {e}")
			raise
	logger.info("MCP stdio: клиент отключился")
