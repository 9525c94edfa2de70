"""Точка входа для запуска модуля как пакета."""

import sys

from .main import main

if __name__ == "__main__":
	sys.exit(main())
