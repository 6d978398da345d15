"""
Shared logger

Every module imports ``logger`` from here. Records go to stderr; an
optional file sink mirrors them.
"""

import sys
from typing import Optional

from loguru import logger

LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {name}:{line} - {message}"


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Install the stderr sink (and optionally a file sink) at the given level."""
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)
    if log_file:
        logger.add(log_file, level=level.upper(), format=LOG_FORMAT, enqueue=True)


__all__ = ["logger", "configure_logging"]
