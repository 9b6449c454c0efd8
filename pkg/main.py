import sys
from typing import List, Optional

from loguru import logger

from config.settings import settings


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None):
    """Configure loguru: coloured stderr sink plus an optional rotating file."""
    logger.remove()  # Remove default handler

    logger.add(
        sys.stderr,
        format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>",
        level=(level or settings.log_level).upper(),
        colorize=True,
    )

    log_file = log_file or settings.log_file
    if log_file:
        logger.add(
            log_file,
            rotation="10 MB",
            retention="7 days",
            format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}",
            level="DEBUG",
        )


def main(argv: Optional[List[str]] = None):
    from routers.cli_router import main as cli_main

    sys.exit(cli_main(argv))


if __name__ == "__main__":
    main()
