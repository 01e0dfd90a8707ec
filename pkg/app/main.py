import logging
import sys
from pathlib import Path
from typing import Optional

from loguru import logger

from .core.config import settings
from .cli import run


class InterceptHandler(logging.Handler):
    """Route stdlib logging records from the services into loguru"""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            level = logger.level(record.levelname).name
        except ValueError:
            level = record.levelno

        frame, depth = logging.currentframe(), 2
        while frame is not None and frame.f_code.co_filename == logging.__file__:
            frame = frame.f_back
            depth += 1

        logger.opt(depth=depth, exception=record.exc_info).log(level, record.getMessage())


def setup_logging(output_dir: Optional[Path] = None) -> None:
    """Configure logging: stderr plus a log file inside the command's output directory"""
    serialize = settings.log_format == "json"
    logger.remove()
    logger.add(sys.stderr, level=settings.log_level.upper(), serialize=serialize)
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        logger.add(
            Path(output_dir) / settings.log_file,
            level=settings.log_level.upper(),
            serialize=serialize,
            mode="w",
        )
    logging.basicConfig(handlers=[InterceptHandler()], level=0, force=True)


def main() -> None:
    sys.exit(run(sys.argv[1:], configure_logging=setup_logging))


if __name__ == "__main__":
    main()
