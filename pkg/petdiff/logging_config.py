import logging
import sys
from pathlib import Path

from .config import settings

RUNNERS = ["trainer", "evaluator", "ablation"]


def setup_logging() -> None:
    """Configure logging for petdiff runs"""

    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    logs_dir = Path(settings.log_dir)
    if settings.log_to_file:
        logs_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(logs_dir / "petdiff.log"))

    logging.basicConfig(
        level=logging.INFO if settings.env == "production" else logging.DEBUG,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )

    # Quiet third-party loggers
    logging.getLogger("torch").setLevel(logging.WARNING)

    if not settings.log_to_file:
        return

    # Runner-specific log files
    for runner in RUNNERS:
        runner_logger = logging.getLogger(f"petdiff.runners.{runner}")
        runner_logger.setLevel(logging.INFO)
        if any(isinstance(h, logging.FileHandler) for h in runner_logger.handlers):
            continue
        runner_handler = logging.FileHandler(logs_dir / f"runner_{runner}.log")
        runner_handler.setFormatter(
            logging.Formatter("%(asctime)s - %(levelname)s - %(message)s")
        )
        runner_logger.addHandler(runner_handler)


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance for the given name"""
    return logging.getLogger(f"petdiff.{name}")
