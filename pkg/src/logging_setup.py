"""Process-wide logging configuration."""

from __future__ import annotations

import os
import logging
from pathlib import Path
from typing import List
from logging.handlers import RotatingFileHandler

LOG_NAME = "pgcon.log"

# handlers added by init_logging, replaced when a later command logs elsewhere
_installed: List[logging.Handler] = []

def _drop_installed(root_logger: logging.Logger) -> None:
    for handler in _installed:
        try:
            handler.close()
        finally:
            root_logger.removeHandler(handler)
    _installed.clear()

def init_logging(log_dir: Path, level: int = logging.INFO) -> Path:
    """
    Configures root logging with both console and rotating file handlers.

    A repeat call for the same directory is a no-op; a call for another
    directory moves the file handler there. Handlers installed by the
    embedding application are left alone.

    Returns the path to the log file.
    """
    log_dir = Path(log_dir)
    log_file = log_dir / LOG_NAME
    log_dir.mkdir(parents=True, exist_ok=True)

    root_logger = logging.getLogger()
    installed = [h for h in _installed if h in root_logger.handlers]
    if installed:
        current = next((h for h in installed if isinstance(h, RotatingFileHandler)), None)
        if current is not None and current.baseFilename == os.path.abspath(log_file):
            return log_file
        _drop_installed(root_logger)
    elif root_logger.handlers:
        return log_file
    else:
        _installed.clear()

    root_logger.setLevel(level)

    formatter = logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s")

    file_handler = RotatingFileHandler(log_file, maxBytes=512_000, backupCount=3, encoding="utf-8")
    file_handler.setFormatter(formatter)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)

    root_logger.addHandler(file_handler)
    root_logger.addHandler(console_handler)
    _installed.extend([file_handler, console_handler])

    root_logger.debug("Logging initialized. Log file: %s", log_file)

    return log_file
