"""
Handles loading and saving run configuration files.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict
from src.models import ConfigError, RunConfig

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.json"

def _read_config_file(path: Path) -> Dict[str, Any] | None:
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        return None
    try:
        data = json.loads(raw)
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object with one section per stage")
    return data

def load_run_config(path: Path | None) -> RunConfig:
    """
    Loads a run configuration, falling back to defaults when no file is given.

    A path that does not exist is a configuration error, not a silent default.
    """
    if path is None:
        return RunConfig()
    data = _read_config_file(Path(path))
    if data is None:
        raise ConfigError(f"{path}: config file not found")
    config = RunConfig.from_dict(data)
    logger.debug("Loaded run config from %s", path)
    return config

def save_run_config(config: RunConfig, path: Path) -> Path:
    """
    Saves the given configuration as indented JSON.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return path
