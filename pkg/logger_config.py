#!/usr/bin/env python3
"""
Structured logging for hybridseg runs.

Every record is one JSON line on stderr (stdout is reserved for command
summaries). Run context such as run_id, command, seed and n_points is shared
by all module loggers of the process, so a line logged deep inside the
fitting code still names the run it belongs to.
"""

import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

import numpy as np
from dotenv import load_dotenv

load_dotenv()

LOG_LEVEL = os.getenv("HYBRIDSEG_LOG", "WARNING").upper()
LOG_FILE = os.getenv("HYBRIDSEG_LOG_FILE")

CONTEXT_FIELDS = ("run_id", "command", "seed", "n_points", "elapsed_ms")

_run_context: Dict[str, Any] = {}


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist() if value.size <= 16 else f"<array {value.shape} {value.dtype}>"
    if isinstance(value, Path):
        return str(value)
    return str(value)


class JSONFormatter(logging.Formatter):
    """One JSON object per record: header fields, run context, then keyword extras."""

    def format(self, record: logging.LogRecord) -> str:
        payload: Dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "function": record.funcName,
            "line": record.lineno,
        }
        extra = getattr(record, "extra_data", None) or {}
        for key in CONTEXT_FIELDS:
            if key in extra:
                payload[key] = extra[key]
        payload.update({k: v for k, v in extra.items() if k not in payload})
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=_jsonable)


class ContextLogger:
    """Keyword-extras logger; context set through any instance applies to all of them."""

    def __init__(self, name: str):
        self.logger = logging.getLogger(name)

    @property
    def context(self) -> Dict[str, Any]:
        return dict(_run_context)

    def set_context(self, **kwargs):
        _run_context.update(kwargs)

    def clear_context(self):
        _run_context.clear()

    def _emit(self, level: int, msg: str, exc_info: bool = False, **kwargs):
        if not self.logger.isEnabledFor(level):
            return
        self.logger.log(level, msg, exc_info=exc_info, stacklevel=3,
                        extra={"extra_data": {**_run_context, **kwargs}})

    def debug(self, msg: str, **kwargs):
        self._emit(logging.DEBUG, msg, **kwargs)

    def info(self, msg: str, **kwargs):
        self._emit(logging.INFO, msg, **kwargs)

    def warning(self, msg: str, **kwargs):
        self._emit(logging.WARNING, msg, **kwargs)

    def error(self, msg: str, **kwargs):
        self._emit(logging.ERROR, msg, **kwargs)

    def exception(self, msg: str, **kwargs):
        """Error with the active traceback attached"""
        self._emit(logging.ERROR, msg, exc_info=True, **kwargs)

    @contextmanager
    def stage(self, name: str, **kwargs) -> Iterator[Dict[str, Any]]:
        """
        Time a pipeline stage and log it at INFO when it ends.

        Yields a dict; entries added to it are logged with the stage.
        """
        fields: Dict[str, Any] = dict(kwargs)
        started = time.perf_counter()
        yield fields
        fields["elapsed_ms"] = round(1000.0 * (time.perf_counter() - started), 3)
        self._emit(logging.INFO, f"Stage {name} done", stage=name, **fields)


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """
    Route all loggers to a JSON stderr handler, plus an optional file.

    Args:
        level: Level name, defaults to HYBRIDSEG_LOG
        log_file: Path of a JSON-lines copy, defaults to HYBRIDSEG_LOG_FILE
    """
    level_value = getattr(logging, (level or LOG_LEVEL).upper(), logging.WARNING)
    root = logging.getLogger()
    root.setLevel(level_value)
    root.handlers = []

    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file or LOG_FILE:
        handlers.append(logging.FileHandler(log_file or LOG_FILE, encoding="utf-8"))
    for handler in handlers:
        handler.setLevel(level_value)
        handler.setFormatter(JSONFormatter())
        root.addHandler(handler)

    for noisy in ("faiss", "faiss.loader", "numba"):
        logging.getLogger(noisy).setLevel(logging.WARNING)


def get_logger(name: str) -> ContextLogger:
    return ContextLogger(name)
