from __future__ import annotations

import logging
import os
import socket
import threading
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import orjson
from rich.logging import RichHandler

ROOT_LOGGER = "blocksel"

_emit_lock = threading.Lock()


def get_logger(name: str) -> logging.Logger:
    if name == ROOT_LOGGER or name.startswith(ROOT_LOGGER + "."):
        return logging.getLogger(name)

    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


def configure_logging(verbose: bool = False) -> logging.Logger:
    """
    Install a single rich console handler on the package logger.
    """

    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)

    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        handler = RichHandler(
            show_path=False,
            rich_tracebacks=True,
            markup=False,
        )
        handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(handler)

    logger.propagate = False

    return logger


def emit(
    event_type: str,
    payload: dict[str, Any],
    *,
    events_path: str | Path | None,
    run_id: str | None = None,
) -> str:
    """
    Append one JSONL event and return its event_id.

    With events_path None the event is only logged at DEBUG level.
    """

    event_id = str(uuid.uuid4())
    doc = {
        "event_id": event_id,
        "event_type": event_type,
        "ts": datetime.now(timezone.utc).isoformat(),
        "run_id": run_id or os.getenv("BLOCKSEL_RUN_ID") or "local",
        "host": socket.gethostname(),
        "payload": payload,
    }

    get_logger("telemetry").debug("%s %s", event_type, payload)

    if events_path is None:
        return event_id

    path = Path(events_path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with _emit_lock, path.open("ab") as f:
        f.write(orjson.dumps(doc, option=orjson.OPT_SERIALIZE_NUMPY))
        f.write(b"\n")

    return event_id
