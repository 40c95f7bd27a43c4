from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path
from typing import Any

import orjson


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, ensure_ascii=False)


def stable_hash(data: Any) -> str:
    payload = canonical_json(data)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def hardware_descriptor() -> str:
    """
    Return a short description of the machine timings were taken on.
    """

    import torch

    parts = [platform.machine() or "unknown-arch", platform.system()]

    if torch.cuda.is_available():
        parts.append(torch.cuda.get_device_name(0))
    else:
        parts.append(platform.processor() or "cpu")

    parts.append(f"torch {torch.__version__}")

    return " | ".join(parts)


def load_json(path: str | Path) -> Any:
    return orjson.loads(Path(path).read_bytes())


def write_json(path: str | Path, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    path.write_bytes(
        orjson.dumps(
            data,
            option=orjson.OPT_INDENT_2
            | orjson.OPT_SORT_KEYS
            | orjson.OPT_SERIALIZE_NUMPY,
        )
        + b"\n"
    )

    return path


def stamp(
    payload: dict[str, Any],
    *,
    config_hash: str,
    seed: int,
) -> dict[str, Any]:
    """
    Return a copy of payload carrying the run's config hash and seed.

    Every persisted artifact goes through this so two artifacts with
    equal hashes can be traced back to equal configurations.
    """

    stamped = dict(payload)
    stamped["config_hash"] = config_hash
    stamped["seed"] = seed

    return stamped
