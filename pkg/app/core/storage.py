"""Whole-file atomic writes and report appends."""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Union

from pydantic import BaseModel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write ``data`` to a temp file next to ``path`` then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    logger.debug("Wrote file", extra={"path": str(path), "bytes": len(data)})
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def append_jsonl(path: PathLike, record: BaseModel) -> Path:
    """Append one record as a JSON line.

    The file is rewritten whole so a crash never leaves a half line behind.
    """
    path = Path(path)
    existing = path.read_bytes() if path.exists() else b""
    line = json.dumps(record.model_dump(mode="json"), sort_keys=True) + "\n"
    return atomic_write_bytes(path, existing + line.encode("utf-8"))
