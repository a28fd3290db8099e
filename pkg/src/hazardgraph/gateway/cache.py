"""On-disk response cache: ``<root>/<op>/<hash>.json`` (or ``.png``)."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Optional


def content_key(op: str, inputs: Any, backend_tag: str) -> str:
    payload = json.dumps(
        {"op": op, "inputs": inputs, "backend": backend_tag},
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def atomic_write(path: Path, data: bytes) -> None:
    """Write-then-rename so concurrent readers never see partial files."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ResponseCache:
    def __init__(self, root):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def _path(self, op: str, key: str, suffix: str) -> Path:
        return self.root / op / f"{key}{suffix}"

    def get_json(self, op: str, key: str) -> Optional[Any]:
        path = self._path(op, key, ".json")
        try:
            with open(path, "rb") as fh:
                value = json.loads(fh.read().decode("utf-8"))
        except (FileNotFoundError, ValueError):
            self.misses += 1
            return None
        self.hits += 1
        return value

    def put_json(self, op: str, key: str, value: Any) -> None:
        data = json.dumps(value, sort_keys=True, ensure_ascii=False).encode("utf-8")
        atomic_write(self._path(op, key, ".json"), data)

    def get_bytes(self, op: str, key: str, suffix: str = ".png") -> Optional[bytes]:
        path = self._path(op, key, suffix)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            self.misses += 1
            return None
        self.hits += 1
        return data

    def put_bytes(self, op: str, key: str, data: bytes, suffix: str = ".png") -> None:
        atomic_write(self._path(op, key, suffix), data)
