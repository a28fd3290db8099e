from __future__ import annotations

import json
from typing import Any, Optional

_DECODER = json.JSONDecoder()


def first_json_object(text: str) -> Optional[dict[str, Any]]:
    """Return the first decodable JSON object embedded in ``text``.

    Tolerates surrounding prose and markdown code fences.
    """
    if not isinstance(text, str):
        return None
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = _DECODER.raw_decode(text, pos)
        except json.JSONDecodeError:
            pass
        else:
            if isinstance(obj, dict):
                return obj
        pos = text.find("{", pos + 1)
    return None


def dumps_line(obj: Any) -> str:
    """Canonical one-line JSON, stable across runs."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
