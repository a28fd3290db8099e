from __future__ import annotations

import hashlib
import io
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np

from ..errors import AuthFailure, ConfigError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

BACKEND_KINDS = ("remote_http", "mock")
RESPONSE_FORMATS = ("free_text", "json_object")


def digest_text(text: str, n: int = 16) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:n]


@dataclass(frozen=True)
class ChatRequest:
    """One chat-completion call.

    ``task`` and ``metadata`` never go over the wire; they let mock backends
    answer task-appropriately and let callers script responses per item.
    """

    user_prompt: str
    system_prompt: str = ""
    temperature: float = 0.0
    max_tokens: int = 1024
    response_format_hint: str = "free_text"
    task: str = ""
    metadata: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.user_prompt or not self.user_prompt.strip():
            raise ValueError("user_prompt must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.response_format_hint not in RESPONSE_FORMATS:
            raise ValueError(f"unknown response format {self.response_format_hint!r}")

    def messages(self) -> list[dict]:
        msgs = []
        if self.system_prompt:
            msgs.append({"role": "system", "content": self.system_prompt})
        msgs.append({"role": "user", "content": self.user_prompt})
        return msgs


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    model_tag: str = ""

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding contains non-finite entries")
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class ImageArtifact:
    image_bytes: bytes
    width: int
    height: int
    generator_tag: str
    prompt_digest: str

    def __post_init__(self):
        if not self.image_bytes.startswith(PNG_SIGNATURE):
            raise ValueError("image bytes are not a PNG")

    @classmethod
    def from_png(cls, data: bytes, generator_tag: str, prompt_digest: str) -> "ImageArtifact":
        from PIL import Image

        if not data.startswith(PNG_SIGNATURE):
            raise ValueError("image bytes are not a PNG")
        with Image.open(io.BytesIO(data)) as im:
            width, height = im.size
        return cls(data, width, height, generator_tag, prompt_digest)

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.image_bytes).hexdigest()

    def text_chunks(self) -> dict[str, str]:
        from PIL import Image

        with Image.open(io.BytesIO(self.image_bytes)) as im:
            return dict(getattr(im, "text", {}) or {})


@dataclass(frozen=True)
class VqaQuery:
    image: ImageArtifact
    assertion_text: str

    def __post_init__(self):
        if not self.assertion_text or not self.assertion_text.strip():
            raise ValueError("assertion_text must be non-empty")


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for one backend.

    Mock-only knobs (``mock_profile``, ``planted``, ``chat_script``,
    ``vqa_oracle``) are ignored by the HTTP backend.
    """

    backend_kind: str = "mock"
    name: str = "mock"
    endpoint_url: str = ""
    api_key: str = field(default="", repr=False)
    model: str = ""
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.5
    max_in_flight: int = 4
    batch_size: int = 64
    seed: int = 0
    image_size: tuple[int, int] = (128, 128)
    mock_profile: str = "hash"
    planted: Mapping[Any, Any] = field(default_factory=dict, compare=False, repr=False)
    chat_script: Optional[Callable[[ChatRequest], Optional[str]]] = field(
        default=None, compare=False, repr=False
    )
    vqa_oracle: Optional[Callable[[ImageArtifact, str], float]] = field(
        default=None, compare=False, repr=False
    )

    def __post_init__(self):
        if self.backend_kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend kind {self.backend_kind!r}")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ConfigError("timeout must be > 0")
        if self.backoff_base < 0:
            raise ConfigError("backoff_base must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.mock_profile not in ("hash", "grounded"):
            raise ConfigError(f"unknown mock profile {self.mock_profile!r}")

    @property
    def tag(self) -> str:
        """Identity used in cache keys; never includes the secret."""
        if self.backend_kind == "mock":
            return f"mock:{self.name}:{self.mock_profile}:{self.seed}"
        return f"remote:{self.name}:{self.model}:{self.endpoint_url}"

    def validate(self) -> None:
        """Fail fast on credentials, before any work is scheduled."""
        if self.backend_kind == "remote_http":
            if not self.api_key:
                raise AuthFailure(
                    f"backend {self.name!r}: API key missing "
                    f"(set HG_{env_name(self.name)}_KEY)"
                )
            if not self.endpoint_url:
                raise ConfigError(f"backend {self.name!r}: no endpoint URL (set HG_{env_name(self.name)}_URL)")

    @classmethod
    def from_env(cls, name: str, environ: Optional[Mapping[str, str]] = None, **overrides):
        """Remote config whose URL and key come from ``HG_<NAME>_URL/_KEY``."""
        env = os.environ if environ is None else environ
        prefix = f"HG_{env_name(name)}"
        return cls(
            backend_kind="remote_http",
            name=name,
            endpoint_url=env.get(f"{prefix}_URL", ""),
            api_key=env.get(f"{prefix}_KEY", ""),
            model=env.get(f"{prefix}_MODEL", overrides.pop("model", "")),
            **overrides,
        )


def env_name(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).upper()
