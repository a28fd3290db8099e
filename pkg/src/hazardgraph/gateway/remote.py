"""JSON-over-HTTP backend.

Wire shapes (all ``POST``, bearer auth):

``/chat/completions``
    ``{model, messages, temperature, max_tokens[, response_format]}`` ->
    ``{choices: [{message: {content}}]}``
``/embeddings``
    ``{model, input: [text, ...]}`` -> ``{data: [{index, embedding}]}``
``/images/generations``
    ``{model, prompt, seed, size: "WxH", response_format: "b64_json"}`` ->
    ``{data: [{b64_json}]}``
``/vqa``
    ``{model, image: b64, question, assertion}`` ->
    ``{yes_probability}`` or ``{answer, confidence}`` or ``{answer}``
``/match``
    ``{model, image: b64, text}`` -> ``{match_probability}``
``/joint_embeddings``
    ``{model, image: b64, text}`` -> ``{text_embedding, image_embedding}``
"""

from __future__ import annotations

import base64
import logging
from typing import Any, Optional

import httpx

from ..errors import (
    AuthFailure,
    ContentRejected,
    GatewayError,
    MalformedResponse,
    RateLimited,
    Timeout,
    TransientBackendError,
)
from .types import BackendConfig, ChatRequest, ImageArtifact, VqaQuery

logger = logging.getLogger(__name__)

TEXT_ONLY_YES = 0.99
TEXT_ONLY_NO = 0.01


def assertion_question(assertion: str) -> str:
    """Phrase a declarative assertion as a yes/no question."""
    text = assertion.strip().rstrip(".")
    return f"Is the following true in this image: {text}? Answer yes or no."


class RemoteBackend:
    def __init__(self, cfg: BackendConfig, transport: Optional[httpx.BaseTransport] = None):
        self.cfg = cfg
        self.calls = 0
        headers = {"Content-Type": "application/json"}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        self._client = httpx.Client(
            base_url=cfg.endpoint_url.rstrip("/"),
            headers=headers,
            timeout=cfg.timeout,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> Any:
        self.calls += 1
        try:
            resp = self._client.post(path, json=payload)
        except httpx.TimeoutException as exc:
            raise Timeout(f"{path}: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientBackendError(f"{path}: {exc}") from exc
        status = resp.status_code
        if status in (401, 403):
            raise AuthFailure(f"{path}: HTTP {status}")
        if status == 429:
            raise RateLimited(f"{path}: HTTP 429")
        if status >= 500:
            raise TransientBackendError(f"{path}: HTTP {status}")
        if status >= 400:
            body = resp.text.lower()
            if "content" in body and ("policy" in body or "reject" in body):
                raise ContentRejected(f"{path}: {resp.text[:200]}")
            raise GatewayError(f"{path}: HTTP {status}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"{path}: body is not JSON") from exc

    def chat(self, req: ChatRequest, variant: int = 0) -> str:
        payload = {
            "model": self.cfg.model,
            "messages": req.messages(),
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.response_format_hint == "json_object":
            payload["response_format"] = {"type": "json_object"}
        data = self._post("/chat/completions", payload)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse("chat response lacks choices[0].message.content") from exc
        if not isinstance(content, str):
            raise MalformedResponse("chat content is not text")
        return content

    def embed(self, texts: list[str]) -> list[list[float]]:
        data = self._post("/embeddings", {"model": self.cfg.model, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda d: d.get("index", 0))
            vectors = [list(map(float, row["embedding"])) for row in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse("embedding response malformed") from exc
        if len(vectors) != len(texts):
            raise MalformedResponse(f"expected {len(texts)} embeddings, got {len(vectors)}")
        return vectors

    def generate_image(self, prompt: str, seed: int) -> bytes:
        w, h = self.cfg.image_size
        data = self._post(
            "/images/generations",
            {"model": self.cfg.model, "prompt": prompt, "seed": seed,
             "size": f"{w}x{h}", "response_format": "b64_json"},
        )
        try:
            return base64.b64decode(data["data"][0]["b64_json"], validate=True)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedResponse("image response lacks a base64 payload") from exc

    def answer(self, q: VqaQuery) -> float:
        data = self._post(
            "/vqa",
            {"model": self.cfg.model, "image": _b64(q.image),
             "question": assertion_question(q.assertion_text), "assertion": q.assertion_text},
        )
        if not isinstance(data, dict):
            raise MalformedResponse("VQA response is not an object")
        if "yes_probability" in data:
            return _as_float(data["yes_probability"])
        answer = str(data.get("answer", "")).strip().lower()
        if answer not in ("yes", "no"):
            raise MalformedResponse(f"VQA answer {answer!r} is neither yes nor no")
        if "confidence" in data:
            c = _as_float(data["confidence"])
            return c if answer == "yes" else 1.0 - c
        logger.warning("VQA backend %s returned text only; using %.2f/%.2f mapping",
                       self.cfg.name, TEXT_ONLY_YES, TEXT_ONLY_NO)
        return TEXT_ONLY_YES if answer == "yes" else TEXT_ONLY_NO

    def joint_embed(self, text: str, image: ImageArtifact):
        data = self._post(
            "/joint_embeddings", {"model": self.cfg.model, "image": _b64(image), "text": text}
        )
        try:
            return (list(map(float, data["text_embedding"])),
                    list(map(float, data["image_embedding"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse("joint embedding response malformed") from exc

    def match(self, text: str, image: ImageArtifact) -> float:
        data = self._post("/match", {"model": self.cfg.model, "image": _b64(image), "text": text})
        if not isinstance(data, dict) or "match_probability" not in data:
            raise MalformedResponse("match response lacks match_probability")
        return _as_float(data["match_probability"])


def _b64(image: ImageArtifact) -> str:
    return base64.b64encode(image.image_bytes).decode("ascii")


def _as_float(value) -> float:
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise MalformedResponse(f"expected a number, got {value!r}") from exc
