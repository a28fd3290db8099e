from __future__ import annotations

import logging
import math
import threading
import time
from typing import Callable, Optional, TypeVar

import numpy as np

from ..errors import AuthFailure, DimensionMismatch, GatewayError, MalformedResponse, ScoreOutOfRange
from .cache import ResponseCache, content_key
from .mock import MockBackend
from .remote import RemoteBackend
from .types import BackendConfig, ChatRequest, EmbeddingVector, ImageArtifact, VqaQuery, digest_text

logger = logging.getLogger(__name__)

T = TypeVar("T")

_SEMAPHORES: dict[str, threading.BoundedSemaphore] = {}
_SEM_LOCK = threading.Lock()


def _semaphore(cfg: BackendConfig) -> threading.BoundedSemaphore:
    key = f"{cfg.tag}#{cfg.max_in_flight}"
    with _SEM_LOCK:
        if key not in _SEMAPHORES:
            _SEMAPHORES[key] = threading.BoundedSemaphore(cfg.max_in_flight)
        return _SEMAPHORES[key]


def backoff_delays(cfg: BackendConfig) -> list[float]:
    """Sleep before retry ``i`` (0-based): ``backoff_base * 2**i``."""
    return [cfg.backoff_base * (2.0**i) for i in range(cfg.max_retries)]


def call_with_retries(
    fn: Callable[[], T],
    cfg: BackendConfig,
    sleep: Callable[[float], None] = time.sleep,
) -> T:
    """Run ``fn`` with at most ``max_retries`` retries of transient errors.

    Auth failures and non-transient errors propagate immediately.
    """
    delays = backoff_delays(cfg)
    attempt = 0
    while True:
        try:
            return fn()
        except AuthFailure:
            raise
        except GatewayError as exc:
            if not exc.retryable or attempt >= cfg.max_retries:
                raise
            logger.info("%s: attempt %d failed (%s); retrying", cfg.name, attempt + 1, exc)
            sleep(delays[attempt])
            attempt += 1


def _check_unit_interval(value: float, what: str) -> float:
    if not math.isfinite(value) or not 0.0 <= value <= 1.0:
        raise ScoreOutOfRange(f"{what} {value!r} outside [0, 1]")
    return float(value)


class ModelGateway:
    """Caching, bounded, retrying front-end to one backend config.

    Instances are safe to share between threads.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        cache: Optional[ResponseCache] = None,
        transport=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self.cache = cache
        self.sleep = sleep
        if cfg.backend_kind == "mock":
            self.backend = MockBackend(cfg)
        else:
            self.backend = RemoteBackend(cfg, transport=transport)
        # scripted/planted mocks have identity outside the tag; never cache them
        self._cacheable = cache is not None and not (
            cfg.planted or cfg.chat_script is not None or cfg.vqa_oracle is not None
        )

    @property
    def calls(self) -> int:
        return self.backend.calls

    def _invoke(self, fn: Callable[[], T]) -> T:
        def bounded():
            with _semaphore(self.cfg):
                return fn()

        return call_with_retries(bounded, self.cfg, self.sleep)

    def _cached_json(self, op: str, inputs, compute: Callable[[], object]):
        if not self._cacheable:
            return compute()
        key = content_key(op, inputs, self.cfg.tag)
        hit = self.cache.get_json(op, key)
        if hit is not None:
            return hit["value"]
        value = compute()
        self.cache.put_json(op, key, {"value": value})
        return value

    # -- capabilities -----------------------------------------------------

    def chat(self, req: ChatRequest, variant: int = 0) -> str:
        inputs = {
            "messages": req.messages(),
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "format": req.response_format_hint,
            "variant": variant,
        }
        return self._cached_json(
            "chat", inputs, lambda: self._invoke(lambda: self.backend.chat(req, variant))
        )

    def embed(self, texts: list[str]) -> list[EmbeddingVector]:
        texts = list(texts)
        if any(not t or not t.strip() for t in texts):
            raise ValueError("cannot embed empty text")
        results: list[Optional[list[float]]] = [None] * len(texts)
        keys = [content_key("embed", t, self.cfg.tag) for t in texts]
        pending = []
        for i, key in enumerate(keys):
            hit = self.cache.get_json("embed", key) if self._cacheable else None
            if hit is not None:
                results[i] = hit["value"]
            else:
                pending.append(i)
        step = max(1, self.cfg.batch_size)
        for start in range(0, len(pending), step):
            idx = pending[start : start + step]
            batch = [texts[i] for i in idx]
            vectors = self._invoke(lambda: self.backend.embed(batch))
            if len(vectors) != len(batch):
                raise MalformedResponse("embedding count does not match input count")
            for i, vec in zip(idx, vectors):
                results[i] = list(map(float, vec))
                if self._cacheable:
                    self.cache.put_json("embed", keys[i], {"value": results[i]})
        dims = {len(v) for v in results}
        if len(dims) > 1:
            raise DimensionMismatch(f"backend returned mixed dimensions {sorted(dims)}")
        return [EmbeddingVector(np.asarray(v), self.cfg.tag) for v in results]

    def generate_image(self, prompt: str, seed: int) -> ImageArtifact:
        if not prompt or not prompt.strip():
            raise ValueError("prompt must be non-empty")
        digest = digest_text(prompt)
        inputs = {"prompt": prompt, "seed": seed, "size": list(self.cfg.image_size)}
        data = None
        key = content_key("image", inputs, self.cfg.tag)
        if self._cacheable:
            data = self.cache.get_bytes("image", key)
        if data is None:
            data = self._invoke(lambda: self.backend.generate_image(prompt, seed))
            try:
                art = ImageArtifact.from_png(data, self.cfg.name, digest)
            except Exception as exc:
                raise MalformedResponse(f"image payload is not a valid PNG: {exc}") from exc
            if self._cacheable:
                self.cache.put_bytes("image", key, data)
            return art
        return ImageArtifact.from_png(data, self.cfg.name, digest)

    def answer_assertion(self, q: VqaQuery) -> float:
        inputs = {"image": q.image.content_hash, "digest": q.image.prompt_digest,
                  "assertion": q.assertion_text}

        def compute():
            value = self._invoke(lambda: self.backend.answer(q))
            return _check_unit_interval(value, "VQA score")

        return float(self._cached_json("vqa", inputs, compute))

    def joint_embed(self, text: str, image: ImageArtifact) -> tuple[np.ndarray, np.ndarray]:
        inputs = {"text": text, "image": image.content_hash}
        u, v = self._cached_json(
            "joint_embed", inputs, lambda: list(self._invoke(lambda: self.backend.joint_embed(text, image)))
        )
        u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
        if u.shape != v.shape:
            raise DimensionMismatch(f"text dim {u.shape} != image dim {v.shape}")
        return u, v

    def match_probability(self, text: str, image: ImageArtifact) -> float:
        inputs = {"text": text, "image": image.content_hash}

        def compute():
            value = self._invoke(lambda: self.backend.match(text, image))
            return _check_unit_interval(value, "match probability")

        return float(self._cached_json("match", inputs, compute))


# -- functional surface -----------------------------------------------------


def chat_complete(req: ChatRequest, cfg: BackendConfig, cache: Optional[ResponseCache] = None,
                  transport=None) -> str:
    return ModelGateway(cfg, cache, transport).chat(req)


def embed_text(texts: list[str], cfg: BackendConfig, cache: Optional[ResponseCache] = None,
               transport=None) -> list[EmbeddingVector]:
    return ModelGateway(cfg, cache, transport).embed(texts)


def generate_image(prompt: str, cfg: BackendConfig, seed: int,
                   cache: Optional[ResponseCache] = None, transport=None) -> ImageArtifact:
    return ModelGateway(cfg, cache, transport).generate_image(prompt, seed)


def answer_assertion(q: VqaQuery, cfg: BackendConfig, cache: Optional[ResponseCache] = None,
                     transport=None) -> float:
    return ModelGateway(cfg, cache, transport).answer_assertion(q)
