"""Uniform access to chat, embedding, image and VQA backends."""

from .cache import ResponseCache, content_key
from .client import (
    ModelGateway,
    answer_assertion,
    backoff_delays,
    call_with_retries,
    chat_complete,
    embed_text,
    generate_image,
)
from .types import (
    BackendConfig,
    ChatRequest,
    EmbeddingVector,
    ImageArtifact,
    VqaQuery,
    digest_text,
)

__all__ = [
    "BackendConfig",
    "ChatRequest",
    "EmbeddingVector",
    "ImageArtifact",
    "ModelGateway",
    "ResponseCache",
    "VqaQuery",
    "answer_assertion",
    "backoff_delays",
    "call_with_retries",
    "chat_complete",
    "content_key",
    "digest_text",
    "embed_text",
    "generate_image",
]
