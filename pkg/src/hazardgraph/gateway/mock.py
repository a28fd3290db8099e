"""Deterministic offline backends.

Every output is a pure function of (inputs, config seed). Two profiles:

* ``hash``: scores and vectors are seeded hashes of the inputs.
* ``grounded``: the mock image stores its prompt in a PNG text chunk and
  the VQA / matching / joint-embedding mocks score against that prompt, so
  matched prompt-image pairs score higher than shuffled ones.
"""

from __future__ import annotations

import hashlib
import io
import json
import re
from typing import Optional

import numpy as np

from .types import BackendConfig, ChatRequest, ImageArtifact, VqaQuery, digest_text

EMBED_DIM = 64

_TOKEN_RE = re.compile(r"[a-z0-9]+")
STOPWORDS = frozenset(
    "a an the is are was were be of on in at to for and or with by from near "
    "it its this that as into onto".split()
)


def tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def content_tokens(text: str) -> list[str]:
    return [t for t in tokens(text) if t not in STOPWORDS]


def _hex(*parts) -> str:
    return hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).hexdigest()


def unit_hash(*parts) -> float:
    """Map the parts onto [0, 1) via the leading 52 bits of their SHA-256."""
    return int(_hex(*parts)[:13], 16) / float(16**13)


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng(int(_hex(*parts)[:16], 16))


def _pick(options, *parts):
    return options[int(_hex(*parts)[:8], 16) % len(options)]


def hashed_text_vector(text: str, seed: int, dim: int = EMBED_DIM) -> np.ndarray:
    """Unit-norm bag-of-tokens vector: shared tokens give nearby vectors."""
    vec = np.zeros(dim)
    for tok in tokens(text):
        vec += _rng(seed, "tok", tok).standard_normal(dim)
    vec += 0.05 * _rng(seed, "text", text).standard_normal(dim)
    norm = np.linalg.norm(vec)
    return vec / norm


# ---------------------------------------------------------------------------
# chat
# ---------------------------------------------------------------------------

_HAZARD_LEXICON = [
    (("strapping", "strap", "banding", "packaging", "shrink", "wrap"),
     "plastic strapping",
     ("left on workplace floor", "lying loose in walkway", "discarded near pallet")),
    (("cord", "cable", "extension", "hose"),
     "electrical cord",
     ("improperly secured across walkway", "stretched across aisle", "left loose on floor")),
    (("opening", "hole", "skylight"),
     "floor opening",
     ("without proper guardrails", "left uncovered", "not marked or covered")),
    (("scaffold", "scaffolding"),
     "scaffold",
     ("without proper guardrails", "missing toe boards", "erected on soft ground")),
    (("water", "spill", "spilled", "wet", "oil", "grease"),
     "spilled water",
     ("left on walkway floor", "unmarked on concrete floor", "pooling near doorway")),
    (("ladder",),
     "ladder",
     ("placed on uneven surface", "not secured at top", "leaning on unstable shelf")),
    (("box", "boxes", "chair", "debris", "pallet"),
     "cardboard boxes",
     ("blocking the walkway", "stacked in aisle", "left in walkway")),
]
_NON_EXTERNAL = ("lifting", "lifted", "strain", "strained", "twisted", "cramp",
                 "overexertion", "repetitive", "felt pain", "heart", "seizure")


def mock_classify(narrative: str, seed: int) -> dict:
    text = narrative.lower()
    words = tokens(text)
    for keys, obj, conditions in _HAZARD_LEXICON:
        if any(k in words for k in keys):
            return {
                "category": "Preventable Hazard",
                "rationale": f"{obj} {_pick(conditions, seed, narrative)}",
            }
    if any(k in text for k in _NON_EXTERNAL):
        return {"category": "Non-External Factors", "rationale": None}
    return {"category": "Insufficient Information", "rationale": None}


_CONDITION_WORDS = frozenset(
    "left placed lying on without not improperly spilled extended stretched "
    "blocking missing discarded unsecured loose near in across unmarked "
    "pooling leaning erected stacked".split()
)
_PROPS = [
    ("Pallet", ["wooden"]),
    ("Shelving Unit", ["metal", "tall"]),
    ("Forklift", ["parked"]),
    ("Trash Bin", ["overflowing"]),
]


def mock_scene_graph(rationale: str, seed: int) -> dict:
    words = rationale.split()
    cut = next((i for i, w in enumerate(words) if w.lower() in _CONDITION_WORDS and i > 0), None)
    if cut is None:
        cut = min(2, len(words))
    obj = " ".join(words[:cut]) or "debris"
    condition = " ".join(words[cut:]) or "hazardous"
    prop_label, prop_attrs = _pick(_PROPS, seed, "prop", rationale)
    nodes = [
        {"id": "n1", "label": obj.title(), "is_hazard": True,
         "attributes": [condition, _pick(["visible", "partially hidden", "brightly colored"],
                                          seed, "vis", rationale)]},
        {"id": "n2", "label": "Workplace Floor", "is_hazard": False,
         "attributes": ["concrete", _pick(["polished", "dusty"], seed, "floor", rationale)]},
        {"id": "n3", "label": "Worker", "is_hazard": False,
         "attributes": [_pick(["walking", "carrying a box"], seed, "worker", rationale)]},
        {"id": "n4", "label": prop_label, "is_hazard": False, "attributes": list(prop_attrs)},
    ]
    edges = [
        {"source": "n1", "target": "n2", "relation": "on"},
        {"source": "n3", "target": "n1", "relation": "walking toward"},
        {"source": "n4", "target": "n1", "relation": "near"},
    ]
    return {"nodes": nodes, "edges": edges}


def mock_chat(req: ChatRequest, cfg: BackendConfig) -> str:
    if cfg.chat_script is not None:
        scripted = cfg.chat_script(req)
        if scripted is not None:
            return scripted
    meta = req.metadata or {}
    if req.task == "classify" and "narrative" in meta:
        return json.dumps(mock_classify(meta["narrative"], cfg.seed))
    if req.task == "scene_graph" and "rationale" in meta:
        return json.dumps(mock_scene_graph(meta["rationale"], cfg.seed), indent=1)
    if req.task == "prompt" and "graph_json" in meta:
        from ..scenegraph import SceneGraph, template_prompt

        return template_prompt(SceneGraph.from_json(meta["graph_json"]))
    return f"mock response {_hex(cfg.seed, req.system_prompt, req.user_prompt)[:12]}"


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def render_placeholder(prompt: str, seed: int, size=(128, 128), tag: str = "mock") -> bytes:
    """Solid background keyed on (tag, prompt, seed) with the digest stamped on."""
    from PIL import Image, ImageDraw
    from PIL.PngImagePlugin import PngInfo

    digest = digest_text(prompt)
    color = tuple(int(_hex(tag, prompt, seed)[i : i + 2], 16) for i in (0, 2, 4))
    im = Image.new("RGB", tuple(size), color)
    draw = ImageDraw.Draw(im)
    ink = (0, 0, 0) if sum(color) > 382 else (255, 255, 255)
    draw.text((4, 4), digest[:8], fill=ink)
    draw.text((4, 16), digest[8:], fill=ink)
    draw.text((4, 28), f"seed {seed}", fill=ink)
    info = PngInfo()
    info.add_text("prompt", prompt)
    info.add_text("digest", digest)
    info.add_text("seed", str(seed))
    info.add_text("generator", tag)
    buf = io.BytesIO()
    im.save(buf, format="PNG", pnginfo=info, optimize=False, compress_level=6)
    return buf.getvalue()


def _image_prompt(image: ImageArtifact) -> Optional[str]:
    try:
        return image.text_chunks().get("prompt")
    except Exception:
        return None


def _overlap(text: str, reference: str) -> float:
    want = set(content_tokens(text))
    if not want:
        return 0.0
    have = set(content_tokens(reference))
    return len(want & have) / len(want)


class MockBackend:
    """Offline stand-in for every capability."""

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg
        self.calls = 0

    def chat(self, req: ChatRequest, variant: int = 0) -> str:
        self.calls += 1
        return mock_chat(req, self.cfg)

    def embed(self, texts: list[str]) -> list[list[float]]:
        self.calls += 1
        planted = self.cfg.planted
        out = []
        for t in texts:
            if ("text", t) in planted:
                out.append(list(np.asarray(planted[("text", t)], dtype=float)))
            else:
                out.append(list(hashed_text_vector(t, self.cfg.seed)))
        return out

    def generate_image(self, prompt: str, seed: int) -> bytes:
        self.calls += 1
        return render_placeholder(prompt, seed, self.cfg.image_size, self.cfg.name)

    def answer(self, q: VqaQuery) -> float:
        self.calls += 1
        cfg = self.cfg
        key = (q.image.prompt_digest, q.assertion_text)
        if key in cfg.planted:
            return float(cfg.planted[key])
        if cfg.vqa_oracle is not None:
            return float(cfg.vqa_oracle(q.image, q.assertion_text))
        h = unit_hash(cfg.seed, q.image.prompt_digest, q.assertion_text)
        if cfg.mock_profile == "grounded":
            prompt = _image_prompt(q.image) or ""
            return 0.1 + 0.7 * _overlap(q.assertion_text, prompt) + 0.2 * h
        return h

    def joint_embed(self, text: str, image: ImageArtifact) -> tuple[list[float], list[float]]:
        self.calls += 1
        cfg = self.cfg
        if ("text", text) in cfg.planted and ("image", image.prompt_digest) in cfg.planted:
            return (list(np.asarray(cfg.planted[("text", text)], dtype=float)),
                    list(np.asarray(cfg.planted[("image", image.prompt_digest)], dtype=float)))
        u = hashed_text_vector(text, cfg.seed)
        noise = _rng(cfg.seed, "img", image.content_hash).standard_normal(EMBED_DIM)
        noise /= np.linalg.norm(noise)
        if cfg.mock_profile == "grounded":
            base = hashed_text_vector(_image_prompt(image) or "", cfg.seed)
            v = 0.3 * base + noise
        else:
            v = noise
        return list(u), list(v / np.linalg.norm(v))

    def match(self, text: str, image: ImageArtifact) -> float:
        self.calls += 1
        cfg = self.cfg
        key = ("match", image.prompt_digest, text)
        if key in cfg.planted:
            return float(cfg.planted[key])
        h = unit_hash(cfg.seed, "match", image.prompt_digest, text)
        if cfg.mock_profile == "grounded":
            ov = _overlap(text, _image_prompt(image) or "")
            # saturates near 1 for any on-topic pairing
            return float(min(1.0, 0.05 + 0.9 * min(1.0, 2.0 * ov) + 0.05 * h))
        return h
