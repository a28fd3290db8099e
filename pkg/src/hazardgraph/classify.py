"""Zero-shot hazard classification of injury narratives.

Each narrative lands in exactly one of three categories; preventable ones
carry an (object+condition) rationale such as "ladder placed on uneven
surface". Only those rationales continue to clustering.
"""

from __future__ import annotations

import json
import logging
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Iterable, Optional

from ._jsonutil import dumps_line, first_json_object
from .errors import (
    AuthFailure,
    ClassificationParseError,
    GatewayError,
    MissingRationale,
    UnknownCategory,
    UnparseableResponse,
)
from .gateway import BackendConfig, ChatRequest, ModelGateway
from .ingest import Corpus, OshaRecord

logger = logging.getLogger(__name__)

CLASSIFY_TEMPERATURE = 0.0


class Category(str, Enum):
    PREVENTABLE_HAZARD = "PreventableHazard"
    NON_EXTERNAL_FACTOR = "NonExternalFactor"
    INSUFFICIENT_INFORMATION = "InsufficientInformation"

    @property
    def display(self) -> str:
        return _DISPLAY[self]


_DISPLAY = {
    Category.PREVENTABLE_HAZARD: "Preventable Hazard",
    Category.NON_EXTERNAL_FACTOR: "Non-External Factors",
    Category.INSUFFICIENT_INFORMATION: "Insufficient Information",
}


def _squash(text: str) -> str:
    return re.sub(r"[^a-z]", "", text.lower())


_ALIASES = {
    Category.PREVENTABLE_HAZARD: (
        "preventablehazard", "preventablehazards", "preventablehazardsavoidable",
        "preventablehazardavoidable", "preventable", "avoidable", "avoidablehazard",
        "avoidablehazards", "preventableavoidable",
    ),
    Category.NON_EXTERNAL_FACTOR: (
        "nonexternalfactor", "nonexternalfactors", "nonexternal",
        "nonexternalfactorincident", "nonexternalfactorincidents",
    ),
    Category.INSUFFICIENT_INFORMATION: (
        "insufficientinformation", "insufficientinfo", "insufficient",
        "notenoughinformation", "insufficientinformationcases",
    ),
}
ALIAS_TABLE = {alias: cat for cat, names in _ALIASES.items() for alias in names}


def normalize_category(label: str) -> Category:
    key = _squash(str(label))
    if key in ALIAS_TABLE:
        return ALIAS_TABLE[key]
    raise UnknownCategory(f"unrecognised category {label!r}")


@dataclass(frozen=True)
class HazardRationale:
    text: str
    record_id: int


@dataclass(frozen=True)
class HazardClassification:
    record_id: int
    category: Category
    rationale: Optional[str] = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.category is Category.PREVENTABLE_HAZARD:
            if not self.rationale or len(self.rationale.split()) < 2:
                raise MissingRationale(
                    f"record {self.record_id}: preventable hazard needs an object+condition rationale"
                )
        elif self.rationale is not None:
            raise ValueError("rationale only allowed for preventable hazards")

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "category": self.category.value,
            "rationale": self.rationale,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HazardClassification":
        return cls(int(d["record_id"]), Category(d["category"]), d.get("rationale"),
                   tuple(d.get("flags", ())))


@dataclass(frozen=True)
class ClassificationBatch:
    items: tuple[HazardClassification, ...] = ()
    counts: dict = field(init=False, compare=False)

    def __post_init__(self):
        counts = {c: 0 for c in Category}
        for item in self.items:
            counts[item.category] += 1
        object.__setattr__(self, "counts", counts)

    def __len__(self) -> int:
        return len(self.items)

    def counts_summary(self) -> dict[str, int]:
        out = {c.display: n for c, n in self.counts.items()}
        out["Total Entries Processed"] = len(self.items)
        return out

    def to_jsonl(self) -> str:
        return "".join(dumps_line(i.to_dict()) + "\n" for i in self.items)

    @classmethod
    def from_jsonl(cls, text: str) -> "ClassificationBatch":
        items = [HazardClassification.from_dict(json.loads(line))
                 for line in text.splitlines() if line.strip()]
        return cls(tuple(items))


# ---------------------------------------------------------------------------
# prompt
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def load_prompt_template() -> dict:
    data = resources.files("hazardgraph.data")
    template = json.loads(data.joinpath("classify_prompt.json").read_text("utf-8"))
    template["user_template"] = data.joinpath("classify_user.txt").read_text("utf-8")
    return template


def _render_examples(examples: Iterable[dict]) -> str:
    blocks = []
    for ex in examples:
        answer = json.dumps({"category": ex["category"], "rationale": ex["rationale"]})
        blocks.append(f"Narrative: {ex['narrative']}\nAnswer: {answer}")
    return "\n\n".join(blocks)


def build_classification_prompt(record: OshaRecord, temperature: float = CLASSIFY_TEMPERATURE) -> ChatRequest:
    """Inspector-framed few-shot request demanding a JSON verdict."""
    if not record.final_narrative.strip():
        raise ValueError("record has an empty narrative")
    template = load_prompt_template()
    categories = "\n".join(f"- {c['name']}: {c['meaning']}" for c in template["categories"])
    user = string.Template(template["user_template"]).substitute(
        categories=categories,
        rationale_rule=template["rationale_rule"],
        examples=_render_examples(template["examples"]),
        narrative=record.final_narrative,
    )
    return ChatRequest(
        user_prompt=user,
        system_prompt=template["system"],
        temperature=temperature,
        max_tokens=200,
        response_format_hint="json_object",
        task="classify",
        metadata={"narrative": record.final_narrative, "record_id": str(record.record_id)},
    )


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_CATEGORY_KEYS = ("category", "classification", "label", "class")
_RATIONALE_KEYS = ("rationale", "hazard", "reason")


def parse_classification(raw: str, record_id: int) -> HazardClassification:
    """Turn a chat response into a validated classification.

    Raises:
        UnparseableResponse: no JSON object, or no category field.
        UnknownCategory: the category matches none of the aliases.
        MissingRationale: preventable without a usable rationale.
    """
    obj = first_json_object(raw)
    if obj is None:
        raise UnparseableResponse(f"record {record_id}: no JSON object in response")
    lowered = {str(k).lower(): v for k, v in obj.items()}
    label = next((lowered[k] for k in _CATEGORY_KEYS if k in lowered), None)
    if not isinstance(label, str) or not label.strip():
        raise UnparseableResponse(f"record {record_id}: JSON lacks a category")
    category = normalize_category(label)
    rationale = next((lowered[k] for k in _RATIONALE_KEYS if k in lowered), None)
    if isinstance(rationale, str):
        rationale = " ".join(rationale.split()) or None
    else:
        rationale = None
    if category is not Category.PREVENTABLE_HAZARD:
        rationale = None
    return HazardClassification(record_id, category, rationale)


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


def classify_record(record: OshaRecord, gateway: ModelGateway) -> HazardClassification:
    """Classify one record; never raises except on auth failure."""
    req = build_classification_prompt(record)
    last_error = None
    for variant in (0, 1):  # one retry on a parse failure
        try:
            raw = gateway.chat(req, variant=variant)
        except AuthFailure:
            raise
        except GatewayError as exc:
            logger.warning("record %s: backend error %s", record.record_id, exc)
            return HazardClassification(
                record.record_id, Category.INSUFFICIENT_INFORMATION, None, ("backend_error",)
            )
        try:
            return parse_classification(raw, record.record_id)
        except ClassificationParseError as exc:
            last_error = exc
    logger.warning("record %s: parse failure after retry: %s", record.record_id, last_error)
    return HazardClassification(
        record.record_id, Category.INSUFFICIENT_INFORMATION, None, ("parse_failure",)
    )


def classify_corpus(corpus: Corpus, gateway: ModelGateway, max_workers: Optional[int] = None) -> ClassificationBatch:
    """Classify every record; output is sorted by record_id."""
    if isinstance(gateway, BackendConfig):
        gateway = ModelGateway(gateway)
    records = list(corpus.records)
    if not records:
        return ClassificationBatch(())
    workers = max_workers or gateway.cfg.max_in_flight
    with ThreadPoolExecutor(max_workers=workers) as pool:
        items = list(pool.map(lambda r: classify_record(r, gateway), records))
    items.sort(key=lambda c: c.record_id)
    return ClassificationBatch(tuple(items))


def filter_preventable(batch: ClassificationBatch) -> list[HazardRationale]:
    return [
        HazardRationale(item.rationale, item.record_id)
        for item in batch.items
        if item.category is Category.PREVENTABLE_HAZARD
    ]
