"""Include/Exclude classification stage and its metrics.

Unparseable completions are quarantined, never silently mapped to Exclude:
defaulting would bias recall. Metrics are exact rationals with Include as
the positive class.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Iterable, Iterator, Sequence

from .domain import AbstractRecord, ClassificationLabel
from .errors import GatewayError, UnparseableLabelError, ValidationError
from .gateway import LlmGateway, render_classification_prompt, template_hash, CLASSIFY_TEMPLATE

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[A-Za-z]+")


@dataclass
class ClassifiedAbstract:
    pmid: str
    label: ClassificationLabel
    raw_output: str
    model_id: str
    prompt_hash: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "pmid": self.pmid,
            "label": self.label.value,
            "raw_output": self.raw_output,
            "model_id": self.model_id,
            "prompt_hash": self.prompt_hash,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ClassifiedAbstract":
        return cls(
            pmid=d["pmid"],
            label=ClassificationLabel(d["label"]),
            raw_output=d["raw_output"],
            model_id=d["model_id"],
            prompt_hash=d["prompt_hash"],
        )


@dataclass
class QuarantineEntry:
    pmid: str
    stage: str
    reason: str
    raw_output: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"pmid": self.pmid, "stage": self.stage, "reason": self.reason, "raw_output": self.raw_output}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "QuarantineEntry":
        return cls(pmid=d["pmid"], stage=d["stage"], reason=d["reason"], raw_output=d.get("raw_output", ""))


def parse_label(raw: str) -> ClassificationLabel:
    """Case-insensitive match of the first alphabetic token against include/exclude."""
    m = _TOKEN_RE.search(raw)
    token = m.group(0).lower() if m else ""
    if token == "include":
        return ClassificationLabel.INCLUDE
    if token == "exclude":
        return ClassificationLabel.EXCLUDE
    raise UnparseableLabelError(f"completion {raw!r} contains neither Include nor Exclude")


def iter_classified(
    records: Iterable[AbstractRecord],
    gateway: LlmGateway,
    max_workers: int = 4,
) -> Iterator[ClassifiedAbstract | QuarantineEntry]:
    """Classify records, yielding results in input order as they complete."""
    prompt_digest = template_hash(CLASSIFY_TEMPLATE)

    def one(record: AbstractRecord) -> ClassifiedAbstract | QuarantineEntry:
        try:
            raw = gateway.chat(render_classification_prompt(record, model_id=gateway.model_id))
        except GatewayError as exc:
            return QuarantineEntry(pmid=record.pmid, stage="classify", reason=f"gateway: {exc}")
        try:
            label = parse_label(raw)
        except UnparseableLabelError as exc:
            return QuarantineEntry(pmid=record.pmid, stage="classify", reason=str(exc), raw_output=raw)
        return ClassifiedAbstract(
            pmid=record.pmid,
            label=label,
            raw_output=raw,
            model_id=gateway.model_id,
            prompt_hash=prompt_digest,
        )

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        yield from pool.map(one, records)


def classify_corpus(
    records: Sequence[AbstractRecord],
    gateway: LlmGateway,
    max_workers: int = 4,
    sink: Callable[[ClassifiedAbstract | QuarantineEntry], None] | None = None,
) -> tuple[list[ClassifiedAbstract], list[QuarantineEntry], dict[str, int]]:
    """Run the whole corpus; every PMID ends up labelled or quarantined."""
    classified: list[ClassifiedAbstract] = []
    quarantined: list[QuarantineEntry] = []
    for result in iter_classified(records, gateway, max_workers=max_workers):
        if sink is not None:
            sink(result)
        if isinstance(result, QuarantineEntry):
            quarantined.append(result)
        else:
            classified.append(result)
    counts = {
        "include": sum(1 for c in classified if c.label is ClassificationLabel.INCLUDE),
        "exclude": sum(1 for c in classified if c.label is ClassificationLabel.EXCLUDE),
        "quarantined": len(quarantined),
    }
    return classified, quarantined, counts


@dataclass(frozen=True)
class ClassificationMetrics:
    """Confusion counts and exact-rational derived metrics; Include is positive."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> Fraction:
        return Fraction(self.tp + self.tn, self.n) if self.n else Fraction(0)

    @property
    def precision(self) -> Fraction:
        denom = self.tp + self.fp
        return Fraction(self.tp, denom) if denom else Fraction(0)

    @property
    def recall(self) -> Fraction:
        denom = self.tp + self.fn
        return Fraction(self.tp, denom) if denom else Fraction(0)

    @property
    def f1(self) -> Fraction:
        denom = 2 * self.tp + self.fp + self.fn
        return Fraction(2 * self.tp, denom) if denom else Fraction(0)


def evaluate(
    preds: Sequence[ClassificationLabel],
    golds: Sequence[ClassificationLabel],
) -> ClassificationMetrics:
    """Confusion-matrix metrics over PMID-aligned label vectors."""
    if len(preds) != len(golds):
        raise ValidationError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    tp = fp = fn = tn = 0
    for pred, gold in zip(preds, golds):
        if gold is ClassificationLabel.INCLUDE:
            if pred is ClassificationLabel.INCLUDE:
                tp += 1
            else:
                fn += 1
        else:
            if pred is ClassificationLabel.INCLUDE:
                fp += 1
            else:
                tn += 1
    return ClassificationMetrics(tp=tp, fp=fp, fn=fn, tn=tn)
