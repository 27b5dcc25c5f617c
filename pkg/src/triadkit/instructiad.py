"""InstructIAD instruction records: schema, builders, statistics, SFT loss."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ArgumentError, FormatError

TASKS = ("anomaly_detection", "attribute_caption", "anomaly_analysis", "cot_m")
PROVENANCES = ("human", "generated", "augmented")

VERDICT_DEFECTIVE = "This product is defective."
VERDICT_ACCEPTABLE = "This product is acceptable."

DEFECT_ATTRIBUTES = ("location", "orientation", "shape", "color")
PRODUCT_ATTRIBUTES = ("color", "shape", "layout", "material", "texture")

# vocabulary used to check that an abnormal caption says something about the defect
_DEFECT_WORDS = (
    # location
    "left", "right", "top", "bottom", "upper", "lower", "center", "centre", "middle", "edge", "corner",
    "side", "near", "inside", "outside", "surface", "location", "located",
    # orientation
    "horizontal", "vertical", "diagonal", "oriented", "orientation", "along", "across", "parallel",
    # shape
    "shape", "shaped", "round", "circular", "linear", "line", "irregular", "elongated", "spot", "dot",
    "crack", "scratch", "hole", "dent",
    # color
    "color", "colour", "black", "white", "red", "green", "blue", "yellow", "brown", "gray", "grey",
    "dark", "bright", "discolored", "discoloured",
)

AD_TEMPLATE = "<image>\nIs there any defect on the {object} in this image? Answer Yes or No."
CAPTION_TEMPLATE = ("<image>\nDescribe the {object} in this image in detail, covering its color, shape, "
                    "layout, material and texture, and any defect's location, orientation, shape and color.")
ANALYSIS_TEMPLATE = ("<image>\nIs this {object} normal or abnormal? Give your verdict first, then explain it "
                     "using the visual attributes of the product.")


@dataclass(frozen=True)
class AnnotatedSample:
    sample_id: str
    product_class: str
    label: str | None
    caption: str | None = None
    image_refs: tuple = ()

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["sample_id"]), d["product_class"], d.get("label"), d.get("caption"),
                   tuple(d.get("image_refs", ())))


@dataclass(frozen=True)
class InstructionRecord:
    id: str
    sample_id: str
    task: str
    prompt: str
    response: str
    image_refs: tuple = ()
    roi_manifest_ref: str | None = None
    provenance: str = "human"
    flags: frozenset = frozenset()
    product_class: str | None = None
    label: str | None = None
    meta: dict = field(default_factory=dict, hash=False, compare=False)

    def to_dict(self):
        return {
            "id": self.id,
            "sample_id": self.sample_id,
            "task": self.task,
            "prompt": self.prompt,
            "response": self.response,
            "image_refs": list(self.image_refs),
            "roi_manifest_ref": self.roi_manifest_ref,
            "provenance": self.provenance,
            "flags": sorted(self.flags),
            "product_class": self.product_class,
            "label": self.label,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                id=str(d["id"]), sample_id=str(d["sample_id"]), task=d["task"], prompt=d["prompt"],
                response=d["response"], image_refs=tuple(d.get("image_refs", ())),
                roi_manifest_ref=d.get("roi_manifest_ref"), provenance=d.get("provenance", "human"),
                flags=frozenset(d.get("flags", ())), product_class=d.get("product_class"),
                label=d.get("label"), meta=dict(d.get("meta", {})),
            )
        except KeyError as exc:
            raise FormatError(f"instruction record is missing field {exc}") from exc


def _object_name(product_class: str) -> str:
    return product_class.replace("_", " ")


def _check_label(sample: AnnotatedSample):
    if sample.label not in ("normal", "abnormal"):
        raise ArgumentError(f"sample {sample.sample_id!r} needs label 'normal' or 'abnormal', got {sample.label!r}")


def mentions_defect_attribute(caption: str) -> bool:
    words = {w.strip(".,;:!?()\"'").lower() for w in caption.split()}
    return any(w in words for w in _DEFECT_WORDS)


def build_ad_record(sample: AnnotatedSample) -> InstructionRecord:
    _check_label(sample)
    return InstructionRecord(
        id=f"{sample.sample_id}-ad",
        sample_id=sample.sample_id,
        task="anomaly_detection",
        prompt=AD_TEMPLATE.format(object=_object_name(sample.product_class)),
        response="Yes" if sample.label == "abnormal" else "No",
        image_refs=sample.image_refs,
        provenance="human",
        product_class=sample.product_class,
        label=sample.label,
    )


def build_caption_record(sample: AnnotatedSample) -> InstructionRecord:
    if sample.caption is None or not sample.caption.strip():
        raise ArgumentError(f"sample {sample.sample_id!r} has no caption")
    return InstructionRecord(
        id=f"{sample.sample_id}-cap",
        sample_id=sample.sample_id,
        task="attribute_caption",
        prompt=CAPTION_TEMPLATE.format(object=_object_name(sample.product_class)),
        response=sample.caption,
        image_refs=sample.image_refs,
        provenance="human",
        product_class=sample.product_class,
        label=sample.label,
        meta={"caption_source": "human"},
    )


def verdict_sentence(label: str) -> str:
    return VERDICT_DEFECTIVE if label == "abnormal" else VERDICT_ACCEPTABLE


def build_analysis_record(sample: AnnotatedSample, explanation: str) -> InstructionRecord:
    _check_label(sample)
    if sample.caption is None or not sample.caption.strip():
        raise ArgumentError(f"sample {sample.sample_id!r} has no caption to ground the explanation")
    if explanation is None or not explanation.strip():
        raise ArgumentError(f"empty explanation for sample {sample.sample_id!r}")
    return InstructionRecord(
        id=f"{sample.sample_id}-ana",
        sample_id=sample.sample_id,
        task="anomaly_analysis",
        prompt=ANALYSIS_TEMPLATE.format(object=_object_name(sample.product_class)),
        response=f"{verdict_sentence(sample.label)} {explanation.strip()}",
        image_refs=sample.image_refs,
        provenance="generated",
        product_class=sample.product_class,
        label=sample.label,
    )


def validate_record(record: InstructionRecord) -> None:
    """Raise :class:`ArgumentError` if ``record`` breaks its task's response rules."""
    if record.task not in TASKS:
        raise ArgumentError(f"record {record.id}: unknown task {record.task!r}")
    if record.provenance not in PROVENANCES:
        raise ArgumentError(f"record {record.id}: unknown provenance {record.provenance!r}")
    if record.task == "anomaly_detection":
        if record.response not in ("Yes", "No"):
            raise ArgumentError(f"record {record.id}: anomaly detection response must be 'Yes' or 'No'")
        if record.label is not None and (record.response == "Yes") != (record.label == "abnormal"):
            raise ArgumentError(f"record {record.id}: response contradicts label {record.label!r}")
    elif record.task == "attribute_caption":
        if record.provenance != "human" or not record.response.strip():
            raise ArgumentError(f"record {record.id}: attribute captions must come from a human caption")
        if record.label == "abnormal" and not mentions_defect_attribute(record.response):
            raise ArgumentError(f"record {record.id}: abnormal caption mentions no defect attribute")
    elif record.task == "anomaly_analysis":
        for verdict in (VERDICT_DEFECTIVE, VERDICT_ACCEPTABLE):
            if record.response.startswith(verdict):
                rest = record.response[len(verdict):].strip()
                break
        else:
            raise ArgumentError(f"record {record.id}: analysis response must open with a verdict sentence")
        if not rest:
            raise ArgumentError(f"record {record.id}: analysis response has no explanation")
        if record.label is not None and record.response.startswith(VERDICT_DEFECTIVE) != (record.label == "abnormal"):
            raise ArgumentError(f"record {record.id}: verdict contradicts label {record.label!r}")
    elif not record.response.strip():
        raise ArgumentError(f"record {record.id}: empty response")


def validate_records(records: Iterable[InstructionRecord]) -> None:
    seen = set()
    for r in records:
        if r.id in seen:
            raise ArgumentError(f"duplicate record id {r.id!r}")
        seen.add(r.id)
        validate_record(r)


def build_records(samples: Sequence[AnnotatedSample], explanations: dict | None = None) -> list[InstructionRecord]:
    """Every record a sample supports: detection always, caption and analysis when captioned.

    ``explanations`` maps sample_id to generated explanation text; captioned
    samples without one get no analysis record.
    """
    explanations = explanations or {}
    out = []
    for s in samples:
        out.append(build_ad_record(s))
        if s.caption and s.caption.strip():
            out.append(build_caption_record(s))
            if explanations.get(s.sample_id):
                out.append(build_analysis_record(s, explanations[s.sample_id]))
    validate_records(out)
    return sorted(out, key=lambda r: r.id)


def dataset_stats(records: Sequence[InstructionRecord], catalog: Sequence[str] | None = None) -> dict:
    """Counts per task / label / class, human-subset balance and catalog coverage.

    ``balance`` is min/max of the normal and abnormal sample counts among
    human-provenance records (1.0 = perfectly balanced, 0.0 if a side is empty).
    """
    by_task = Counter(r.task for r in records)
    by_class = Counter(r.product_class for r in records if r.product_class)
    samples = {}
    human = {}
    for r in records:
        if r.label is not None:
            samples[r.sample_id] = r.label
            if r.provenance == "human":
                human[r.sample_id] = r.label
    by_label = Counter(samples.values())
    human_labels = Counter(human.values())
    n_norm, n_abn = human_labels.get("normal", 0), human_labels.get("abnormal", 0)
    balance = min(n_norm, n_abn) / max(n_norm, n_abn) if min(n_norm, n_abn) else 0.0
    report = {
        "records": len(records),
        "by_task": {t: by_task.get(t, 0) for t in TASKS},
        "by_label": {"normal": by_label.get("normal", 0), "abnormal": by_label.get("abnormal", 0)},
        "by_class": dict(sorted(by_class.items())),
        "human_subset": {"normal": n_norm, "abnormal": n_abn, "balance": balance},
        "filtered_out": sum(1 for r in records if "filtered_out" in r.flags),
    }
    if catalog is not None:
        catalog = list(catalog)
        report["catalog"] = {
            "size": len(catalog),
            "covered": sum(1 for c in catalog if by_class.get(c)),
            "missing": sorted(c for c in catalog if not by_class.get(c)),
            "unknown": sorted(c for c in by_class if c not in set(catalog)),
        }
    return report


def sft_nll(token_logprobs: Sequence[float]) -> float:
    """Supervised fine-tuning loss of one response: minus the summed token log-probabilities."""
    values = []
    for i, lp in enumerate(token_logprobs):
        lp = float(lp)
        if not math.isfinite(lp):
            raise ArgumentError(f"token {i}: log-probability must be finite, got {lp}")
        if lp > 0:
            raise ArgumentError(f"token {i}: log-probability must be <= 0, got {lp}")
        values.append(lp)
    return -math.fsum(values) if values else 0.0
