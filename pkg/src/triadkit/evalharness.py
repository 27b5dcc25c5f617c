"""Multiple-choice evaluation: prompt rendering, answer extraction, scoring."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import ArgumentError, ConfigError, FormatError, ScoringError
from .map_io import BinaryMask
from .metrics import defect_size_class

TEMPLATES = ("general", "onevision", "myriad", "anomalygpt")
SHOTS = ("zero", "one")
SCHEMES = ("option_letter", "keyword")
SIZE_BUCKETS = ("small", "medium", "large", "normal")

OPTIONS = ("A. Yes", "B. No")
ANSWER_INSTRUCTION = "Answer with the option's letter from the given choices directly."
GENERAL_QUESTION = "Are there any defects on the {object} in this image?"
ONE_SHOT_QUESTION = ("The second image shows an acceptable product. Compared to the acceptable product, "
                     "find out whether there are defects in the product in the first image.")
ONEVISION_HEADER = "Referencing the image that is shown below, please answer the question:"
ONEVISION_HEADER_MFG = "Referencing the image and production process that are shown below, please answer the question:"
MYRIAD_IMAGE = "<Image><ImageHere><\\Image>"
MYRIAD_QUESTION = ("This image may be simulated by photo editing. According to IAD expert opinions and "
                   "corresponding visual descriptions, find out if there are defects in this image.")
ANOMALYGPT_IMAGE = "</Img>"
ANOMALYGPT_QUESTION = "Is there any anomaly in the image?"
IMAGE = "<image>"


@dataclass(frozen=True)
class EvalItem:
    sample_id: str
    product_class: str
    ground_truth: str
    reference_image: str | None = None
    mfg_ref: str | None = None
    gt_mask_ref: str | None = None
    options: tuple = ("Yes", "No")

    def __post_init__(self):
        if self.ground_truth not in ("defect", "normal"):
            raise ArgumentError(f"item {self.sample_id!r}: ground_truth must be 'defect' or 'normal'")
        if tuple(self.options) != ("Yes", "No"):
            raise ArgumentError(f"item {self.sample_id!r}: options are fixed to (Yes, No)")

    @property
    def object_name(self) -> str:
        return self.product_class.replace("_", " ")

    @property
    def question(self) -> str:
        return GENERAL_QUESTION.format(object=self.object_name)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(str(d["sample_id"]), d["product_class"], d["ground_truth"], d.get("reference_image"),
                       d.get("mfg_ref"), d.get("gt_mask_ref"))
        except KeyError as exc:
            raise FormatError(f"evaluation item is missing field {exc}") from exc

    def to_dict(self):
        return {
            "sample_id": self.sample_id, "product_class": self.product_class,
            "ground_truth": self.ground_truth, "reference_image": self.reference_image,
            "mfg_ref": self.mfg_ref, "gt_mask_ref": self.gt_mask_ref,
        }


def _context(item: EvalItem, mfg_store) -> str:
    key = item.mfg_ref or item.product_class
    if mfg_store is None or key not in mfg_store:
        raise ConfigError(f"no manufacturing process for {key!r} (item {item.sample_id!r})")
    entry = mfg_store[key]
    text = entry.render() if hasattr(entry, "render") else str(entry)
    return text.strip()


def render_prompt(item: EvalItem, template: str = "general", with_mfg: bool = False, shot: str = "zero",
                  mfg_store: Mapping | None = None, hints: Mapping | None = None) -> str:
    """Instantiate an evaluation prompt.

    One-shot prompts carry a second image placeholder for the normal
    reference directly after the query's. Manufacturing context goes after
    the image placeholders and before the question. ``hints`` (product class
    to text) fills the AnomalyGPT hint slot.
    """
    if template not in TEMPLATES:
        raise ArgumentError(f"template must be one of {TEMPLATES}, got {template!r}")
    if shot not in SHOTS:
        raise ArgumentError(f"shot must be one of {SHOTS}, got {shot!r}")
    if shot == "one" and not item.reference_image:
        raise ArgumentError(f"one-shot item {item.sample_id!r} has no reference image")
    n_images = 2 if shot == "one" else 1
    context = [_context(item, mfg_store)] if with_mfg else []
    question = ONE_SHOT_QUESTION if shot == "one" and template in ("general", "onevision") else item.question

    if template == "general":
        lines = [IMAGE] * n_images + context + [question, *OPTIONS, ANSWER_INSTRUCTION]
    elif template == "onevision":
        header = ONEVISION_HEADER_MFG if with_mfg else ONEVISION_HEADER
        lines = [header, "Image:"] + [IMAGE] * n_images + context + [f"Question: {question}", *OPTIONS,
                                                                      ANSWER_INSTRUCTION]
    elif template == "myriad":
        lines = [MYRIAD_IMAGE] * n_images + context + [MYRIAD_QUESTION]
    else:
        hint = (hints or {}).get(item.product_class, "").strip()
        lines = [ANOMALYGPT_IMAGE] * n_images + context + [f"{hint} {ANOMALYGPT_QUESTION}".strip()]
    return "\n".join(lines)


_LETTER_RE = re.compile(r"(?<![A-Za-z0-9])([AB])(?![A-Za-z0-9])")
_KEYWORD_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def extract_answer(response: str, scheme: str = "option_letter") -> str:
    """Map a free-text response to ``defect``, ``normal`` or ``abstain``."""
    if scheme == "option_letter":
        m = _LETTER_RE.search(response or "")
        if not m:
            return "abstain"
        return "defect" if m.group(1) == "A" else "normal"
    if scheme == "keyword":
        m = _KEYWORD_RE.search(response or "")
        if not m:
            return "abstain"
        return "defect" if m.group(1).lower() == "yes" else "normal"
    raise ArgumentError(f"scheme must be one of {SCHEMES}, got {scheme!r}")


@dataclass
class RunReport:
    total: int
    correct: int
    abstained: int
    per_size: dict = field(default_factory=dict)
    delta_mfg: float | None = None
    paired_accuracy: float | None = None

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_dict(self):
        d = {
            "accuracy": self.accuracy,
            "counts": {"total": self.total, "correct": self.correct, "abstained": self.abstained},
            "per_size": {k: dict(v) for k, v in self.per_size.items()},
        }
        if self.delta_mfg is not None:
            d["delta_mfg"] = self.delta_mfg
            d["accuracy_with_mfg"] = self.paired_accuracy
        return d

    def table(self) -> str:
        rows = [("overall", self.total, self.correct, self.accuracy)]
        for bucket in SIZE_BUCKETS:
            if bucket in self.per_size:
                b = self.per_size[bucket]
                rows.append((bucket, b["total"], b["correct"], b["accuracy"]))
        lines = [f"{'subset':<10}{'n':>6}{'correct':>9}{'accuracy':>10}"]
        lines += [f"{name:<10}{n:>6}{c:>9}{acc * 100:>9.1f}%" for name, n, c, acc in rows]
        if self.delta_mfg is not None:
            lines.append(f"{'+MFG':<10}{'':>6}{'':>9}{self.paired_accuracy * 100:>9.1f}%")
            lines.append(f"{'delta':<10}{'':>6}{'':>9}{self.delta_mfg * 100:>+9.1f}%")
        return "\n".join(lines) + "\n"


def score_run(items: Sequence[EvalItem], answers: Mapping[str, str],
              gt_masks: Mapping[str, BinaryMask] | None = None) -> RunReport:
    """Accuracy over ``items``; an abstention counts as wrong.

    With ``gt_masks`` (sample_id to defect mask) the report also breaks
    accuracy down by defect size, normal items forming their own bucket.
    """
    missing = sorted(i.sample_id for i in items if i.sample_id not in answers)
    if missing:
        raise ScoringError(f"no answer for {len(missing)} item(s): {', '.join(missing[:20])}")
    if len({i.sample_id for i in items}) != len(items):
        raise ScoringError("duplicate sample_id among evaluation items")
    buckets = {}
    if gt_masks is not None:
        no_mask = sorted(i.sample_id for i in items if i.ground_truth == "defect" and i.sample_id not in gt_masks)
        if no_mask:
            raise ScoringError(f"size breakdown needs masks for defect items: {', '.join(no_mask[:20])}")
    correct = abstained = 0
    for item in items:
        ans = answers[item.sample_id]
        if ans not in ("defect", "normal", "abstain"):
            raise ScoringError(f"answer for {item.sample_id!r} is {ans!r}")
        ok = ans == item.ground_truth
        correct += ok
        abstained += ans == "abstain"
        if gt_masks is not None:
            bucket = "normal" if item.ground_truth == "normal" else defect_size_class(gt_masks[item.sample_id]).value
            b = buckets.setdefault(bucket, {"total": 0, "correct": 0})
            b["total"] += 1
            b["correct"] += ok
    for b in buckets.values():
        b["accuracy"] = b["correct"] / b["total"]
    per_size = {k: buckets[k] for k in SIZE_BUCKETS if k in buckets}
    return RunReport(total=len(items), correct=correct, abstained=abstained, per_size=per_size)


def score_paired(items, answers_base, answers_mfg, gt_masks=None) -> RunReport:
    """Score a run without and with manufacturing context; ``delta_mfg`` = with - without."""
    base = score_run(items, answers_base, gt_masks)
    with_mfg = score_run(items, answers_mfg, gt_masks)
    base.paired_accuracy = with_mfg.accuracy
    base.delta_mfg = with_mfg.accuracy - base.accuracy
    return base


def answers_from_responses(rows, scheme="option_letter") -> dict:
    """``{sample_id: answer}`` from responses-file rows.

    A row may carry a ready ``decision`` (as written by the voting step) or
    raw ``response_text`` to be parsed with ``scheme``.
    """
    out = {}
    for r in rows:
        sid = str(r["sample_id"])
        if sid in out:
            raise ScoringError(f"duplicate response for {sid!r}")
        if r.get("decision") in ("defect", "normal", "abstain"):
            out[sid] = r["decision"]
        else:
            out[sid] = extract_answer(r.get("response_text", ""), scheme)
    return out
