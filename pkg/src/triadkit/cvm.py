"""Confidence voting between a zero-shot and a one-shot model.

Scores from the two models live in different spaces and are never compared
with each other. When the models disagree, the one that said ``normal`` is
asked whether it finds the query at least as normal as the reference image
it was shown; if so its opinion stands, otherwise the defect opinion wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .errors import ArgumentError

DECISIONS = ("defect", "normal")
RATIONALES = ("consensus", "trusted_query", "adopted_opposite")


@dataclass(frozen=True)
class ModelOpinion:
    decision: str
    normal_score_query: Optional[float] = None
    normal_score_reference: Optional[float] = None

    def __post_init__(self):
        if self.decision not in DECISIONS:
            raise ArgumentError(f"decision must be one of {DECISIONS}, got {self.decision!r}")
        for name in ("normal_score_query", "normal_score_reference"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ArgumentError(f"{name} must be finite, got {v}")


@dataclass(frozen=True)
class Verdict:
    decision: str
    rationale: str

    def to_dict(self):
        return {"decision": self.decision, "rationale": self.rationale}


def vote(zero: ModelOpinion, one: ModelOpinion) -> Verdict:
    if zero.decision == one.decision:
        return Verdict(zero.decision, "consensus")
    normal = zero if zero.decision == "normal" else one
    assert normal.decision == "normal" and (zero if normal is one else one).decision == "defect"
    q, ref = normal.normal_score_query, normal.normal_score_reference
    if q is None or ref is None:
        raise ArgumentError("the normal opinion needs both query and reference scores to break a disagreement")
    if q >= ref:
        return Verdict("normal", "trusted_query")
    return Verdict("defect", "adopted_opposite")


def combine_responses(zero_rows, one_rows, scheme="option_letter"):
    """Apply :func:`vote` per sample to two responses files (lists of dicts).

    Rows are matched on ``sample_id``. A response that yields no answer is
    dropped from the vote: the other model's answer is used alone
    (``rationale="single_opinion"``), and if both abstain so does the output.
    """
    from .evalharness import extract_answer

    def index(rows, which):
        out = {}
        for r in rows:
            sid = str(r["sample_id"])
            if sid in out:
                raise ArgumentError(f"duplicate sample_id {sid!r} in {which} responses")
            out[sid] = r
        return out

    zero_by_id, one_by_id = index(zero_rows, "zero-shot"), index(one_rows, "one-shot")
    if set(zero_by_id) != set(one_by_id):
        missing = sorted(set(zero_by_id) ^ set(one_by_id))
        raise ArgumentError(f"responses files cover different samples: {missing[:10]}")

    def opinion(row):
        decision = row.get("decision") or extract_answer(row.get("response_text", ""), scheme)
        if decision == "abstain":
            return None
        return ModelOpinion(decision, row.get("normal_score_query"), row.get("normal_score_reference"))

    out = []
    for sid in sorted(zero_by_id):
        z, o = opinion(zero_by_id[sid]), opinion(one_by_id[sid])
        if z is not None and o is not None:
            v = vote(z, o)
            decision, rationale = v.decision, v.rationale
        elif z is None and o is None:
            decision, rationale = "abstain", "abstain"
        else:
            decision, rationale = (z or o).decision, "single_opinion"
        out.append({"sample_id": sid, "decision": decision, "rationale": rationale})
    return out
