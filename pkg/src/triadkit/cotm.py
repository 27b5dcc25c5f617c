"""CoT-M data organization.

Three ways of producing manufacturing-aware chain-of-thought samples:

* captioned images: caption + manufacturing process are sent to a text
  generator that writes the reasoning (:func:`generate_cot`);
* uncaptioned images with a coarse defect label: a checklist over the
  manufacturing steps is filled in and used as the explanation
  (:func:`build_checklist`);
* text-only samples: a normal caption is edited at the attribute level,
  optionally given a defect, and then reasoned about by the generator
  (:func:`augment_caption` followed by :func:`generate_cot`).

Generated records can be rejected by a human reviewer via
:func:`filter_records`; rejected records stay in the store but are excluded
from training exports.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import requests

from .errors import ArgumentError, EditError, FormatError, GenerationError, RetryableError, UnmatchedLabelError
from .instructiad import VERDICT_ACCEPTABLE, VERDICT_DEFECTIVE, InstructionRecord

log = logging.getLogger(__name__)

MFG_SOURCES = ("web", "llm", "gpt", "factory")
PROMPT_VERSION = "cot_m_v1"

DEFAULT_SYNONYMS = {
    "colour": ["color"],
    "color": ["colour", "coding", "coded"],
    "swap": ["color", "coding"],
    "missing": ["assembly", "three"],
    "poke": ["insulation"],
    "insulation": ["extrusion"],
    "cut": ["sheath", "outer"],
    "bent": ["assembly", "twisted"],
    "crack": ["cooling", "cracking"],
    "scratch": ["coating", "packaging"],
    "contamination": ["sorting", "impurities"],
    "print": ["coating"],
}

_STOPWORDS = frozenset(
    "a an and are as at be by for from in into is it of on or the then this to with each its".split()
)


@dataclass(frozen=True)
class MfgStep:
    name: str
    description: str = ""


@dataclass(frozen=True)
class MfgProcess:
    product_class: str
    steps: tuple
    source: str = "gpt"
    # verbatim process text, used as prompt context when present
    text: str = ""

    def __post_init__(self):
        if not self.steps:
            raise ArgumentError(f"manufacturing process for {self.product_class!r} has no steps")
        steps = tuple(s if isinstance(s, MfgStep) else MfgStep(*s) for s in self.steps)
        if any(not s.name.strip() for s in steps):
            raise ArgumentError(f"manufacturing process for {self.product_class!r} has an unnamed step")
        if self.source not in MFG_SOURCES:
            raise ArgumentError(f"source must be one of {MFG_SOURCES}, got {self.source!r}")
        object.__setattr__(self, "steps", steps)

    def render(self) -> str:
        """Prompt context: the verbatim text if stored, else a numbered step list."""
        return self.text or numbered_steps(self.steps)

    def to_dict(self):
        return {
            "source": self.source,
            "steps": [{"name": s.name, "description": s.description} for s in self.steps],
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, product_class, d):
        if "steps" in d:
            steps = tuple(MfgStep(s["name"], s.get("description", "")) for s in d["steps"])
        elif "text" in d:
            steps = parse_mfg_steps(d["text"])
        else:
            raise FormatError(f"MFG entry for {product_class!r} needs 'steps' or 'text'")
        return cls(product_class, steps, d.get("source", "gpt"), d.get("text", ""))


def numbered_steps(steps) -> str:
    return "\n".join(f"{k}. {s.name}: {s.description}".rstrip() for k, s in enumerate(steps, 1))


_STEP_RE = re.compile(r"^\s*(\d+)\.\s*([^:\n]+?)\s*:\s*(.*)$")


def parse_mfg_steps(text: str) -> tuple:
    """Split numbered process text (``"1. Name: description"`` lines, with
    optional indented continuation lines) into steps."""
    steps: list[list[str]] = []
    for line in text.splitlines():
        m = _STEP_RE.match(line)
        if m:
            steps.append([m.group(2).strip(), m.group(3).strip()])
        elif steps and line.strip():
            extra = line.strip().lstrip("-").strip()
            steps[-1][1] = f"{steps[-1][1]} {extra}".strip()
    if not steps:
        raise FormatError("no numbered steps found in manufacturing process text")
    return tuple(MfgStep(n, d) for n, d in steps)


def load_mfg_store(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"MFG store not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: MFG store must be a JSON object keyed by product class")
    return {cls: MfgProcess.from_dict(cls, entry) for cls, entry in raw.items()}


def default_mfg_store() -> dict:
    """Bundled processes for cable, hazelnut and pill."""
    ref = resources.files("triadkit") / "data" / "mfg_store.json"
    with resources.as_file(ref) as p:
        return load_mfg_store(p)


# ---------------------------------------------------------------- editing

@dataclass(frozen=True)
class AttributeEdit:
    attribute: str
    old: str
    new: str


@dataclass(frozen=True)
class EditPlan:
    edits: tuple = ()
    inject_defect: str | None = None
    seed: int = 0

    def __post_init__(self):
        edits = tuple(e if isinstance(e, AttributeEdit) else AttributeEdit(*e) for e in self.edits)
        object.__setattr__(self, "edits", edits)


def augment_caption(caption: str, plan: EditPlan) -> tuple[str, str]:
    """Apply attribute edits in order; append a defect sentence if requested.

    Returns ``(caption, label)`` with label ``"abnormal"`` exactly when the
    plan injects a defect.
    """
    text = caption
    for e in plan.edits:
        if not e.old or e.old not in text:
            raise EditError(f"edit of attribute {e.attribute!r}: {e.old!r} does not occur in the caption")
        text = text.replace(e.old, e.new, 1)
    if plan.inject_defect:
        sentence = plan.inject_defect.strip()
        if sentence[-1] not in ".!?":
            sentence += "."
        sentence = sentence[0].upper() + sentence[1:]
        sep = "" if not text or text.endswith((" ", "\n")) else (" " if text.rstrip()[-1:] in ".!?" else ". ")
        return text + sep + sentence, "abnormal"
    return text, "normal"


def random_edit_plan(caption: str, vocabulary: dict, defects: Sequence[str], seed: int,
                     defect_rate: float = 0.5) -> EditPlan:
    """Seeded edit plan over attribute values found in ``caption``.

    ``vocabulary`` maps attribute name to interchangeable values, e.g.
    ``{"color": ["red", "blue", "green"]}``.
    """
    rng = random.Random(seed)
    edits = []
    for attribute in sorted(vocabulary):
        values = vocabulary[attribute]
        present = [v for v in values if re.search(rf"\b{re.escape(v)}\b", caption)]
        if not present or rng.random() < 0.5:
            continue
        old = present[0]
        choices = [v for v in values if v != old]
        if choices:
            edits.append(AttributeEdit(attribute, old, rng.choice(choices)))
    inject = rng.choice(list(defects)) if defects and rng.random() < defect_rate else None
    return EditPlan(tuple(edits), inject, seed)


# -------------------------------------------------------------- checklist

def _stem(word: str) -> str:
    return word[:-1] if len(word) > 3 and word.endswith("s") and not word.endswith("ss") else word


def _tokens(text: str) -> set:
    return {_stem(t) for t in re.split(r"[^a-z0-9]+", text.lower()) if t and t not in _STOPWORDS}


def match_step(mfg: MfgProcess, coarse_label: str, synonyms=None) -> int:
    """Index of the step a coarse defect label points at.

    Label words (and their synonyms) are matched case-insensitively against
    each step; a hit in the step name counts double. Ties go to the earlier
    step. Words of the product class name itself are ignored.
    """
    synonyms = DEFAULT_SYNONYMS if synonyms is None else synonyms
    words = _tokens(coarse_label) - _tokens(mfg.product_class)
    expanded = set(words)
    for w in words:
        expanded.update(t for s in synonyms.get(w, ()) for t in _tokens(s))
    best, best_score = -1, 0
    for i, step in enumerate(mfg.steps):
        score = 2 * len(expanded & _tokens(step.name)) + len(expanded & _tokens(step.description))
        if score > best_score:
            best, best_score = i, score
    if best < 0:
        raise UnmatchedLabelError(f"defect label {coarse_label!r} matches no step of the "
                                  f"{mfg.product_class!r} manufacturing process")
    return best


def build_checklist(mfg: MfgProcess, coarse_label: str | None, synonyms=None) -> str:
    """Inspector checklist over the process steps; ``None`` or ``"good"`` label means a normal sample."""
    if not mfg.steps:
        raise ArgumentError("manufacturing process has no steps")
    normal = coarse_label is None or coarse_label.strip().lower() in ("", "good", "normal")
    failed = None if normal else match_step(mfg, coarse_label, synonyms)
    lines = []
    for k, step in enumerate(mfg.steps, 1):
        if failed == k - 1:
            lines.append(f"Step {k} ({step.name}): FAIL ({coarse_label})")
        else:
            lines.append(f"Step {k} ({step.name}): pass")
    lines.append(f"Verdict: {VERDICT_ACCEPTABLE if normal else VERDICT_DEFECTIVE}")
    return "\n".join(lines)


# ------------------------------------------------------------- generation

class GenClient(Protocol):
    name: str

    def generate(self, system: str, user: str) -> str:
        ...


def load_prompt(version: str = PROMPT_VERSION) -> tuple[str, str]:
    """(system, user) prompt templates shipped under ``prompts/``."""
    base = resources.files("triadkit") / "prompts"
    system = (base / f"{version}.system.txt").read_text(encoding="utf-8")
    user = (base / f"{version}.user.txt").read_text(encoding="utf-8")
    return system, user


def render_cot_prompt(caption: str, mfg: MfgProcess, version: str = PROMPT_VERSION) -> tuple[str, str]:
    system, user = load_prompt(version)
    return system, user.format(product=mfg.product_class.replace("_", " "), caption=caption.strip(),
                               steps=numbered_steps(mfg.steps))


def prompt_hash(system: str, user: str, version: str = PROMPT_VERSION) -> str:
    h = hashlib.sha256()
    for part in (version, system, user):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class StubClient:
    """Deterministic offline generator.

    The output walks through every ``"<k>. <name>:"`` step listed in the user
    prompt, with connective phrasing drawn from an RNG seeded by ``seed`` and
    the prompt text.
    """

    _OPENERS = ("Looking at the product,", "On inspection,", "Checking the description,")
    _LINKS = ("explained by", "consistent with", "traceable to")

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.name = f"stub:{seed}"

    def generate(self, system: str, user: str) -> str:
        digest = hashlib.sha256(f"{self.seed}\x00{system}\x00{user}".encode("utf-8")).digest()
        rng = random.Random(int.from_bytes(digest[:8], "big"))
        steps = re.findall(r"^\s*\d+\.\s*([^:\n]+?)\s*:", user, flags=re.M)
        lines = [f"{rng.choice(self._OPENERS)} I compare the visual attributes with each manufacturing step."]
        for k, name in enumerate(steps, 1):
            lines.append(f"Step {k}, {name}: the observed attributes are {rng.choice(self._LINKS)} {name.lower()}.")
        described = re.search(r"Product description:\n(.*?)(?:\n\n|\Z)", user, re.S)
        caption = described.group(1) if described else user
        defect = re.search(r"\b(missing|crack|scratch|broken|defect|hole|bent|cut|contamination)\w*", caption, re.I)
        lines.append(VERDICT_DEFECTIVE if defect else VERDICT_ACCEPTABLE)
        return "\n".join(lines)


class HttpChatClient:
    """Client for a chat-completion style JSON endpoint.

    The bearer token is read from the environment variable named by
    ``token_env``. Transport failures and 5xx/429 responses are retried with
    exponential backoff; after ``attempts`` tries a :class:`RetryableError`
    is raised.
    """

    def __init__(self, url, model, token_env="TRIAD_GEN_TOKEN", attempts=3, backoff=1.0, timeout=60.0,
                 session=None, sleep=time.sleep):
        self.url = url
        self.model = model
        self.token_env = token_env
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()
        self._sleep = sleep
        self.name = f"http:{model}"

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def generate(self, system: str, user: str) -> str:
        body = {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        }
        # same prompt, same key: lets a caching proxy dedupe retries
        headers = {**self._headers(), "Idempotency-Key": prompt_hash(system, user)}
        last = None
        for attempt in range(1, self.attempts + 1):
            try:
                resp = self.session.post(self.url, json=body, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last = str(exc)
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise GenerationError(f"generation endpoint rejected the request: HTTP {resp.status_code}")
                else:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise GenerationError(f"unexpected response shape from {self.url}") from exc
            if attempt < self.attempts:
                self._sleep(self.backoff * 2 ** (attempt - 1))
        raise RetryableError(f"generation request to {self.url} failed: {last}", attempts=self.attempts)


@dataclass(frozen=True)
class CotResult:
    text: str
    client: str
    prompt_hash: str
    prompt_version: str = PROMPT_VERSION


def generate_cot(caption: str, mfg: MfgProcess, client: GenClient, version: str = PROMPT_VERSION) -> CotResult:
    if not caption or not caption.strip():
        raise ArgumentError("caption is empty")
    if mfg is None or not mfg.steps:
        raise ArgumentError("manufacturing process is empty")
    system, user = render_cot_prompt(caption, mfg, version)
    text = client.generate(system, user)
    if not text or not text.strip():
        raise GenerationError(f"client {client.name} returned an empty generation")
    return CotResult(text=text, client=client.name, prompt_hash=prompt_hash(system, user, version),
                     prompt_version=version)


# --------------------------------------------------------------- pipeline

@dataclass(frozen=True)
class CotmSample:
    """One input to the organizer. ``mode`` is ``captioned``, ``checklist`` or ``text_only``."""

    sample_id: str
    product_class: str
    mode: str
    caption: str = ""
    label: str | None = None
    coarse_label: str | None = None
    plan: EditPlan | None = None
    image_refs: tuple = ()

    @classmethod
    def from_dict(cls, d):
        plan = None
        if d.get("plan"):
            p = d["plan"]
            plan = EditPlan(tuple(AttributeEdit(e["attribute"], e["old"], e["new"]) for e in p.get("edits", ())),
                            p.get("inject_defect"), int(p.get("seed", 0)))
        return cls(str(d["sample_id"]), d["product_class"], d["mode"], d.get("caption", ""), d.get("label"),
                   d.get("coarse_label"), plan, tuple(d.get("image_refs", ())))


def _record_for(sample: CotmSample, mfg_store: dict, client: GenClient, synonyms) -> InstructionRecord:
    mfg = mfg_store.get(sample.product_class)
    if mfg is None:
        raise ArgumentError(f"no manufacturing process for product class {sample.product_class!r}")
    meta = {"mode": sample.mode, "mfg_source": mfg.source}
    if sample.mode == "captioned":
        res = generate_cot(sample.caption, mfg, client)
        label, response, provenance = sample.label, res.text, "generated"
        meta.update(client=res.client, prompt_hash=res.prompt_hash, prompt_version=res.prompt_version)
        prompt_caption = sample.caption
    elif sample.mode == "checklist":
        response = build_checklist(mfg, sample.coarse_label, synonyms)
        label = "normal" if response.endswith(VERDICT_ACCEPTABLE) else "abnormal"
        provenance = "generated"
        meta.update(client="checklist", coarse_label=sample.coarse_label)
        prompt_caption = ""
    elif sample.mode == "text_only":
        if sample.plan is None:
            raise ArgumentError(f"text_only sample {sample.sample_id!r} needs an edit plan")
        prompt_caption, label = augment_caption(sample.caption, sample.plan)
        res = generate_cot(prompt_caption, mfg, client)
        response, provenance = res.text, "augmented"
        meta.update(client=res.client, prompt_hash=res.prompt_hash, prompt_version=res.prompt_version,
                    plan_seed=sample.plan.seed, source_caption=sample.caption)
    else:
        raise ArgumentError(f"unknown CoT-M mode {sample.mode!r}")
    product = sample.product_class.replace("_", " ")
    prompt_lines = [] if sample.mode == "text_only" else ["<image>"]
    prompt_lines.append(mfg.render())
    if prompt_caption and sample.mode == "text_only":
        prompt_lines.append(f"Product description: {prompt_caption}")
    prompt_lines.append(f"Based on the manufacturing process, is there any defect on the {product}? "
                        "Explain step by step.")
    return InstructionRecord(
        id=f"{sample.sample_id}-cotm",
        sample_id=sample.sample_id,
        task="cot_m",
        prompt="\n".join(prompt_lines),
        response=response,
        image_refs=tuple(sample.image_refs),
        provenance=provenance,
        product_class=sample.product_class,
        label=label,
        meta=meta,
    )


def organize(samples: Sequence[CotmSample], mfg_store: dict, client: GenClient, synonyms=None,
             max_in_flight: int = 4) -> tuple[list, list]:
    """Run all samples through their mode; returns ``(records, routed_to_filter)``.

    Samples whose defect label matches no manufacturing step are not fatal:
    their ids are returned in the second list for manual review. Output order
    is by record id regardless of scheduling.
    """
    def work(sample):
        try:
            return _record_for(sample, mfg_store, client, synonyms), None
        except UnmatchedLabelError as exc:
            log.warning("routing %s to manual filter: %s", sample.sample_id, exc)
            return None, sample.sample_id

    if max_in_flight < 1:
        raise ArgumentError("max_in_flight must be at least 1")
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        results = list(pool.map(work, samples))
    records = sorted((r for r, _ in results if r is not None), key=lambda r: r.id)
    routed = sorted(s for _, s in results if s is not None)
    return records, routed


def filter_records(records: Sequence[InstructionRecord], rejected_ids) -> list[InstructionRecord]:
    """Flag rejected records as ``filtered_out``; nothing is removed."""
    rejected = set(rejected_ids)
    known = {r.id for r in records}
    for unknown in sorted(rejected - known):
        log.warning("rejection list names unknown record id %r", unknown)
    return [replace(r, flags=frozenset(r.flags | {"filtered_out"})) if r.id in rejected else r for r in records]


def training_export(records: Sequence[InstructionRecord]) -> list[InstructionRecord]:
    return [r for r in records if "filtered_out" not in r.flags]


def read_rejections(path) -> set:
    """Plain-text rejection list: one record id per line, ``#`` comments allowed."""
    ids = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ids.add(line)
    return ids
