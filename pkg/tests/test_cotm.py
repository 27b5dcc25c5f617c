import logging

import pytest
import requests

from triadkit import cotm
from triadkit.cotm import (
    AttributeEdit, CotmSample, EditPlan, HttpChatClient, MfgProcess, MfgStep, StubClient, augment_caption,
    build_checklist, default_mfg_store, filter_records, generate_cot, organize, parse_mfg_steps,
    random_edit_plan, read_rejections, training_export,
)
from triadkit.errors import ArgumentError, EditError, GenerationError, RetryableError, UnmatchedLabelError
from triadkit.instructiad import InstructionRecord, validate_records
from triadkit.map_io import write_jsonl

CABLE_STEPS = [
    "Copper Wire Drawing", "Stranding", "Insulation Extrusion", "Color Coding", "Cable Assembly",
    "Outer Sheath Extrusion", "Cooling",
]


@pytest.fixture
def store():
    return default_mfg_store()


# ---------------------------------------------------------------- augment

def test_augment_examples():
    plan = EditPlan((AttributeEdit("color", "red", "blue"),))
    assert augment_caption("three red wires", plan) == ("three blue wires", "normal")
    plan = EditPlan((AttributeEdit("color", "red", "blue"),), inject_defect="one wire is missing")
    text, label = augment_caption("three red wires", plan)
    assert label == "abnormal"
    assert text.startswith("three blue wires") and text.endswith("One wire is missing.")
    with pytest.raises(EditError, match="color"):
        augment_caption("three red wires", EditPlan((AttributeEdit("color", "green", "blue"),)))


def test_random_plans_are_label_consistent():
    vocab = {"color": ["red", "blue", "green"], "count": ["two", "three", "four"]}
    caption = "A cable with three red wires."
    for seed in range(200):
        plan = random_edit_plan(caption, vocab, ["one wire is bent"], seed)
        assert plan == random_edit_plan(caption, vocab, ["one wire is bent"], seed)
        text, label = augment_caption(caption, plan)
        assert (label == "abnormal") == (plan.inject_defect is not None)
        for e in plan.edits:
            assert e.old in caption


# ---------------------------------------------------------------- checklist

def test_bundled_cable_process(store):
    cable = store["cable"]
    assert [s.name for s in cable.steps] == CABLE_STEPS
    assert cable.source == "gpt"


def test_checklist_one_line_per_step(store):
    cable = store["cable"]
    text = build_checklist(cable, "missing_wire")
    lines = text.splitlines()
    assert len(lines) == len(CABLE_STEPS) + 1
    for k, (line, name) in enumerate(zip(lines, CABLE_STEPS), 1):
        assert line.startswith(f"Step {k} ({name}): ")
    assert [l for l in lines if "FAIL" in l] == ["Step 5 (Cable Assembly): FAIL (missing_wire)"]
    assert lines[-1] == "Verdict: This product is defective."


def test_checklist_three_steps():
    mfg = MfgProcess("widget", (MfgStep("Casting", "pour the metal"), MfgStep("Painting", "spray red paint"),
                                MfgStep("Packing", "box it")))
    assert build_checklist(mfg, "paint_flaw", synonyms={"paint": ["painting"]}).splitlines() == [
        "Step 1 (Casting): pass",
        "Step 2 (Painting): FAIL (paint_flaw)",
        "Step 3 (Packing): pass",
        "Verdict: This product is defective.",
    ]
    assert build_checklist(mfg, None).splitlines()[-1] == "Verdict: This product is acceptable."
    assert "FAIL" not in build_checklist(mfg, "good")
    with pytest.raises(UnmatchedLabelError):
        build_checklist(mfg, "zzz_unknown")


def test_parse_mfg_steps():
    steps = parse_mfg_steps("1. Mixing: combine powders\n   - evenly\n2. Pressing: form tablets\n")
    assert steps == (MfgStep("Mixing", "combine powders evenly"), MfgStep("Pressing", "form tablets"))


# ---------------------------------------------------------------- generation

def test_stub_deterministic_and_complete(store):
    cable = store["cable"]
    a = generate_cot("Three wires, one missing.", cable, StubClient(7))
    b = generate_cot("Three wires, one missing.", cable, StubClient(7))
    assert a == b
    for name in CABLE_STEPS:
        assert name in a.text
    assert a.text.endswith("This product is defective.")
    assert len(a.prompt_hash) == 64


def test_generate_errors(store):
    with pytest.raises(ArgumentError):
        generate_cot("x", None, StubClient())

    class Empty:
        name = "empty"

        def generate(self, system, user):
            return "  "

    with pytest.raises(GenerationError):
        generate_cot("x", store["cable"], Empty())


class FakeResponse:
    def __init__(self, status, payload=None):
        self.status_code = status
        self._payload = payload

    def json(self):
        return self._payload


class FakeSession:
    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append(headers)
        out = self.outcomes.pop(0)
        if isinstance(out, Exception):
            raise out
        return out


def test_http_retries_then_fails(monkeypatch, store):
    monkeypatch.setenv("TRIAD_GEN_TOKEN", "secret")
    session = FakeSession([requests.ConnectionError("down"), FakeResponse(503), FakeResponse(429)])
    sleeps = []
    client = HttpChatClient("http://gen.invalid/v1", "m", session=session, sleep=sleeps.append)
    with pytest.raises(RetryableError) as exc:
        generate_cot("caption", store["cable"], client)
    assert exc.value.attempts == 3 and "3" in str(exc.value)
    assert sleeps == [1.0, 2.0]
    assert all(h["Authorization"] == "Bearer secret" for h in session.calls)
    assert len({h["Idempotency-Key"] for h in session.calls}) == 1


def test_http_success_after_retry(store):
    ok = FakeResponse(200, {"choices": [{"message": {"content": "Step 1 looks fine."}}]})
    session = FakeSession([FakeResponse(500), ok])
    client = HttpChatClient("http://gen.invalid/v1", "m", session=session, sleep=lambda s: None)
    assert generate_cot("caption", store["cable"], client).text == "Step 1 looks fine."


def test_http_client_error_not_retried(store):
    session = FakeSession([FakeResponse(400)])
    client = HttpChatClient("http://gen.invalid/v1", "m", session=session, sleep=lambda s: None)
    with pytest.raises(GenerationError) as exc:
        generate_cot("caption", store["cable"], client)
    assert not isinstance(exc.value, RetryableError)


# ---------------------------------------------------------------- pipeline

def _samples():
    from importlib import resources
    import json
    text = (resources.files("triadkit") / "data" / "cotm_samples.jsonl").read_text(encoding="utf-8")
    return [CotmSample.from_dict(json.loads(l)) for l in text.splitlines() if l.strip()]


def test_organize_reproducible(tmp_path, store):
    paths = []
    for k in range(2):
        records, routed = organize(_samples(), store, StubClient(0), max_in_flight=1 + 3 * k)
        validate_records(records)
        p = tmp_path / f"run{k}.jsonl"
        write_jsonl(records, p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert routed == ["pill_chk_005"]


def test_organize_modes(store):
    records, _ = organize(_samples(), store, StubClient(0))
    by_id = {r.sample_id: r for r in records}
    assert by_id["cable_txt_006"].label == "normal" and by_id["cable_txt_006"].provenance == "augmented"
    assert by_id["cable_txt_007"].label == "abnormal"
    assert "two red wires" in by_id["cable_txt_007"].prompt
    assert by_id["cable_chk_004"].label == "normal"
    for r in records:
        if r.meta.get("client", "").startswith("stub"):
            assert len(r.meta["prompt_hash"]) == 64 and r.meta["prompt_version"] == "cot_m_v1"


def test_record_regenerates_from_hash(store):
    records, _ = organize(_samples(), store, StubClient(0))
    r = next(r for r in records if r.sample_id == "cable_cap_001")
    sample = next(s for s in _samples() if s.sample_id == "cable_cap_001")
    again = generate_cot(sample.caption, store["cable"], StubClient(0))
    assert again.prompt_hash == r.meta["prompt_hash"] and again.text == r.response


def _recs(n):
    return [InstructionRecord(f"r{i}", f"s{i}", "cot_m", "p", "x", provenance="generated") for i in range(n)]


def test_filter_audit_counts(caplog):
    recs = _recs(3)
    flagged = filter_records(recs, {"r1"})
    assert len(flagged) == 3 and len(training_export(flagged)) == 2
    assert [r.id for r in flagged if "filtered_out" in r.flags] == ["r1"]
    assert filter_records(recs, set()) == recs
    with caplog.at_level(logging.WARNING, logger="triadkit"):
        out = filter_records(recs, {"nope"})
    assert out == recs and "nope" in caplog.text


def test_read_rejections(tmp_path):
    p = tmp_path / "reject.txt"
    p.write_text("r1\n# reviewer note\n\nr2  # bad trace\n")
    assert read_rejections(p) == {"r1", "r2"}


def test_prompt_assets_present():
    system, user = cotm.load_prompt()
    assert "{caption}" in user and "{steps}" in user and system.strip()
