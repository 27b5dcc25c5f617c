"""End-to-end acceptance checks, each with its own runtime limit.

Every criterion prints one ``PASS``/``FAIL`` line (also repeated in the
terminal summary) and fails the test if either the check or the time limit
is missed.
"""

import itertools
import json
import math
import time
from importlib import resources

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, GOLDEN
from egroi_fixtures import check_pipeline_properties, make_fixture
from oracles import pairwise_auroc
from triadkit.cotm import CotmSample, StubClient, build_checklist, default_mfg_store, filter_records
from triadkit.cotm import organize, training_export
from triadkit.cvm import ModelOpinion, vote
from triadkit.egroi import token_layout
from triadkit.errors import BudgetError
from triadkit.evalharness import EvalItem, answers_from_responses, render_prompt, score_paired, score_run
from triadkit.instructiad import sft_nll
from triadkit.map_io import AnomalyMap, BinaryMask, write_jsonl
from triadkit.metrics import binarize, normalize_map, pixel_auroc, pixel_rates, size_class_from_ratio


def _bundled_rows(name):
    text = (resources.files("triadkit") / "data" / name).read_text(encoding="utf-8")
    return [json.loads(l) for l in text.splitlines() if l.strip()]


def run_criterion(number, title, limit, check):
    start = time.perf_counter()
    error = None
    try:
        check()
    except AssertionError as exc:
        error = exc
    elapsed = time.perf_counter() - start
    ok = error is None and elapsed < limit
    why = "" if error is None else f" ({error})"
    line = (f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} "
            f"[{elapsed:.2f}s, limit {limit:g}s]{why}")
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert error is None, line
    assert elapsed < limit, line


# 1 ---------------------------------------------------------------------

def test_c1_auroc_oracle():
    def check():
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(2, 201))
            # coarse levels force plenty of ties
            scores = rng.integers(0, rng.choice([3, 10, 100, 10**6]), n) / 10**6
            labels = rng.random(n) < rng.uniform(0.05, 0.95)
            labels[0], labels[-1] = True, False
            got = pixel_auroc([(AnomalyMap(scores.reshape(1, n), normalized=True),
                                BinaryMask(labels.reshape(1, n)))])
            worst = max(worst, abs(got - pairwise_auroc(scores.tolist(), labels.tolist())))
        assert worst <= 1e-9, f"max deviation {worst:.3g}"

    run_criterion(1, "pixel AUROC equals pairwise oracle on 200 sets", 5, check)


# 2 ---------------------------------------------------------------------

def test_c2_threshold_monotone():
    thresholds = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]

    def check():
        rng = np.random.default_rng(2)
        pooled = np.zeros((len(thresholds), 4), dtype=np.int64)
        for _ in range(100):
            h, w = rng.integers(8, 48, 2)
            gt = np.zeros((h, w), bool)
            y, x = rng.integers(0, h), rng.integers(0, w)
            gt[y:y + rng.integers(1, 10), x:x + rng.integers(1, 10)] = True
            raw = rng.gamma(2.0, 1.0, (h, w)) + rng.uniform(0, 4) * gt
            norm = normalize_map(AnomalyMap(raw))
            prev = None
            for k, t in enumerate(thresholds):
                r = pixel_rates(binarize(norm, t), BinaryMask(gt))
                pooled[k] += (r.tp, r.fp, r.tn, r.fn)
                if prev is not None:
                    assert r.fpr >= prev.fpr and r.tpr >= prev.tpr, f"non-monotone at t={t}"
                prev = r
        tpr = pooled[:, 0] / (pooled[:, 0] + pooled[:, 3])
        fpr = pooled[:, 1] / (pooled[:, 1] + pooled[:, 2])
        assert np.all(np.diff(tpr) >= 0) and np.all(np.diff(fpr) >= 0)

    run_criterion(2, "TPR/FPR monotone in the threshold on 100 maps", 5, check)


# 3 ---------------------------------------------------------------------

def test_c3_egroi_properties():
    def check():
        boxes = 0
        for seed in range(500):
            raw, side = make_fixture(seed)
            boxes += len(check_pipeline_properties(raw, side, seed).boxes)
        assert boxes > 500, "fixtures produced too few boxes to be meaningful"

    run_criterion(3, "EG-RoI cap, coverage, IoU, border and determinism on 500 fixtures", 10, check)


# 4 ---------------------------------------------------------------------

def test_c4_token_budget():
    def check():
        assert token_layout((24, 24), 4, (24, 24), 2, budget=32768).total_visual_tokens == 1152
        rejected = 0
        for base, n, patch, pool, tiles in itertools.product(
                [(24, 24), (27, 27), (48, 48)], range(5), [(24, 24), (48, 48)], [1, 2, 4], [0, 4, 9, 16, 60]):
            total = base[0] * base[1] * (1 + tiles) + n * (patch[0] // pool) * (patch[1] // pool)
            if total > 32768:
                with pytest.raises(BudgetError) as exc:
                    token_layout(base, n, patch, pool, budget=32768, anyres_tiles=tiles)
                assert exc.value.excess == total - 32768
                rejected += 1
            else:
                assert token_layout(base, n, patch, pool, budget=32768,
                                    anyres_tiles=tiles).total_visual_tokens == total
        assert rejected > 0

    run_criterion(4, "1152-token layout and 32768-token budget enforcement", 1, check)


# 5 ---------------------------------------------------------------------

def test_c5_cvm_truth_table():
    table = {
        ("defect", "defect"): {"lt": ("defect", "consensus"), "eq": ("defect", "consensus"),
                               "gt": ("defect", "consensus")},
        ("normal", "normal"): {"lt": ("normal", "consensus"), "eq": ("normal", "consensus"),
                               "gt": ("normal", "consensus")},
        ("normal", "defect"): {"lt": ("defect", "adopted_opposite"), "eq": ("normal", "trusted_query"),
                               "gt": ("normal", "trusted_query")},
        ("defect", "normal"): {"lt": ("defect", "adopted_opposite"), "eq": ("normal", "trusted_query"),
                               "gt": ("normal", "trusted_query")},
    }
    scores = {"lt": (0.2, 0.7), "eq": (0.45, 0.45), "gt": (0.9, 0.1)}

    def check():
        n = 0
        for (z, o), row in table.items():
            for order, want in row.items():
                q, ref = scores[order]
                v = vote(ModelOpinion(z, q, ref), ModelOpinion(o, q, ref))
                assert (v.decision, v.rationale) == want, f"{z}/{o}/{order}"
                n += 1
        assert n == 12

    run_criterion(5, "CVM verdicts on all 12 cases", 1, check)


# 6 ---------------------------------------------------------------------

def test_c6_harness_fixtures():
    context = "The cable is made of three insulated wires twisted together."
    hints = {"cable": "The defect types of the cable include bent wire, cable swap and missing wire."}

    def check():
        from triadkit.cotm import MfgProcess, MfgStep
        items = [EvalItem.from_dict(r) for r in _bundled_rows("eval_items.jsonl")]
        report = score_run(items, answers_from_responses(_bundled_rows("eval_responses.jsonl")))
        assert f"{report.accuracy * 100:.1f}" == "75.0"
        paired = [EvalItem.from_dict(r) for r in _bundled_rows("paired_items.jsonl")]
        rep = score_paired(paired, answers_from_responses(_bundled_rows("paired_responses_base.jsonl")),
                           answers_from_responses(_bundled_rows("paired_responses_mfg.jsonl")))
        assert abs(rep.delta_mfg * 100 - 2.5) < 0.01
        store = {"cable": MfgProcess("cable", (MfgStep("Cable Assembly"),), text=context)}
        item = EvalItem("cable_000", "cable", "defect", reference_image="ref.png", mfg_ref="cable")
        goldens = sorted(GOLDEN.glob("*.txt"))
        assert len(goldens) == 10
        for g in goldens:
            parts = g.stem.split("_")
            template, shot, with_mfg = parts[0], parts[1], "mfg" in parts
            got = render_prompt(item, template, with_mfg, shot, store, hints if "hint" in parts else None)
            assert got.encode("utf-8") == g.read_bytes(), g.name

    run_criterion(6, "harness scores 75.0%, +2.5% paired delta, golden prompts byte-exact", 1, check)


# 7 ---------------------------------------------------------------------

def test_c7_size_partition():
    def check():
        ratios = [0.005, 0.01, 0.05, 0.1, 0.5]
        want = ["small", "medium", "medium", "medium", "large"]
        assert [size_class_from_ratio(r) for r in ratios] == want
        from triadkit.metrics import defect_size_class
        for r, w in zip(ratios, want):
            bits = np.zeros(1000, bool)
            bits[: int(round(r * 1000))] = True
            assert defect_size_class(BinaryMask(bits.reshape(10, 100))).value == w

    run_criterion(7, "defect-size partition at the 0.01 / 0.1 boundaries", 1, check)


# 8 ---------------------------------------------------------------------

def test_c8_cotm_reproducible(tmp_path):
    def check():
        store = default_mfg_store()
        samples = [CotmSample.from_dict(r) for r in _bundled_rows("cotm_samples.jsonl")]
        outputs = []
        for k in range(2):
            records, routed = organize(samples, store, StubClient(0), max_in_flight=1 + k)
            path = tmp_path / f"cotm{k}.jsonl"
            write_jsonl(records, path)
            outputs.append(path.read_bytes())
        assert outputs[0] == outputs[1]
        lines = build_checklist(store["cable"], "cable_swap").splitlines()
        steps = store["cable"].steps
        assert len(steps) == 7 and len(lines) == 8
        for k, (line, step) in enumerate(zip(lines, steps), 1):
            assert line.startswith(f"Step {k} ({step.name}):")
        reviewed = filter_records(records, {records[0].id, records[2].id, "not-a-record"})
        flagged = [r for r in reviewed if "filtered_out" in r.flags]
        assert len(reviewed) == len(records) == len(samples) - len(routed)
        assert len(flagged) == 2 and len(training_export(reviewed)) == len(records) - 2

    run_criterion(8, "CoT-M stub pipeline byte-identical, 7-step checklist, filter audit counts", 2, check)


# 9 ---------------------------------------------------------------------

def test_c9_sft_nll():
    def check():
        rng = np.random.default_rng(9)
        for _ in range(500):
            a = (-rng.exponential(2.0, rng.integers(0, 50))).tolist()
            b = (-rng.exponential(2.0, rng.integers(0, 50))).tolist()
            assert abs(sft_nll(a) + math.fsum(a)) <= 1e-12
            assert abs(sft_nll(a + b) - (sft_nll(a) + sft_nll(b))) <= 1e-12 * max(1.0, sft_nll(a + b))

    run_criterion(9, "sft_nll equals minus summed log-probs and is additive", 1, check)
