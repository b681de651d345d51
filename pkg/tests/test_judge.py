from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from convoforge.gateway import ScriptedChat
from convoforge.judge import (COUNTS, DIMENSIONS, SCALED, ClaimVerdict, JudgeError, JudgeReport,
                              aggregate, check_verdict, claim_rates, comparison_csv, comparison_table,
                              extract_claims, judge_note, label_claims, parse_claims, score_dimensions, summarize)
from convoforge.mock_llm import MockLLM
from convoforge.notes import SchemaError, SoapNote

NOTE = SoapNote(hpi=("Cough for two weeks.",), ros=("Denies fever.",), plan=("Chest x-ray.",))


def _claims(n):
    return json.dumps({"claims": [{"id": f"c{i}", "statement": f"claim {i}", "section": "hpi"} for i in range(n)]})


def _scores(**override):
    scores = {k: 4 for k in SCALED}
    counts = {k: 0 for k in COUNTS}
    for k, v in override.items():
        (scores if k in scores else counts)[k] = v
    return json.dumps({"scores": scores, "counts": counts})


def _report(note_id, value):
    scores = {k: value for k in SCALED}
    return JudgeReport(note_id, scores, {k: 0 for k in COUNTS},
                       {"unsupported_claim_rate": 0.0, "contradiction_rate": 0.0})


# -- claims ---------------------------------------------------------------

def test_duplicate_claim_ids_rejected():
    dup = json.dumps({"claims": [{"id": "c1", "statement": "a", "section": "hpi"},
                                 {"id": "c1", "statement": "b", "section": "plan"}]})
    with pytest.raises(SchemaError, match="duplicate"):
        parse_claims(json.loads(dup), "n")
    backend = ScriptedChat([dup, _claims(2)])
    cs = extract_claims(NOTE, backend, note_id="n")
    assert len(cs) == 2 and len(backend.calls) == 2


def test_unknown_section_rejected():
    with pytest.raises(SchemaError):
        parse_claims({"claims": [{"id": "a", "statement": "x", "section": "vitals"}]}, "n")


def test_empty_note_gives_flagged_empty_claim_set(transcript):
    backend = ScriptedChat([_scores()])
    cs = extract_claims(SoapNote(), backend, note_id="e")
    assert len(cs) == 0 and cs.empty_note and backend.calls == []
    report = judge_note(SoapNote(), transcript, backend, note_id="e")
    assert {"no_claims", "empty_note"} <= set(report.flags)
    assert report.rates == {"unsupported_claim_rate": 0.0, "contradiction_rate": 0.0}


# -- verdicts -------------------------------------------------------------

def test_verdict_evidence_rules():
    with pytest.raises(SchemaError):
        ClaimVerdict("c", "supported")
    with pytest.raises(SchemaError):
        ClaimVerdict("c", "unsupported", "q", 1)
    with pytest.raises(SchemaError):
        ClaimVerdict("c", "maybe")


def test_fabricated_evidence_downgraded(transcript):
    v = check_verdict("c1", {"label": "supported", "quote": "I have a fever of 102", "turn": 3}, transcript)
    assert v.label == "unsupported" and v.downgraded
    v = check_verdict("c1", {"label": "contradicted", "quote": "No fever", "turn": "3"}, transcript)
    assert v.label == "contradicted" and v.turn == 3 and not v.downgraded
    v = check_verdict("c1", {"label": "supported", "quote": "No fever", "turn": True}, transcript)
    assert v.downgraded


def test_missing_verdicts_listed(transcript):
    cs = parse_claims(json.loads(_claims(3)), "n")
    reply = json.dumps({"verdicts": [{"id": "c0", "label": "unsupported"}]})
    with pytest.raises(JudgeError, match="c1, c2"):
        label_claims(cs, transcript, ScriptedChat([reply] * 3))


def test_two_of_ten_unsupported(transcript):
    cs = parse_claims(json.loads(_claims(10)), "n")
    verdicts = [{"id": f"c{i}", "label": "unsupported"} if i < 2 else
                {"id": f"c{i}", "label": "supported", "quote": "No fever", "turn": 3} for i in range(10)]
    out = label_claims(cs, transcript, ScriptedChat([json.dumps({"verdicts": verdicts})]))
    assert claim_rates(out) == {"unsupported_claim_rate": 0.2, "contradiction_rate": 0.0}


def test_rates_are_recounted_locally(transcript):
    cs = parse_claims(json.loads(_claims(4)), "n")
    verdicts = [ClaimVerdict("c0", "contradicted", "No fever", 3), ClaimVerdict("c1", "unsupported"),
                ClaimVerdict("c2", "supported", "cough", 1), ClaimVerdict("c3", "unsupported", downgraded=True)]
    report = score_dimensions(cs, verdicts, NOTE, transcript, ScriptedChat([_scores()]))
    assert report.rates == {"unsupported_claim_rate": 0.5, "contradiction_rate": 0.25}
    assert report.provenance["unsupported_claim_rate"] == "local"
    assert "evidence_downgrades" in report.flags
    with pytest.raises(JudgeError):
        score_dimensions(cs, verdicts[:2], NOTE, transcript, ScriptedChat([_scores()]))


def test_out_of_range_scores_clamped(transcript):
    cs = parse_claims(json.loads(_claims(1)), "n")
    report = score_dimensions(cs, [ClaimVerdict("c0", "unsupported")], NOTE, transcript,
                              ScriptedChat([_scores(faithfulness=7, coverage=0, critical_omissions=-2)]))
    assert report.scores["faithfulness"] == 5 and report.scores["coverage"] == 1
    assert report.counts["critical_omissions"] == 0
    assert {"clamped:faithfulness", "clamped:coverage", "clamped:critical_omissions"} <= set(report.flags)


def test_missing_score_retried(transcript):
    cs = parse_claims(json.loads(_claims(1)), "n")
    bad = json.dumps({"scores": {"faithfulness": 3}, "counts": {}})
    backend = ScriptedChat([bad, _scores()])
    score_dimensions(cs, [ClaimVerdict("c0", "unsupported")], NOTE, transcript, backend)
    assert len(backend.calls) == 2


def test_mock_judge_end_to_end(transcript):
    from convoforge.notes import extract_facts, generate_note

    llm = MockLLM()
    note = generate_note(extract_facts(transcript, llm), llm)
    report = judge_note(note, transcript, llm)
    assert report.claims
    assert report.rates == claim_rates(report.verdicts)
    assert JudgeReport.from_dict(json.loads(json.dumps(report.to_dict()))) == report


# -- aggregation ----------------------------------------------------------

def test_ci_for_one_and_five():
    # [DERIVED] mean 3, sample std sqrt(8)=2.828, half width 1.96*2.828/sqrt(2) = 3.92
    a = summarize([1, 5])
    assert a.mean == 3.0
    assert a.ci_low == pytest.approx(3 - 3.92, abs=1e-3) and a.ci_high == pytest.approx(3 + 3.92, abs=1e-3)


def test_single_report_zero_width():
    agg = aggregate([_report("a", 4)])
    assert agg["faithfulness"].half_width == 0.0 and agg["faithfulness"].flag == "n=1"


def test_constant_values():
    agg = aggregate([_report(str(i), 3) for i in range(4)])
    assert (agg["coverage"].ci_low, agg["coverage"].ci_high) == (3.0, 3.0)


def test_empty_aggregate_raises():
    with pytest.raises(JudgeError):
        aggregate([])


def test_bootstrap_is_order_independent():
    reports = [_report(str(i), v) for i, v in enumerate([1, 2, 5, 4, 3, 3])]
    a = aggregate(reports, bootstrap=500, seed=1)
    b = aggregate(reports[::-1], bootstrap=500, seed=1)
    assert a == b and a["faithfulness"].flag == "bootstrap"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=50))
def test_interval_contains_mean(values):
    a = summarize(values)
    assert a.ci_low <= a.mean + 1e-9 and a.mean <= a.ci_high + 1e-9
    assert math.isclose(a.mean, sum(values) / len(values), rel_tol=1e-9, abs_tol=1e-9)


def test_tables():
    systems = {"A": aggregate([_report("x", 4), _report("y", 2)]), "B": aggregate([_report("x", 5)])}
    table = comparison_table(systems)
    assert table.splitlines()[0].split() == ["System", "Faith.", "Cov.", "Struct.", "Conc.", "Unsup.", "Contra."]
    assert "3.00 ±1.96" in table
    csv_text = comparison_csv(systems)
    assert len(csv_text.splitlines()) == 1 + 2 * len(DIMENSIONS)
