"""Acceptance gate: nine release criteria, one test and one printed line each.

Numeric criteria compare against brute-force references written
independently of the library code (inline here, or committed under
tests/fixtures/ by scripts/stats_oracle.py). Tolerances are 1e-12 unless a
criterion is exact by construction.
"""

import itertools
import json
import random
import shutil
import string
import time
from decimal import Decimal
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factjury.benchmark import census
from factjury.cli import main as cli_main
from factjury.corpus import (
    ClinicalNote,
    FactCategory,
    FactProvenance,
    GeneratedSummary,
    GenerationMetrics,
    KeyFact,
    NoteKind,
    PatientCase,
    Strategy,
    load_record,
    parse_timestamp,
)
from factjury.errors import NoVotes
from factjury.jury import Dimension, JudgeVerdict, majority_vote
from factjury.medagentbrief import (
    SummaryEngine,
    citation_map,
    parse_provenance_tags,
    parse_references,
    render_with_references,
)
from factjury.provider import ChatResponse
from factjury.report import aggregate, embedded_document, fmt_percent
from factjury.stats import (
    bootstrap_kappa_ci,
    cohen_kappa,
    load_rater_matrix,
    loo_human_baseline,
    majority_gold,
    non_inferiority_test,
)

FIXTURES = Path(__file__).parent / "fixtures"
TOL = 1e-12


def ok(number, text):
    print(f"criterion {number}: PASS - {text}")


# --- 1: agreement coefficient against a brute-force reference ---------------------


def reference_kappa(a, b):
    """Straight textbook computation, no shared code with the library."""
    pairs = [(x, y) for x, y in zip(a, b) if x is not None and y is not None]
    n = len(pairs)
    p_o = sum(1 for x, y in pairs if x == y) / n
    pa = sum(1 for x, _ in pairs if x) / n
    pb = sum(1 for _, y in pairs if y) / n
    p_e = pa * pb + (1.0 - pa) * (1.0 - pb)
    if p_e == 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def test_criterion_1_kappa_matches_brute_force():
    start = time.monotonic()
    rng = random.Random(56101)
    for _ in range(1000):
        n = rng.randint(2, 200)
        p_true = rng.uniform(0.1, 0.9)
        p_none = rng.choice([0.0, 0.1])

        def label(forced):
            if not forced and rng.random() < p_none:
                return None
            return rng.random() < p_true

        a = [label(i < 2) for i in range(n)]
        b = [label(i < 2) for i in range(n)]
        assert abs(cohen_kappa(a, b) - reference_kappa(a, b)) <= TOL
    # hand-computed checks are exact
    assert cohen_kappa([True, False, True], [True, False, True]) == 1.0
    assert cohen_kappa([True, True, False, False],
                       [True, True, True, False]) == 0.5
    assert cohen_kappa([True, True, False, False],
                       [True, False, True, False]) == 0.0
    elapsed = time.monotonic() - start
    assert elapsed < 5.0
    ok(1, f"1000 random pairs within 1e-12, hand cases exact, {elapsed:.2f}s")


# --- 2: exhaustive majority-vote check ---------------------------------------------


def test_criterion_2_majority_vote_exhaustive():
    start = time.monotonic()
    checked = 0
    for dimension in (Dimension.PRESENCE, Dimension.CONTRADICTION):
        for size in range(1, 6):
            for pattern in itertools.product((True, False, None), repeat=size):
                verdicts = [
                    JudgeVerdict(judge=f"j{i}", summary_id="s", fact_id="f",
                                 dimension=dimension, verdict=vote,
                                 justification="because",
                                 raw_response_fingerprint="fp")
                    for i, vote in enumerate(pattern) if vote is not None
                ]
                t = sum(1 for v in pattern if v is True)
                f = sum(1 for v in pattern if v is False)
                if not verdicts:
                    with pytest.raises(NoVotes):
                        majority_vote(verdicts)
                    continue
                decision = majority_vote(verdicts)
                if t > f:
                    expected, tied = True, False
                elif f > t:
                    expected, tied = False, False
                else:
                    # conservative tie rules differ by dimension
                    expected = dimension is Dimension.CONTRADICTION
                    tied = True
                assert decision.decision is expected, (dimension, pattern)
                assert decision.tied is tied
                assert (decision.votes_true, decision.votes_false) == (t, f)
                checked += 1
    elapsed = time.monotonic() - start
    assert elapsed < 5.0
    ok(2, f"{checked} vote patterns across panel sizes 1-5, {elapsed:.2f}s")


# --- 3: leave-one-out baseline against the committed oracle ------------------------


def oracle():
    return json.loads((FIXTURES / "stats_oracle.json").read_text())


def test_criterion_3_loo_baseline_matches_oracle():
    doc = oracle()
    matrix = load_rater_matrix(FIXTURES / "raters_7x60.csv")
    mean, per_rater = loo_human_baseline(matrix)
    assert abs(mean - doc["loo_mean"]) <= TOL
    assert set(per_rater) == set(doc["loo_per_rater"])
    for rater, expected in doc["loo_per_rater"].items():
        assert abs(per_rater[rater] - expected) <= TOL
    # the fixture must actually exercise tied-item exclusion somewhere
    assert any(
        None in majority_gold(matrix, [o for o in matrix.raters if o != r])
        for r in matrix.raters
    )
    ok(3, f"mean {mean:.12f} and all 7 per-rater values within 1e-12")


# --- 4: bootstrap determinism against the committed oracle -------------------------


def fixture_labels():
    doc = json.loads((FIXTURES / "evaluators_60.json").read_text())
    return {key: [bool(v) for v in doc[key]] for key in ("jury", "coinflip")}


def test_criterion_4_bootstrap_matches_oracle():
    start = time.monotonic()
    doc = oracle()
    matrix = load_rater_matrix(FIXTURES / "raters_7x60.csv")
    gold = majority_gold(matrix)
    assert gold == [None if g is None else bool(g) for g in doc["gold"]]
    jury = fixture_labels()["jury"]

    agreement = bootstrap_kappa_ci(jury, gold, n_boot=doc["n_boot"],
                                   seed=doc["seed"])
    expected = doc["bootstrap_jury"]
    assert abs(agreement.kappa - expected["kappa"]) <= TOL
    assert abs(agreement.ci_low - expected["ci_low"]) <= TOL
    assert abs(agreement.ci_high - expected["ci_high"]) <= TOL
    assert agreement.ci_level == expected["ci_level"]
    assert agreement.n_skipped == expected["n_skipped"]

    noninf = non_inferiority_test(jury, matrix, gold, margin=doc["margin"],
                                  n_boot=doc["n_boot"], seed=doc["seed"])
    expected = doc["noninf_jury"]
    assert abs(noninf.delta_kappa - expected["delta_kappa"]) <= TOL
    assert abs(noninf.ci_low - expected["ci90_low"]) <= TOL
    assert abs(noninf.ci_high - expected["ci90_high"]) <= TOL
    assert abs(noninf.ci95_low - expected["ci95_low"]) <= TOL
    assert abs(noninf.ci95_high - expected["ci95_high"]) <= TOL
    assert abs(noninf.p_value - expected["p_value"]) <= TOL
    assert noninf.non_inferior == expected["non_inferior"]
    assert noninf.n_skipped == expected["n_skipped"]
    elapsed = time.monotonic() - start
    assert elapsed < 30.0
    ok(4, f"9999-draw CI and delta CI reproduce the oracle, {elapsed:.2f}s")


# --- 5: non-inferiority verdicts on constructed evaluators --------------------------


def test_criterion_5_noninferiority_verdicts():
    doc = oracle()
    matrix = load_rater_matrix(FIXTURES / "raters_7x60.csv")
    gold = majority_gold(matrix)
    loo_mean, _ = loo_human_baseline(matrix)
    assert round(loo_mean, 2) == 0.67  # the intended baseline regime

    perfect = non_inferiority_test(gold, matrix, gold, margin=doc["margin"],
                                   n_boot=doc["n_boot"], seed=doc["seed"])
    assert perfect.non_inferior is True
    assert perfect.p_value < 0.01
    expected = doc["noninf_gold_eval"]
    assert abs(perfect.delta_kappa - expected["delta_kappa"]) <= TOL
    assert abs(perfect.p_value - expected["p_value"]) <= TOL

    coinflip = non_inferiority_test(fixture_labels()["coinflip"], matrix, gold,
                                    margin=doc["margin"], n_boot=doc["n_boot"],
                                    seed=doc["seed"])
    assert coinflip.non_inferior is False
    assert coinflip.ci_low < -0.10  # the lower bound falls past the margin
    expected = doc["noninf_coinflip"]
    assert abs(coinflip.delta_kappa - expected["delta_kappa"]) <= TOL
    assert abs(coinflip.p_value - expected["p_value"]) <= TOL
    ok(5, f"gold evaluator p={perfect.p_value:.4f} passes, coinflip fails")


# --- 6: offline end-to-end pipeline --------------------------------------------------


EXPECTED_CITATIONS = {
    "demo-01-agent": [("PROG_NOTE_1", "p1")],
    "demo-02-agent": [("PROG_NOTE_1", "p1"), ("PROG_NOTE_2", "p2")],
    "demo-03-agent": [],
}


def test_criterion_6_end_to_end_replay(tmp_path):
    start = time.monotonic()
    work = tmp_path / "ws"
    shutil.copytree(FIXTURES / "replay", work)
    cfg = ["--config", str(work / "factjury.toml")]
    assert cli_main(cfg + ["generate", "--run", "run-agent",
                           "--strategy", "agentbrief"]) == 0
    assert cli_main(cfg + ["generate", "--run", "run-single",
                           "--strategy", "single"]) == 0
    assert cli_main(cfg + ["evaluate", "--run", "run-agent"]) == 0
    assert cli_main(cfg + ["evaluate", "--run", "run-single"]) == 0
    assert cli_main(cfg + ["report", "--runs", "run-agent", "run-single",
                           "--generated-at", "2026-01-01T00:00:00Z"]) == 0

    card = aggregate(work / "runs" / "run-agent")
    assert card.presence_rate == 6 / 9
    assert card.contradiction_rate == 1 / 9

    total = 0
    for summary_id, expected in EXPECTED_CITATIONS.items():
        summary = load_record(work / "runs" / "run-agent" / "summaries"
                              / f"{summary_id}.json")
        assert [tuple(c) for c in summary.citations] == expected
        total += len(summary.citations)
    assert total == 3

    html_text = (work / "report" / "report.html").read_text()
    json_text = (work / "report" / "report.json").read_text()
    doc = embedded_document(html_text)
    assert doc == json.loads(json_text)
    assert doc["systems"][0]["presence_rate"] == 6 / 9
    assert doc["systems"][0]["contradiction_rate"] == 1 / 9
    # displayed numbers come from the same document the JSON mirror holds
    assert f">{fmt_percent(6 / 9)}<" in html_text
    assert f">{fmt_percent(1 / 9)}<" in html_text
    # self-contained: nothing fetched at view time
    assert "http://" not in html_text and "https://" not in html_text
    assert "src=" not in html_text
    elapsed = time.monotonic() - start
    assert elapsed < 10.0
    ok(6, f"presence 6/9, contradiction 1/9, 3 citations, HTML==JSON, {elapsed:.2f}s")


# --- 7: stepwise workflow call-count contract ----------------------------------------


CANNED_DRAFT = ("## ONE-LINER\ncourse summary\n\n"
                "## HOSPITAL COURSE\nstable course\n\n"
                "## PROBLEM SUMMARY\n1. problem")


def case_with_progress_notes(p):
    notes = [ClinicalNote(note_id="hp", case_id="c", kind=NoteKind.HISTORY_PHYSICAL,
                          authored_at=parse_timestamp("2024-01-01T00:00:00Z"),
                          text="admitted")]
    for i in range(1, p + 1):
        notes.append(ClinicalNote(
            note_id=f"p{i}", case_id="c", kind=NoteKind.PROGRESS,
            authored_at=parse_timestamp(f"2024-01-01T{i:02d}:30:00Z"),
            text=f"day {i}"))
    return PatientCase.from_notes("c", notes)


def test_criterion_7_call_count_contract():
    for p in (1, 2, 5, 12):
        calls = []

        def transport(request):
            calls.append(request)
            return ChatResponse(text=CANNED_DRAFT, tokens_in=1, tokens_out=1,
                                latency_s=Decimal("0"), provider_id="t",
                                model_id=request.model_id)

        case = case_with_progress_notes(p)
        engine = SummaryEngine(transport, "m")
        draft = engine.generate_initial_draft(case)
        progress = case.progress_notes()
        for k, note in enumerate(progress[:-1], start=1):
            draft = engine.refine_with_note(case, draft, note, k)
        summary, verified = engine.verify_and_cite(case, draft)

        assert len(calls) == 1 + (p - 1) + 1, p
        assert summary.metrics.llm_calls == 1 + (p - 1) + 1
        consumed = list(verified.notes_consumed)
        assert sorted(consumed) == sorted(["hp"] + [f"p{i}" for i in range(1, p + 1)])
        assert len(consumed) == len(set(consumed)) == p + 1
    ok(7, "1+(P-1)+1 calls and each source note consumed once for P in {1,2,5,12}")


# --- 8: marker grammar and citation round-trip ---------------------------------------


FILLER = st.text(alphabet=string.ascii_letters + string.digits + " .,;:()-_",
                 min_size=0, max_size=30)
MALFORMED = (
    "<prog_note_{k}>",
    "<PROG_NOTE_0{k}>",
    "<PROG NOTE {k}>",
    "<PROG-NOTE-{k}>",
    "< PROG_NOTE_{k}>",
    "<PROG_NOTE__{k}>",
    "<PROG_NOTE_{k} >",
    "<PROG_NOTE_0>",
)
TOKEN = st.one_of(
    st.tuples(st.just("text"), FILLER),
    st.tuples(st.just("valid"), st.integers(min_value=1, max_value=30)),
    st.tuples(st.just("bad"), st.tuples(st.sampled_from(MALFORMED),
                                        st.integers(min_value=1, max_value=30))),
)


@settings(max_examples=50, deadline=None)
@given(st.lists(TOKEN, min_size=0, max_size=12))
def grammar_property(tokens):
    parts, expected_ks, expected_bad = [], [], []
    for kind, payload in tokens:
        if kind == "text":
            parts.append(payload)
        elif kind == "valid":
            parts.append(f"<PROG_NOTE_{payload}>")
            expected_ks.append(payload)
        else:
            template, k = payload
            raw = template.format(k=k)
            parts.append(raw)
            expected_bad.append(raw.strip())
    scan = parse_provenance_tags(" ".join(parts))
    assert [tag.index for tag in scan.tags] == expected_ks
    assert [tag.raw for tag in scan.tags] == [f"<PROG_NOTE_{k}>" for k in expected_ks]
    assert [d.raw.strip() for d in scan.diagnostics] == expected_bad


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.integers(min_value=1, max_value=20),
                       st.text(alphabet=string.ascii_lowercase + "-",
                               min_size=1, max_size=8),
                       min_size=0, max_size=6))
def roundtrip_property(mapping):
    citations = tuple((f"PROG_NOTE_{k}", note_id)
                      for k, note_id in sorted(mapping.items()))
    body = " ".join(f"statement [{k}]." for k in sorted(mapping))
    summary = GeneratedSummary(
        summary_id="s-agent", case_id="s", strategy=Strategy.MED_AGENT_BRIEF,
        model_id="m", one_liner="one liner", hospital_course=body or "course",
        problem_summary="problems", citations=citations,
        metrics=GenerationMetrics(tokens_in=1, tokens_out=1,
                                  cost_usd=Decimal("0"),
                                  latency_s=Decimal("0"), llm_calls=2),
    )
    assert parse_references(render_with_references(summary)) == citation_map(summary)


def test_criterion_8_marker_grammar_and_roundtrip():
    grammar_property()
    roundtrip_property()
    ok(8, "no false accepts or rejects in 50 cases; reference map round-trips")


# --- 9: category census arithmetic ----------------------------------------------------


def test_criterion_9_census_rounding():
    counts = {FactCategory.DIAGNOSIS: 46, FactCategory.MANAGEMENT_CHANGE: 36,
              FactCategory.FOLLOW_UP: 5, FactCategory.OTHER: 3}
    facts = []
    for category, count in counts.items():
        for i in range(count):
            facts.append(KeyFact(fact_id=f"{category.value}-{i}", case_id="c",
                                 text="t", category=category,
                                 provenance=FactProvenance.CLINICIAN_AUTHORED))
    result = census(facts)
    assert result.total == 90
    assert result.counts == counts
    assert result.percentages == {
        FactCategory.DIAGNOSIS: 51, FactCategory.MANAGEMENT_CHANGE: 40,
        FactCategory.FOLLOW_UP: 6, FactCategory.OTHER: 3}
    ok(9, "46/36/5/3 facts round half-even to 51/40/6/3 percent")
