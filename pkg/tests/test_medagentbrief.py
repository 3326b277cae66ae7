"""Tests for the generation engine: tag grammar, section parsing, both strategies."""

from datetime import datetime, timedelta, timezone
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factjury.corpus import AuthorClass, ClinicalNote, NoteKind, PatientCase, Strategy
from factjury.errors import (
    ContextOverflow,
    InvalidTagIndex,
    InvariantViolation,
    SectionParseError,
)
from factjury.medagentbrief import (
    DraftStep,
    SummaryEngine,
    WorkflowConfig,
    citation_map,
    note_block,
    parse_citation_markers,
    parse_provenance_tags,
    parse_references,
    render_with_references,
    split_sections,
    template_hashes,
)
from factjury.provider import ChatResponse, PriceTable

UTC = timezone.utc
T0 = datetime(2024, 3, 1, 8, 0, tzinfo=UTC)


def note(note_id, kind=NoteKind.PROGRESS, hours=0, text=None, author=AuthorClass.PHYSICIAN):
    return ClinicalNote(note_id=note_id, case_id="c1", kind=kind,
                        authored_at=T0 + timedelta(hours=hours),
                        text=text or f"Findings recorded in {note_id}.",
                        author_class=author)


def case_with_progress(n_progress, with_discharge=True):
    notes = [note("hp", NoteKind.HISTORY_PHYSICAL, hours=0, text="Admitted with sepsis.")]
    for i in range(n_progress):
        notes.append(note(f"p{i + 1}", hours=24 * (i + 1)))
    if with_discharge:
        notes.append(note("ds", NoteKind.DISCHARGE_SUMMARY, hours=24 * (n_progress + 1),
                          text="Physician discharge summary text."))
    return PatientCase.from_notes("c1", notes)


def sections_text(one="Septic patient, recovered, home.",
                  course="Admitted, treated, improved.",
                  problems="1. Sepsis: resolved."):
    return (f"## ONE-LINER\n{one}\n\n## HOSPITAL COURSE\n{course}\n\n"
            f"## PROBLEM SUMMARY\n{problems}\n")


class FakeTransport:
    """Answers each call from a scripted reply function; records requests."""

    def __init__(self, reply):
        self.reply = reply
        self.requests = []

    def __call__(self, request):
        self.requests.append(request)
        text = self.reply(request, len(self.requests))
        return ChatResponse(text=text, tokens_in=100, tokens_out=40,
                            latency_s=Decimal("0"), provider_id="fake",
                            model_id=request.model_id)


def constant_transport(text):
    return FakeTransport(lambda request, i: text)


def make_engine(transport, **cfg):
    config = WorkflowConfig(**cfg) if cfg else WorkflowConfig()
    return SummaryEngine(transport, model_id="gen-model", config=config)


# --- tag grammar -----------------------------------------------------------------

def test_tag_exact_match():
    scan = parse_provenance_tags("x <PROG_NOTE_7> y")
    assert len(scan.tags) == 1
    tag = scan.tags[0]
    assert tag.index == 7
    assert tag.raw == "<PROG_NOTE_7>"
    assert tag.span == (2, 15)
    assert scan.diagnostics == ()


def test_tag_empty_text():
    scan = parse_provenance_tags("")
    assert scan.tags == () and scan.diagnostics == ()


def test_tag_zero_padding_rejected_with_diagnostic():
    scan = parse_provenance_tags("<PROG_NOTE_07>")
    assert scan.tags == ()
    assert len(scan.diagnostics) == 1
    assert scan.diagnostics[0].raw == "<PROG_NOTE_07>"


@pytest.mark.parametrize("bad", [
    "<prog_note_7>",
    "<Prog_Note_7>",
    "<PROG_NOTE_0>",
    "<PROG NOTE 7>",
    "<PROG-NOTE-7>",
    "< PROG_NOTE_7>",
    "<PROG_NOTE_7 >",
    "<PROG_NOTE__7>",
])
def test_tag_near_misses_become_diagnostics(bad):
    scan = parse_provenance_tags(f"before {bad} after")
    assert scan.tags == ()
    assert len(scan.diagnostics) == 1


def test_tag_multiple_in_order_with_spans():
    text = "a <PROG_NOTE_2> b <PROG_NOTE_12> c <prog_note_3> d"
    scan = parse_provenance_tags(text)
    assert [t.index for t in scan.tags] == [2, 12]
    for t in scan.tags:
        assert text[t.span[0]:t.span[1]] == t.raw
    assert len(scan.diagnostics) == 1


@given(st.lists(st.integers(min_value=1, max_value=999), min_size=0, max_size=8))
@settings(max_examples=100, deadline=None)
def test_tag_grammar_accepts_all_valid_indices(indices):
    text = " filler ".join(f"<PROG_NOTE_{k}>" for k in indices)
    scan = parse_provenance_tags(text)
    assert [t.index for t in scan.tags] == indices
    assert scan.diagnostics == ()


# --- section splitting ----------------------------------------------------------------

def test_split_sections_happy_path():
    one, course, problems = split_sections(sections_text("A.", "B.", "C."))
    assert (one, course, problems) == ("A.", "B.", "C.")


def test_split_sections_missing_header():
    with pytest.raises(SectionParseError):
        split_sections("## ONE-LINER\nA.\n\n## HOSPITAL COURSE\nB.\n")


def test_split_sections_duplicate_header():
    text = sections_text() + "\n## ONE-LINER\nagain\n"
    with pytest.raises(SectionParseError):
        split_sections(text)


def test_split_sections_out_of_order():
    text = ("## HOSPITAL COURSE\nB.\n\n## ONE-LINER\nA.\n\n## PROBLEM SUMMARY\nC.\n")
    with pytest.raises(SectionParseError):
        split_sections(text)


def test_split_sections_empty_section():
    text = "## ONE-LINER\n\n## HOSPITAL COURSE\nB.\n\n## PROBLEM SUMMARY\nC.\n"
    with pytest.raises(SectionParseError):
        split_sections(text)


# --- single prompt strategy --------------------------------------------------------------

def test_single_prompt_parses_sections_and_counts_one_call():
    transport = constant_transport(sections_text("One.", "Course.", "Problems."))
    engine = make_engine(transport)
    summary = engine.single_prompt_generate(case_with_progress(3))
    assert summary.strategy is Strategy.SINGLE_PROMPT
    assert summary.one_liner == "One."
    assert summary.metrics.llm_calls == 1
    assert summary.citations == ()


def test_single_prompt_includes_all_source_notes_in_order():
    transport = constant_transport(sections_text())
    engine = make_engine(transport)
    engine.single_prompt_generate(case_with_progress(4))
    prompt = transport.requests[0].user_prompt
    positions = [prompt.index(f"Findings recorded in p{i}.") for i in range(1, 5)]
    assert positions == sorted(positions)
    assert prompt.index("Admitted with sepsis.") < positions[0]


def test_single_prompt_never_sees_the_reference_summary():
    transport = constant_transport(sections_text())
    engine = make_engine(transport)
    engine.single_prompt_generate(case_with_progress(2, with_discharge=True))
    assert "Physician discharge summary text." not in transport.requests[0].user_prompt


def test_single_prompt_reprompts_once_then_fails():
    transport = constant_transport("no sections here")
    engine = make_engine(transport)
    with pytest.raises(SectionParseError):
        engine.single_prompt_generate(case_with_progress(1))
    assert len(transport.requests) == 2


def test_single_prompt_recovers_on_reprompt():
    transport = FakeTransport(
        lambda request, i: "garbled" if i == 1 else sections_text("Fixed.", "B.", "C."))
    engine = make_engine(transport)
    summary = engine.single_prompt_generate(case_with_progress(1))
    assert summary.one_liner == "Fixed."
    assert summary.metrics.llm_calls == 2


def test_context_budget_enforced():
    transport = constant_transport(sections_text())
    engine = make_engine(transport, context_budget_chars=50)
    with pytest.raises(ContextOverflow):
        engine.single_prompt_generate(case_with_progress(3))


# --- initial draft --------------------------------------------------------------------------

def test_initial_draft_uses_admission_and_final_note_only():
    transport = constant_transport(sections_text())
    engine = make_engine(transport)
    draft = engine.generate_initial_draft(case_with_progress(5))
    prompt = transport.requests[0].user_prompt
    assert "Admitted with sepsis." in prompt
    assert "Findings recorded in p5." in prompt
    for i in range(1, 5):
        assert f"Findings recorded in p{i}." not in prompt
    assert draft.notes_consumed == ("hp", "p5")
    assert draft.step is DraftStep.INITIAL


def test_initial_draft_single_progress_note():
    transport = constant_transport(sections_text())
    engine = make_engine(transport)
    draft = engine.generate_initial_draft(case_with_progress(1))
    assert draft.notes_consumed == ("hp", "p1")


def test_initial_draft_requires_a_progress_note():
    transport = constant_transport(sections_text())
    engine = make_engine(transport)
    with pytest.raises(InvariantViolation):
        engine.generate_initial_draft(case_with_progress(0))


def test_allied_health_exclusion_changes_final_note():
    notes_case = PatientCase.from_notes("c1", [
        note("hp", NoteKind.HISTORY_PHYSICAL, hours=0, text="Admitted with sepsis."),
        note("p1", hours=24),
        note("pt1", hours=48, author=AuthorClass.ALLIED_HEALTH),
    ])
    transport = constant_transport(sections_text())
    engine = make_engine(transport, include_allied_health=False)
    draft = engine.generate_initial_draft(notes_case)
    assert draft.notes_consumed == ("hp", "p1")


# --- refinement ------------------------------------------------------------------------------

def refine_reply(tagged):
    return sections_text(course=f"Admitted, then started anticoagulation {tagged}.")


def test_refine_integrates_tagged_statement():
    case = case_with_progress(5)
    engine = make_engine(FakeTransport(lambda r, i: sections_text()))
    draft = engine.generate_initial_draft(case)
    engine.transport = FakeTransport(lambda r, i: refine_reply("<PROG_NOTE_3>"))
    refined = engine.refine_with_note(case, draft, case.note_by_id("p3"), 3)
    scan = parse_provenance_tags(refined.hospital_course)
    assert [t.index for t in scan.tags] == [3]
    assert refined.notes_consumed == ("hp", "p5", "p3")
    assert refined.step is DraftStep.REFINED


def test_refine_rejects_out_of_range_tag_after_reprompt():
    case = case_with_progress(5)
    engine = make_engine(FakeTransport(lambda r, i: sections_text()))
    draft = engine.generate_initial_draft(case)
    bad = FakeTransport(lambda r, i: refine_reply("<PROG_NOTE_99>"))
    engine.transport = bad
    with pytest.raises(InvalidTagIndex):
        engine.refine_with_note(case, draft, case.note_by_id("p1"), 1)
    assert len(bad.requests) == 2  # one corrective reprompt happened


def test_refine_recovers_when_reprompt_fixes_tag():
    case = case_with_progress(5)
    engine = make_engine(FakeTransport(lambda r, i: sections_text()))
    draft = engine.generate_initial_draft(case)
    engine.transport = FakeTransport(
        lambda r, i: refine_reply("<PROG_NOTE_99>" if i == 1 else "<PROG_NOTE_1>"))
    refined = engine.refine_with_note(case, draft, case.note_by_id("p1"), 1)
    assert parse_provenance_tags(refined.hospital_course).tags[0].index == 1


def test_refine_rejects_consumed_note():
    case = case_with_progress(3)
    engine = make_engine(constant_transport(sections_text()))
    draft = engine.generate_initial_draft(case)
    with pytest.raises(InvariantViolation):
        engine.refine_with_note(case, draft, case.note_by_id("p3"), 3)


def test_refine_rejects_wrong_index():
    case = case_with_progress(3)
    engine = make_engine(constant_transport(sections_text()))
    draft = engine.generate_initial_draft(case)
    with pytest.raises(InvariantViolation):
        engine.refine_with_note(case, draft, case.note_by_id("p1"), 2)


# --- verification and citation resolution ------------------------------------------------------

def test_verify_resolves_tags_to_note_ids():
    case = case_with_progress(10)
    engine = make_engine(constant_transport(sections_text()))
    draft = engine.generate_initial_draft(case)
    for k in range(1, 10):
        engine.transport = constant_transport(sections_text())
        draft = engine.refine_with_note(case, draft, case.note_by_id(f"p{k}"), k)
    engine.transport = constant_transport(sections_text(
        course="Started heparin <PROG_NOTE_3>. Weaned oxygen <PROG_NOTE_7>."))
    summary, verified = engine.verify_and_cite(case, draft)
    assert summary.citations == (("PROG_NOTE_3", "p3"), ("PROG_NOTE_7", "p7"))
    assert "[3]" in summary.hospital_course and "[7]" in summary.hospital_course
    assert "<PROG_NOTE_" not in summary.hospital_course
    assert verified.step is DraftStep.VERIFIED


def test_verify_with_no_tags_gives_empty_citations():
    case = case_with_progress(2)
    engine = make_engine(constant_transport(sections_text()))
    draft = engine.generate_initial_draft(case)
    draft = engine.refine_with_note(case, draft, case.note_by_id("p1"), 1)
    summary, _ = engine.verify_and_cite(case, draft)
    assert summary.citations == ()
    summary.validate()


def test_verify_revision_can_drop_content():
    case = case_with_progress(1)
    engine = make_engine(constant_transport(sections_text(
        course="Course with an unsupported miracle cure <PROG_NOTE_1>.")))
    draft = engine.generate_initial_draft(case)
    engine.transport = constant_transport(sections_text(course="Course, plainly supported."))
    summary, _ = engine.verify_and_cite(case, draft)
    assert "miracle" not in summary.hospital_course
    assert summary.citations == ()


def test_verify_requires_refined_draft_when_notes_remain():
    case = case_with_progress(3)
    engine = make_engine(constant_transport(sections_text()))
    draft = engine.generate_initial_draft(case)
    with pytest.raises(InvariantViolation):
        engine.verify_and_cite(case, draft)


# --- full workflow -----------------------------------------------------------------------------

def workflow_transport():
    def reply(request, i):
        if "MOST RECENT PROGRESS NOTE" in request.user_prompt:
            return sections_text()
        if "PROGRESS NOTE" in request.user_prompt and "CURRENT BRIEF" in request.user_prompt:
            return sections_text(course="Course so far.")
        return sections_text(course="Verified course.")
    return FakeTransport(reply)


@pytest.mark.parametrize("n_progress,expected_calls", [(1, 2), (2, 3), (5, 6), (12, 13)])
def test_workflow_call_count_and_coverage(n_progress, expected_calls):
    case = case_with_progress(n_progress)
    engine = make_engine(workflow_transport())
    draft = engine.generate_initial_draft(case)
    progress = case.progress_notes()
    for k, n in enumerate(progress[:-1], start=1):
        draft = engine.refine_with_note(case, draft, n, k)
    summary, verified = engine.verify_and_cite(case, draft)
    assert summary.metrics.llm_calls == expected_calls
    assert summary.strategy is Strategy.MED_AGENT_BRIEF
    expected_notes = {"hp"} | {f"p{i}" for i in range(1, n_progress + 1)}
    assert set(verified.notes_consumed) == expected_notes
    assert len(verified.notes_consumed) == len(expected_notes)


def test_generate_agentbrief_wraps_the_steps():
    case = case_with_progress(3)
    engine = make_engine(workflow_transport())
    summary = engine.generate_agentbrief(case)
    assert summary.metrics.llm_calls == 4
    assert summary.summary_id == "c1-agent"


def test_metrics_accumulate_tokens_and_cost():
    prices = PriceTable.from_mapping({"gen-model": ("0.01", "0.02")})
    case = case_with_progress(2)
    engine = SummaryEngine(workflow_transport(), model_id="gen-model", prices=prices)
    summary = engine.generate_agentbrief(case)
    # 3 calls at 100 in / 40 out each
    assert summary.metrics.tokens_in == 300
    assert summary.metrics.tokens_out == 120
    assert summary.metrics.cost_usd == Decimal("0.005400")


# --- rendering round trip -----------------------------------------------------------------------

def test_render_and_reparse_recover_citation_map():
    case = case_with_progress(4)
    engine = make_engine(constant_transport(sections_text()))
    draft = engine.generate_initial_draft(case)
    for k in range(1, 4):
        draft = engine.refine_with_note(case, draft, case.note_by_id(f"p{k}"), k)
    engine.transport = constant_transport(sections_text(
        one="Done <PROG_NOTE_2>.",
        course="Improved <PROG_NOTE_1>. Stable <PROG_NOTE_4>.",
    ))
    summary, _ = engine.verify_and_cite(case, draft)
    rendered = render_with_references(summary)
    assert parse_references(rendered) == citation_map(summary)
    markers = parse_citation_markers(summary.body())
    assert set(markers) == set(citation_map(summary))


def test_note_block_carries_id_kind_and_timestamp():
    block = note_block(note("p1", hours=3))
    assert block.startswith("[NOTE p1 | Progress | 2024-03-01T11:00:00Z]")


def test_template_hashes_are_stable_sha256():
    hashes = template_hashes()
    assert set(hashes) == {"single_prompt", "initial_draft", "refine", "verify"}
    for h in hashes.values():
        assert len(h) == 64 and int(h, 16) >= 0
    assert template_hashes() == hashes
