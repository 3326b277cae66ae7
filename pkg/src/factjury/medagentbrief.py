"""Summary generation engine.

Two strategies produce the same three-section discharge brief:

* single-prompt: every source note goes into one generation call;
* agent workflow: a first-pass draft from the admission document plus the
  most recent progress note, then one refinement call per remaining progress
  note in chronological order (each tagging its additions with
  ``<PROG_NOTE_k>`` markers, k = the note's 1-based chronological index),
  then one verification call that strikes unsupported claims. Markers are
  finally resolved against the case's progress notes into a citation list
  and rendered as bracketed ``[k]`` markers.

The physician-written discharge summary is never fed to generation; it is the
reference the benchmark is built from. One engine instance drives one summary
at a time (its call accounting resets when a new summary starts); run separate
engine instances to generate cases in parallel.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, replace
from decimal import Decimal
from enum import Enum
from importlib import resources
from typing import Callable, Optional

from .corpus import (
    ClinicalNote,
    GeneratedSummary,
    GenerationMetrics,
    PatientCase,
    Strategy,
    format_timestamp,
)
from .errors import (
    ContextOverflow,
    InvalidTagIndex,
    InvariantViolation,
    SectionParseError,
)
from .provider import (
    GENERATION_TEMPERATURE,
    ChatRequest,
    ChatResponse,
    PriceTable,
    estimate_cost,
)

SYSTEM_GENERATE = (
    "You are a careful clinical summarization assistant writing for physicians. "
    "Work only from the documents you are given and follow the requested format exactly."
)

SECTION_HEADERS = ("## ONE-LINER", "## HOSPITAL COURSE", "## PROBLEM SUMMARY")

_SECTION_REPROMPT = (
    "\n\nYour previous reply could not be parsed. Reply again with exactly three "
    "sections introduced by the header lines '## ONE-LINER', '## HOSPITAL COURSE' "
    "and '## PROBLEM SUMMARY', in that order, each with non-empty content."
)

TAG_STEM = "PROG_NOTE"
_EXACT_TAG = re.compile(r"<PROG_NOTE_([1-9][0-9]*)>")
# near-misses worth flagging: wrong case, zero padding, stray spacing or dashes
_TAG_LOOKALIKE = re.compile(r"<\s*[Pp][Rr][Oo][Gg][\s_\-]*[Nn][Oo][Tt][Ee][\s_\-]*([0-9]+)\s*>")
_CITATION_MARKER = re.compile(r"\[([1-9][0-9]*)\]")


# --- provenance tags ---------------------------------------------------------------

@dataclass(frozen=True)
class ProvenanceTag:
    raw: str
    index: int
    span: tuple[int, int]


@dataclass(frozen=True)
class TagDiagnostic:
    raw: str
    span: tuple[int, int]
    reason: str


@dataclass(frozen=True)
class TagScan:
    tags: tuple[ProvenanceTag, ...]
    diagnostics: tuple[TagDiagnostic, ...]


def parse_provenance_tags(text: str) -> TagScan:
    """Scan text left to right for grammar-exact ``<PROG_NOTE_k>`` markers
    (angle brackets, upper-case stem, single underscores, decimal k >= 1 with
    no leading zeros). Near-miss spellings are never matched as tags; they
    come back as diagnostics instead."""
    tags: list[ProvenanceTag] = []
    diagnostics: list[TagDiagnostic] = []
    for m in _TAG_LOOKALIKE.finditer(text):
        raw = m.group(0)
        if _EXACT_TAG.fullmatch(raw):
            tags.append(ProvenanceTag(raw=raw, index=int(m.group(1)), span=m.span()))
        else:
            diagnostics.append(TagDiagnostic(
                raw=raw, span=m.span(),
                reason="does not match the exact marker grammar <PROG_NOTE_k>",
            ))
    return TagScan(tags=tuple(tags), diagnostics=tuple(diagnostics))


def parse_citation_markers(text: str) -> list[int]:
    """All bracketed citation indices in rendered text, left to right."""
    return [int(m.group(1)) for m in _CITATION_MARKER.finditer(text)]


# --- drafts ---------------------------------------------------------------------------

class DraftStep(str, Enum):
    INITIAL = "Initial"
    REFINED = "Refined"
    VERIFIED = "Verified"


@dataclass(frozen=True)
class DraftSummary:
    one_liner: str
    hospital_course: str
    problem_summary: str
    notes_consumed: tuple[str, ...]
    step: DraftStep

    def text(self) -> str:
        return (
            f"{SECTION_HEADERS[0]}\n{self.one_liner}\n\n"
            f"{SECTION_HEADERS[1]}\n{self.hospital_course}\n\n"
            f"{SECTION_HEADERS[2]}\n{self.problem_summary}"
        )


def split_sections(text: str) -> tuple[str, str, str]:
    """Split a model reply on the three required header lines, in order.
    Raises SectionParseError when a header is missing, duplicated, out of
    order, or introduces an empty section."""
    positions = []
    for header in SECTION_HEADERS:
        pattern = re.compile(rf"^{re.escape(header)}[ \t]*$", re.MULTILINE)
        matches = list(pattern.finditer(text))
        if len(matches) != 1:
            raise SectionParseError(
                f"expected exactly one {header!r} header, found {len(matches)}", header=header
            )
        positions.append(matches[0])
    starts = [m.start() for m in positions]
    if starts != sorted(starts):
        raise SectionParseError("section headers out of order")
    bounds = starts[1:] + [len(text)]
    sections = []
    for m, end in zip(positions, bounds):
        body = text[m.end():end].strip()
        if not body:
            raise SectionParseError(f"section {m.group(0).strip()!r} is empty", header=m.group(0).strip())
        sections.append(body)
    return tuple(sections)  # type: ignore[return-value]


# --- prompt templates --------------------------------------------------------------------

def _template(name: str) -> str:
    return (resources.files("factjury") / "prompts" / f"{name}.txt").read_text(encoding="utf-8")


def template_hashes() -> dict[str, str]:
    """SHA-256 of each prompt template, for run manifests."""
    out = {}
    for name in ("single_prompt", "initial_draft", "refine", "verify"):
        raw = (resources.files("factjury") / "prompts" / f"{name}.txt").read_bytes()
        out[name] = hashlib.sha256(raw).hexdigest()
    return out


def _render(name: str, mapping: dict[str, str]) -> str:
    text = _template(name)
    for key, value in mapping.items():
        text = text.replace("{{" + key + "}}", value)
    if "{{" in text:
        leftover = text[text.index("{{"): text.index("{{") + 40]
        raise InvariantViolation(f"unfilled template placeholder near {leftover!r}", template=name)
    return text


def note_block(note: ClinicalNote) -> str:
    stamp = format_timestamp(note.authored_at)
    return f"[NOTE {note.note_id} | {note.kind.value} | {stamp}]\n{note.text.strip()}"


# --- engine -----------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkflowConfig:
    include_allied_health: bool = True
    context_budget_chars: int = 400_000
    max_output_tokens: int = 1600
    temperature: float = GENERATION_TEMPERATURE


class SummaryEngine:
    """Drives both generation strategies over a transport callable
    (``ChatRequest -> ChatResponse``, e.g. ``ProviderRouter.complete``)."""

    def __init__(
        self,
        transport: Callable[[ChatRequest], ChatResponse],
        model_id: str,
        prices: Optional[PriceTable] = None,
        config: WorkflowConfig = WorkflowConfig(),
    ):
        self.transport = transport
        self.model_id = model_id
        self.prices = prices
        self.config = config
        self._responses: list[ChatResponse] = []

    # -- plumbing --

    def _begin(self) -> None:
        self._responses = []

    def _call(self, user_prompt: str) -> ChatResponse:
        if len(user_prompt) > self.config.context_budget_chars:
            raise ContextOverflow(
                f"prompt of {len(user_prompt)} chars exceeds the configured budget",
                prompt_chars=len(user_prompt),
                budget_chars=self.config.context_budget_chars,
                model_id=self.model_id,
            )
        request = ChatRequest(
            model_id=self.model_id,
            system_prompt=SYSTEM_GENERATE,
            user_prompt=user_prompt,
            max_output_tokens=self.config.max_output_tokens,
            temperature=self.config.temperature,
        )
        response = self.transport(request)
        self._responses.append(response)
        return response

    def _checked_sections(self, text: str, n_progress: Optional[int]) -> tuple[str, str, str]:
        sections = split_sections(text)
        if n_progress is not None:
            for body in sections:
                for tag in parse_provenance_tags(body).tags:
                    if tag.index > n_progress:
                        raise InvalidTagIndex(
                            f"marker {tag.raw} exceeds the {n_progress} progress notes available",
                            tag=tag.raw, index=tag.index, n_progress=n_progress,
                        )
        return sections

    def _generate_sections(self, user_prompt: str, n_progress: Optional[int] = None) -> tuple[str, str, str]:
        # one corrective reprompt per failure class, then the error stands
        response = self._call(user_prompt)
        try:
            return self._checked_sections(response.text, n_progress)
        except SectionParseError:
            retry = self._call(user_prompt + _SECTION_REPROMPT)
            return self._checked_sections(retry.text, n_progress)
        except InvalidTagIndex:
            suffix = (
                f"\n\nYour previous reply used a provenance marker with an index "
                f"greater than {n_progress}. Only markers <PROG_NOTE_1> through "
                f"<PROG_NOTE_{n_progress}> are valid. Reply again."
            )
            retry = self._call(user_prompt + suffix)
            return self._checked_sections(retry.text, n_progress)

    def _source_notes(self, case: PatientCase) -> list[ClinicalNote]:
        # everything except the human-written discharge summary, which is the
        # reference the benchmark scores against
        return [case.history_physical] + case.progress_notes(self.config.include_allied_health)

    def _metrics(self) -> GenerationMetrics:
        rs = self._responses
        cost = estimate_cost(rs, self.prices) if self.prices is not None else Decimal("0")
        return GenerationMetrics(
            tokens_in=sum(r.tokens_in for r in rs),
            tokens_out=sum(r.tokens_out for r in rs),
            cost_usd=cost,
            latency_s=sum((r.latency_s for r in rs), Decimal(0)),
            llm_calls=len(rs),
        )

    # -- strategy 1: single prompt --

    def single_prompt_generate(self, case: PatientCase, summary_id: Optional[str] = None) -> GeneratedSummary:
        case.validate()
        notes = self._source_notes(case)
        user = _render("single_prompt", {"all_notes": "\n\n".join(note_block(n) for n in notes)})
        self._begin()
        one, course, problems = self._generate_sections(user)
        summary = GeneratedSummary(
            summary_id=summary_id or f"{case.case_id}-single",
            case_id=case.case_id,
            strategy=Strategy.SINGLE_PROMPT,
            model_id=self.model_id,
            one_liner=one,
            hospital_course=course,
            problem_summary=problems,
            citations=(),
            metrics=self._metrics(),
        )
        summary.validate()
        return summary

    # -- strategy 2: stepwise workflow --

    def generate_initial_draft(self, case: PatientCase) -> DraftSummary:
        case.validate()
        progress = case.progress_notes(self.config.include_allied_health)
        if not progress:
            raise InvariantViolation(
                f"case {case.case_id} has no progress notes; the stepwise workflow needs at least one",
                case_id=case.case_id,
            )
        hp = case.history_physical
        final = progress[-1]
        user = _render("initial_draft", {
            "hp_note": note_block(hp),
            "final_note": note_block(final),
        })
        self._begin()
        one, course, problems = self._generate_sections(user)
        return DraftSummary(
            one_liner=one, hospital_course=course, problem_summary=problems,
            notes_consumed=(hp.note_id, final.note_id), step=DraftStep.INITIAL,
        )

    def refine_with_note(self, case: PatientCase, draft: DraftSummary,
                         note: ClinicalNote, k: int) -> DraftSummary:
        if draft.step is DraftStep.VERIFIED:
            raise InvariantViolation("cannot refine a verified draft")
        if note.note_id in draft.notes_consumed:
            raise InvariantViolation(
                f"note {note.note_id} was already integrated into this draft", note_id=note.note_id
            )
        progress = case.progress_notes(self.config.include_allied_health)
        if not (1 <= k <= len(progress)) or progress[k - 1].note_id != note.note_id:
            raise InvariantViolation(
                f"note {note.note_id} is not progress note number {k} of case {case.case_id}",
                note_id=note.note_id, k=k,
            )
        user = _render("refine", {
            "draft": draft.text(),
            "note": note_block(note),
            "note_index": str(k),
        })
        one, course, problems = self._generate_sections(user, n_progress=len(progress))
        return DraftSummary(
            one_liner=one, hospital_course=course, problem_summary=problems,
            notes_consumed=draft.notes_consumed + (note.note_id,), step=DraftStep.REFINED,
        )

    def verify_and_cite(self, case: PatientCase, draft: DraftSummary,
                        summary_id: Optional[str] = None) -> GeneratedSummary:
        progress = case.progress_notes(self.config.include_allied_health)
        if draft.step is DraftStep.VERIFIED:
            raise InvariantViolation("draft was already verified")
        if draft.step is DraftStep.INITIAL and len(progress) > 1:
            raise InvariantViolation(
                "draft must be refined with every remaining progress note before verification",
                consumed=len(draft.notes_consumed), n_progress=len(progress),
            )
        notes = self._source_notes(case)
        user = _render("verify", {
            "draft": draft.text(),
            "all_notes": "\n\n".join(note_block(n) for n in notes),
        })
        sections = self._generate_sections(user, n_progress=len(progress))
        verified = replace(
            draft, one_liner=sections[0], hospital_course=sections[1],
            problem_summary=sections[2], step=DraftStep.VERIFIED,
        )

        indices: list[int] = []
        for body in sections:
            for tag in parse_provenance_tags(body).tags:
                if tag.index not in indices:
                    indices.append(tag.index)
        citations = tuple(
            (f"{TAG_STEM}_{k}", progress[k - 1].note_id) for k in sorted(indices)
        )
        rendered = [_EXACT_TAG.sub(lambda m: f"[{m.group(1)}]", body) for body in sections]

        summary = GeneratedSummary(
            summary_id=summary_id or f"{case.case_id}-agent",
            case_id=case.case_id,
            strategy=Strategy.MED_AGENT_BRIEF,
            model_id=self.model_id,
            one_liner=rendered[0],
            hospital_course=rendered[1],
            problem_summary=rendered[2],
            citations=citations,
            metrics=self._metrics(),
        )
        summary.validate()
        for _, note_id in summary.citations:
            case.note_by_id(note_id)  # resolution must land on a real note
        return summary, verified

    def generate_agentbrief(self, case: PatientCase, summary_id: Optional[str] = None) -> GeneratedSummary:
        """Full stepwise run: initial draft, one refinement per remaining
        progress note in chronological order, then verification."""
        progress = case.progress_notes(self.config.include_allied_health)
        draft = self.generate_initial_draft(case)
        for k, note in enumerate(progress[:-1], start=1):
            draft = self.refine_with_note(case, draft, note, k)
        summary, _ = self.verify_and_cite(case, draft, summary_id=summary_id)
        return summary


# --- rendering ------------------------------------------------------------------------

def citation_map(summary: GeneratedSummary) -> dict[int, str]:
    """Citation list as {marker index: note_id}."""
    out: dict[int, str] = {}
    for tag, note_id in summary.citations:
        out[int(tag.rsplit("_", 1)[1])] = note_id
    return out


def render_with_references(summary: GeneratedSummary) -> str:
    """Plain-text rendering: the three sections followed by a references
    section mapping each bracketed marker to its source note id."""
    parts = [
        f"{SECTION_HEADERS[0]}\n{summary.one_liner}",
        f"{SECTION_HEADERS[1]}\n{summary.hospital_course}",
        f"{SECTION_HEADERS[2]}\n{summary.problem_summary}",
    ]
    cmap = citation_map(summary)
    if cmap:
        lines = [f"[{k}] {cmap[k]}" for k in sorted(cmap)]
        parts.append("## REFERENCES\n" + "\n".join(lines))
    return "\n\n".join(parts)


def parse_references(rendered: str) -> dict[int, str]:
    """Inverse of render_with_references for the references section."""
    m = re.search(r"^## REFERENCES$", rendered, re.MULTILINE)
    if m is None:
        return {}
    out: dict[int, str] = {}
    for line in rendered[m.end():].strip().splitlines():
        ref = re.fullmatch(r"\[([1-9][0-9]*)\] (\S+)", line.strip())
        if ref:
            out[int(ref.group(1))] = ref.group(2)
    return out


__all__ = [
    "SYSTEM_GENERATE", "SECTION_HEADERS", "TAG_STEM",
    "ProvenanceTag", "TagDiagnostic", "TagScan", "parse_provenance_tags",
    "parse_citation_markers", "DraftStep", "DraftSummary", "split_sections",
    "WorkflowConfig", "SummaryEngine", "template_hashes", "note_block",
    "citation_map", "render_with_references", "parse_references",
]
