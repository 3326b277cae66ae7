"""Key-fact benchmark authoring.

An assistant model proposes candidate facts from the human-written
discharge summary; an annotator accepts, edits, or discards them (or
authors facts from scratch). A finalized case carries exactly three
facts. Curation is driven either by the interactive terminal flow or by
a scripted decision file, and the same inputs always yield the same
benchmark.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_EVEN, Decimal
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from .corpus import FactCategory, FactProvenance, KeyFact, save_keyfacts
from .errors import (
    EmptyFactText,
    FinalizationArityError,
    InvariantViolation,
    MalformedAssistantOutput,
)
from .provider import GENERATION_TEMPERATURE, ChatRequest, ChatResponse

MAX_FACT_CHARS = 500
FINAL_FACTS_PER_CASE = 3

SYSTEM_SUGGEST = (
    "You are a meticulous clinical annotator helping build a benchmark of "
    "key facts from hospital discharge summaries. You reply only in the "
    "exact JSON shape requested."
)

_SUGGEST_REPROMPT = (
    "\n\nYour previous reply could not be used. Respond with ONLY a JSON "
    "list of exactly {n} objects of the form "
    '{{"text": "...", "category": "..."}} and no surrounding prose.'
)

_FENCE = re.compile(r"^\s*```[a-zA-Z]*\s*\n(.*)\n\s*```\s*$", re.DOTALL)


@dataclass(frozen=True)
class CandidateFact:
    """A fact proposed by the assistant, pending human review."""

    text: str
    suggested_category: FactCategory
    source_model: str

    def validate(self) -> None:
        if not self.text or not self.text.strip():
            raise InvariantViolation("candidate fact text is empty")
        if len(self.text) > MAX_FACT_CHARS:
            raise InvariantViolation(
                f"candidate fact is {len(self.text)} characters; "
                f"limit is {MAX_FACT_CHARS}",
                length=len(self.text),
            )


def _suggest_prompt(reference_summary: str, n: int) -> str:
    text = resources.files("factjury.prompts").joinpath("suggest_facts.txt").read_text()
    text = text.replace("{{n}}", str(n))
    text = text.replace("{{reference_summary}}", reference_summary)
    if "{{" in text:
        raise InvariantViolation("unfilled placeholder in suggestion prompt")
    return text


def _parse_candidates(text: str, n: int, assistant: str) -> list[CandidateFact] | None:
    """Strict parse of the assistant reply; None means reprompt-worthy."""
    body = text.strip()
    fenced = _FENCE.match(body)
    if fenced:
        body = fenced.group(1).strip()
    try:
        data = json.loads(body)
    except json.JSONDecodeError:
        return None
    if not isinstance(data, list) or len(data) != n:
        return None
    out: list[CandidateFact] = []
    for entry in data:
        if not isinstance(entry, dict):
            return None
        if "text" not in entry or "category" not in entry:
            return None
        if not isinstance(entry["text"], str):
            return None
        try:
            category = FactCategory(entry["category"])
        except ValueError:
            return None
        candidate = CandidateFact(
            text=entry["text"], suggested_category=category, source_model=assistant
        )
        try:
            candidate.validate()
        except InvariantViolation:
            return None
        out.append(candidate)
    return out


def build_suggest_request(reference_summary: str, assistant: str, n: int = 3) -> ChatRequest:
    """The exact request suggest_key_facts sends first; pure, for replay scripting."""
    if not reference_summary or not reference_summary.strip():
        raise InvariantViolation("reference summary is empty")
    return ChatRequest(
        model_id=assistant,
        system_prompt=SYSTEM_SUGGEST,
        user_prompt=_suggest_prompt(reference_summary, n),
        max_output_tokens=800,
        temperature=GENERATION_TEMPERATURE,
    )


def suggest_key_facts(
    reference_summary: str,
    assistant: str,
    transport: Callable[[ChatRequest], ChatResponse],
    n: int = 3,
) -> list[CandidateFact]:
    """Ask the assistant for n candidate facts; one corrective retry."""
    request = build_suggest_request(reference_summary, assistant, n)
    prompt = request.user_prompt
    response = transport(request)
    parsed = _parse_candidates(response.text, n, assistant)
    if parsed is not None:
        return parsed
    retry = replace(request, user_prompt=prompt + _SUGGEST_REPROMPT.format(n=n))
    response = transport(retry)
    parsed = _parse_candidates(response.text, n, assistant)
    if parsed is None:
        raise MalformedAssistantOutput(
            f"assistant {assistant} did not return {n} well-formed candidates "
            "after one retry",
            model_id=assistant,
            response_head=response.text[:200],
        )
    return parsed


# --- curation ---------------------------------------------------------------

_ACTIONS = ("accept", "edit", "discard", "author")


@dataclass(frozen=True)
class CurationAction:
    """One annotator step. Candidate indices are 1-based, as displayed."""

    action: str
    index: int | None = None
    text: str | None = None
    category: FactCategory | None = None

    def validate(self) -> None:
        if self.action not in _ACTIONS:
            raise InvariantViolation(f"unknown curation action {self.action!r}")
        if self.action in ("accept", "edit", "discard") and self.index is None:
            raise InvariantViolation(f"{self.action} requires a candidate index")
        if self.action in ("edit", "author") and self.text is None:
            raise InvariantViolation(f"{self.action} requires replacement text")


def load_decision_file(path: Path | str) -> list[CurationAction]:
    """Scripted curation: JSON list of {action, index?, text?, category?}."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise InvariantViolation(f"{path}: decision file must be a JSON list")
    actions = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict) or "action" not in entry:
            raise InvariantViolation(f"{path}: entry {i} is not an action object")
        category = entry.get("category")
        if category is not None:
            try:
                category = FactCategory(category)
            except ValueError:
                raise InvariantViolation(
                    f"{path}: entry {i} has unknown category {category!r}"
                ) from None
        action = CurationAction(
            action=entry["action"],
            index=entry.get("index"),
            text=entry.get("text"),
            category=category,
        )
        action.validate()
        actions.append(action)
    return actions


def curate(
    case_id: str,
    candidates: Sequence[CandidateFact],
    actions: Sequence[CurationAction],
) -> list[KeyFact]:
    """Apply annotator actions to the candidate list.

    Accepted and edited candidates become KeyFacts; an edit whose text is
    byte-identical to the suggestion still counts as accepted. Candidates
    never referenced by any action are implicitly discarded. Fact ids are
    assigned in kept order, so the same inputs replay to the same facts.
    """
    for candidate in candidates:
        candidate.validate()
    consumed = [False] * len(candidates)
    rows: list[tuple[str, FactCategory, FactProvenance]] = []
    for action in actions:
        action.validate()
        if action.action == "author":
            if not action.text or not action.text.strip():
                raise EmptyFactText("authored fact has empty text")
            rows.append((
                action.text,
                action.category or FactCategory.OTHER,
                FactProvenance.CLINICIAN_AUTHORED,
            ))
            continue
        pos = action.index - 1
        if pos < 0 or pos >= len(candidates):
            raise InvariantViolation(
                f"candidate index {action.index} out of range 1..{len(candidates)}"
            )
        if consumed[pos]:
            raise InvariantViolation(f"candidate {action.index} already resolved")
        consumed[pos] = True
        candidate = candidates[pos]
        if action.action == "discard":
            continue
        if action.action == "accept":
            rows.append((
                candidate.text,
                candidate.suggested_category,
                FactProvenance.LLM_SUGGESTED_ACCEPTED,
            ))
        else:  # edit
            if not action.text.strip():
                raise EmptyFactText(f"edit of candidate {action.index} has empty text")
            provenance = (
                FactProvenance.LLM_SUGGESTED_EDITED
                if action.text != candidate.text
                else FactProvenance.LLM_SUGGESTED_ACCEPTED
            )
            rows.append((
                action.text,
                action.category or candidate.suggested_category,
                provenance,
            ))
    facts = [
        KeyFact(
            fact_id=f"{case_id}-k{i}",
            case_id=case_id,
            text=text,
            category=category,
            provenance=provenance,
        )
        for i, (text, category, provenance) in enumerate(rows, start=1)
    ]
    for fact in facts:
        fact.validate()
    return facts


def finalize_benchmark(case_id: str, facts: Sequence[KeyFact], path: Path | str) -> None:
    """Persist a case's facts, refusing any arity other than 3."""
    if len(facts) != FINAL_FACTS_PER_CASE:
        raise FinalizationArityError(
            f"case {case_id} has {len(facts)} facts; "
            f"exactly {FINAL_FACTS_PER_CASE} required",
            case_id=case_id,
            n_facts=len(facts),
        )
    save_keyfacts(case_id, facts, path)


def interactive_actions(
    candidates: Sequence[CandidateFact],
    input_fn: Callable[[str], str] = input,
    print_fn: Callable[[str], None] = print,
) -> list[CurationAction]:
    """Terminal review loop; returns the action stream it collected."""
    actions: list[CurationAction] = []
    for i, candidate in enumerate(candidates, start=1):
        print_fn(f"[{i}] ({candidate.suggested_category.value}) {candidate.text}")
        while True:
            choice = input_fn("  accept/edit/discard [a/e/d]: ").strip().lower()
            if choice in ("a", "accept"):
                actions.append(CurationAction("accept", index=i))
                break
            if choice in ("e", "edit"):
                text = input_fn("  edited text: ")
                actions.append(CurationAction("edit", index=i, text=text))
                break
            if choice in ("d", "discard"):
                actions.append(CurationAction("discard", index=i))
                break
            print_fn("  unrecognized choice")
    names = "/".join(c.value for c in FactCategory)
    while True:
        text = input_fn("author a fact from scratch (empty line to finish): ").strip()
        if not text:
            break
        raw = input_fn(f"  category ({names}) [Other]: ").strip()
        category = FactCategory(raw) if raw else FactCategory.OTHER
        actions.append(CurationAction("author", text=text, category=category))
    return actions


# --- census -------------------------------------------------------------------

@dataclass
class CategoryCensus:
    counts: dict[FactCategory, int]
    percentages: dict[FactCategory, int]
    total: int


def census(facts: Sequence[KeyFact]) -> CategoryCensus:
    """Per-category counts and integer percentage shares (half-even)."""
    counts = {category: 0 for category in FactCategory}
    for fact in facts:
        counts[fact.category] += 1
    total = len(facts)
    percentages = {}
    for category, count in counts.items():
        if total == 0:
            percentages[category] = 0
        else:
            share = (Decimal(100) * Decimal(count) / Decimal(total)).quantize(
                Decimal("1"), rounding=ROUND_HALF_EVEN
            )
            percentages[category] = int(share)
    return CategoryCensus(counts=counts, percentages=percentages, total=total)
