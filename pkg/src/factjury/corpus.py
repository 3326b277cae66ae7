"""Domain data model and file-based persistence.

Record types cover the whole pipeline: clinical notes and cases on the way in,
key facts for the benchmark, generated summaries with their cost metrics, and
(registered from factjury.jury) judge verdicts and jury decisions.

On-disk layout
--------------
* ``corpus/<case_id>/manifest.json`` holds case metadata plus a note index;
  note text lives beside it in ``corpus/<case_id>/notes/<note_id>.txt``.
* ``benchmark/<case_id>.keyfacts.json`` holds a case's finalized key facts.
* Single records persist as one JSON document per file via ``save_record``;
  verdict streams persist as append-safe JSONL via ``append_record``.

Every persisted document embeds a schema version; loaders reject documents
whose major version differs. All timestamps are UTC (naive inputs are taken
as UTC).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional

from . import SCHEMA_VERSION
from .errors import (
    DuplicateNoteId,
    EmptyNoteText,
    InvariantViolation,
    MissingHistoryPhysical,
    SchemaVersionMismatch,
    UnparsableTimestamp,
)


# --- enums ---------------------------------------------------------------------

class NoteKind(str, Enum):
    HISTORY_PHYSICAL = "HistoryPhysical"
    PROGRESS = "Progress"
    DISCHARGE_SUMMARY = "DischargeSummary"


class AuthorClass(str, Enum):
    PHYSICIAN = "Physician"
    ALLIED_HEALTH = "AlliedHealth"


class Strategy(str, Enum):
    SINGLE_PROMPT = "SinglePrompt"
    MED_AGENT_BRIEF = "MedAgentBrief"


class FactCategory(str, Enum):
    DIAGNOSIS = "Diagnosis"
    MANAGEMENT_CHANGE = "ManagementChange"
    FOLLOW_UP = "FollowUp"
    OTHER = "Other"


class FactProvenance(str, Enum):
    CLINICIAN_AUTHORED = "ClinicianAuthored"
    LLM_SUGGESTED_ACCEPTED = "LlmSuggestedAccepted"
    LLM_SUGGESTED_EDITED = "LlmSuggestedEdited"


_KIND_RANK = {
    NoteKind.HISTORY_PHYSICAL: 0,
    NoteKind.PROGRESS: 1,
    NoteKind.DISCHARGE_SUMMARY: 2,
}


def _enum_value(enum_cls, raw, *, what: str, **context):
    try:
        return enum_cls(raw)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise InvariantViolation(
            f"{what} {raw!r} is not one of: {allowed}", **context
        ) from None


def parse_timestamp(raw: str, **context) -> datetime:
    """Parse an ISO-8601 timestamp; naive values are interpreted as UTC."""
    if not isinstance(raw, str) or not raw.strip():
        raise UnparsableTimestamp(f"timestamp {raw!r} is empty or not a string", **context)
    text = raw.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        raise UnparsableTimestamp(f"cannot parse timestamp {raw!r}", **context) from None
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


# --- domain records --------------------------------------------------------------

@dataclass(frozen=True)
class ClinicalNote:
    note_id: str
    case_id: str
    kind: NoteKind
    authored_at: datetime
    text: str
    # only meaningful for progress notes; admission and discharge documents
    # are physician-authored by definition
    author_class: AuthorClass = AuthorClass.PHYSICIAN

    def validate(self) -> None:
        if not self.note_id:
            raise InvariantViolation("note_id must be non-empty", case_id=self.case_id)
        if not self.text or not self.text.strip():
            raise EmptyNoteText(
                f"note {self.note_id} has empty text",
                note_id=self.note_id, case_id=self.case_id,
            )
        if self.authored_at.tzinfo is None:
            raise InvariantViolation(
                f"note {self.note_id} timestamp must be timezone-aware", note_id=self.note_id
            )


def sort_notes(notes: Iterable[ClinicalNote]) -> list[ClinicalNote]:
    """Canonical order: admission document, progress notes chronologically
    (ties broken by note_id ascending), discharge summary last."""
    return sorted(notes, key=lambda n: (_KIND_RANK[n.kind], n.authored_at, n.note_id))


@dataclass(frozen=True)
class PatientCase:
    case_id: str
    notes: tuple[ClinicalNote, ...]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_notes(cls, case_id: str, notes: Iterable[ClinicalNote], metadata: dict | None = None) -> "PatientCase":
        case = cls(case_id=case_id, notes=tuple(sort_notes(notes)), metadata=dict(metadata or {}))
        case.validate()
        return case

    def validate(self) -> None:
        if not self.case_id:
            raise InvariantViolation("case_id must be non-empty")
        seen: set[str] = set()
        for note in self.notes:
            note.validate()
            if note.case_id != self.case_id:
                raise InvariantViolation(
                    f"note {note.note_id} belongs to case {note.case_id}, not {self.case_id}",
                    note_id=note.note_id,
                )
            if note.note_id in seen:
                raise DuplicateNoteId(
                    f"note_id {note.note_id} appears more than once",
                    note_id=note.note_id, case_id=self.case_id,
                )
            seen.add(note.note_id)
        n_hp = sum(1 for n in self.notes if n.kind is NoteKind.HISTORY_PHYSICAL)
        if n_hp == 0:
            raise MissingHistoryPhysical(
                f"case {self.case_id} has no admission history and physical", case_id=self.case_id
            )
        if n_hp > 1:
            raise InvariantViolation(
                f"case {self.case_id} has {n_hp} history and physical notes, expected exactly 1",
                case_id=self.case_id,
            )
        n_ds = sum(1 for n in self.notes if n.kind is NoteKind.DISCHARGE_SUMMARY)
        if n_ds > 1:
            raise InvariantViolation(
                f"case {self.case_id} has {n_ds} discharge summaries, expected at most 1",
                case_id=self.case_id,
            )

    @property
    def history_physical(self) -> ClinicalNote:
        for n in self.notes:
            if n.kind is NoteKind.HISTORY_PHYSICAL:
                return n
        raise MissingHistoryPhysical(f"case {self.case_id} has no admission history and physical")

    @property
    def discharge_summary(self) -> Optional[ClinicalNote]:
        for n in self.notes:
            if n.kind is NoteKind.DISCHARGE_SUMMARY:
                return n
        return None

    def progress_notes(self, include_allied_health: bool = True) -> list[ClinicalNote]:
        return [
            n for n in self.notes
            if n.kind is NoteKind.PROGRESS
            and (include_allied_health or n.author_class is AuthorClass.PHYSICIAN)
        ]

    def note_by_id(self, note_id: str) -> ClinicalNote:
        for n in self.notes:
            if n.note_id == note_id:
                return n
        raise InvariantViolation(f"case {self.case_id} has no note {note_id}", note_id=note_id)


@dataclass(frozen=True)
class KeyFact:
    fact_id: str
    case_id: str
    text: str
    category: FactCategory
    provenance: FactProvenance

    def validate(self) -> None:
        if not self.fact_id or not self.case_id:
            raise InvariantViolation("fact_id and case_id must be non-empty")
        if not self.text or not self.text.strip():
            raise InvariantViolation(f"key fact {self.fact_id} has empty text", fact_id=self.fact_id)


@dataclass(frozen=True)
class GenerationMetrics:
    tokens_in: int
    tokens_out: int
    cost_usd: Decimal
    latency_s: Decimal
    llm_calls: int

    def validate(self) -> None:
        for name in ("tokens_in", "tokens_out", "llm_calls"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise InvariantViolation(f"{name} must be a nonnegative integer, got {v!r}")
        for name in ("cost_usd", "latency_s"):
            v = getattr(self, name)
            if not isinstance(v, Decimal) or v < 0:
                raise InvariantViolation(f"{name} must be a nonnegative Decimal, got {v!r}")

    @classmethod
    def zero(cls) -> "GenerationMetrics":
        return cls(tokens_in=0, tokens_out=0, cost_usd=Decimal("0"), latency_s=Decimal("0"), llm_calls=0)


@dataclass(frozen=True)
class GeneratedSummary:
    summary_id: str
    case_id: str
    strategy: Strategy
    model_id: str
    one_liner: str
    hospital_course: str
    problem_summary: str
    citations: tuple[tuple[str, str], ...]  # (tag, note_id), deduplicated, sorted
    metrics: GenerationMetrics

    def validate(self) -> None:
        if not self.summary_id or not self.case_id:
            raise InvariantViolation("summary_id and case_id must be non-empty")
        for name in ("one_liner", "hospital_course", "problem_summary"):
            if not getattr(self, name).strip():
                raise InvariantViolation(
                    f"summary {self.summary_id} section {name} is empty", summary_id=self.summary_id
                )
        for pair in self.citations:
            if len(pair) != 2 or not all(isinstance(x, str) and x for x in pair):
                raise InvariantViolation(
                    f"summary {self.summary_id} has malformed citation {pair!r}",
                    summary_id=self.summary_id,
                )
        self.metrics.validate()

    def body(self) -> str:
        return "\n\n".join((self.one_liner, self.hospital_course, self.problem_summary))


# --- ingestion --------------------------------------------------------------------

def ingest_case(directory_path: str | Path) -> PatientCase:
    """Build a validated PatientCase from ``<dir>/manifest.json`` plus
    ``<dir>/notes/<note_id>.txt`` files. Deterministic: re-ingestion of the
    same directory yields an identical case regardless of manifest order."""
    directory = Path(directory_path)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise InvariantViolation("case manifest not found", file=str(manifest_path))
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvariantViolation(f"case manifest is not valid JSON: {exc}",
                                 file=str(manifest_path)) from None
    _check_schema(doc, manifest_path)
    case_id = doc.get("case_id")
    if not case_id or not isinstance(case_id, str):
        raise InvariantViolation("manifest missing case_id", file=str(manifest_path))
    entries = doc.get("notes")
    if not isinstance(entries, list):
        raise InvariantViolation("manifest missing notes index", file=str(manifest_path))

    notes: list[ClinicalNote] = []
    seen: set[str] = set()
    for entry in entries:
        note_id = entry.get("note_id")
        if not note_id or not isinstance(note_id, str):
            raise InvariantViolation("note index entry missing note_id", file=str(manifest_path))
        if note_id in seen:
            raise DuplicateNoteId(
                f"note_id {note_id} listed more than once", file=str(manifest_path), note_id=note_id
            )
        seen.add(note_id)
        note_path = directory / "notes" / f"{note_id}.txt"
        if not note_path.is_file():
            raise InvariantViolation(f"note file for {note_id} not found", file=str(note_path))
        text = note_path.read_text(encoding="utf-8")
        if not text.strip():
            raise EmptyNoteText(f"note file for {note_id} is empty", file=str(note_path), note_id=note_id)
        kind = _enum_value(NoteKind, entry.get("kind"), what="note kind",
                           file=str(manifest_path), note_id=note_id)
        author_raw = entry.get("author_class", AuthorClass.PHYSICIAN.value)
        author = _enum_value(AuthorClass, author_raw, what="author class",
                             file=str(manifest_path), note_id=note_id)
        authored_at = parse_timestamp(entry.get("authored_at"), file=str(manifest_path), note_id=note_id)
        notes.append(ClinicalNote(
            note_id=note_id, case_id=case_id, kind=kind,
            authored_at=authored_at, text=text, author_class=author,
        ))

    metadata = doc.get("metadata") or {}
    if not isinstance(metadata, dict):
        raise InvariantViolation("manifest metadata must be an object", file=str(manifest_path))
    try:
        return PatientCase.from_notes(case_id, notes, metadata)
    except MissingHistoryPhysical:
        raise MissingHistoryPhysical(
            f"case {case_id} has no admission history and physical", file=str(manifest_path),
            case_id=case_id,
        ) from None


def save_case(case: PatientCase, directory_path: str | Path) -> Path:
    """Write a case back out in the corpus layout (manifest + note files)."""
    case.validate()
    directory = Path(directory_path)
    (directory / "notes").mkdir(parents=True, exist_ok=True)
    for note in case.notes:
        (directory / "notes" / f"{note.note_id}.txt").write_text(note.text, encoding="utf-8")
    doc = {
        "schema_version": SCHEMA_VERSION,
        "case_id": case.case_id,
        "metadata": case.metadata,
        "notes": [
            {
                "note_id": n.note_id,
                "kind": n.kind.value,
                "author_class": n.author_class.value,
                "authored_at": format_timestamp(n.authored_at),
            }
            for n in case.notes
        ],
    }
    manifest_path = directory / "manifest.json"
    _atomic_write_json(doc, manifest_path)
    return manifest_path


# --- generic persistence -----------------------------------------------------------

_ENCODERS: dict[type, tuple[str, Callable]] = {}
_DECODERS: dict[str, Callable] = {}


def register_record_type(name: str, cls: type, encode: Callable, decode: Callable) -> None:
    """Register a record type for save_record / load_record dispatch.

    ``encode(record) -> dict`` must emit JSON-safe fields; ``decode(payload,
    **context) -> record`` must validate and raise InvariantViolation on bad
    payloads (unknown enum values, missing fields).
    """
    _ENCODERS[cls] = (name, encode)
    _DECODERS[name] = decode


def _decimal_str(v: Decimal) -> str:
    return str(v)


def _parse_decimal(raw, *, what: str, **context) -> Decimal:
    try:
        d = Decimal(str(raw))
    except InvalidOperation:
        raise InvariantViolation(f"{what} {raw!r} is not a decimal number", **context) from None
    return d


def _encode_note(n: ClinicalNote) -> dict:
    return {
        "note_id": n.note_id,
        "case_id": n.case_id,
        "kind": n.kind.value,
        "author_class": n.author_class.value,
        "authored_at": format_timestamp(n.authored_at),
        "text": n.text,
    }


def _decode_note(p: dict, **context) -> ClinicalNote:
    note = ClinicalNote(
        note_id=_require(p, "note_id", **context),
        case_id=_require(p, "case_id", **context),
        kind=_enum_value(NoteKind, _require(p, "kind", **context), what="note kind", **context),
        author_class=_enum_value(AuthorClass, p.get("author_class", AuthorClass.PHYSICIAN.value),
                                 what="author class", **context),
        authored_at=parse_timestamp(_require(p, "authored_at", **context), **context),
        text=_require(p, "text", **context),
    )
    note.validate()
    return note


def _encode_case(c: PatientCase) -> dict:
    return {
        "case_id": c.case_id,
        "metadata": c.metadata,
        "notes": [_encode_note(n) for n in c.notes],
    }


def _decode_case(p: dict, **context) -> PatientCase:
    notes = [_decode_note(n, **context) for n in _require(p, "notes", **context)]
    return PatientCase.from_notes(_require(p, "case_id", **context), notes,
                                  p.get("metadata") or {})


def _encode_fact(f: KeyFact) -> dict:
    return {
        "fact_id": f.fact_id,
        "case_id": f.case_id,
        "text": f.text,
        "category": f.category.value,
        "provenance": f.provenance.value,
    }


def _decode_fact(p: dict, **context) -> KeyFact:
    fact = KeyFact(
        fact_id=_require(p, "fact_id", **context),
        case_id=_require(p, "case_id", **context),
        text=_require(p, "text", **context),
        category=_enum_value(FactCategory, _require(p, "category", **context),
                             what="fact category", **context),
        provenance=_enum_value(FactProvenance, _require(p, "provenance", **context),
                               what="fact provenance", **context),
    )
    fact.validate()
    return fact


def _encode_metrics(m: GenerationMetrics) -> dict:
    return {
        "tokens_in": m.tokens_in,
        "tokens_out": m.tokens_out,
        "cost_usd": _decimal_str(m.cost_usd),
        "latency_s": _decimal_str(m.latency_s),
        "llm_calls": m.llm_calls,
    }


def _decode_metrics(p: dict, **context) -> GenerationMetrics:
    m = GenerationMetrics(
        tokens_in=_require(p, "tokens_in", **context),
        tokens_out=_require(p, "tokens_out", **context),
        cost_usd=_parse_decimal(_require(p, "cost_usd", **context), what="cost_usd", **context),
        latency_s=_parse_decimal(_require(p, "latency_s", **context), what="latency_s", **context),
        llm_calls=_require(p, "llm_calls", **context),
    )
    m.validate()
    return m


def _encode_summary(s: GeneratedSummary) -> dict:
    return {
        "summary_id": s.summary_id,
        "case_id": s.case_id,
        "strategy": s.strategy.value,
        "model_id": s.model_id,
        "one_liner": s.one_liner,
        "hospital_course": s.hospital_course,
        "problem_summary": s.problem_summary,
        "citations": [list(pair) for pair in s.citations],
        "metrics": _encode_metrics(s.metrics),
    }


def _decode_summary(p: dict, **context) -> GeneratedSummary:
    raw_citations = p.get("citations", [])
    if not isinstance(raw_citations, list):
        raise InvariantViolation("citations must be a list", **context)
    summary = GeneratedSummary(
        summary_id=_require(p, "summary_id", **context),
        case_id=_require(p, "case_id", **context),
        strategy=_enum_value(Strategy, _require(p, "strategy", **context),
                             what="strategy", **context),
        model_id=_require(p, "model_id", **context),
        one_liner=_require(p, "one_liner", **context),
        hospital_course=_require(p, "hospital_course", **context),
        problem_summary=_require(p, "problem_summary", **context),
        citations=tuple((str(a), str(b)) for a, b in raw_citations),
        metrics=_decode_metrics(_require(p, "metrics", **context), **context),
    )
    summary.validate()
    return summary


def _require(payload: dict, key: str, **context):
    if key not in payload:
        raise InvariantViolation(f"record missing required field {key!r}", **context)
    return payload[key]


register_record_type("clinical_note", ClinicalNote, _encode_note, _decode_note)
register_record_type("patient_case", PatientCase, _encode_case, _decode_case)
register_record_type("key_fact", KeyFact, _encode_fact, _decode_fact)
register_record_type("generation_metrics", GenerationMetrics, _encode_metrics, _decode_metrics)
register_record_type("generated_summary", GeneratedSummary, _encode_summary, _decode_summary)


def _check_schema(doc: dict, path) -> None:
    raw = doc.get("schema_version")
    if not isinstance(raw, str):
        raise SchemaVersionMismatch("document has no schema_version", file=str(path))
    major = raw.split(".", 1)[0]
    expected = SCHEMA_VERSION.split(".", 1)[0]
    if major != expected:
        raise SchemaVersionMismatch(
            f"schema version {raw} not supported (expected major {expected})",
            file=str(path), found=raw,
        )


def _record_envelope(record) -> dict:
    try:
        name, encode = _ENCODERS[type(record)]
    except KeyError:
        raise InvariantViolation(f"unregistered record type {type(record).__name__}") from None
    if hasattr(record, "validate"):
        record.validate()
    return {"schema_version": SCHEMA_VERSION, "record_type": name, **encode(record)}


def _decode_envelope(doc: dict, path) -> object:
    _check_schema(doc, path)
    name = doc.get("record_type")
    decode = _DECODERS.get(name)
    if decode is None:
        raise InvariantViolation(f"unknown record type {name!r}", file=str(path))
    return decode(doc, file=str(path))


def _atomic_write_json(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def save_record(record, path: str | Path) -> Path:
    """Persist one domain record as a single JSON document."""
    path = Path(path)
    _atomic_write_json(_record_envelope(record), path)
    return path


def load_record(path: str | Path):
    """Load a record persisted by save_record; validates schema and invariants."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvariantViolation(f"file is not valid JSON: {exc}", file=str(path)) from None
    if not isinstance(doc, dict):
        raise InvariantViolation("expected a JSON object at top level", file=str(path))
    return _decode_envelope(doc, path)


def append_record(record, path: str | Path) -> None:
    """Append one record as a JSONL line (used for verdict streams)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(_record_envelope(record), sort_keys=False)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def load_records(path: str | Path) -> list:
    """Load a JSONL stream in write order; blank lines are skipped."""
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvariantViolation(
                    f"line {lineno} is not valid JSON: {exc}", file=str(path), line=lineno
                ) from None
            out.append(_decode_envelope(doc, path))
    return out


# --- key fact files ---------------------------------------------------------------

def save_keyfacts(case_id: str, facts: Iterable[KeyFact], path: str | Path) -> Path:
    """Write a case's finalized key facts as benchmark/<case_id>.keyfacts.json."""
    facts = list(facts)
    for f in facts:
        f.validate()
        if f.case_id != case_id:
            raise InvariantViolation(
                f"fact {f.fact_id} belongs to case {f.case_id}, not {case_id}", fact_id=f.fact_id
            )
    doc = {
        "schema_version": SCHEMA_VERSION,
        "case_id": case_id,
        "facts": [_encode_fact(f) for f in facts],
    }
    path = Path(path)
    _atomic_write_json(doc, path)
    return path


def load_keyfacts(path: str | Path) -> list[KeyFact]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvariantViolation(f"file is not valid JSON: {exc}", file=str(path)) from None
    _check_schema(doc, path)
    return [_decode_fact(p, file=str(path)) for p in doc.get("facts", [])]


__all__ = [
    "NoteKind", "AuthorClass", "Strategy", "FactCategory", "FactProvenance",
    "ClinicalNote", "PatientCase", "KeyFact", "GenerationMetrics", "GeneratedSummary",
    "parse_timestamp", "format_timestamp", "sort_notes",
    "ingest_case", "save_case",
    "register_record_type", "save_record", "load_record", "append_record", "load_records",
    "save_keyfacts", "load_keyfacts",
]
