"""Multi-judge evaluation of generated summaries against key facts.

Every (summary, fact) pair goes to each judge on two dimensions:

* presence: does the summary communicate the fact? verdict true = included.
* contradiction: does the summary conflict with the fact? verdict true =
  contradicted.

Judges answer JSON ``{"verdict": "YES"|"NO", "justification": ...}``; a
response that fails strict parsing falls back to a leading YES/NO token, gets
one corrective reprompt, and otherwise becomes an abstention (recorded, never
counted as a vote). The panel decision is a majority vote over the remaining
votes; an even split is resolved toward the label that flags the summary for
human review (presence tie = omitted, contradiction tie = contradicted).
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import SCHEMA_VERSION
from .corpus import (
    GeneratedSummary,
    KeyFact,
    append_record,
    load_keyfacts,
    load_record,
    load_records,
    register_record_type,
)
from .errors import (
    InvariantViolation,
    MissingBenchmark,
    NonRetryable,
    NoVotes,
    ProviderExhausted,
    UnparsableVerdict,
)
from .provider import JUDGE_TEMPERATURE, ChatRequest, ChatResponse

SYSTEM_JUDGE = (
    "You are a meticulous clinical fact checker. Judge only what the given "
    "text supports and reply only with the requested JSON object."
)

_JUDGE_REPROMPT = (
    "\n\nYour previous reply could not be parsed. Reply again with exactly one "
    'JSON object of the form {"verdict": "YES" or "NO", "justification": "..."} '
    "and nothing else."
)

_CITATION_MARKER = re.compile(r" ?\[[1-9][0-9]*\]")
_LEADING_TOKEN = re.compile(r'^\s*["\'`*#\s]*(YES|NO)\b', re.IGNORECASE)
_FENCE = re.compile(r"^```[a-zA-Z]*\n(.*)\n```$", re.DOTALL)


class Dimension(str, Enum):
    PRESENCE = "Presence"
    CONTRADICTION = "Contradiction"


# --- records ---------------------------------------------------------------------

@dataclass(frozen=True)
class JudgePanel:
    panel_id: str
    judges: tuple[str, ...]

    def validate(self) -> None:
        if not self.judges:
            raise InvariantViolation(f"panel {self.panel_id} has no judges", panel_id=self.panel_id)
        if len(set(self.judges)) != len(self.judges):
            raise InvariantViolation(f"panel {self.panel_id} lists a judge twice",
                                     panel_id=self.panel_id)


@dataclass(frozen=True)
class JudgeVerdict:
    judge: str
    summary_id: str
    fact_id: str
    dimension: Dimension
    verdict: bool
    justification: str
    raw_response_fingerprint: str

    def validate(self) -> None:
        if not self.justification.strip():
            raise InvariantViolation(
                "verdict justification must be non-empty",
                judge=self.judge, summary_id=self.summary_id, fact_id=self.fact_id,
            )

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.judge, self.summary_id, self.fact_id, self.dimension.value)


@dataclass(frozen=True)
class Abstention:
    judge: str
    summary_id: str
    fact_id: str
    dimension: Dimension
    reason: str

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.judge, self.summary_id, self.fact_id, self.dimension.value)


@dataclass(frozen=True)
class JuryDecision:
    summary_id: str
    fact_id: str
    dimension: Dimension
    votes_true: int
    votes_false: int
    decision: bool
    tied: bool

    def validate(self) -> None:
        if self.votes_true < 0 or self.votes_false < 0:
            raise InvariantViolation("vote counts must be nonnegative")
        if self.votes_true + self.votes_false == 0:
            raise InvariantViolation("decision must rest on at least one vote")


def _enum_dimension(raw, **context) -> Dimension:
    try:
        return Dimension(raw)
    except ValueError:
        raise InvariantViolation(f"dimension {raw!r} is not Presence or Contradiction",
                                 **context) from None


def _encode_verdict(v: JudgeVerdict) -> dict:
    return {
        "judge": v.judge, "summary_id": v.summary_id, "fact_id": v.fact_id,
        "dimension": v.dimension.value, "verdict": v.verdict,
        "justification": v.justification,
        "raw_response_fingerprint": v.raw_response_fingerprint,
    }


def _decode_verdict(p: dict, **context) -> JudgeVerdict:
    v = JudgeVerdict(
        judge=p["judge"], summary_id=p["summary_id"], fact_id=p["fact_id"],
        dimension=_enum_dimension(p["dimension"], **context),
        verdict=bool(p["verdict"]), justification=p["justification"],
        raw_response_fingerprint=p.get("raw_response_fingerprint", ""),
    )
    v.validate()
    return v


def _encode_abstention(a: Abstention) -> dict:
    return {"judge": a.judge, "summary_id": a.summary_id, "fact_id": a.fact_id,
            "dimension": a.dimension.value, "reason": a.reason}


def _decode_abstention(p: dict, **context) -> Abstention:
    return Abstention(
        judge=p["judge"], summary_id=p["summary_id"], fact_id=p["fact_id"],
        dimension=_enum_dimension(p["dimension"], **context), reason=p.get("reason", ""),
    )


def _encode_decision(d: JuryDecision) -> dict:
    return {
        "summary_id": d.summary_id, "fact_id": d.fact_id, "dimension": d.dimension.value,
        "votes_true": d.votes_true, "votes_false": d.votes_false,
        "decision": d.decision, "tied": d.tied,
    }


def _decode_decision(p: dict, **context) -> JuryDecision:
    d = JuryDecision(
        summary_id=p["summary_id"], fact_id=p["fact_id"],
        dimension=_enum_dimension(p["dimension"], **context),
        votes_true=int(p["votes_true"]), votes_false=int(p["votes_false"]),
        decision=bool(p["decision"]), tied=bool(p["tied"]),
    )
    d.validate()
    return d


register_record_type("judge_verdict", JudgeVerdict, _encode_verdict, _decode_verdict)
register_record_type("abstention", Abstention, _encode_abstention, _decode_abstention)
register_record_type("jury_decision", JuryDecision, _encode_decision, _decode_decision)


# --- prompt construction --------------------------------------------------------------

def strip_citation_markers(text: str) -> str:
    return _CITATION_MARKER.sub("", text)


def summary_text_for_judges(summary: GeneratedSummary) -> str:
    """Three sections, headers kept, citation markers removed."""
    return strip_citation_markers(
        f"## ONE-LINER\n{summary.one_liner}\n\n"
        f"## HOSPITAL COURSE\n{summary.hospital_course}\n\n"
        f"## PROBLEM SUMMARY\n{summary.problem_summary}"
    )


_TEMPLATE_NAMES = {
    Dimension.PRESENCE: "judge_presence",
    Dimension.CONTRADICTION: "judge_contradiction",
}


def build_judge_request(summary: GeneratedSummary, fact: KeyFact, judge: str,
                        dimension: Dimension, max_output_tokens: int = 400) -> ChatRequest:
    """Pure function of its inputs, so replay fixtures can precompute it."""
    if summary.case_id != fact.case_id:
        raise InvariantViolation(
            f"summary {summary.summary_id} and fact {fact.fact_id} are from different cases",
            summary_id=summary.summary_id, fact_id=fact.fact_id,
        )
    template = (resources.files("factjury") / "prompts" /
                f"{_TEMPLATE_NAMES[dimension]}.txt").read_text(encoding="utf-8")
    user = template.replace("{{fact}}", fact.text).replace(
        "{{summary}}", summary_text_for_judges(summary))
    return ChatRequest(
        model_id=judge,
        system_prompt=SYSTEM_JUDGE,
        user_prompt=user,
        max_output_tokens=max_output_tokens,
        temperature=JUDGE_TEMPERATURE,
    )


# --- verdict parsing ---------------------------------------------------------------------

def _strict_parse(text: str) -> Optional[tuple[bool, str]]:
    stripped = text.strip()
    fenced = _FENCE.match(stripped)
    if fenced:
        stripped = fenced.group(1).strip()
    try:
        doc = json.loads(stripped)
    except json.JSONDecodeError:
        return None
    if not isinstance(doc, dict):
        return None
    verdict = doc.get("verdict")
    justification = doc.get("justification")
    if verdict not in ("YES", "NO"):
        return None
    if not isinstance(justification, str) or not justification.strip():
        return None
    return verdict == "YES", justification.strip()


def _fallback_parse(text: str) -> Optional[tuple[bool, str]]:
    m = _LEADING_TOKEN.match(text)
    if m is None:
        return None
    return m.group(1).upper() == "YES", text.strip()


def parse_verdict_text(text: str) -> Optional[tuple[bool, str]]:
    return _strict_parse(text) or _fallback_parse(text)


def judge_one(summary: GeneratedSummary, fact: KeyFact, judge: str, dimension: Dimension,
              transport: Callable[[ChatRequest], ChatResponse]) -> JudgeVerdict:
    """One judge, one fact, one dimension. Raises UnparsableVerdict when the
    judge cannot produce a parseable verdict even after a corrective reprompt;
    callers record that as an abstention."""
    request = build_judge_request(summary, fact, judge, dimension)
    response = transport(request)
    parsed = parse_verdict_text(response.text)
    if parsed is None:
        retry = ChatRequest(
            model_id=request.model_id, system_prompt=request.system_prompt,
            user_prompt=request.user_prompt + _JUDGE_REPROMPT,
            max_output_tokens=request.max_output_tokens, temperature=request.temperature,
        )
        response = transport(retry)
        parsed = parse_verdict_text(response.text)
    if parsed is None:
        raise UnparsableVerdict(
            f"judge {judge} produced no parseable verdict",
            judge=judge, summary_id=summary.summary_id, fact_id=fact.fact_id,
            dimension=dimension.value, response_head=response.text[:200],
        )
    verdict, justification = parsed
    record = JudgeVerdict(
        judge=judge, summary_id=summary.summary_id, fact_id=fact.fact_id,
        dimension=dimension, verdict=verdict, justification=justification,
        raw_response_fingerprint=hashlib.sha256(response.text.encode("utf-8")).hexdigest(),
    )
    record.validate()
    return record


# --- aggregation ------------------------------------------------------------------------

def majority_vote(verdicts: Sequence[JudgeVerdict]) -> JuryDecision:
    """Majority over non-abstaining verdicts for one (summary, fact, dimension).

    Ties resolve conservatively: presence -> false (fact treated as omitted),
    contradiction -> true (summary treated as contradicted)."""
    if not verdicts:
        raise NoVotes("no verdicts to aggregate")
    keys = {(v.summary_id, v.fact_id, v.dimension) for v in verdicts}
    if len(keys) != 1:
        raise InvariantViolation("verdicts span more than one (summary, fact, dimension)")
    judges = [v.judge for v in verdicts]
    if len(set(judges)) != len(judges):
        raise InvariantViolation("a judge voted twice on the same item")
    summary_id, fact_id, dimension = next(iter(keys))
    votes_true = sum(1 for v in verdicts if v.verdict)
    votes_false = len(verdicts) - votes_true
    tied = votes_true == votes_false
    if tied:
        decision = dimension is Dimension.CONTRADICTION
    else:
        decision = votes_true > votes_false
    return JuryDecision(
        summary_id=summary_id, fact_id=fact_id, dimension=dimension,
        votes_true=votes_true, votes_false=votes_false, decision=decision, tied=tied,
    )


# --- run evaluation ------------------------------------------------------------------------

@dataclass(frozen=True)
class EvaluationReport:
    decisions: tuple[JuryDecision, ...]
    n_verdicts: int
    n_abstentions: int
    new_calls: int
    per_judge_abstention: dict[str, tuple[int, int]]  # judge -> (abstained, assigned)
    no_vote_items: tuple[tuple[str, str, str], ...]


def _load_summaries(run_dir: Path) -> list[GeneratedSummary]:
    summaries_dir = run_dir / "summaries"
    if not summaries_dir.is_dir():
        raise InvariantViolation("run has no summaries directory", path=str(summaries_dir))
    out = []
    for path in sorted(summaries_dir.glob("*.json")):
        record = load_record(path)
        if not isinstance(record, GeneratedSummary):
            raise InvariantViolation("unexpected record in summaries directory", file=str(path))
        out.append(record)
    if not out:
        raise InvariantViolation("run contains no summaries", path=str(summaries_dir))
    return out


def _facts_for(case_id: str, benchmark_dir: Path) -> list[KeyFact]:
    path = benchmark_dir / f"{case_id}.keyfacts.json"
    if not path.is_file():
        raise MissingBenchmark(f"no key facts for case {case_id}", case_id=case_id,
                               file=str(path))
    return load_keyfacts(path)


def evaluate_run(
    run_dir: str | Path,
    benchmark_dir: str | Path,
    panel: JudgePanel,
    transport: Callable[[ChatRequest], ChatResponse],
    dimensions: Sequence[Dimension] = (Dimension.PRESENCE, Dimension.CONTRADICTION),
    max_workers: int = 1,
) -> EvaluationReport:
    """Produce one verdict per (summary, fact, dimension, judge), resumably.

    Verdicts and abstentions append to JSONL files under the run directory;
    keys already present there are never re-asked, so an interrupted run picks
    up where it stopped. Decisions are recomputed from the full verdict set
    and rewritten every time. Judge failures (unparsable verdicts, exhausted
    or rejected providers) abstain rather than abort the run."""
    run_dir = Path(run_dir)
    benchmark_dir = Path(benchmark_dir)
    panel.validate()

    summaries = _load_summaries(run_dir)
    facts_by_case: dict[str, list[KeyFact]] = {}
    for s in summaries:
        if s.case_id not in facts_by_case:
            facts_by_case[s.case_id] = _facts_for(s.case_id, benchmark_dir)

    verdicts_path = run_dir / "verdicts.jsonl"
    abstentions_path = run_dir / "abstentions.jsonl"
    existing_verdicts: list[JudgeVerdict] = (
        load_records(verdicts_path) if verdicts_path.is_file() else [])
    existing_abstentions: list[Abstention] = (
        load_records(abstentions_path) if abstentions_path.is_file() else [])
    done = {v.key for v in existing_verdicts} | {a.key for a in existing_abstentions}
    if len(done) != len(existing_verdicts) + len(existing_abstentions):
        raise InvariantViolation("duplicate verdict keys already persisted",
                                 file=str(verdicts_path))

    jobs = []
    for summary in sorted(summaries, key=lambda s: s.summary_id):
        for fact in facts_by_case[summary.case_id]:
            for dimension in dimensions:
                for judge in panel.judges:
                    key = (judge, summary.summary_id, fact.fact_id, dimension.value)
                    if key not in done:
                        jobs.append((summary, fact, judge, dimension))

    def run_job(job):
        summary, fact, judge, dimension = job
        try:
            return judge_one(summary, fact, judge, dimension, transport)
        except (UnparsableVerdict, ProviderExhausted, NonRetryable) as exc:
            return Abstention(judge=judge, summary_id=summary.summary_id,
                              fact_id=fact.fact_id, dimension=dimension,
                              reason=f"{exc.code}: {exc}")

    write_lock = threading.Lock()

    def persist(outcome) -> None:
        # submission-order writes keep the JSONL deterministic under concurrency
        with write_lock:
            if isinstance(outcome, JudgeVerdict):
                existing_verdicts.append(outcome)
                append_record(outcome, verdicts_path)
            else:
                existing_abstentions.append(outcome)
                append_record(outcome, abstentions_path)

    if max_workers <= 1:
        for job in jobs:
            persist(run_job(job))
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(run_job, job) for job in jobs]
            for future in futures:
                persist(future.result())

    # aggregation barrier: everything persisted before any decision is computed
    grouped: dict[tuple[str, str, Dimension], list[JudgeVerdict]] = {}
    for v in existing_verdicts:
        grouped.setdefault((v.summary_id, v.fact_id, v.dimension), []).append(v)

    all_items: list[tuple[str, str, Dimension]] = []
    for summary in sorted(summaries, key=lambda s: s.summary_id):
        for fact in facts_by_case[summary.case_id]:
            for dimension in dimensions:
                all_items.append((summary.summary_id, fact.fact_id, dimension))

    decisions: list[JuryDecision] = []
    no_vote_items: list[tuple[str, str, str]] = []
    for item in all_items:
        votes = grouped.get(item, [])
        if votes:
            decisions.append(majority_vote(votes))
        else:
            no_vote_items.append((item[0], item[1], item[2].value))

    decisions_path = run_dir / "decisions.jsonl"
    with decisions_path.open("w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps({"schema_version": SCHEMA_VERSION,
                                 "record_type": "jury_decision",
                                 **_encode_decision(d)}) + "\n")

    assigned_per_judge = {
        judge: sum(
            len(facts_by_case[s.case_id]) * len(dimensions) for s in summaries
        )
        for judge in panel.judges
    }
    abstained_per_judge = {judge: 0 for judge in panel.judges}
    for a in existing_abstentions:
        if a.judge in abstained_per_judge:
            abstained_per_judge[a.judge] += 1

    return EvaluationReport(
        decisions=tuple(decisions),
        n_verdicts=len(existing_verdicts),
        n_abstentions=len(existing_abstentions),
        new_calls=len(jobs),
        per_judge_abstention={
            j: (abstained_per_judge[j], assigned_per_judge[j]) for j in panel.judges
        },
        no_vote_items=tuple(no_vote_items),
    )


def load_decisions(path: str | Path) -> list[JuryDecision]:
    records = load_records(path)
    for r in records:
        if not isinstance(r, JuryDecision):
            raise InvariantViolation("expected only jury decisions in this file", file=str(path))
    return records


__all__ = [
    "SYSTEM_JUDGE", "Dimension", "JudgePanel", "JudgeVerdict", "Abstention",
    "JuryDecision", "EvaluationReport",
    "strip_citation_markers", "summary_text_for_judges", "build_judge_request",
    "parse_verdict_text", "judge_one", "majority_vote", "evaluate_run", "load_decisions",
]
