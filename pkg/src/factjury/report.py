"""Scorecard aggregation, failure-theme distillation, and report rendering.

The HTML report is fully self-contained: inline styles, no scripts that
execute, no external fetches, so it can be opened inside air-gapped
clinical environments. Every number shown in the HTML comes from the
same in-memory document that is written to report.json; the document is
additionally embedded verbatim in the HTML so the two can be compared
byte for byte.
"""

from __future__ import annotations

import csv
import html
import json
import re
from dataclasses import dataclass, replace
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import SCHEMA_VERSION
from .corpus import GeneratedSummary, KeyFact, Strategy, load_record
from .errors import (
    InvariantViolation,
    MalformedThemes,
    MissingDecisions,
)
from .corpus import load_keyfacts, load_records
from .jury import Dimension, JudgeVerdict, load_decisions
from .provider import GENERATION_TEMPERATURE, ChatRequest, ChatResponse

MAX_THEMES = 5

SYSTEM_DISTILL = (
    "You are a clinical quality analyst. You read judge critiques of "
    "generated hospital-course summaries and name the recurring failure "
    "patterns. You reply only in the exact JSON shape requested."
)

_DISTILL_REPROMPT = (
    "\n\nYour previous reply could not be used. Respond with ONLY a JSON list "
    'of objects {"title": "...", "fact_ids": ["..."], "excerpt": "..."}, '
    "citing only fact ids that appear in the material above."
)

_FENCE = re.compile(r"^\s*```[a-zA-Z]*\s*\n(.*)\n\s*```\s*$", re.DOTALL)

_OUTCOME_WORD = {Dimension.PRESENCE: "omitted", Dimension.CONTRADICTION: "contradicted"}


# --- scorecards ------------------------------------------------------------------

@dataclass(frozen=True)
class CaseFactCounts:
    case_id: str
    facts_present: int
    facts_contradicted: int

    def validate(self, facts_per_case: int = 3) -> None:
        for label, n in (("present", self.facts_present),
                         ("contradicted", self.facts_contradicted)):
            if not 0 <= n <= facts_per_case:
                raise InvariantViolation(
                    f"case {self.case_id}: {n} facts {label} is outside "
                    f"0..{facts_per_case}"
                )


@dataclass(frozen=True)
class SystemScorecard:
    run_id: str
    strategy: Strategy
    model_id: str
    presence_rate: float
    contradiction_rate: float
    per_case: tuple[CaseFactCounts, ...]
    cost_per_patient_usd: Decimal
    latency_per_patient_s: Decimal

    def validate(self) -> None:
        for label, rate in (("presence", self.presence_rate),
                            ("contradiction", self.contradiction_rate)):
            if not 0.0 <= rate <= 1.0:
                raise InvariantViolation(f"{label} rate {rate} outside [0, 1]")
        for row in self.per_case:
            row.validate()


def _run_summaries(run_dir: Path) -> list[GeneratedSummary]:
    summaries_dir = run_dir / "summaries"
    if not summaries_dir.is_dir():
        raise InvariantViolation("run has no summaries directory",
                                 path=str(summaries_dir))
    return [load_record(p) for p in sorted(summaries_dir.glob("*.json"))]


def aggregate(run_dir: Path | str) -> SystemScorecard:
    """Fold a run's decisions and generation metrics into one scorecard."""
    run_dir = Path(run_dir)
    decisions_path = run_dir / "decisions.jsonl"
    if not decisions_path.is_file():
        raise MissingDecisions(f"no decisions found at {decisions_path}")
    decisions = load_decisions(decisions_path)
    if not decisions:
        raise MissingDecisions(f"{decisions_path} holds no decisions")
    summaries = _run_summaries(run_dir)
    case_of = {s.summary_id: s.case_id for s in summaries}
    strategies = {s.strategy for s in summaries}
    models = {s.model_id for s in summaries}
    if len(strategies) != 1 or len(models) != 1:
        raise InvariantViolation(
            "run mixes strategies or models; one scorecard cannot describe it",
            strategies=sorted(s.value for s in strategies), models=sorted(models),
        )

    by_dim = {Dimension.PRESENCE: [0, 0], Dimension.CONTRADICTION: [0, 0]}
    per_case: dict[str, list[int]] = {case_of[s.summary_id]: [0, 0] for s in summaries}
    for decision in decisions:
        hits, total = by_dim[decision.dimension]
        by_dim[decision.dimension] = [hits + (1 if decision.decision else 0), total + 1]
        if decision.decision:
            case_id = case_of.get(decision.summary_id)
            if case_id is None:
                raise InvariantViolation(
                    f"decision references unknown summary {decision.summary_id}")
            slot = 0 if decision.dimension is Dimension.PRESENCE else 1
            per_case[case_id][slot] += 1

    def rate(dimension: Dimension) -> float:
        hits, total = by_dim[dimension]
        return hits / total if total else 0.0

    n = len(summaries)
    cost = sum((s.metrics.cost_usd for s in summaries), Decimal("0")) / Decimal(n)
    latency = sum((s.metrics.latency_s for s in summaries), Decimal("0")) / Decimal(n)
    card = SystemScorecard(
        run_id=run_dir.name,
        strategy=next(iter(strategies)),
        model_id=next(iter(models)),
        presence_rate=rate(Dimension.PRESENCE),
        contradiction_rate=rate(Dimension.CONTRADICTION),
        per_case=tuple(CaseFactCounts(case_id, hits[0], hits[1])
                       for case_id, hits in sorted(per_case.items())),
        cost_per_patient_usd=cost,
        latency_per_patient_s=latency,
    )
    card.validate()
    return card


# --- qualitative themes ------------------------------------------------------------

@dataclass(frozen=True)
class Theme:
    title: str
    supporting_fact_ids: tuple[str, ...]
    excerpt: str


@dataclass(frozen=True)
class ThemeDigest:
    dimension: Dimension
    themes: tuple[Theme, ...]
    diagnostics: tuple[str, ...] = ()


def _failures_block(failures: Sequence[tuple[KeyFact, Sequence[str]]]) -> str:
    parts = []
    for fact, justifications in failures:
        quoted = "\n".join(f'  - "{j}"' for j in justifications)
        parts.append(f"FACT {fact.fact_id}: {fact.text}\n{quoted}")
    return "\n\n".join(parts)


def _parse_themes(text: str) -> list[Theme] | None:
    body = text.strip()
    fenced = _FENCE.match(body)
    if fenced:
        body = fenced.group(1).strip()
    try:
        data = json.loads(body)
    except json.JSONDecodeError:
        return None
    if not isinstance(data, list) or not data:
        return None
    themes = []
    for entry in data:
        if not isinstance(entry, dict):
            return None
        title, fact_ids, excerpt = (entry.get("title"), entry.get("fact_ids"),
                                    entry.get("excerpt"))
        if not isinstance(title, str) or not title.strip():
            return None
        if not isinstance(fact_ids, list) or not fact_ids \
                or not all(isinstance(f, str) for f in fact_ids):
            return None
        if not isinstance(excerpt, str):
            return None
        themes.append(Theme(title=title, supporting_fact_ids=tuple(fact_ids),
                            excerpt=excerpt))
    return themes


def _split_grounded(themes: Sequence[Theme],
                    known: set[str]) -> tuple[list[Theme], list[str]]:
    kept, diagnostics = [], []
    for theme in themes:
        unknown = [f for f in theme.supporting_fact_ids if f not in known]
        if unknown:
            diagnostics.append(
                f"dropped theme {theme.title!r}: cites unknown fact ids {unknown}")
        else:
            kept.append(theme)
    return kept, diagnostics


def collect_failures(
    run_dir: Path | str,
    benchmark_dir: Path | str,
    dimension: Dimension,
) -> list[tuple[KeyFact, list[str]]]:
    """Failed facts for one dimension, with the majority-side justifications.

    A presence decision fails when the fact was omitted; a contradiction
    decision fails when the fact was contradicted. Justifications come from
    the verdicts that voted with the majority.
    """
    run_dir = Path(run_dir)
    decisions = load_decisions(run_dir / "decisions.jsonl")
    verdicts_path = run_dir / "verdicts.jsonl"
    verdicts = [r for r in (load_records(verdicts_path) if verdicts_path.is_file() else [])
                if isinstance(r, JudgeVerdict)]
    summaries = _run_summaries(run_dir)
    case_of = {s.summary_id: s.case_id for s in summaries}
    facts_by_id: dict[str, KeyFact] = {}
    for case_id in sorted(set(case_of.values())):
        for fact in load_keyfacts(Path(benchmark_dir) / f"{case_id}.keyfacts.json"):
            facts_by_id[fact.fact_id] = fact

    failures = []
    for decision in sorted(decisions, key=lambda d: (d.summary_id, d.fact_id)):
        if decision.dimension is not dimension:
            continue
        failed = (not decision.decision) if dimension is Dimension.PRESENCE \
            else decision.decision
        if not failed:
            continue
        fact = facts_by_id.get(decision.fact_id)
        if fact is None:
            raise InvariantViolation(
                f"decision references fact {decision.fact_id} missing from the "
                "benchmark")
        justifications = [
            v.justification for v in verdicts
            if v.summary_id == decision.summary_id and v.fact_id == decision.fact_id
            and v.dimension is dimension and v.verdict == decision.decision
        ]
        failures.append((fact, justifications))
    return failures


def build_distill_request(
    failures: Sequence[tuple[KeyFact, Sequence[str]]],
    summarizer: str,
    dimension: Dimension,
    max_themes: int = MAX_THEMES,
) -> ChatRequest:
    """The exact first request distill_themes sends; pure, for replay scripting."""
    if not failures:
        raise InvariantViolation("no failures to distill; skip the digest instead")
    template = resources.files("factjury.prompts").joinpath("distill_themes.txt").read_text()
    prompt = (template
              .replace("{{outcome}}", _OUTCOME_WORD[dimension])
              .replace("{{failures}}", _failures_block(failures))
              .replace("{{max_themes}}", str(max_themes)))
    if "{{" in prompt:
        raise InvariantViolation("unfilled placeholder in theme prompt")
    return ChatRequest(model_id=summarizer, system_prompt=SYSTEM_DISTILL,
                       user_prompt=prompt, max_output_tokens=800,
                       temperature=GENERATION_TEMPERATURE)


def distill_themes(
    failures: Sequence[tuple[KeyFact, Sequence[str]]],
    summarizer: str,
    transport: Callable[[ChatRequest], ChatResponse],
    dimension: Dimension,
    max_themes: int = MAX_THEMES,
) -> ThemeDigest:
    """Name recurring failure patterns from the majority-side justifications.

    Structural parse failures and themes citing unknown fact ids both get
    one corrective reprompt; after that, a structurally unusable reply
    raises while merely ungrounded themes are dropped with diagnostics.
    """
    known = {fact.fact_id for fact, _ in failures}
    request = build_distill_request(failures, summarizer, dimension, max_themes)
    prompt = request.user_prompt
    themes = _parse_themes(transport(request).text)
    if themes is not None:
        kept, diagnostics = _split_grounded(themes, known)
        if not diagnostics:
            return ThemeDigest(dimension=dimension, themes=tuple(kept))
    retry = replace(request, user_prompt=prompt + _DISTILL_REPROMPT)
    response = transport(retry)
    themes = _parse_themes(response.text)
    if themes is None:
        raise MalformedThemes(
            f"summarizer {summarizer} produced no usable themes after one retry",
            model_id=summarizer, response_head=response.text[:200],
        )
    kept, diagnostics = _split_grounded(themes, known)
    return ThemeDigest(dimension=dimension, themes=tuple(kept),
                       diagnostics=tuple(diagnostics))


# --- rendering -----------------------------------------------------------------------

def fmt_percent(rate: float) -> str:
    return f"{100.0 * rate:.1f}"


def fmt_kappa(value: float) -> str:
    return f"{value:.2f}"


def fmt_cost(value: Decimal | str) -> str:
    return f"{Decimal(value):.4f}"


def fmt_seconds(value: Decimal | str) -> str:
    return f"{Decimal(value):.2f}"


def fmt_pvalue(value: float) -> str:
    return f"{value:.4f}"


def report_document(
    scorecards: Sequence[SystemScorecard],
    digests: Sequence[ThemeDigest] = (),
    metaeval: Mapping | None = None,
    generated_at: str = "",
) -> dict:
    """The single source of truth behind report.json and the HTML tables."""
    if not scorecards:
        raise InvariantViolation("at least one scorecard is required")
    for card in scorecards:
        card.validate()
    ordered = sorted(scorecards, key=lambda c: (-c.presence_rate, c.run_id))
    return {
        "schema_version": SCHEMA_VERSION,
        "generated_at": generated_at,
        "systems": [
            {
                "run_id": card.run_id,
                "strategy": card.strategy.value,
                "model_id": card.model_id,
                "presence_rate": card.presence_rate,
                "contradiction_rate": card.contradiction_rate,
                "cost_per_patient_usd": str(card.cost_per_patient_usd),
                "latency_per_patient_s": str(card.latency_per_patient_s),
                "per_case": [
                    {"case_id": row.case_id, "facts_present": row.facts_present,
                     "facts_contradicted": row.facts_contradicted}
                    for row in card.per_case
                ],
            }
            for card in ordered
        ],
        "themes": [
            {
                "dimension": digest.dimension.value,
                "themes": [
                    {"title": t.title, "fact_ids": list(t.supporting_fact_ids),
                     "excerpt": t.excerpt}
                    for t in digest.themes
                ],
                "diagnostics": list(digest.diagnostics),
            }
            for digest in digests
        ],
        "metaeval": dict(metaeval) if metaeval is not None else None,
    }


def canonical_json(doc: Mapping) -> str:
    # "<\/" keeps "</script>" sequences inert inside the inline HTML block
    return json.dumps(doc, indent=2).replace("</", "<\\/")


_STYLE = """
body { font-family: Georgia, serif; margin: 2rem auto; max-width: 60rem;
       color: #1a1a1a; }
h1, h2 { font-family: Helvetica, Arial, sans-serif; }
table { border-collapse: collapse; margin: 1rem 0; }
th, td { border: 1px solid #999; padding: 0.3rem 0.7rem; text-align: left; }
th { background: #eef2f5; }
td.num { text-align: right; font-variant-numeric: tabular-nums; }
.placeholder { color: #666; font-style: italic; }
.diagnostic { color: #8a5200; font-size: 0.9em; }
blockquote { color: #444; border-left: 3px solid #bbb; margin: 0.3rem 0;
             padding-left: 0.7rem; }
""".strip()


def _esc(text: object) -> str:
    return html.escape(str(text), quote=True)


def _systems_table(doc: dict) -> list[str]:
    out = ["<table id=\"systems\">",
           "<tr><th>System</th><th>Strategy</th><th>Model</th>"
           "<th>Presence %</th><th>Contradiction %</th>"
           "<th>Cost/patient (USD)</th><th>Latency/patient (s)</th></tr>"]
    for system in doc["systems"]:
        out.append(
            "<tr>"
            f"<td>{_esc(system['run_id'])}</td>"
            f"<td>{_esc(system['strategy'])}</td>"
            f"<td>{_esc(system['model_id'])}</td>"
            f"<td class=\"num\">{fmt_percent(system['presence_rate'])}</td>"
            f"<td class=\"num\">{fmt_percent(system['contradiction_rate'])}</td>"
            f"<td class=\"num\">{fmt_cost(system['cost_per_patient_usd'])}</td>"
            f"<td class=\"num\">{fmt_seconds(system['latency_per_patient_s'])}</td>"
            "</tr>")
    out.append("</table>")
    return out


def _case_matrix(doc: dict) -> list[str]:
    case_ids = sorted({row["case_id"] for system in doc["systems"]
                       for row in system["per_case"]})
    if not case_ids:
        return ["<p class=\"placeholder\">No per-case decisions recorded.</p>"]
    out = ["<table id=\"case-matrix\">",
           "<tr><th>Case</th>" + "".join(
               f"<th>{_esc(s['run_id'])}<br>present / contradicted</th>"
               for s in doc["systems"]) + "</tr>"]
    for case_id in case_ids:
        cells = []
        for system in doc["systems"]:
            rows = {r["case_id"]: r for r in system["per_case"]}
            if case_id in rows:
                row = rows[case_id]
                cells.append(f"<td class=\"num\">{row['facts_present']}/3 · "
                             f"{row['facts_contradicted']}/3</td>")
            else:
                cells.append("<td class=\"num\">n/a</td>")
        out.append(f"<tr><td>{_esc(case_id)}</td>" + "".join(cells) + "</tr>")
    out.append("</table>")
    return out


def _themes_section(doc: dict) -> list[str]:
    if not doc["themes"]:
        return ["<p class=\"placeholder\">No qualitative themes were distilled "
                "for this report.</p>"]
    out = []
    for digest in doc["themes"]:
        out.append(f"<h3>{_esc(digest['dimension'])} failure themes</h3>")
        if not digest["themes"]:
            out.append("<p class=\"placeholder\">No themes survived grounding "
                       "checks.</p>")
        for theme in digest["themes"]:
            facts = ", ".join(_esc(f) for f in theme["fact_ids"])
            out.append(f"<h4>{_esc(theme['title'])}</h4>")
            out.append(f"<p>Supported by: {facts}</p>")
            out.append(f"<blockquote>{_esc(theme['excerpt'])}</blockquote>")
        for diag in digest["diagnostics"]:
            out.append(f"<p class=\"diagnostic\">{_esc(diag)}</p>")
    return out


def _metaeval_section(doc: dict) -> list[str]:
    meta = doc["metaeval"]
    if not meta:
        return []
    out = ["<h2>Meta-evaluation</h2>"]
    loo = meta.get("loo_mean")
    if loo is not None:
        out.append(f"<p>Leave-one-out human baseline κ: "
                   f"<span class=\"num\" id=\"loo-mean\">{fmt_kappa(loo)}</span>"
                   f" (margin {fmt_kappa(meta.get('margin', 0.0))})</p>")
    evaluators = meta.get("evaluators", [])
    if evaluators:
        out.append("<table id=\"agreement\">")
        out.append("<tr><th>Evaluator</th><th>κ vs gold</th><th>95% CI</th></tr>")
        for row in evaluators:
            out.append(
                "<tr>"
                f"<td>{_esc(row['name'])}</td>"
                f"<td class=\"num\">{fmt_kappa(row['kappa'])}</td>"
                f"<td class=\"num\">[{fmt_kappa(row['ci_low'])}, "
                f"{fmt_kappa(row['ci_high'])}]</td>"
                "</tr>")
        out.append("</table>")
        out.append("<table id=\"noninferiority\">")
        out.append("<tr><th>Evaluator</th><th>Δκ</th><th>90% CI</th>"
                   "<th>p (margin)</th><th>Non-inferior</th></tr>")
        for row in evaluators:
            out.append(
                "<tr>"
                f"<td>{_esc(row['name'])}</td>"
                f"<td class=\"num\">{fmt_kappa(row['delta_kappa'])}</td>"
                f"<td class=\"num\">[{fmt_kappa(row['ci90_low'])}, "
                f"{fmt_kappa(row['ci90_high'])}]</td>"
                f"<td class=\"num\">{fmt_pvalue(row['p_value'])}</td>"
                f"<td>{'yes' if row['non_inferior'] else 'no'}</td>"
                "</tr>")
        out.append("</table>")
    return out


def render_html(doc: dict) -> str:
    parts = [
        "<!DOCTYPE html>",
        "<html lang=\"en\">",
        "<head>",
        "<meta charset=\"utf-8\">",
        "<title>Factuality evaluation report</title>",
        f"<style>{_STYLE}</style>",
        "</head>",
        "<body>",
        "<h1>Factuality evaluation report</h1>",
        f"<p>Generated at {_esc(doc['generated_at'])}</p>",
        "<h2>Systems</h2>",
        *_systems_table(doc),
        "<h2>Per-case fact matrix</h2>",
        *_case_matrix(doc),
        "<h2>Qualitative themes</h2>",
        *_themes_section(doc),
        *_metaeval_section(doc),
        "<script type=\"application/json\" id=\"report-data\">",
        canonical_json(doc),
        "</script>",
        "</body>",
        "</html>",
    ]
    return "\n".join(parts) + "\n"


def embedded_document(html_text: str) -> dict:
    """Pull the machine-readable copy back out of a rendered report."""
    match = re.search(
        r"<script type=\"application/json\" id=\"report-data\">\n(.*)\n</script>",
        html_text, re.DOTALL)
    if not match:
        raise InvariantViolation("report HTML carries no embedded document")
    return json.loads(match.group(1))


# --- figure data -----------------------------------------------------------------

def write_presence_vs_cost(doc: dict, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["system", "strategy", "model", "presence_rate",
                         "contradiction_rate", "cost_usd", "latency_s"])
        for system in doc["systems"]:
            writer.writerow([
                system["run_id"], system["strategy"], system["model_id"],
                repr(system["presence_rate"]), repr(system["contradiction_rate"]),
                system["cost_per_patient_usd"], system["latency_per_patient_s"],
            ])


def write_judge_agreement(rows: Sequence[Mapping], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["judge_or_panel", "kappa", "ci_low", "ci_high",
                         "eval_cost_usd", "eval_time_s"])
        for row in rows:
            writer.writerow([
                row["name"], repr(row["kappa"]), repr(row["ci_low"]),
                repr(row["ci_high"]), row.get("eval_cost_usd", ""),
                row.get("eval_time_s", ""),
            ])


def write_noninferiority(rows: Sequence[Mapping], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["evaluator", "delta_kappa", "ci90_low", "ci90_high",
                         "p_value"])
        for row in rows:
            writer.writerow([
                row["name"], repr(row["delta_kappa"]), repr(row["ci90_low"]),
                repr(row["ci90_high"]), repr(row["p_value"]),
            ])


def render(
    scorecards: Sequence[SystemScorecard],
    digests: Sequence[ThemeDigest],
    out_dir: Path | str,
    metaeval: Mapping | None = None,
    generated_at: str = "",
) -> Path:
    """Write report.html, report.json, and figure_data/ under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    figures = out_dir / "figure_data"
    figures.mkdir(exist_ok=True)
    doc = report_document(scorecards, digests, metaeval, generated_at)
    payload = canonical_json(doc) + "\n"
    (out_dir / "report.json").write_text(payload)
    html_path = out_dir / "report.html"
    html_path.write_text(render_html(doc))
    write_presence_vs_cost(doc, figures / "presence_vs_cost.csv")
    if metaeval and metaeval.get("evaluators"):
        write_judge_agreement(metaeval["evaluators"], figures / "judge_agreement.csv")
        write_noninferiority(metaeval["evaluators"], figures / "noninferiority.csv")
    return html_path


__all__ = [
    "CaseFactCounts", "SystemScorecard", "Theme", "ThemeDigest",
    "aggregate", "collect_failures", "build_distill_request", "distill_themes",
    "report_document", "render_html", "render",
    "embedded_document", "canonical_json",
    "write_presence_vs_cost", "write_judge_agreement", "write_noninferiority",
    "fmt_percent", "fmt_kappa", "fmt_cost", "fmt_seconds", "fmt_pvalue",
    "SYSTEM_DISTILL", "MAX_THEMES",
]
