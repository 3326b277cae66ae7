"""Command-line entry point wiring all modules together.

Subcommands: ingest, curate, generate, evaluate, metaeval, report,
doctor. Every artifact-producing command records a run manifest before
writing outputs, so a crash never leaves outputs without one. Exit codes:
0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

from . import SCHEMA_VERSION, __version__
from .benchmark import (
    curate,
    finalize_benchmark,
    interactive_actions,
    load_decision_file,
    suggest_key_facts,
)
from .config import (
    ENV_CONFIG,
    ENV_MAX_WORKERS,
    ENV_MODEL,
    ENV_PANEL,
    AppConfig,
    build_router,
    load_config,
    resolve_setting,
)
from .corpus import (
    Strategy,
    format_timestamp,
    ingest_case,
    load_keyfacts,
    load_record,
    load_records,
    register_record_type,
    save_case,
    save_record,
)
from .errors import (
    FactJuryError,
    InvariantViolation,
    MisalignedItems,
    MissingDecisions,
    MissingRunManifest,
    RunConfigMismatch,
)
from .jury import Dimension, JudgeVerdict, evaluate_run, load_decisions
from .medagentbrief import SummaryEngine, WorkflowConfig, template_hashes
from .report import (
    aggregate,
    collect_failures,
    distill_themes,
    render,
    write_judge_agreement,
    write_noninferiority,
)
from .stats import (
    bootstrap_kappa_ci,
    load_rater_matrix,
    loo_human_baseline,
    majority_gold,
    non_inferiority_test,
)


# --- run manifests -----------------------------------------------------------------

@dataclass(frozen=True)
class RunManifest:
    run_id: str
    created_at: str
    strategy: Strategy
    model_id: str
    panel_id: str
    prompt_template_hashes: tuple[tuple[str, str], ...]
    seed: int
    tool_version: str

    def validate(self) -> None:
        if not self.run_id:
            raise InvariantViolation("run_id must be non-empty")
        if not self.model_id:
            raise InvariantViolation("manifest must name the generation model")
        if not self.prompt_template_hashes:
            raise InvariantViolation("manifest must record prompt template hashes")

    def hashes(self) -> dict[str, str]:
        return dict(self.prompt_template_hashes)


def _freeze_hashes(mapping: dict[str, str]) -> tuple[tuple[str, str], ...]:
    return tuple(sorted(mapping.items()))


def _encode_manifest(m: RunManifest) -> dict:
    return {
        "run_id": m.run_id,
        "created_at": m.created_at,
        "strategy": m.strategy.value,
        "model_id": m.model_id,
        "panel_id": m.panel_id,
        "prompt_template_hashes": dict(m.prompt_template_hashes),
        "seed": m.seed,
        "tool_version": m.tool_version,
    }


def _decode_manifest(doc: dict, **context) -> RunManifest:
    try:
        manifest = RunManifest(
            run_id=doc["run_id"],
            created_at=doc["created_at"],
            strategy=Strategy(doc["strategy"]),
            model_id=doc["model_id"],
            panel_id=doc.get("panel_id", ""),
            prompt_template_hashes=_freeze_hashes(doc["prompt_template_hashes"]),
            seed=int(doc["seed"]),
            tool_version=doc.get("tool_version", ""),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise InvariantViolation(f"bad run manifest: {exc}", **context) from None
    manifest.validate()
    return manifest


register_record_type("run_manifest", RunManifest, _encode_manifest, _decode_manifest)


def judge_template_hashes() -> dict[str, str]:
    out = {}
    for name in ("judge_presence", "judge_contradiction"):
        raw = (resources.files("factjury") / "prompts" / f"{name}.txt").read_bytes()
        out[name] = hashlib.sha256(raw).hexdigest()
    return out


# --- shared plumbing ----------------------------------------------------------------

def _now() -> str:
    return format_timestamp(datetime.now(timezone.utc))


def _app_config(args) -> tuple[AppConfig, Path]:
    explicit = getattr(args, "config", None)
    path = Path(resolve_setting(explicit, ENV_CONFIG, None, "factjury.toml"))
    if path.is_file():
        return load_config(path), path.parent
    if explicit or os.environ.get(ENV_CONFIG):
        raise InvariantViolation(f"config file not found: {path}", file=str(path))
    return AppConfig(), Path(".")


def _root(flag_value, setting: str, base_dir: Path) -> Path:
    """Path roots: flags are CWD-relative, config values are config-relative."""
    if flag_value:
        return Path(flag_value)
    path = Path(setting)
    return path if path.is_absolute() else base_dir / path


def _reconcile_manifest(run_dir: Path, fresh: RunManifest) -> RunManifest:
    """Write the manifest before any output; refuse reuse with other settings."""
    path = run_dir / "manifest.json"
    if path.is_file():
        existing = load_record(path)
        if not isinstance(existing, RunManifest):
            raise InvariantViolation(f"{path} is not a run manifest", file=str(path))
        recorded = existing.hashes()
        same = (existing.strategy == fresh.strategy
                and existing.model_id == fresh.model_id
                and existing.seed == fresh.seed
                # evaluate may have merged judge hashes in; generation's must match
                and all(recorded.get(k) == v for k, v in fresh.hashes().items()))
        if not same:
            raise RunConfigMismatch(
                f"run {fresh.run_id} already exists with different settings; "
                "pick a new --run id or restore the original flags",
                run_id=fresh.run_id,
            )
        return existing
    save_record(fresh, path)
    return fresh


def _decisions_path(path: Path) -> Path:
    if path.is_dir():
        return path / "decisions.jsonl"
    if path.is_file():
        return path
    candidate = path.with_suffix(".jsonl")
    if candidate.is_file():
        return candidate
    raise MissingDecisions(f"no decisions found at {path}")


# --- subcommands ----------------------------------------------------------------

def cmd_ingest(args) -> int:
    config, base = _app_config(args)
    corpus_root = _root(args.corpus, config.paths.corpus, base)
    for source in args.sources:
        case = ingest_case(source)
        save_case(case, corpus_root / case.case_id)
        print(f"ingested {case.case_id}: {len(case.notes)} notes")
    return 0


def cmd_curate(args) -> int:
    config, base = _app_config(args)
    corpus_root = _root(args.corpus, config.paths.corpus, base)
    bench_root = _root(args.benchmark, config.paths.benchmark, base)
    case = ingest_case(corpus_root / args.case)
    assistant = args.assistant or config.workflow.assistant_model
    candidates = []
    if assistant:
        reference = case.discharge_summary
        if reference is None:
            raise InvariantViolation(
                f"case {case.case_id} has no discharge summary to curate from",
                case_id=case.case_id,
            )
        router = build_router(config, base)
        candidates = suggest_key_facts(reference.text, assistant, router.complete)
    if args.decisions:
        actions = load_decision_file(args.decisions)
    else:
        # source notes stay available read-only while reviewing
        print(f"case {case.case_id}: notes on file: "
              + ", ".join(n.note_id for n in case.notes))
        actions = interactive_actions(candidates)
    facts = curate(case.case_id, candidates, actions)
    out = bench_root / f"{case.case_id}.keyfacts.json"
    finalize_benchmark(case.case_id, facts, out)
    print(f"finalized {len(facts)} facts for {case.case_id} -> {out}")
    return 0


_STRATEGY_BY_FLAG = {"single": Strategy.SINGLE_PROMPT,
                     "agentbrief": Strategy.MED_AGENT_BRIEF}


def cmd_generate(args) -> int:
    config, base = _app_config(args)
    corpus_root = _root(args.corpus, config.paths.corpus, base)
    runs_root = _root(args.runs_root, config.paths.runs, base)
    model = resolve_setting(args.model, ENV_MODEL, config.workflow.generation_model)
    if not model:
        raise InvariantViolation(
            "no generation model given; use --model, "
            f"{ENV_MODEL}, or workflow.generation_model in the config")
    strategy = _STRATEGY_BY_FLAG[args.strategy]
    case_ids = args.cases or sorted(
        p.name for p in corpus_root.iterdir() if (p / "manifest.json").is_file())
    if not case_ids:
        raise InvariantViolation(f"no cases found under {corpus_root}")

    run_dir = runs_root / args.run
    manifest = _reconcile_manifest(run_dir, RunManifest(
        run_id=args.run,
        created_at=_now(),
        strategy=strategy,
        model_id=model,
        panel_id="",
        prompt_template_hashes=_freeze_hashes(template_hashes()),
        seed=args.seed,
        tool_version=__version__,
    ))
    router = build_router(config, base)
    engine = SummaryEngine(
        router.complete, manifest.model_id, prices=config.price_table(),
        config=WorkflowConfig(
            include_allied_health=config.workflow.include_allied_health,
            context_budget_chars=config.workflow.context_budget_chars,
            max_output_tokens=config.workflow.max_output_tokens,
        ))
    for case_id in case_ids:
        case = ingest_case(corpus_root / case_id)
        if strategy is Strategy.SINGLE_PROMPT:
            summary = engine.single_prompt_generate(case)
        else:
            summary = engine.generate_agentbrief(case)
        save_record(summary, run_dir / "summaries" / f"{summary.summary_id}.json")
        print(f"{summary.summary_id}: {summary.metrics.llm_calls} calls, "
              f"{len(summary.citations)} citations")
    return 0


def cmd_evaluate(args) -> int:
    config, base = _app_config(args)
    runs_root = _root(args.runs_root, config.paths.runs, base)
    bench_root = _root(args.benchmark, config.paths.benchmark, base)
    run_dir = runs_root / args.run
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        raise MissingRunManifest(
            f"{manifest_path} not found; run `factjury generate` first",
            run_id=args.run,
        )
    manifest = load_record(manifest_path)
    panel_name = resolve_setting(args.panel, ENV_PANEL, None, "small")
    panel = config.panel(panel_name)
    if manifest.panel_id and manifest.panel_id != panel.panel_id:
        raise RunConfigMismatch(
            f"run {args.run} is already evaluated with panel "
            f"{manifest.panel_id!r}; rerun with it or start a new run",
            run_id=args.run, panel_id=manifest.panel_id,
        )
    merged = manifest.hashes() | judge_template_hashes()
    if manifest.panel_id != panel.panel_id or merged != manifest.hashes():
        manifest = replace(manifest, panel_id=panel.panel_id,
                           prompt_template_hashes=_freeze_hashes(merged))
        save_record(manifest, manifest_path)  # before any verdict lands

    max_workers = int(resolve_setting(args.max_workers, ENV_MAX_WORKERS,
                                      config.max_workers, 1))
    router = build_router(config, base)
    result = evaluate_run(run_dir, bench_root, panel, router.complete,
                          max_workers=max_workers)
    print(f"{result.n_verdicts} verdicts ({result.new_calls} new calls), "
          f"{len(result.decisions)} decisions, {result.n_abstentions} abstentions")
    for judge, (abstained, assigned) in sorted(result.per_judge_abstention.items()):
        if abstained:
            print(f"  {judge}: abstained on {abstained}/{assigned} items")
    if result.no_vote_items:
        print(f"  no votes at all for {len(result.no_vote_items)} items")
    return 0


def _evaluator_row(name, labels, matrix, gold, margin, n_boot, seed) -> dict:
    agreement = bootstrap_kappa_ci(labels, gold, n_boot=n_boot, seed=seed)
    noninf = non_inferiority_test(labels, matrix, gold, margin=margin,
                                  n_boot=n_boot, seed=seed)
    return {
        "name": name,
        "kappa": agreement.kappa,
        "ci_low": agreement.ci_low,
        "ci_high": agreement.ci_high,
        "ci_level": agreement.ci_level,
        "n_items": agreement.n_items,
        "kappa_n_skipped": agreement.n_skipped,
        "delta_kappa": noninf.delta_kappa,
        "ci90_low": noninf.ci_low,
        "ci90_high": noninf.ci_high,
        "ci95_low": noninf.ci95_low,
        "ci95_high": noninf.ci95_high,
        "p_value": noninf.p_value,
        "non_inferior": noninf.non_inferior,
        "n_skipped": noninf.n_skipped,
    }


def cmd_metaeval(args) -> int:
    config, base = _app_config(args)
    matrix = load_rater_matrix(args.raters)
    gold = majority_gold(matrix)
    loo_mean, loo_per_rater = loo_human_baseline(matrix)

    decisions_path = _decisions_path(Path(args.jury_decisions))
    decisions = load_decisions(decisions_path)
    presence = {(d.summary_id, d.fact_id): d.decision for d in decisions
                if d.dimension is Dimension.PRESENCE}
    missing = [item for item in matrix.items if item not in presence]
    if missing:
        raise MisalignedItems(
            f"{len(missing)} rater items have no jury presence decision, "
            f"first: {missing[0]}")
    jury_labels = [presence[item] for item in matrix.items]
    rows = [_evaluator_row("jury", jury_labels, matrix, gold,
                           args.margin, args.n_boot, args.seed)]

    verdicts_path = decisions_path.parent / "verdicts.jsonl"
    if verdicts_path.is_file():
        by_judge: dict[str, dict] = {}
        for record in load_records(verdicts_path):
            if isinstance(record, JudgeVerdict) and record.dimension is Dimension.PRESENCE:
                by_judge.setdefault(record.judge, {})[
                    (record.summary_id, record.fact_id)] = record.verdict
        for judge in sorted(by_judge):
            labels = [by_judge[judge].get(item) for item in matrix.items]
            rows.append(_evaluator_row(judge, labels, matrix, gold,
                                       args.margin, args.n_boot, args.seed))

    results = {
        "schema_version": SCHEMA_VERSION,
        "seed": args.seed,
        "n_boot": args.n_boot,
        "margin": args.margin,
        "n_items": matrix.n_items,
        "loo_mean": loo_mean,
        "loo_per_rater": loo_per_rater,
        "evaluators": rows,
    }
    out_dir = _root(args.out, config.paths.metaeval, base)
    figure_dir = out_dir / "figure_data"
    figure_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.json").write_text(json.dumps(results, indent=2) + "\n")
    write_judge_agreement(rows, figure_dir / "judge_agreement.csv")
    write_noninferiority(rows, figure_dir / "noninferiority.csv")

    print(f"human baseline (leave-one-out mean kappa): {loo_mean:.2f}")
    for row in rows:
        verdict = "yes" if row["non_inferior"] else "no"
        print(f"{row['name']}: kappa {row['kappa']:.2f} "
              f"[{row['ci_low']:.2f}, {row['ci_high']:.2f}], "
              f"delta {row['delta_kappa']:+.2f}, p={row['p_value']:.4f}, "
              f"non-inferior: {verdict}")
    print(f"results -> {out_dir / 'results.json'}")
    return 0


def cmd_report(args) -> int:
    config, base = _app_config(args)
    runs_root = _root(args.runs_root, config.paths.runs, base)
    bench_root = _root(args.benchmark, config.paths.benchmark, base)
    scorecards = [aggregate(runs_root / run_id) for run_id in args.runs]
    digests = []
    summarizer = args.summarizer or config.workflow.summarizer_model
    if summarizer:
        router = build_router(config, base)
        for dimension in (Dimension.PRESENCE, Dimension.CONTRADICTION):
            failures = []
            for run_id in args.runs:
                failures += collect_failures(runs_root / run_id, bench_root, dimension)
            if failures:
                digests.append(distill_themes(failures, summarizer,
                                              router.complete, dimension))
    metaeval = None
    if args.metaeval:
        metaeval = json.loads(Path(args.metaeval).read_text())
    out_dir = _root(args.out, config.paths.report, base)
    html_path = render(scorecards, digests, out_dir, metaeval=metaeval,
                       generated_at=args.generated_at or _now())
    print(f"report -> {html_path}")
    return 0


def cmd_doctor(args) -> int:
    failures = 0

    def check(label, fn):
        nonlocal failures
        try:
            detail = fn()
        except Exception as exc:  # doctor reports, it does not crash
            failures += 1
            print(f"FAIL {label}: {exc}")
        else:
            print(f"ok   {label}" + (f" ({detail})" if detail else ""))

    holder = {}

    def load():
        explicit = args.config or os.environ.get(ENV_CONFIG, "")
        path = Path(explicit or "factjury.toml")
        if path.is_file():
            holder["config"], holder["base"] = load_config(path), path.parent
            return str(path)
        if explicit:
            raise InvariantViolation(f"config file not found: {path}")
        holder["config"], holder["base"] = AppConfig(), Path(".")
        return "built-in defaults"

    check("config", load)
    if "config" not in holder:
        return 1
    config, base = holder["config"], holder["base"]

    def prices():
        config.price_table()
        return f"{len(config.prices)} priced models"

    check("prices", prices)

    def panels():
        registered = config.registered_models()
        for name in config.panels:
            panel = config.panel(name)
            if registered:
                unknown = [j for j in panel.judges if j not in registered]
                if unknown:
                    raise InvariantViolation(
                        f"panel {name!r} references unregistered judges {unknown}")
        return f"{len(config.panels)} panels"

    check("panels", panels)

    corpus_root = _root(None, config.paths.corpus, base)
    bench_root = _root(None, config.paths.benchmark, base)
    runs_root = _root(None, config.paths.runs, base)

    def corpus():
        if not corpus_root.is_dir():
            return "no corpus directory"
        n = 0
        for path in sorted(corpus_root.iterdir()):
            if (path / "manifest.json").is_file():
                ingest_case(path)
                n += 1
        return f"{n} cases"

    check("corpus", corpus)

    def benchmark():
        if not bench_root.is_dir():
            return "no benchmark directory"
        n = 0
        for path in sorted(bench_root.glob("*.keyfacts.json")):
            facts = load_keyfacts(path)
            if len(facts) != 3:
                raise InvariantViolation(
                    f"{path.name}: {len(facts)} facts, expected 3")
            n += 1
        return f"{n} cases"

    check("benchmark", benchmark)

    def runs():
        if not runs_root.is_dir():
            return "no runs directory"
        n = 0
        for path in sorted(runs_root.iterdir()):
            if not path.is_dir():
                continue
            manifest_path = path / "manifest.json"
            if not manifest_path.is_file():
                raise MissingRunManifest(f"run {path.name} has no manifest")
            record = load_record(manifest_path)
            if not isinstance(record, RunManifest):
                raise InvariantViolation(f"{manifest_path} is not a run manifest")
            n += 1
        return f"{n} runs"

    check("runs", runs)

    if args.offline:
        print("skip connectivity (--offline)")
    else:
        def connectivity():
            import requests
            n = 0
            for spec in config.providers:
                if spec.kind == "http":
                    requests.head(spec.base_url, timeout=5)
                    n += 1
            return f"{n} http providers reachable"

        check("connectivity", connectivity)

    print("resolved settings:")
    print(f"  generation model: "
          f"{resolve_setting(None, ENV_MODEL, config.workflow.generation_model, '(unset)')}")
    print(f"  panel: {resolve_setting(None, ENV_PANEL, None, 'small')}")
    print(f"  max workers: {resolve_setting(None, ENV_MAX_WORKERS, config.max_workers, 1)}")
    print(f"  corpus: {corpus_root}")
    print(f"  benchmark: {bench_root}")
    print(f"  runs: {runs_root}")
    return 1 if failures else 0


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factjury",
        description="Clinical summary generation and key-fact jury evaluation.")
    parser.add_argument("--config", help=f"path to factjury.toml (env {ENV_CONFIG})")
    parser.add_argument("--version", action="version",
                        version=f"factjury {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    sp = sub.add_parser("ingest",
                        help="validate raw case directories and copy them into the corpus")
    sp.add_argument("sources", nargs="+",
                    help="directories holding manifest.json plus notes/")
    sp.add_argument("--corpus", help="corpus root to write into")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("curate", help="build the three-fact benchmark for a case")
    sp.add_argument("--case", required=True)
    sp.add_argument("--assistant", help="model that proposes candidate facts")
    sp.add_argument("--decisions",
                    help="scripted decision file (JSON list of actions)")
    sp.add_argument("--corpus")
    sp.add_argument("--benchmark")
    sp.set_defaults(func=cmd_curate)

    sp = sub.add_parser("generate", help="generate summaries for cases into a run")
    sp.add_argument("--run", required=True, help="run id under the runs root")
    sp.add_argument("--strategy", choices=sorted(_STRATEGY_BY_FLAG),
                    default="agentbrief")
    sp.add_argument("--model", help=f"generation model (env {ENV_MODEL})")
    sp.add_argument("--cases", nargs="*", help="case ids; default: every corpus case")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--corpus")
    sp.add_argument("--runs-root", dest="runs_root")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("evaluate", help="run the judge panel over a run's summaries")
    sp.add_argument("--run", required=True)
    sp.add_argument("--panel", help=f"panel name from config (env {ENV_PANEL})")
    sp.add_argument("--max-workers", dest="max_workers", type=int)
    sp.add_argument("--benchmark")
    sp.add_argument("--runs-root", dest="runs_root")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("metaeval",
                        help="agreement statistics against the human rater panel")
    sp.add_argument("--raters", required=True, help="rater matrix CSV")
    sp.add_argument("--jury-decisions", dest="jury_decisions", required=True,
                    help="run decisions file (or its run directory)")
    sp.add_argument("--margin", type=float, default=0.10)
    sp.add_argument("--n-boot", dest="n_boot", type=int, default=9999)
    sp.add_argument("--seed", type=int, required=True,
                    help="bootstrap seed; required so results are reproducible")
    sp.add_argument("--out", help="output directory (default from config)")
    sp.set_defaults(func=cmd_metaeval)

    sp = sub.add_parser("report", help="render the HTML/JSON report for runs")
    sp.add_argument("--runs", nargs="+", required=True, help="run ids to include")
    sp.add_argument("--metaeval", help="path to metaeval results.json")
    sp.add_argument("--summarizer", help="model that distills failure themes")
    sp.add_argument("--generated-at", dest="generated_at",
                    help="timestamp to embed (defaults to now)")
    sp.add_argument("--out")
    sp.add_argument("--benchmark")
    sp.add_argument("--runs-root", dest="runs_root")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("doctor",
                        help="validate config, corpus, benchmark, and runs")
    sp.add_argument("--offline", action="store_true",
                    help="skip connectivity checks")
    sp.set_defaults(func=cmd_doctor)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except FactJuryError as exc:
        print(f"factjury: {exc.structured_line()}", file=sys.stderr)
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
