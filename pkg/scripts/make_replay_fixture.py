#!/usr/bin/env python3
"""Regenerate the committed offline fixture under tests/fixtures/replay/.

Builds three synthetic hospitalizations, scripts every model response the
pipeline will request (generation for both strategies, fact suggestion,
judging by a three-judge panel, theme distillation), and records the
responses keyed by request fingerprint. The whole curate -> generate ->
evaluate -> metaeval -> report flow then runs offline and byte-identically
from the fixture.

Fixed by construction, for the agentbrief run:
  presence 6/9, contradiction 1/9, three citations, one 2-1 majority vote.

The script is deterministic (no RNG, no wall clock), so regenerating must
not change committed files. It finishes by replaying the pipeline from the
written fixture and asserting the numbers above.
"""

import json
import re
import shutil
import sys
import tempfile
from decimal import Decimal
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from factjury import SCHEMA_VERSION  # noqa: E402
from factjury.benchmark import (  # noqa: E402
    curate,
    finalize_benchmark,
    load_decision_file,
    suggest_key_facts,
)
from factjury.corpus import (  # noqa: E402
    ClinicalNote,
    NoteKind,
    PatientCase,
    load_keyfacts,
    parse_timestamp,
    save_case,
    save_record,
)
from factjury.jury import (  # noqa: E402
    Dimension,
    JudgePanel,
    build_judge_request,
    evaluate_run,
)
from factjury.medagentbrief import SummaryEngine  # noqa: E402
from factjury.provider import ChatResponse, request_fingerprint  # noqa: E402
from factjury.report import build_distill_request, collect_failures  # noqa: E402
from factjury.stats import RaterMatrix, save_rater_matrix  # noqa: E402

OUT = ROOT / "tests" / "fixtures" / "replay"

GEN_MODEL = "gen-model"
ASSISTANT = "assistant-1"
SUMMARIZER = "summarizer-1"
JUDGES = ("judge-a", "judge-b", "judge-c")
PANEL = JudgePanel(panel_id="small", judges=JUDGES)

_REFINE_NOTE_INDEX = re.compile(r"PROGRESS NOTE ([0-9]+):")

T, F = True, False


# --- case material -----------------------------------------------------------

def N(case_id, note_id, kind, stamp, text):
    return ClinicalNote(note_id=note_id, case_id=case_id, kind=kind,
                        authored_at=parse_timestamp(stamp), text=text)


def build_cases():
    c1 = "demo-01"
    case1 = PatientCase.from_notes(c1, [
        N(c1, "hp", NoteKind.HISTORY_PHYSICAL, "2024-03-01T08:00:00Z",
          "Admission H&P. 58-year-old man with hypertension presenting with "
          "fever, rigors, jaundice, and right upper quadrant pain for two "
          "days. Exam: febrile to 38.9, icteric, tender right upper "
          "quadrant. Labs: total bilirubin 6.2, alkaline phosphatase 410, "
          "WBC 15.4. Ultrasound shows a dilated common bile duct of 11 mm "
          "with suspected choledocholithiasis. Assessment: acute "
          "cholangitis. Plan: blood cultures, intravenous "
          "piperacillin-tazobactam, fluids, gastroenterology consult for "
          "urgent ERCP."),
        N(c1, "p1", NoteKind.PROGRESS, "2024-03-02T09:00:00Z",
          "Progress day 2. Underwent ERCP this morning: sphincterotomy "
          "performed, one obstructing stone retrieved, plastic biliary "
          "stent placed with good drainage. Blood cultures from admission "
          "growing Escherichia coli sensitive to ciprofloxacin. Afebrile "
          "since the procedure. Plan: narrow antibiotics to oral "
          "ciprofloxacin, advance diet."),
        N(c1, "p2", NoteKind.PROGRESS, "2024-03-03T09:00:00Z",
          "Progress day 3. Afebrile, tolerating regular diet, pain "
          "resolved. Bilirubin down to 2.1. Ambulating independently. "
          "Anticipate discharge tomorrow."),
        N(c1, "ds", NoteKind.DISCHARGE_SUMMARY, "2024-03-04T11:00:00Z",
          "Discharge summary. Admitted with acute cholangitis from "
          "choledocholithiasis. ERCP with sphincterotomy, stone extraction, "
          "and biliary stent placement. Cultures grew E. coli; antibiotics "
          "narrowed to oral ciprofloxacin for a ten day course. Discharged "
          "home in good condition. Gastroenterology follow-up in two weeks "
          "for stent removal planning and repeat liver function tests."),
    ])

    c2 = "demo-02"
    case2 = PatientCase.from_notes(c2, [
        N(c2, "hp", NoteKind.HISTORY_PHYSICAL, "2024-03-10T09:00:00Z",
          "Admission H&P. 71-year-old woman with ischemic cardiomyopathy "
          "presenting with one week of progressive dyspnea, orthopnea, and "
          "leg swelling. Exam: jugular venous pressure elevated, bibasilar "
          "crackles, pitting edema to the knees. Weight 87 kg. BNP 2400. "
          "Chest radiograph with pulmonary vascular congestion. Assessment: "
          "acute decompensated heart failure. Plan: intravenous furosemide, "
          "strict intake and output, daily weights, echocardiogram."),
        N(c2, "p1", NoteKind.PROGRESS, "2024-03-11T09:00:00Z",
          "Progress day 2. Transthoracic echocardiogram today shows a "
          "severely reduced ejection fraction of 25 percent with global "
          "hypokinesis. Net negative 2.1 liters on intravenous furosemide. "
          "Breathing improved, still orthopneic. Continue diuresis."),
        N(c2, "p2", NoteKind.PROGRESS, "2024-03-12T09:00:00Z",
          "Progress day 3. Net negative another 1.8 liters. Off oxygen. "
          "Started sacubitril-valsartan and continued the beta blocker as "
          "guideline-directed therapy for reduced ejection fraction. "
          "Potassium and renal function stable."),
        N(c2, "p3", NoteKind.PROGRESS, "2024-03-13T09:00:00Z",
          "Progress day 4. Near euvolemic. Weight 82 kg this morning. "
          "Transitioned to oral furosemide. Ambulating without "
          "desaturation. Discharge planning underway."),
        N(c2, "ds", NoteKind.DISCHARGE_SUMMARY, "2024-03-14T10:00:00Z",
          "Discharge summary. Admitted for acute decompensated heart "
          "failure with newly documented ejection fraction of 25 percent. "
          "Diuresed to euvolemia; discharge weight 82 kg. "
          "Guideline-directed therapy initiated including "
          "sacubitril-valsartan. Oral furosemide at discharge. Cardiology "
          "follow-up in one week."),
    ])

    c3 = "demo-03"
    case3 = PatientCase.from_notes(c3, [
        N(c3, "hp", NoteKind.HISTORY_PHYSICAL, "2024-03-20T10:00:00Z",
          "Admission H&P. 44-year-old man, active smoker, with three days "
          "of productive cough, fever, and pleuritic right-sided chest "
          "pain. Exam: febrile, crackles at the right base. Chest "
          "radiograph shows a right lower lobe consolidation. Assessment: "
          "community-acquired pneumonia. Plan: intravenous ceftriaxone and "
          "azithromycin, blood and sputum cultures."),
        N(c3, "p1", NoteKind.PROGRESS, "2024-03-21T09:00:00Z",
          "Progress day 2. Afebrile overnight, cough improving, oxygen "
          "saturations 96 percent on room air. Cultures without growth to "
          "date. Transitioned intravenous ceftriaxone to oral "
          "amoxicillin-clavulanate to complete a seven day course. "
          "Anticipate discharge this afternoon."),
        N(c3, "ds", NoteKind.DISCHARGE_SUMMARY, "2024-03-22T12:00:00Z",
          "Discharge summary. Admitted with right lower lobe "
          "community-acquired pneumonia. Improved on antibiotics, "
          "transitioned to oral amoxicillin-clavulanate. Discharged on day "
          "2. Repeat chest imaging in six weeks recommended given smoking "
          "history to confirm resolution."),
    ])
    return [case1, case2, case3]


FACTS = {
    "demo-01": [
        ("ERCP with sphincterotomy and biliary stent placement was "
         "performed.", "ManagementChange"),
        ("Antibiotics were narrowed to oral ciprofloxacin based on culture "
         "results.", "ManagementChange"),
        ("Gastroenterology follow-up in two weeks was arranged for stent "
         "removal planning.", "FollowUp"),
    ],
    "demo-02": [
        ("Echocardiography showed a severely reduced ejection fraction of "
         "25 percent.", "Diagnosis"),
        ("Sacubitril-valsartan was initiated as guideline-directed therapy.",
         "ManagementChange"),
        ("Discharge weight was 82 kilograms.", "Other"),
    ],
    "demo-03": [
        ("Community-acquired pneumonia of the right lower lobe was "
         "diagnosed.", "Diagnosis"),
        ("Intravenous ceftriaxone was transitioned to oral "
         "amoxicillin-clavulanate.", "ManagementChange"),
        ("Repeat chest imaging in six weeks was recommended to confirm "
         "resolution.", "FollowUp"),
    ],
}


# --- scripted generation outputs ----------------------------------------------
# The demo-02 drafts mis-transcribe the discharge weight (84 kg, truth 82 kg)
# and verification misses it: the one contradiction the jury should find.

AGENT_STEPS = {
    "demo-01": {
        "initial": """## ONE-LINER
58-year-old man admitted with acute cholangitis from choledocholithiasis, improving and nearing discharge.

## HOSPITAL COURSE
He presented with fever, jaundice, and right upper quadrant pain, with labs and imaging consistent with cholangitis from an obstructing common bile duct stone. He was treated with intravenous antibiotics and fluids. By hospital day 3 he was afebrile with bilirubin falling to 2.1, tolerating a regular diet, and ambulating independently.

## PROBLEM SUMMARY
1. Acute cholangitis: clinically resolved on antibiotics, afebrile, bilirubin improving.
2. Choledocholithiasis: source of biliary obstruction.""",
        "refine": {1: """## ONE-LINER
58-year-old man admitted with acute cholangitis from choledocholithiasis, treated with ERCP and improving at discharge.

## HOSPITAL COURSE
He presented with fever, jaundice, and right upper quadrant pain, with labs and imaging consistent with cholangitis from an obstructing common bile duct stone. He underwent ERCP with sphincterotomy, stone extraction, and placement of a plastic biliary stent with good drainage. <PROG_NOTE_1> Blood cultures grew Escherichia coli and antibiotics were narrowed to oral ciprofloxacin. <PROG_NOTE_1> By hospital day 3 he was afebrile with bilirubin falling to 2.1, tolerating a regular diet, and ambulating independently.

## PROBLEM SUMMARY
1. Acute cholangitis: E. coli bacteremia, clinically resolved on ciprofloxacin. <PROG_NOTE_1>
2. Choledocholithiasis: managed with ERCP, sphincterotomy, and biliary stent. <PROG_NOTE_1>"""},
    },
    "demo-02": {
        "initial": """## ONE-LINER
71-year-old woman with ischemic cardiomyopathy admitted for acute decompensated heart failure, diuresed to near euvolemia.

## HOSPITAL COURSE
She presented with a week of progressive dyspnea, orthopnea, and edema, with an elevated BNP and congestion on chest radiograph. She was diuresed with intravenous furosemide and improved steadily. By hospital day 4 she was near euvolemic with a weight of 84 kg, transitioned to oral furosemide, and ambulating without desaturation.

## PROBLEM SUMMARY
1. Acute decompensated heart failure: diuresed to near euvolemia, on oral furosemide.
2. Ischemic cardiomyopathy: chronic, on medical therapy.""",
        "refine": {1: """## ONE-LINER
71-year-old woman with ischemic cardiomyopathy admitted for acute decompensated heart failure, diuresed to near euvolemia.

## HOSPITAL COURSE
She presented with a week of progressive dyspnea, orthopnea, and edema, with an elevated BNP and congestion on chest radiograph. Transthoracic echocardiography showed a severely reduced ejection fraction of 25 percent with global hypokinesis. <PROG_NOTE_1> She was diuresed with intravenous furosemide and improved steadily. By hospital day 4 she was near euvolemic with a weight of 84 kg, transitioned to oral furosemide, and ambulating without desaturation.

## PROBLEM SUMMARY
1. Acute decompensated heart failure: diuresed to near euvolemia, on oral furosemide.
2. Ischemic cardiomyopathy with ejection fraction 25 percent. <PROG_NOTE_1>""", 2: """## ONE-LINER
71-year-old woman with ischemic cardiomyopathy admitted for acute decompensated heart failure, diuresed to near euvolemia on guideline-directed therapy.

## HOSPITAL COURSE
She presented with a week of progressive dyspnea, orthopnea, and edema, with an elevated BNP and congestion on chest radiograph. Transthoracic echocardiography showed a severely reduced ejection fraction of 25 percent with global hypokinesis. <PROG_NOTE_1> She was diuresed with intravenous furosemide and improved steadily. Sacubitril-valsartan was started with a beta blocker as guideline-directed therapy. <PROG_NOTE_2> By hospital day 4 she was near euvolemic with a weight of 84 kg, transitioned to oral furosemide, and ambulating without desaturation.

## PROBLEM SUMMARY
1. Acute decompensated heart failure: diuresed to near euvolemia, on oral furosemide.
2. Ischemic cardiomyopathy with ejection fraction 25 percent: sacubitril-valsartan and beta blocker started. <PROG_NOTE_1> <PROG_NOTE_2>"""},
    },
    "demo-03": {
        "initial": """## ONE-LINER
44-year-old man admitted with right lower lobe community-acquired pneumonia, improved and discharged on oral antibiotics.

## HOSPITAL COURSE
He presented with productive cough, fever, and pleuritic chest pain, with a right lower lobe consolidation on chest radiograph. He was treated with intravenous ceftriaxone and azithromycin, defervesced overnight, and maintained oxygen saturations of 96 percent on room air. Antibiotics were transitioned to oral amoxicillin-clavulanate to complete a seven day course.

## PROBLEM SUMMARY
1. Community-acquired pneumonia, right lower lobe: improved, completing an oral antibiotic course.
2. Tobacco use: counseled on cessation during admission.""",
        "refine": {},
    },
}

# verification keeps the last draft except for demo-03, where it strikes a
# counseling claim no source note supports
AGENT_VERIFIED = {
    "demo-01": AGENT_STEPS["demo-01"]["refine"][1],
    "demo-02": AGENT_STEPS["demo-02"]["refine"][2],
    "demo-03": AGENT_STEPS["demo-03"]["initial"].replace(
        "2. Tobacco use: counseled on cessation during admission.",
        "2. Tobacco use: active smoker."),
}

SINGLE_TEXTS = {
    "demo-01": """## ONE-LINER
58-year-old man admitted with acute cholangitis from choledocholithiasis, treated with ERCP.

## HOSPITAL COURSE
He presented with fever, jaundice, and right upper quadrant pain. Imaging showed a dilated common bile duct with choledocholithiasis. He underwent ERCP with sphincterotomy, stone extraction, and biliary stent placement, and continued on antibiotics with clinical improvement. Bilirubin fell to 2.1 before discharge.

## PROBLEM SUMMARY
1. Acute cholangitis: resolved on antibiotics after biliary decompression.
2. Choledocholithiasis: treated with ERCP and stent.""",
    "demo-02": """## ONE-LINER
71-year-old woman admitted with acute decompensated heart failure on ischemic cardiomyopathy.

## HOSPITAL COURSE
She was diuresed with intravenous furosemide with progressive improvement. Echocardiography showed an ejection fraction of 25 percent. Sacubitril-valsartan and a beta blocker were initiated as guideline-directed therapy. She reached near euvolemia with a discharge weight of 85 kg and transitioned to oral furosemide.

## PROBLEM SUMMARY
1. Acute decompensated heart failure: euvolemic on oral furosemide at discharge.
2. Reduced ejection fraction, 25 percent: guideline-directed therapy initiated.""",
    "demo-03": """## ONE-LINER
44-year-old man admitted with right lower lobe community-acquired pneumonia.

## HOSPITAL COURSE
He presented with productive cough and fever and was found to have a right lower lobe consolidation. He improved on intravenous ceftriaxone and azithromycin, which were continued through discharge, and remained afebrile on room air.

## PROBLEM SUMMARY
1. Community-acquired pneumonia: improved, completing intravenous therapy.""",
}


# --- scripted verdicts ---------------------------------------------------------

# per strategy: case -> [k1, k2, k3] consensus
PRESENCE = {
    "agent": {"demo-01": [T, T, F], "demo-02": [T, T, F], "demo-03": [T, T, F]},
    "single": {"demo-01": [T, F, F], "demo-02": [T, T, F], "demo-03": [T, F, F]},
}
CONTRADICTION = {
    "agent": {"demo-01": [F, F, F], "demo-02": [F, F, T], "demo-03": [F, F, F]},
    "single": {"demo-01": [F, F, F], "demo-02": [F, F, T], "demo-03": [F, T, F]},
}

# (summary_id, fact_id, dimension, judge) -> dissenting vote, so one decision
# is a genuine 2-1 majority rather than unanimous
VOTE_OVERRIDES = {
    ("demo-01-agent", "demo-01-k1", Dimension.PRESENCE, "judge-c"): False,
}

# same key -> raw free-text reply exercising the fallback verdict parse
FREETEXT_REPLIES = {
    ("demo-01-agent", "demo-01-k3", Dimension.PRESENCE, "judge-b"):
        "NO - the brief never mentions any gastroenterology follow-up.",
}

PRESENCE_YES = {
    "judge-a": "The hospital course states this fact directly.",
    "judge-b": "Included; the brief matches the fact as written.",
    "judge-c": "Present in the problem summary with consistent detail.",
}
PRESENCE_NO = {
    "judge-a": "No section of the brief covers this fact.",
    "judge-b": "Absent from all three sections.",
    "judge-c": "The brief does not mention it.",
}
CONTRA_YES = {
    "judge-a": "The brief reports a value that conflicts with this fact.",
    "judge-b": "The brief states something incompatible with the fact.",
    "judge-c": "Directly contradicted by a figure in the hospital course.",
}
CONTRA_NO = {
    "judge-a": "Nothing in the brief conflicts with this fact.",
    "judge-b": "No inconsistent statement found.",
    "judge-c": "The brief is silent or consistent on this point.",
}
DISSENT = {
    ("demo-01-agent", "demo-01-k1", Dimension.PRESENCE, "judge-c"):
        "The brief reports the procedure only in passing; I do not count "
        "this as included.",
}


def verdict_text(summary_id, fact_id, dimension, judge, value):
    key = (summary_id, fact_id, dimension, judge)
    if key in FREETEXT_REPLIES:
        return FREETEXT_REPLIES[key]
    if key in DISSENT:
        justification = DISSENT[key]
    elif dimension is Dimension.PRESENCE:
        justification = (PRESENCE_YES if value else PRESENCE_NO)[judge]
    else:
        justification = (CONTRA_YES if value else CONTRA_NO)[judge]
    return json.dumps({"verdict": "YES" if value else "NO",
                       "justification": justification})


def consensus(strategy, case_id, fact_index, dimension):
    table = PRESENCE if dimension is Dimension.PRESENCE else CONTRADICTION
    return table[strategy][case_id][fact_index]


# --- recording transport ---------------------------------------------------------

def scripted_entry(request, text):
    return {
        "text": text,
        "tokens_in": max(1, len(request.system_prompt + request.user_prompt) // 4),
        "tokens_out": max(1, len(text) // 4),
    }


class Recorder:
    """Answers like the replay backend will, while writing its script."""

    def __init__(self, reply):
        self.reply = reply
        self.script = {}

    def __call__(self, request):
        entry = scripted_entry(request, self.reply(request))
        fp = request_fingerprint(request)
        if self.script.get(fp, entry) != entry:
            raise AssertionError(f"fingerprint collision with different text: {fp}")
        self.script[fp] = entry
        return ChatResponse(text=entry["text"], tokens_in=entry["tokens_in"],
                            tokens_out=entry["tokens_out"], latency_s=Decimal("0"),
                            provider_id="replay", model_id=request.model_id)


def generation_reply(case_id):
    steps = AGENT_STEPS[case_id]

    def reply(request):
        prompt = request.user_prompt
        if "Draft a concise clinician-facing discharge brief" in prompt:
            return SINGLE_TEXTS[case_id]
        if "Start a working discharge brief" in prompt:
            return steps["initial"]
        if "Integrate salient new clinical information" in prompt:
            k = int(_REFINE_NOTE_INDEX.search(prompt).group(1))
            return steps["refine"][k]
        if "Review the working discharge brief" in prompt:
            return AGENT_VERIFIED[case_id]
        raise AssertionError(f"unexpected generation prompt: {prompt[:80]}")

    return reply


def script_transport(script):
    def transport(request):
        entry = script[request_fingerprint(request)]
        return ChatResponse(text=entry["text"], tokens_in=entry["tokens_in"],
                            tokens_out=entry["tokens_out"], latency_s=Decimal("0"),
                            provider_id="replay", model_id=request.model_id)

    return transport


# --- rater matrix for metaeval ---------------------------------------------------

def build_rater_matrix(items):
    # the majority of these seven columns agrees with the jury's presence
    # labels on 8 of 9 items (the jury over-credits item 8)
    rows = {
        "phys1": [T, T, F, T, T, F, T, F, F],
        "phys2": [T, T, F, T, T, F, T, F, F],
        "phys3": [T, T, T, T, T, F, T, F, F],
        "phys4": [T, F, F, T, T, F, T, T, F],
        "phys5": [T, T, F, T, T, T, T, T, F],
        "phys6": [T, T, F, F, T, F, T, F, F],
        "phys7": [F, T, F, T, F, F, T, F, T],
    }
    raters = tuple(sorted(rows))
    labels = tuple(tuple(rows[r][i] for r in raters) for i in range(len(items)))
    matrix = RaterMatrix(items=tuple(items), raters=raters, labels=labels)
    matrix.validate()
    return matrix


CONFIG_TOML = """\
max_workers = 2

[paths]
corpus = "corpus"
benchmark = "benchmark"
runs = "runs"
metaeval = "metaeval"
report = "report"

[workflow]
generation_model = "gen-model"
assistant_model = "assistant-1"
summarizer_model = "summarizer-1"

[provider.replay]
kind = "replay"
fixture = "fixture.json"
models = [
  "gen-model", "assistant-1", "summarizer-1",
  "judge-a", "judge-b", "judge-c",
]

[prices.gen-model]
usd_per_1k_tokens_in = 0.01
usd_per_1k_tokens_out = 0.02

[panels]
small = ["judge-a", "judge-b", "judge-c"]
solo = ["judge-a"]
"""


def main():
    if OUT.exists():
        shutil.rmtree(OUT)
    OUT.mkdir(parents=True)
    cases = build_cases()
    script = {}

    # corpus
    for case in cases:
        save_case(case, OUT / "corpus" / case.case_id)

    # fact suggestion responses, decision files, benchmark
    (OUT / "decisions").mkdir()
    for case in cases:
        payload = json.dumps([{"text": text, "category": category}
                              for text, category in FACTS[case.case_id]])
        recorder = Recorder(lambda request, p=payload: p)
        candidates = suggest_key_facts(case.discharge_summary.text, ASSISTANT,
                                       recorder)
        script.update(recorder.script)
        decision_path = OUT / "decisions" / f"{case.case_id}.json"
        decision_path.write_text(json.dumps(
            [{"action": "accept", "index": i} for i in (1, 2, 3)], indent=2) + "\n")
        facts = curate(case.case_id, candidates, load_decision_file(decision_path))
        finalize_benchmark(case.case_id, facts,
                           OUT / "benchmark" / f"{case.case_id}.keyfacts.json")

    # generation responses; summaries staged for the judging dry run
    stage = Path(tempfile.mkdtemp(prefix="factjury-fixture-"))
    summaries = {"agent": [], "single": []}
    for case in cases:
        recorder = Recorder(generation_reply(case.case_id))
        engine = SummaryEngine(recorder, GEN_MODEL)
        summaries["agent"].append(engine.generate_agentbrief(case))
        summaries["single"].append(engine.single_prompt_generate(case))
        script.update(recorder.script)
        for strategy in ("agent", "single"):
            summary = summaries[strategy][-1]
            save_record(summary, stage / "runs" / f"run-{strategy}" / "summaries"
                        / f"{summary.summary_id}.json")
    assert sum(len(s.citations) for s in summaries["agent"]) == 3

    # one judge response per (summary, fact, dimension, judge)
    for strategy in ("agent", "single"):
        for summary in summaries[strategy]:
            facts = load_keyfacts(OUT / "benchmark" / f"{summary.case_id}.keyfacts.json")
            for i, fact in enumerate(facts):
                for dimension in (Dimension.PRESENCE, Dimension.CONTRADICTION):
                    base = consensus(strategy, summary.case_id, i, dimension)
                    for judge in JUDGES:
                        value = VOTE_OVERRIDES.get(
                            (summary.summary_id, fact.fact_id, dimension, judge),
                            base)
                        request = build_judge_request(summary, fact, judge, dimension)
                        entry = scripted_entry(request, verdict_text(
                            summary.summary_id, fact.fact_id, dimension, judge, value))
                        fp = request_fingerprint(request)
                        assert script.get(fp, entry) == entry
                        script[fp] = entry

    # dry-run the evaluation off the in-progress script so the theme prompts
    # are built from the very verdict stream evaluation will produce
    replay = script_transport(script)
    for strategy in ("agent", "single"):
        evaluate_run(stage / "runs" / f"run-{strategy}", OUT / "benchmark",
                     PANEL, replay)
    theme_payload = {
        Dimension.PRESENCE: json.dumps([
            {"title": "Follow-up plans omitted",
             "fact_ids": ["demo-01-k3", "demo-03-k3"],
             "excerpt": "the brief never mentions any gastroenterology "
                        "follow-up"},
            {"title": "Objective discharge data dropped",
             "fact_ids": ["demo-02-k3", "demo-03-k2"],
             "excerpt": "No section of the brief covers this fact."},
        ]),
        Dimension.CONTRADICTION: json.dumps([
            {"title": "Numeric values contradicted",
             "fact_ids": ["demo-02-k3"],
             "excerpt": "The brief reports a value that conflicts with this "
                        "fact."},
        ]),
    }
    for dimension in (Dimension.PRESENCE, Dimension.CONTRADICTION):
        failures = []
        for strategy in ("agent", "single"):
            failures += collect_failures(stage / "runs" / f"run-{strategy}",
                                         OUT / "benchmark", dimension)
        request = build_distill_request(failures, SUMMARIZER, dimension)
        script[request_fingerprint(request)] = scripted_entry(
            request, theme_payload[dimension])
    shutil.rmtree(stage)

    # rater matrix keyed to the agentbrief run's presence items
    items = sorted((s.summary_id, f"{s.case_id}-k{k}")
                   for s in summaries["agent"] for k in (1, 2, 3))
    save_rater_matrix(build_rater_matrix(items), OUT / "raters.csv")

    (OUT / "factjury.toml").write_text(CONFIG_TOML)
    fixture = {"schema_version": SCHEMA_VERSION,
               "responses": dict(sorted(script.items()))}
    (OUT / "fixture.json").write_text(json.dumps(fixture, indent=2) + "\n")

    self_check()
    print(f"fixture written to {OUT} ({len(script)} scripted responses)")


def self_check():
    """Replay the full pipeline from the written fixture, assert the numbers."""
    from factjury.cli import main as cli_main
    from factjury.report import aggregate, embedded_document

    work = Path(tempfile.mkdtemp(prefix="factjury-check-"))
    try:
        for entry in OUT.iterdir():
            if entry.is_dir():
                shutil.copytree(entry, work / entry.name)
            else:
                shutil.copy(entry, work / entry.name)
        cfg = ["--config", str(work / "factjury.toml")]

        # curating from the decision files must reproduce the committed benchmark
        before = {p.name: p.read_bytes() for p in (work / "benchmark").iterdir()}
        for case_id in ("demo-01", "demo-02", "demo-03"):
            assert cli_main(cfg + [
                "curate", "--case", case_id,
                "--decisions", str(work / "decisions" / f"{case_id}.json")]) == 0
        after = {p.name: p.read_bytes() for p in (work / "benchmark").iterdir()}
        assert before == after, "curate did not reproduce the benchmark files"

        assert cli_main(cfg + ["generate", "--run", "run-agent",
                               "--strategy", "agentbrief"]) == 0
        assert cli_main(cfg + ["generate", "--run", "run-single",
                               "--strategy", "single"]) == 0
        assert cli_main(cfg + ["evaluate", "--run", "run-agent",
                               "--panel", "small"]) == 0
        assert cli_main(cfg + ["evaluate", "--run", "run-single",
                               "--panel", "small"]) == 0

        card = aggregate(work / "runs" / "run-agent")
        assert abs(card.presence_rate - 6 / 9) < 1e-12, card.presence_rate
        assert abs(card.contradiction_rate - 1 / 9) < 1e-12, card.contradiction_rate
        n_citations = sum(
            len(json.loads(p.read_text())["citations"])
            for p in (work / "runs" / "run-agent" / "summaries").iterdir())
        assert n_citations == 3, n_citations

        assert cli_main(cfg + ["metaeval",
                               "--raters", str(work / "raters.csv"),
                               "--jury-decisions", str(work / "runs" / "run-agent"),
                               "--n-boot", "500", "--seed", "7"]) == 0
        assert cli_main(cfg + ["report", "--runs", "run-agent", "run-single",
                               "--metaeval", str(work / "metaeval" / "results.json"),
                               "--generated-at", "2026-01-01T00:00:00Z"]) == 0
        html_text = (work / "report" / "report.html").read_text()
        assert embedded_document(html_text) == json.loads(
            (work / "report" / "report.json").read_text())
    finally:
        shutil.rmtree(work)


if __name__ == "__main__":
    main()
