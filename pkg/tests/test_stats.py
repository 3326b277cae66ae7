"""Unit and property tests for agreement statistics.

Hand-worked examples pin the arithmetic; hypothesis covers the invariants;
the committed 7x60 fixture (built by scripts/stats_oracle.py) pins the
leave-one-out baseline against an independent loop implementation.
"""

import json
from collections import namedtuple
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factjury.errors import (
    EmptyAfterPairwiseDeletion,
    InvariantViolation,
    MisalignedItems,
    MissingDecisions,
    TooFewItems,
)
from factjury.stats import (
    RaterMatrix,
    bootstrap_kappa_ci,
    cohen_kappa,
    load_rater_matrix,
    loo_human_baseline,
    majority_gold,
    non_inferiority_test,
    presence_score,
    save_rater_matrix,
    _percentile,
)

FIXTURES = Path(__file__).parent / "fixtures"

T, F, N = True, False, None


def make_matrix(rows, raters=None):
    raters = raters or tuple(f"r{i + 1}" for i in range(len(rows[0])))
    items = tuple((f"s{i + 1}", "k1") for i in range(len(rows)))
    m = RaterMatrix(items=items, raters=tuple(raters), labels=tuple(tuple(r) for r in rows))
    m.validate()
    return m


# --- cohen_kappa: hand-worked cases -----------------------------------------

def test_kappa_perfect_agreement():
    assert cohen_kappa([T, F, T, F], [T, F, T, F]) == 1.0


def test_kappa_half():
    # agree on 3/4, both marginals balanced enough that p_e = 0.5
    assert cohen_kappa([T, T, T, F], [T, T, F, F]) == 0.5


def test_kappa_chance_level():
    assert cohen_kappa([T, T, F, F], [T, F, F, T]) == 0.0


def test_kappa_perfect_disagreement():
    assert cohen_kappa([T, T, F, F], [F, F, T, T]) == -1.0


def test_kappa_degenerate_same_category_is_one():
    # both raters said nothing but True: p_e = 1, defined as full agreement
    assert cohen_kappa([T, T, T], [T, T, T]) == 1.0


def test_kappa_degenerate_opposite_categories():
    # p_e = 0 here, so kappa equals raw agreement = 0
    assert cohen_kappa([T, T], [F, F]) == 0.0


def test_kappa_pairwise_deletion():
    # items 2 and 3 drop, leaving pairs (T,T) and (F,T)
    a = [T, N, F, F]
    b = [T, F, N, T]
    assert cohen_kappa(a, b) == 0.0


def test_kappa_length_mismatch():
    with pytest.raises(MisalignedItems):
        cohen_kappa([T, F], [T, F, T])


def test_kappa_nothing_left():
    with pytest.raises(EmptyAfterPairwiseDeletion):
        cohen_kappa([N, T], [F, N])


# --- cohen_kappa: properties --------------------------------------------------

label_lists = st.lists(st.sampled_from([True, False, None]), min_size=2, max_size=40)


def has_valid_pair(a, b):
    return any(x is not None and y is not None for x, y in zip(a, b))


@st.composite
def label_pairs(draw):
    a = draw(label_lists)
    b = draw(st.lists(st.sampled_from([True, False, None]), min_size=len(a), max_size=len(a)))
    if not has_valid_pair(a, b):
        i = draw(st.integers(min_value=0, max_value=len(a) - 1))
        a[i] = draw(st.booleans())
        b[i] = draw(st.booleans())
    return a, b


@given(label_pairs())
@settings(max_examples=200, deadline=None)
def test_kappa_symmetric(pair):
    a, b = pair
    assert cohen_kappa(a, b) == cohen_kappa(b, a)


@given(label_pairs())
@settings(max_examples=200, deadline=None)
def test_kappa_bounded(pair):
    a, b = pair
    k = cohen_kappa(a, b)
    assert -1.0 - 1e-12 <= k <= 1.0 + 1e-12


@given(label_pairs())
@settings(max_examples=200, deadline=None)
def test_kappa_invariant_under_label_flip(pair):
    a, b = pair
    flip = lambda xs: [None if x is None else not x for x in xs]
    assert cohen_kappa(a, b) == cohen_kappa(flip(a), flip(b))


# --- majority_gold -------------------------------------------------------------

def test_majority_basic():
    m = make_matrix([[T, T, T, F, F, F, T]])
    assert majority_gold(m) == [True]


def test_majority_even_split_is_tied():
    m = make_matrix([[T, T, F, F]])
    assert majority_gold(m) == [None]


def test_majority_missing_do_not_vote():
    m = make_matrix([[T, N, N]])
    assert majority_gold(m) == [True]


def test_majority_subset_all_missing_is_tied():
    m = make_matrix([[T, N, N]])
    assert majority_gold(m, raters=["r2", "r3"]) == [None]


def test_majority_subset_selection():
    m = make_matrix([[T, F, F]])
    assert majority_gold(m) == [False]
    assert majority_gold(m, raters=["r1"]) == [True]


def test_majority_empty_subset_rejected():
    m = make_matrix([[T, F, F]])
    with pytest.raises(InvariantViolation):
        majority_gold(m, raters=[])


# brute-force cross-check on small matrices

def brute_majority(row, cols):
    votes = [row[j] for j in cols if row[j] is not None]
    t = votes.count(True)
    f = votes.count(False)
    return True if t > f else False if f > t else None


@st.composite
def small_matrices(draw):
    n_raters = draw(st.integers(min_value=3, max_value=4))
    n_items = draw(st.integers(min_value=1, max_value=6))
    rows = []
    for _ in range(n_items):
        row = draw(
            st.lists(
                st.sampled_from([True, False, None]),
                min_size=n_raters,
                max_size=n_raters,
            ).filter(lambda r: any(v is not None for v in r))
        )
        rows.append(row)
    return make_matrix(rows)


@given(small_matrices())
@settings(max_examples=150, deadline=None)
def test_majority_matches_brute_force(m):
    cols = list(range(len(m.raters)))
    expected = [brute_majority(row, cols) for row in m.labels]
    assert majority_gold(m) == expected


@given(small_matrices())
@settings(max_examples=150, deadline=None)
def test_loo_matches_brute_force(m):
    # independent loop recomputation of the leave-one-out baseline
    per_expected = {}
    total = 0.0
    count = 0
    for j, r in enumerate(m.raters):
        other_cols = [c for c in range(len(m.raters)) if c != j]
        gold = [brute_majority(row, other_cols) for row in m.labels]
        own = [row[j] for row in m.labels]
        pairs = [(x, y) for x, y in zip(own, gold) if x is not None and y is not None]
        if not pairs:
            per_expected[r] = None
            continue
        n = len(pairs)
        agree = sum(1 for x, y in pairs if x == y)
        a_t = sum(1 for x, _ in pairs if x)
        b_t = sum(1 for _, y in pairs if y)
        p_e = (a_t * b_t + (n - a_t) * (n - b_t)) / (n * n)
        k = 1.0 if p_e == 1.0 else (agree / n - p_e) / (1 - p_e)
        per_expected[r] = k
        total += k
        count += 1

    if count == 0:
        with pytest.raises(EmptyAfterPairwiseDeletion):
            loo_human_baseline(m)
        return
    mean, per = loo_human_baseline(m)
    assert mean == total / count
    assert per == per_expected


# --- loo_human_baseline: hand-worked cases -----------------------------------

def test_loo_contrarian_rater():
    # r1 flips every item; the other six are unanimous. r1 scores -1 against
    # the majority of the rest, everyone else scores 1, mean = 5/7.
    base = [T, T, F, F]
    rows = [[not v] + [v] * 6 for v in base]
    m = make_matrix(rows)
    mean, per = loo_human_baseline(m)
    assert per["r1"] == -1.0
    assert all(per[f"r{i}"] == 1.0 for i in range(2, 8))
    assert mean == 5.0 / 7.0


def test_loo_identical_raters():
    m = make_matrix([[T] * 3, [F] * 3, [T] * 3])
    mean, per = loo_human_baseline(m)
    assert mean == 1.0
    assert set(per.values()) == {1.0}


def test_loo_needs_three_raters():
    m = make_matrix([[T, F]])
    with pytest.raises(TooFewItems):
        loo_human_baseline(m)


def test_loo_unscoreable_rater_excluded():
    # r3 never labels anything, so it has no leave-one-out kappa
    rows = [[T, T, N], [F, F, N], [T, F, N]]
    m = make_matrix(rows)
    mean, per = loo_human_baseline(m)
    assert per["r3"] is None
    assert per["r1"] is not None and per["r2"] is not None
    assert mean == (per["r1"] + per["r2"]) / 2


def test_loo_all_raters_unscoreable():
    # each item carries exactly one label, so every rater's own items vanish
    # from the majority of the others
    rows = [[T, N, N], [N, T, N], [N, N, T]]
    m = make_matrix(rows)
    with pytest.raises(EmptyAfterPairwiseDeletion):
        loo_human_baseline(m)


# --- frozen fixture: 7 raters x 60 items --------------------------------------

@pytest.fixture(scope="module")
def oracle():
    return json.loads((FIXTURES / "stats_oracle.json").read_text())


@pytest.fixture(scope="module")
def fixture_matrix():
    return load_rater_matrix(FIXTURES / "raters_7x60.csv")


def test_fixture_gold_matches_reference(oracle, fixture_matrix):
    expected = [None if v is None else bool(v) for v in oracle["gold"]]
    assert majority_gold(fixture_matrix) == expected
    assert None in expected  # at least one tied item is exercised


def test_fixture_loo_matches_reference(oracle, fixture_matrix):
    mean, per = loo_human_baseline(fixture_matrix)
    assert abs(mean - oracle["loo_mean"]) <= 1e-12
    for rater, expected in oracle["loo_per_rater"].items():
        assert abs(per[rater] - expected) <= 1e-12


# --- rater matrix validation and CSV round-trip --------------------------------

def test_matrix_rejects_duplicate_items():
    m = RaterMatrix(
        items=(("s1", "k1"), ("s1", "k1")),
        raters=("r1", "r2"),
        labels=((T, F), (F, T)),
    )
    with pytest.raises(InvariantViolation):
        m.validate()


def test_matrix_rejects_single_rater():
    m = RaterMatrix(items=(("s1", "k1"),), raters=("r1",), labels=((T,),))
    with pytest.raises(InvariantViolation):
        m.validate()


def test_matrix_rejects_all_missing_item():
    m = RaterMatrix(items=(("s1", "k1"),), raters=("r1", "r2"), labels=((N, N),))
    with pytest.raises(InvariantViolation):
        m.validate()


def test_matrix_csv_round_trip(tmp_path):
    m = make_matrix([[T, F, N], [N, T, F], [F, F, F]])
    path = tmp_path / "matrix.csv"
    save_rater_matrix(m, path)
    loaded = load_rater_matrix(path)
    assert loaded == m


def test_matrix_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("summary,fact,r1,r2\ns1,k1,1,0\n")
    with pytest.raises(InvariantViolation):
        load_rater_matrix(path)


def test_matrix_csv_rejects_bad_cell(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("summary_id,fact_id,r1,r2\ns1,k1,1,yes\n")
    with pytest.raises(InvariantViolation):
        load_rater_matrix(path)


# --- percentile interpolation ---------------------------------------------------

def test_percentile_interpolates_linearly():
    vals = np.array([1.0, 2.0, 3.0, 4.0])
    assert _percentile(vals, 0.5) == 2.5
    assert _percentile(vals, 0.0) == 1.0
    assert _percentile(vals, 1.0) == 4.0
    assert _percentile(np.array([7.0]), 0.3) == 7.0


# --- bootstrap_kappa_ci ---------------------------------------------------------

def test_bootstrap_is_deterministic():
    rng = np.random.Generator(np.random.PCG64(5))
    gold = [bool(v) for v in rng.integers(0, 2, size=40)]
    ev = [g if rng.random() > 0.2 else not g for g in gold]
    r1 = bootstrap_kappa_ci(ev, gold, n_boot=500, seed=42)
    r2 = bootstrap_kappa_ci(ev, gold, n_boot=500, seed=42)
    assert r1 == r2
    r3 = bootstrap_kappa_ci(ev, gold, n_boot=500, seed=43)
    assert r3 != r1


def test_bootstrap_point_estimate_matches_kappa():
    ev = [T, F, T, T, F, F, T, F]
    gold = [T, F, F, T, F, T, T, F]
    res = bootstrap_kappa_ci(ev, gold, n_boot=200, seed=0)
    assert res.kappa == cohen_kappa(ev, gold)
    assert res.n_items == 8
    assert -1.0 <= res.ci_low <= res.ci_high <= 1.0 + 1e-12


def test_bootstrap_degenerate_interval():
    labels = [T, F] * 10
    res = bootstrap_kappa_ci(labels, labels, n_boot=300, seed=9)
    assert res.kappa == 1.0
    assert res.ci_low == 1.0 and res.ci_high == 1.0
    assert res.n_skipped == 0


def test_bootstrap_redraws_unusable_resamples():
    # only one scoreable item, so many resamples need the redraw path; the
    # result must stay deterministic and every kept resample is degenerate
    ev = [T, N, N]
    gold = [T, T, T]
    r1 = bootstrap_kappa_ci(ev, gold, n_boot=200, seed=3)
    r2 = bootstrap_kappa_ci(ev, gold, n_boot=200, seed=3)
    assert r1 == r2
    assert r1.ci_low == 1.0 and r1.ci_high == 1.0
    assert r1.n_items == 1


def test_bootstrap_rejects_misaligned_inputs():
    with pytest.raises(MisalignedItems):
        bootstrap_kappa_ci([T, F], [T, F, T], n_boot=10, seed=0)
    with pytest.raises(TooFewItems):
        bootstrap_kappa_ci([T], [T], n_boot=10, seed=0)


# --- non_inferiority_test --------------------------------------------------------

def test_noninferiority_is_deterministic():
    m = make_matrix([[T, T, F], [F, F, F], [T, F, T], [F, T, F], [T, T, T]])
    gold = majority_gold(m)
    ev = [T, F, T, F, T]
    r1 = non_inferiority_test(ev, m, gold, margin=0.10, n_boot=400, seed=11)
    r2 = non_inferiority_test(ev, m, gold, margin=0.10, n_boot=400, seed=11)
    assert r1 == r2


def test_noninferiority_alignment_checks():
    m = make_matrix([[T, T, F], [F, F, F]])
    with pytest.raises(MisalignedItems):
        non_inferiority_test([T, F, T], m, [T, F], n_boot=10, seed=0)
    with pytest.raises(MisalignedItems):
        non_inferiority_test([T], m, [T, F], n_boot=10, seed=0)


def test_noninferiority_self_comparison_is_centered():
    # one rater judged against the majority of the other six, with zero margin:
    # the paired delta should straddle zero, so the smoothed tail probability
    # sits near one half (band checked against scripts/stats_oracle.py).
    rng = np.random.Generator(np.random.PCG64(7))
    n = 60
    truth = rng.random(n) < 0.5
    raters = [f"r{i + 1}" for i in range(7)]
    cols = {}
    for r in raters:
        flips = rng.random(n) < 0.15
        cols[r] = [bool(t) ^ bool(fl) for t, fl in zip(truth, flips)]
    m = make_matrix([[cols[r][i] for r in raters] for i in range(n)], raters=raters)
    gold = majority_gold(m, raters=raters[1:])
    res = non_inferiority_test(cols["r1"], m, gold, margin=0.0, n_boot=2000, seed=777)
    assert 0.45 <= res.p_value <= 0.55
    assert res.margin == 0.0


def test_noninferiority_interval_nesting():
    m = make_matrix([[T, T, F], [F, F, T], [T, F, T], [F, T, F], [T, T, T], [F, F, F]])
    gold = majority_gold(m)
    ev = [T, F, T, F, T, F]
    res = non_inferiority_test(ev, m, gold, margin=0.10, n_boot=500, seed=4)
    assert res.ci95_low <= res.ci_low <= res.ci_high <= res.ci95_high
    assert 0.0 < res.p_value <= 1.0
    assert res.non_inferior == (res.ci_low > -0.10)


# --- presence_score ---------------------------------------------------------------

Decision = namedtuple("Decision", ["dimension", "decision"])


def test_presence_score_counts_true_fraction():
    decisions = [Decision("presence", i < 54) for i in range(90)]
    decisions += [Decision("contradiction", i < 9) for i in range(90)]
    assert presence_score(decisions, "presence") == 0.6
    assert presence_score(decisions, "contradiction") == 0.1


def test_presence_score_requires_decisions():
    with pytest.raises(MissingDecisions):
        presence_score([], "presence")
