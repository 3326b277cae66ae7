"""Agreement meta-statistics: Cohen's kappa, panel gold standards, leave-one-out
single-rater baselines, bootstrap confidence intervals, and non-inferiority tests.

All estimators are pure functions of their inputs plus an explicit seed, so
identical calls reproduce byte-identical results across runs and platforms.

Bootstrap stream contract
-------------------------
Resampling draws from numpy's PCG64 so a reference script can replicate the
exact index stream (see scripts/stats_oracle.py):

* main index table: ``Generator(PCG64(seed)).integers(0, n, size=(n_boot, n))``,
  row ``i`` holding the item indices of resample ``i``;
* a resample with no usable pairs after pairwise deletion is redrawn from
  ``Generator(PCG64(SeedSequence([seed, i])))``, one ``integers(0, n, size=n)``
  draw per attempt, at most 10 attempts, then skipped and counted;
* percentiles interpolate linearly on the sorted statistics:
  ``h = (m - 1) * q``; result ``s[floor(h)] + (h - floor(h)) * (s[floor(h)+1] - s[floor(h)])``.

Labels are ``True`` / ``False`` / ``None`` where ``None`` means missing (and,
for gold standards, a tied majority); pairwise deletion drops an item whenever
either side is ``None``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    EmptyAfterPairwiseDeletion,
    InvariantViolation,
    MisalignedItems,
    MissingDecisions,
    TooFewItems,
)

Label = Optional[bool]


# --- rater matrices ----------------------------------------------------------

@dataclass(frozen=True)
class RaterMatrix:
    """Item x rater grid of binary labels with missing cells.

    Rows follow ``items`` (summary_id, fact_id pairs), columns follow ``raters``.
    """

    items: tuple[tuple[str, str], ...]
    raters: tuple[str, ...]
    labels: tuple[tuple[Label, ...], ...]

    def validate(self) -> None:
        if len(set(self.items)) != len(self.items):
            raise InvariantViolation("duplicate items in rater matrix")
        if len(self.raters) < 2:
            raise InvariantViolation("rater matrix needs at least 2 raters")
        if len(self.labels) != len(self.items):
            raise InvariantViolation("label grid does not match item count")
        for (sid, fid), row in zip(self.items, self.labels):
            if len(row) != len(self.raters):
                raise InvariantViolation(f"label row for ({sid}, {fid}) does not match rater count")
            if all(v is None for v in row):
                raise InvariantViolation(
                    f"item ({sid}, {fid}) has no non-missing label", summary_id=sid, fact_id=fid
                )

    def column(self, rater_id: str) -> list[Label]:
        j = self.raters.index(rater_id)
        return [row[j] for row in self.labels]

    @property
    def n_items(self) -> int:
        return len(self.items)


def load_rater_matrix(path: str | Path) -> RaterMatrix:
    """Read an item x rater CSV: header = summary_id, fact_id, rater ids; cells 0/1/empty."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvariantViolation("rater matrix CSV is empty", file=str(path)) from None
        if len(header) < 4 or header[0] != "summary_id" or header[1] != "fact_id":
            raise InvariantViolation(
                "rater matrix header must start with summary_id, fact_id and list >= 2 raters",
                file=str(path),
            )
        raters = tuple(header[2:])
        items: list[tuple[str, str]] = []
        rows: list[tuple[Label, ...]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InvariantViolation(f"row {lineno} has {len(row)} cells, expected {len(header)}",
                                         file=str(path))
            items.append((row[0], row[1]))
            labels: list[Label] = []
            for cell in row[2:]:
                cell = cell.strip()
                if cell == "":
                    labels.append(None)
                elif cell == "1":
                    labels.append(True)
                elif cell == "0":
                    labels.append(False)
                else:
                    raise InvariantViolation(f"row {lineno}: cell {cell!r} is not 0, 1, or empty",
                                             file=str(path))
            rows.append(tuple(labels))
    matrix = RaterMatrix(items=tuple(items), raters=raters, labels=tuple(rows))
    matrix.validate()
    return matrix


def save_rater_matrix(matrix: RaterMatrix, path: str | Path) -> None:
    matrix.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["summary_id", "fact_id", *matrix.raters])
        for (sid, fid), row in zip(matrix.items, matrix.labels):
            writer.writerow([sid, fid] + ["" if v is None else ("1" if v else "0") for v in row])


# --- results -----------------------------------------------------------------

@dataclass(frozen=True)
class AgreementResult:
    kappa: float
    ci_low: float
    ci_high: float
    ci_level: float
    n_items: int
    seed: int
    n_boot: int
    n_skipped: int


@dataclass(frozen=True)
class NonInferiorityResult:
    delta_kappa: float
    ci_low: float       # two-sided 90% interval, i.e. a one-sided 95% bound
    ci_high: float
    ci95_low: float
    ci95_high: float
    p_value: float
    margin: float
    non_inferior: bool
    n_boot: int
    seed: int
    n_skipped: int


# --- Cohen's kappa -------------------------------------------------------------

def cohen_kappa(a: Sequence[Label], b: Sequence[Label]) -> float:
    """Chance-corrected two-rater agreement over binary labels.

    Items with a missing label on either side are dropped pairwise first.
    kappa = (p_o - p_e) / (1 - p_e); when both raters are degenerate on the
    same single category (p_e = 1), returns 1.0 by convention.
    """
    if len(a) != len(b):
        raise MisalignedItems(f"label sequences differ in length: {len(a)} vs {len(b)}")
    pairs = [(x, y) for x, y in zip(a, b) if x is not None and y is not None]
    if not pairs:
        raise EmptyAfterPairwiseDeletion("no items left after pairwise deletion")
    n = len(pairs)
    agree = 0
    a_t = 0
    b_t = 0
    for x, y in pairs:
        if bool(x) == bool(y):
            agree += 1
        if x:
            a_t += 1
        if y:
            b_t += 1
    a_f = n - a_t
    b_f = n - b_t
    p_o = agree / n
    p_e = (a_t * b_t + a_f * b_f) / (n * n)
    if p_e == 1.0:
        return 1.0
    return (p_o - p_e) / (1 - p_e)


# --- panel gold and leave-one-out baseline -------------------------------------

def majority_gold(matrix: RaterMatrix, raters: Sequence[str] | None = None) -> list[Label]:
    """Per-item majority label over the given rater subset (default: all raters).

    Missing labels do not vote. Even splits, and items where the whole subset
    is missing, yield ``None`` (tied) and are excluded downstream unless the
    caller decides otherwise.
    """
    subset = tuple(raters) if raters is not None else matrix.raters
    if not subset:
        raise InvariantViolation("rater subset must not be empty")
    cols = [matrix.raters.index(r) for r in subset]
    out: list[Label] = []
    for row in matrix.labels:
        t = sum(1 for j in cols if row[j] is True)
        f = sum(1 for j in cols if row[j] is False)
        if t > f:
            out.append(True)
        elif f > t:
            out.append(False)
        else:
            out.append(None)
    return out


def loo_human_baseline(matrix: RaterMatrix) -> tuple[float, dict[str, float | None]]:
    """Mean leave-one-out agreement: each rater's kappa against the majority
    of the remaining raters, averaged without weights.

    Tied leave-one-out items are excluded per rater (pairwise deletion treats
    them as missing). A rater with nothing left to score gets ``None`` and is
    excluded from the mean.
    """
    if len(matrix.raters) < 3:
        raise TooFewItems("leave-one-out baseline needs at least 3 raters")
    per: dict[str, float | None] = {}
    total = 0.0
    count = 0
    for r in matrix.raters:
        others = [o for o in matrix.raters if o != r]
        gold_r = majority_gold(matrix, others)
        try:
            k = cohen_kappa(matrix.column(r), gold_r)
        except EmptyAfterPairwiseDeletion:
            per[r] = None
            continue
        per[r] = k
        total += k
        count += 1
    if count == 0:
        raise EmptyAfterPairwiseDeletion("no rater had scoreable items")
    return total / count, per


# --- vectorized bootstrap machinery -----------------------------------------

def _encode(labels: Sequence[Label]) -> np.ndarray:
    """Map labels to int8: 1 = true, 0 = false, -1 = missing."""
    out = np.empty(len(labels), dtype=np.int8)
    for i, v in enumerate(labels):
        out[i] = -1 if v is None else (1 if v else 0)
    return out


def _kappa_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise kappa for (n_boot, n) label arrays; NaN where nothing is scoreable."""
    valid = (a >= 0) & (b >= 0)
    nv = valid.sum(axis=1)
    agree = ((a == b) & valid).sum(axis=1)
    a_t = ((a == 1) & valid).sum(axis=1)
    b_t = ((b == 1) & valid).sum(axis=1)
    a_f = nv - a_t
    b_f = nv - b_t
    with np.errstate(invalid="ignore", divide="ignore"):
        p_o = agree / nv
        p_e = (a_t * b_t + a_f * b_f) / (nv * nv)
        k = (p_o - p_e) / (1.0 - p_e)
    k = np.where(p_e == 1.0, 1.0, k)
    return np.where(nv == 0, np.nan, k)


def _percentile(values: np.ndarray, q: float) -> float:
    """Linear-interpolation percentile, q in [0, 1], matching the stream contract."""
    s = np.sort(values)
    m = s.size
    if m == 0:
        raise TooFewItems("no bootstrap statistics to summarize")
    if m == 1:
        return float(s[0])
    h = (m - 1) * q
    lo = int(h)
    if lo >= m - 1:
        return float(s[m - 1])
    frac = h - lo
    return float(s[lo] + frac * (s[lo + 1] - s[lo]))


def _resample_indices(seed: int, n_boot: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.integers(0, n, size=(n_boot, n))


def _redraw_generator(seed: int, i: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, int(i)])))


_MAX_REDRAWS = 10


def bootstrap_kappa_ci(
    evaluator_labels: Sequence[Label],
    gold_labels: Sequence[Label],
    n_boot: int = 9999,
    level: float = 0.95,
    seed: int = 0,
) -> AgreementResult:
    """Percentile bootstrap interval for kappa between an evaluator and a gold standard.

    Items are resampled with replacement ``n_boot`` times using the documented
    index stream; degenerate resamples follow the kappa conventions, and
    resamples with nothing left after deletion are redrawn (capped, then
    skipped and counted in ``n_skipped``).
    """
    if len(evaluator_labels) != len(gold_labels):
        raise MisalignedItems(
            f"evaluator has {len(evaluator_labels)} items, gold has {len(gold_labels)}"
        )
    n = len(evaluator_labels)
    if n < 2:
        raise TooFewItems(f"need at least 2 items, got {n}")
    point = cohen_kappa(evaluator_labels, gold_labels)
    n_used = sum(
        1 for x, y in zip(evaluator_labels, gold_labels) if x is not None and y is not None
    )

    ev = _encode(evaluator_labels)
    gold = _encode(gold_labels)
    idx = _resample_indices(seed, n_boot, n)
    kappas = _kappa_rows(ev[idx], gold[idx])

    n_skipped = 0
    for i in np.flatnonzero(np.isnan(kappas)):
        redraw = _redraw_generator(seed, i)
        for _ in range(_MAX_REDRAWS):
            row = redraw.integers(0, n, size=n)
            k = _kappa_rows(ev[row][None, :], gold[row][None, :])[0]
            if not np.isnan(k):
                kappas[i] = k
                break
        else:
            n_skipped += 1
    kappas = kappas[~np.isnan(kappas)]

    lo_q = (1.0 - level) / 2.0
    return AgreementResult(
        kappa=point,
        ci_low=_percentile(kappas, lo_q),
        ci_high=_percentile(kappas, 1.0 - lo_q),
        ci_level=level,
        n_items=n_used,
        seed=seed,
        n_boot=n_boot,
        n_skipped=n_skipped,
    )


def non_inferiority_test(
    evaluator_labels: Sequence[Label],
    rater_matrix: RaterMatrix,
    gold_labels: Sequence[Label],
    margin: float = 0.10,
    n_boot: int = 9999,
    seed: int = 0,
) -> NonInferiorityResult:
    """One-sided non-inferiority of an evaluator against the mean leave-one-out
    human baseline, by paired item bootstrap.

    Each resample recomputes both the evaluator's kappa against the gold
    standard and every rater's leave-one-out kappa from a single shared index
    row, so the difference is paired throughout. The p-value is the smoothed
    tail fraction (count(delta* <= -margin) + 1) / (n_boot + 1); the reported
    interval is the two-sided 90% percentile interval (its lower bound is the
    one-sided 95% bound the non-inferiority decision uses), with the two-sided
    95% interval alongside.
    """
    n = len(evaluator_labels)
    if len(gold_labels) != n or rater_matrix.n_items != n:
        raise MisalignedItems(
            "evaluator, gold, and rater matrix must be aligned on the same item list"
        )
    if n < 2:
        raise TooFewItems(f"need at least 2 items, got {n}")

    loo_mean_full, _ = loo_human_baseline(rater_matrix)
    delta_point = cohen_kappa(evaluator_labels, gold_labels) - loo_mean_full

    ev = _encode(evaluator_labels)
    gold = _encode(gold_labels)
    rater_cols = [_encode(rater_matrix.column(r)) for r in rater_matrix.raters]
    loo_gold_cols = [
        _encode(majority_gold(rater_matrix, [o for o in rater_matrix.raters if o != r]))
        for r in rater_matrix.raters
    ]

    def deltas_for(idx: np.ndarray) -> np.ndarray:
        k_eval = _kappa_rows(ev[idx], gold[idx])
        total = np.zeros(idx.shape[0])
        count = np.zeros(idx.shape[0], dtype=np.int64)
        for rater, loo_gold in zip(rater_cols, loo_gold_cols):
            k_r = _kappa_rows(rater[idx], loo_gold[idx])
            ok = ~np.isnan(k_r)
            total[ok] += k_r[ok]
            count[ok] += 1
        with np.errstate(invalid="ignore"):
            loo_mean = np.where(count > 0, total / count, np.nan)
        return k_eval - loo_mean

    idx = _resample_indices(seed, n_boot, n)
    deltas = deltas_for(idx)

    n_skipped = 0
    for i in np.flatnonzero(np.isnan(deltas)):
        redraw = _redraw_generator(seed, i)
        for _ in range(_MAX_REDRAWS):
            row = redraw.integers(0, n, size=n)
            d = deltas_for(row[None, :])[0]
            if not np.isnan(d):
                deltas[i] = d
                break
        else:
            n_skipped += 1
    deltas = deltas[~np.isnan(deltas)]

    count_below = int(np.count_nonzero(deltas <= -margin))
    ci_low = _percentile(deltas, 0.05)
    return NonInferiorityResult(
        delta_kappa=delta_point,
        ci_low=ci_low,
        ci_high=_percentile(deltas, 0.95),
        ci95_low=_percentile(deltas, 0.025),
        ci95_high=_percentile(deltas, 0.975),
        p_value=(count_below + 1) / (n_boot + 1),
        margin=margin,
        non_inferior=ci_low > -margin,
        n_boot=n_boot,
        seed=seed,
        n_skipped=n_skipped,
    )


# --- score aggregation --------------------------------------------------------

def presence_score(decisions: Iterable, dimension) -> float:
    """Micro-averaged fraction of jury decisions that came out true for one dimension.

    Works for both dimensions: with the presence dimension this is the fact
    presence score, with the contradiction dimension the contradiction rate.
    """
    relevant = [d for d in decisions if d.dimension == dimension]
    if not relevant:
        raise MissingDecisions(f"no decisions for dimension {dimension}")
    return sum(1 for d in relevant if d.decision) / len(relevant)
