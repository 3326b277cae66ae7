#!/usr/bin/env python3
"""Generate the committed rater-agreement fixtures and brute-force reference stats.

Everything in this script is deliberately independent of the factjury package:
agreement and resampling statistics are computed with plain counting loops so
the test suite can compare the package's vectorized implementations against a
second, slower implementation. The only shared piece is the resample index
stream, which is fixed by contract (see factjury.stats docstring): indices are
drawn from numpy's PCG64 generator as ``integers(0, n, size=(n_boot, n))``,
with per-iteration redraw generators seeded from ``SeedSequence([seed, i])``.

Run from the repo root:

    python scripts/stats_oracle.py

Outputs (committed to the repo):
    tests/fixtures/raters_7x60.csv     item x rater 0/1 matrix, empty = missing
    tests/fixtures/evaluators_60.json  synthetic evaluator label vectors
    tests/fixtures/stats_oracle.json   frozen reference values
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

N_ITEMS = 60
N_RATERS = 7
N_MISSING = 8
SEED = 1234
N_BOOT = 9999
MARGIN = 0.10

FIXTURE_DIR = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


# --- reference statistics, loop style ---------------------------------------

def kappa(a, b):
    """Two-rater Cohen's kappa; None labels dropped pairwise; None if nothing left."""
    pairs = [(x, y) for x, y in zip(a, b) if x is not None and y is not None]
    if not pairs:
        return None
    n = len(pairs)
    agree = 0
    a_t = 0
    b_t = 0
    for x, y in pairs:
        if x == y:
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


def majority(values):
    """Majority of non-missing booleans; None on a tie or when nothing was voted."""
    t = sum(1 for v in values if v is True)
    f = sum(1 for v in values if v is False)
    if t > f:
        return True
    if f > t:
        return False
    return None


def panel_gold(matrix, raters, n):
    return [majority([matrix[r][i] for r in raters]) for i in range(n)]


def loo_gold_per_rater(matrix, raters, n):
    out = {}
    for r in raters:
        others = [o for o in raters if o != r]
        out[r] = [majority([matrix[o][i] for o in others]) for i in range(n)]
    return out


def loo_baseline(matrix, raters, n):
    """Per-rater kappa against the majority of the others, and the plain mean."""
    loo_gold = loo_gold_per_rater(matrix, raters, n)
    per = {}
    s = 0.0
    c = 0
    for r in raters:
        k = kappa(matrix[r], loo_gold[r])
        per[r] = k
        if k is not None:
            s += k
            c += 1
    return s / c, per


def percentile(values, q):
    """Linear-interpolation percentile on the sorted sample, q in [0, 1]."""
    s = sorted(values)
    m = len(s)
    if m == 1:
        return s[0]
    h = (m - 1) * q
    lo = int(h)
    if lo >= m - 1:
        return s[m - 1]
    frac = h - lo
    return s[lo] + frac * (s[lo + 1] - s[lo])


def resample_indices(seed, n_boot, n):
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.integers(0, n, size=(n_boot, n))


def redraw_generator(seed, i):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, int(i)])))


def bootstrap_kappa(eval_labels, gold_labels, n_boot, level, seed):
    n = len(eval_labels)
    idx = resample_indices(seed, n_boot, n)

    def kappa_for(row):
        return kappa([eval_labels[j] for j in row],
                     [gold_labels[j] for j in row])

    vals = []
    skipped = 0
    for i in range(n_boot):
        k = kappa_for(idx[i])
        if k is None:
            redraw = redraw_generator(seed, i)
            for _ in range(10):
                k = kappa_for(redraw.integers(0, n, size=n))
                if k is not None:
                    break
        if k is None:
            skipped += 1
            continue
        vals.append(k)
    lo_q = (1.0 - level) / 2.0
    return {
        "kappa": kappa(eval_labels, gold_labels),
        "ci_low": percentile(vals, lo_q),
        "ci_high": percentile(vals, 1.0 - lo_q),
        "ci_level": level,
        "n_skipped": skipped,
    }


def noninferiority(eval_labels, matrix, raters, gold_labels, margin, n_boot, seed):
    n = len(eval_labels)
    loo_gold = loo_gold_per_rater(matrix, raters, n)

    def delta_for(row):
        ke = kappa([eval_labels[j] for j in row], [gold_labels[j] for j in row])
        if ke is None:
            return None
        s = 0.0
        c = 0
        for r in raters:
            kr = kappa([matrix[r][j] for j in row], [loo_gold[r][j] for j in row])
            if kr is None:
                continue
            s += kr
            c += 1
        if c == 0:
            return None
        return ke - s / c

    idx = resample_indices(seed, n_boot, n)
    deltas = []
    skipped = 0
    for i in range(n_boot):
        d = delta_for(idx[i])
        if d is None:
            redraw = redraw_generator(seed, i)
            for _ in range(10):
                d = delta_for(redraw.integers(0, n, size=n))
                if d is not None:
                    break
        if d is None:
            skipped += 1
            continue
        deltas.append(d)

    loo_mean, _ = loo_baseline(matrix, raters, n)
    delta_point = kappa(eval_labels, gold_labels) - loo_mean
    count = sum(1 for d in deltas if d <= -margin)
    ci90_low = percentile(deltas, 0.05)
    return {
        "delta_kappa": delta_point,
        "ci90_low": ci90_low,
        "ci90_high": percentile(deltas, 0.95),
        "ci95_low": percentile(deltas, 0.025),
        "ci95_high": percentile(deltas, 0.975),
        "p_value": (count + 1) / (n_boot + 1),
        "non_inferior": ci90_low > -margin,
        "n_skipped": skipped,
    }


# --- fixture synthesis ------------------------------------------------------

def synthesize(gen_seed):
    """One candidate fixture: latent truth, noisy raters, two evaluator vectors."""
    rng = np.random.Generator(np.random.PCG64(gen_seed))
    truth = rng.random(N_ITEMS) < 0.5
    err = 0.10 + 0.10 * rng.random(N_RATERS)
    raters = [f"phys{r + 1}" for r in range(N_RATERS)]
    matrix = {}
    for r, name in enumerate(raters):
        flips = rng.random(N_ITEMS) < err[r]
        matrix[name] = [bool(t) ^ bool(fl) for t, fl in zip(truth, flips)]
    for _ in range(N_MISSING):
        r = int(rng.integers(0, N_RATERS))
        i = int(rng.integers(0, N_ITEMS))
        matrix[raters[r]][i] = None
    jury = [bool(t) ^ bool(fl) for t, fl in zip(truth, rng.random(N_ITEMS) < 0.08)]
    coin = [bool(v) for v in rng.random(N_ITEMS) < 0.5]
    return raters, matrix, jury, coin


def candidate_ok(raters, matrix, gold):
    loo_mean, per = loo_baseline(matrix, raters, N_ITEMS)
    if not 0.64 <= loo_mean <= 0.70:
        return False
    if all(k is not None for k in per.values()) is False:
        return False
    if not any(g is None for g in gold):
        return False  # want at least one tied item in the panel gold
    loo_gold = loo_gold_per_rater(matrix, raters, N_ITEMS)
    if not any(g is None for gs in loo_gold.values() for g in gs):
        return False  # and at least one tie in some leave-one-out gold
    return True


def main():
    chosen = None
    for gen_seed in range(5000):
        raters, matrix, jury, coin = synthesize(gen_seed)
        gold = panel_gold(matrix, raters, N_ITEMS)
        if not candidate_ok(raters, matrix, gold):
            continue

        noninf_gold_eval = noninferiority(gold, matrix, raters, gold, MARGIN, N_BOOT, SEED)
        if not (noninf_gold_eval["non_inferior"] and noninf_gold_eval["p_value"] < 0.01):
            continue
        noninf_coin = noninferiority(coin, matrix, raters, gold, MARGIN, N_BOOT, SEED)
        if noninf_coin["non_inferior"] or noninf_coin["ci90_low"] >= -MARGIN:
            continue
        chosen = gen_seed
        break
    if chosen is None:
        raise SystemExit("no generation seed satisfied the fixture conditions")

    loo_mean, loo_per = loo_baseline(matrix, raters, N_ITEMS)
    boot_jury = bootstrap_kappa(jury, gold, N_BOOT, 0.95, SEED)
    noninf_jury = noninferiority(jury, matrix, raters, gold, MARGIN, N_BOOT, SEED)

    items = []
    for s in range(N_ITEMS // 3):
        sid = f"s{s + 1:02d}"
        for k in range(3):
            items.append((sid, f"{sid}-k{k + 1}"))

    FIXTURE_DIR.mkdir(parents=True, exist_ok=True)

    with (FIXTURE_DIR / "raters_7x60.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["summary_id", "fact_id"] + raters)
        for i, (sid, fid) in enumerate(items):
            row = [sid, fid]
            for r in raters:
                v = matrix[r][i]
                row.append("" if v is None else ("1" if v else "0"))
            writer.writerow(row)

    with (FIXTURE_DIR / "evaluators_60.json").open("w") as fh:
        json.dump({
            "schema_version": "1.0",
            "items": items,
            "jury": [1 if v else 0 for v in jury],
            "coinflip": [1 if v else 0 for v in coin],
        }, fh, indent=1)
        fh.write("\n")

    reference = {
        "schema_version": "1.0",
        "generation_seed": chosen,
        "seed": SEED,
        "n_boot": N_BOOT,
        "margin": MARGIN,
        "raters": raters,
        "gold": [None if g is None else (1 if g else 0) for g in gold],
        "loo_mean": loo_mean,
        "loo_per_rater": {r: loo_per[r] for r in raters},
        "kappa_jury_vs_gold": kappa(jury, gold),
        "bootstrap_jury": boot_jury,
        "noninf_jury": noninf_jury,
        "noninf_gold_eval": noninf_gold_eval,
        "noninf_coinflip": noninf_coin,
    }
    with (FIXTURE_DIR / "stats_oracle.json").open("w") as fh:
        json.dump(reference, fh, indent=1)
        fh.write("\n")

    print(f"generation seed: {chosen}")
    print(f"loo mean: {loo_mean:.4f}")
    print(f"jury kappa vs gold: {reference['kappa_jury_vs_gold']:.4f} "
          f"CI [{boot_jury['ci_low']:.4f}, {boot_jury['ci_high']:.4f}]")
    print(f"noninf jury: delta={noninf_jury['delta_kappa']:.4f} "
          f"p={noninf_jury['p_value']:.4g} non_inferior={noninf_jury['non_inferior']}")
    print(f"noninf gold-eval: p={noninf_gold_eval['p_value']:.4g} "
          f"non_inferior={noninf_gold_eval['non_inferior']}")
    print(f"noninf coinflip: ci90_low={noninf_coin['ci90_low']:.4f} "
          f"non_inferior={noninf_coin['non_inferior']}")


if __name__ == "__main__":
    main()
