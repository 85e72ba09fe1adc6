#!/usr/bin/env python3
"""Regenerates the CSV fixtures under fixtures/.

Everything is synthetic except the target estimates, which are the published
per-year values the estimator tests check against. Output is deterministic.

    python3 scripts/gen_fixtures.py [--out fixtures]
"""

import argparse
import csv
import math
from pathlib import Path

import numpy as np

YEARS = list(range(2008, 2024))
PRE_YEARS = [y for y in YEARS if y <= 2016]
DELTA_YEARS = YEARS[1:]

# Target estimates, 2009..2023.
STATE_OLS = [-1.831, -32.471, -39.792, -13.357, -25.980, -23.271, -17.063, -18.784,
             -33.416, -31.643, -46.522, -83.749, -55.439, -77.737, -99.471]
STATE_SE = 5.703
MA_OLS = [1.052, -27.776, -34.448, -6.112, -20.404, -17.173, -10.441, -13.114,
          -15.897, -11.861, -26.236, -54.599, -29.545, -51.429, -66.000]
MA_SE = 3.483
NATIONAL = {
    "all": [-1.384, -31.965, -38.334, -12.199, -23.971, -23.788, -18.159, -24.986,
            -40.189, -34.761, -47.576, -83.177, -60.391, -80.59, -106.993],
    "asian": [3.595, -22.978, -24.386, 1.832, -7.993, -5.761, 1.808, 1.993,
              -19.174, 5.208, -2.59, -38.206, -10.403, -32.568, -52.988],
    "black": [-1.326, -29.926, -36.367, -9.17, -19.935, -18.729, -12.163, -18.94,
              -18.104, -15.736, -31.52, -65.152, -44.337, -62.526, -86.969],
    "white": [-2.493, -33.027, -39.425, -12.268, -26.079, -24.826, -17.219, -22.032,
              -35.219, -29.852, -43.61, -80.246, -59.447, -79.617, -103.99],
    "male": [-0.385, -30.991, -39.401, -12.23, -24.989, -24.796, -20.182, -26.988,
             -46.147, -40.797, -55.57, -92.155, -68.379, -88.565, -117.006],
    "female": [-2.353, -32.007, -37.417, -12.199, -23.996, -22.831, -18.197, -23.984,
               -36.227, -28.773, -41.587, -75.156, -54.405, -74.586, -100.039],
}
NATIONAL_BASE = {"all": 515.0, "asian": 581.0, "black": 426.0, "white": 536.0, "male": 533.0, "female": 500.0}
NATIONAL_SD = {"all": 116.0, "asian": 133.0, "black": 99.0, "white": 106.0, "male": 120.0, "female": 111.0}
NATIONAL_N = {"all": 1_500_000, "asian": 160_000, "black": 200_000, "white": 800_000, "male": 700_000, "female": 800_000}

# Per-year agent proportion correct over a whole exam.
AGENT_ACCURACY = [0.469, 0.473, 0.548, 0.560, 0.494, 0.523, 0.519, 0.502,
                  0.508, 0.574, 0.569, 0.592, 0.657, 0.619, 0.648, 0.675]

N_STATES = 51
N_DISTRICTS = 228
N_AGENT_EXAMS = 50
AGENT_SD = 24.8
UNIT_SPREAD = 44.0


def conversion_table(total, lo_raw_floor, rng):
    """Monotone S-shaped raw->scaled table over 0..total."""
    x = np.arange(total + 1) / total
    logit = 1.0 / (1.0 + np.exp(-5.0 * (x - 0.5)))
    lo, hi = logit[0], logit[-1]
    scaled = 200 + 600 * (logit - lo) / (hi - lo)
    scaled = np.round(scaled / 10.0) * 10.0
    scaled[: lo_raw_floor + 1] = 200
    scaled = np.maximum.accumulate(scaled)
    scaled[-1] = 800
    return [(r, int(s)) for r, s in enumerate(scaled)]


def concordance_pairs():
    old = np.arange(200, 801, 10, dtype=float)
    new = 0.92 * old + 58.0 + 6.0 * np.sin((old - 200.0) / 95.0)
    new = np.clip(np.round(new / 10.0) * 10.0, 200, 800)
    new = np.maximum.accumulate(new)
    return list(zip(old.astype(int), new.astype(int)))


def fit_line(pairs):
    x = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs], dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    return slope, intercept


def agent_scores(rng):
    base, top = 560.0, 631.0
    a0, a1 = AGENT_ACCURACY[0], AGENT_ACCURACY[-1]
    rows = []
    for year, acc in zip(YEARS, AGENT_ACCURACY):
        mean = base + (top - base) * (acc - a0) / (a1 - a0)
        draws = rng.normal(mean, AGENT_SD, N_AGENT_EXAMS)
        for k, s in enumerate(draws, start=1):
            rows.append((year, f"{year}-{k:03d}", round(float(s), 4)))
    return rows


def agent_deltas(rows):
    """Per-year mean delta and within-year sum of squares, rounded inputs."""
    by_year = {}
    for year, _, s in rows:
        by_year.setdefault(year, []).append(s)
    base = np.mean(by_year[YEARS[0]])
    mean_delta = {y: float(np.mean(v) - base) for y, v in by_year.items()}
    ssr = sum(float(np.sum((np.array(by_year[y]) - np.mean(by_year[y])) ** 2)) for y in DELTA_YEARS)
    return mean_delta, ssr


def unit_panel(n_units, targets, se, agent_mean_delta, agent_ssr, rng, base_mean):
    """Unit means on the post scale with exact per-year mean differences and pooled SE."""
    n_a = N_AGENT_EXAMS
    t = len(DELTA_YEARS)
    df = t * (n_units + n_a) - 2 * t
    sigma = se / math.sqrt(1.0 / n_units + 1.0 / n_a)
    student_ssr = sigma ** 2 * df - agent_ssr
    if student_ssr <= 0:
        raise SystemExit("agent variance too large for the requested SE")
    resid = rng.normal(0.0, 1.0, (t, n_units))
    resid -= resid.mean(axis=1, keepdims=True)
    resid *= math.sqrt(student_ssr / np.sum(resid ** 2))
    bases = rng.normal(base_mean, UNIT_SPREAD, n_units)
    bases = np.clip(bases, 380, 660)
    means = {YEARS[0]: bases}
    for i, year in enumerate(DELTA_YEARS):
        m = targets[i] + agent_mean_delta[year]
        means[year] = bases + m + resid[i]
    return means


def to_pre_scale(value, slope, intercept):
    return (value - intercept) / slope


EASY_WORDS = ["value", "sum", "total", "evaluate", "equals", "simple", "price", "cost",
              "add", "count", "number", "perimeter", "ticket", "buy", "whole"]
MEDIUM_WORDS = ["ratio", "percent", "average", "line", "slope", "linear", "rate", "table",
                "graph", "median", "triangle", "angle", "area", "proportion", "mean"]
HARD_WORDS = ["quadratic", "exponential", "polynomial", "system", "inequality", "probability",
              "circle", "radians", "function", "complex", "parabola", "sequence", "radius",
              "constant", "vertex"]
FILLER = ["if", "the", "what", "is", "of", "which", "following", "must", "be", "true",
          "for", "in", "a", "an", "and", "given", "shown", "above"]
POOLS = [EASY_WORDS, MEDIUM_WORDS, HARD_WORDS]
RATED_COUNTS = (310, 265, 205)


def question_text(cls, rng):
    words = []
    for _ in range(int(rng.integers(4, 7))):
        pool = POOLS[cls] if rng.random() < 0.72 else POOLS[int(rng.integers(0, 3))]
        words.append(pool[int(rng.integers(0, len(pool)))])
    for _ in range(int(rng.integers(6, 10))):
        words.append(FILLER[int(rng.integers(0, len(FILLER)))])
    rng.shuffle(words)
    a, b = int(rng.integers(2, 20)), int(rng.integers(2, 50))
    return f"{' '.join(words)} x + {a} = {b}?"


def sections_for(year, doc):
    """(section_index, length, numeric positions, calculator) for one source document."""
    if year <= 2014:
        return [(1, 20, set(), "Allowed"), (2, 18, set(range(8, 19)), "Allowed"), (3, 18, set(), "Allowed")]
    if year <= 2016:
        return [(1, 20, set(), "Allowed"), (2, 18, set(range(9, 19)), "Allowed"), (3, 16, set(), "Allowed")]
    return [(3, 20, set(range(16, 21)), "Prohibited"), (4, 38, set(range(31, 39)), "Allowed")]


def build_bank(rng):
    rows = []
    for year in YEARS:
        n_options = 5 if year <= 2016 else 4
        for doc in ("A", "B"):
            for section, length, numeric_pos, calc in sections_for(year, doc):
                for idx in range(1, length + 1):
                    qid = f"{year}{doc}-S{section}-Q{idx:02d}"
                    numeric = idx in numeric_pos
                    rows.append({
                        "id": qid, "year": year, "source": f"{year} practice test {doc}",
                        "section": section, "question_index": idx, "section_length": length,
                        "type": "Numeric" if numeric else "MCQ", "calculator": calc,
                        "progress": idx / length, "n_options": 0 if numeric else n_options,
                    })
    # Latent class: later questions in a section tend to be harder.
    score = np.array([r["progress"] for r in rows]) + rng.normal(0, 0.3, len(rows))
    rated_idx = [i for i, r in enumerate(rows) if r["year"] <= 2014]
    unrated_keep = set(rng.choice(rated_idx, size=len(rated_idx) - sum(RATED_COUNTS), replace=False).tolist())
    rated_idx = [i for i in rated_idx if i not in unrated_keep]
    order = sorted(rated_idx, key=lambda i: score[i])
    cls = {}
    start = 0
    for c, count in enumerate(RATED_COUNTS):
        for i in order[start:start + count]:
            cls[i] = c
        start += count
    cut1, cut2 = np.quantile(score, [310 / 780, 575 / 780])
    for i in range(len(rows)):
        if i not in cls:
            cls[i] = 0 if score[i] < cut1 else (1 if score[i] < cut2 else 2)

    out = []
    for i, r in enumerate(rows):
        c = cls[i]
        rating = ""
        if i in rated_idx:
            rating = {0: int(rng.choice([1, 2])), 1: 3, 2: int(rng.choice([4, 5]))}[c]
        text = question_text(c, rng)
        options = [""] * 5
        if r["type"] == "MCQ":
            vals = rng.choice(np.arange(1, 100), size=r["n_options"], replace=False)
            for k, v in enumerate(vals):
                options[k] = str(int(v))
            answers = "ABCDE"[int(rng.integers(0, r["n_options"]))]
        else:
            kind = rng.random()
            if kind < 0.7:
                answers = str(int(rng.integers(0, 1000)))
            elif kind < 0.9:
                p, q = int(rng.integers(1, 20)), int(rng.integers(2, 9))
                answers = f"{p}/{q}"
            else:
                lo = round(float(rng.uniform(0, 10)), 1)
                answers = f"{lo}..{lo + 0.2:.1f}"
        out.append([r["id"], r["year"], r["source"], r["section"], r["question_index"], r["section_length"],
                    r["type"], r["calculator"], text, *options, answers, rating])
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "fixtures"))
    ap.add_argument("--seed", type=int, default=20240601)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    pre = conversion_table(54, 2, rng)
    post = conversion_table(58, 2, rng)
    for name, table in (("conversion_pre.csv", pre), ("conversion_post.csv", post)):
        with open(out / name, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["raw", "scaled"])
            w.writerows(table)
    conc = concordance_pairs()
    with open(out / "concordance.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["old_scaled", "new_scaled"])
        w.writerows(conc)
    slope, intercept = fit_line(conc)

    agents = agent_scores(rng)
    with open(out / "agent_scores.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["year", "exam_id", "scaled"])
        w.writerows(agents)
    mean_delta, agent_ssr = agent_deltas(agents)

    with open(out / "mock_accuracy.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["year", "accuracy"])
        w.writerows(zip(YEARS, AGENT_ACCURACY))

    cohort = []
    for group, targets in NATIONAL.items():
        base = NATIONAL_BASE[group]
        for year in YEARS:
            post_mean = base if year == YEARS[0] else base + targets[year - 2009] + mean_delta[year]
            sd = NATIONAL_SD[group]
            if year in PRE_YEARS:
                post_mean = to_pre_scale(post_mean, slope, intercept)
                sd = sd / slope
            cohort.append((year, "national", "US", group, f"{post_mean:.6f}", f"{sd:.4f}", NATIONAL_N[group]))
    for level, prefix, n_units, targets, se in (
        ("state", "ST", N_STATES, STATE_OLS, STATE_SE),
        ("district", "MA", N_DISTRICTS, MA_OLS, MA_SE),
    ):
        means = unit_panel(n_units, targets, se, mean_delta, agent_ssr, rng, 520.0)
        for year in YEARS:
            for u in range(n_units):
                v = float(means[year][u])
                if year in PRE_YEARS:
                    v = to_pre_scale(v, slope, intercept)
                cohort.append((year, level, f"{prefix}-{u + 1:03d}", "all", f"{v:.6f}", "", ""))
    with open(out / "cohort.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["year", "level", "unit_id", "group", "mean", "sd", "n"])
        w.writerows(cohort)

    bank = build_bank(rng)
    with open(out / "bank.csv", "w", newline="") as f:
        f.write("#!composition pre=44/10 post=45/13\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "year", "source", "section", "question_index", "section_length", "type",
                    "calculator", "text", "option_a", "option_b", "option_c", "option_d", "option_e",
                    "answers", "difficulty"])
        w.writerows(bank)

    print(f"wrote fixtures to {out} (concordance slope {slope:.6f}, intercept {intercept:.4f})")


if __name__ == "__main__":
    main()
