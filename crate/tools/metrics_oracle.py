#!/usr/bin/env python3
"""Independent brute-force oracle for the evaluation metrics.

Computes EM / BLEU-1 / BLEU-2 / ROUGE-1 / ROUGE-L / CIDEr / METEOR for a
fixed list of (hypothesis, reference) pairs and freezes the scores into
tests/fixtures/metrics_fixture.json. Run once; the fixture is committed and
the Rust implementation must reproduce every score to 1e-6.

CIDEr document frequencies are computed over the reference side of the
fixture itself.
"""

import json
import math
import os
from functools import lru_cache

ARTICLES = {"a", "an", "the"}


def normalize(s):
    s = s.lower()
    s = "".join(c if c.isalnum() or c == " " else " " for c in s)
    return " ".join(w for w in s.split() if w not in ARTICLES)


def em(hyp, ref):
    return 1 if normalize(hyp) == normalize(ref) else 0


def toks(s):
    return s.lower().split()


def ngrams(ts, n):
    return [tuple(ts[i:i + n]) for i in range(len(ts) - n + 1)]


def count(grams):
    d = {}
    for g in grams:
        d[g] = d.get(g, 0) + 1
    return d


def bleu(hyp, ref, n):
    h, r = toks(hyp), toks(ref)
    if not h:
        return 0.0
    logs = 0.0
    for k in range(1, n + 1):
        hc, rc = count(ngrams(h, k)), count(ngrams(r, k))
        total = sum(hc.values())
        if total == 0:
            return 0.0
        clipped = sum(min(c, rc.get(g, 0)) for g, c in hc.items())
        if clipped == 0:
            return 0.0
        logs += math.log(clipped / total)
    prec = math.exp(logs / n)
    bp = 1.0 if len(h) >= len(r) else math.exp(1 - len(r) / len(h))
    return bp * prec


def rouge1(hyp, ref):
    h, r = toks(hyp), toks(ref)
    if not h or not r:
        return 0.0
    hc, rc = count(ngrams(h, 1)), count(ngrams(r, 1))
    overlap = sum(min(c, rc.get(g, 0)) for g, c in hc.items())
    if overlap == 0:
        return 0.0
    p, q = overlap / len(h), overlap / len(r)
    return 2 * p * q / (p + q)


def rouge_l(hyp, ref):
    h, r = toks(hyp), toks(ref)
    if not h or not r:
        return 0.0

    @lru_cache(maxsize=None)
    def lcs(i, j):
        if i == 0 or j == 0:
            return 0
        if h[i - 1] == r[j - 1]:
            return lcs(i - 1, j - 1) + 1
        return max(lcs(i - 1, j), lcs(i, j - 1))

    m = lcs(len(h), len(r))
    lcs.cache_clear()
    if m == 0:
        return 0.0
    p, q = m / len(h), m / len(r)
    return 2 * p * q / (p + q)


def cider_df(ref_docs):
    dfs = [dict() for _ in range(4)]
    for doc in ref_docs:
        ts = toks(doc)
        for n in range(1, 5):
            for g in set(ngrams(ts, n)):
                dfs[n - 1][g] = dfs[n - 1].get(g, 0) + 1
    return dfs, len(ref_docs)


def tfidf(ts, n, dfs, ndocs):
    c = count(ngrams(ts, n))
    total = sum(c.values())
    if total == 0:
        return {}
    return {
        g: (v / total) * math.log(ndocs / max(dfs[n - 1].get(g, 0), 1))
        for g, v in c.items()
    }


def cider(hyp, ref, dfs, ndocs):
    h = toks(hyp)
    score = 0.0
    for n in range(1, 5):
        hv = tfidf(h, n, dfs, ndocs)
        rv = tfidf(toks(ref), n, dfs, ndocs)
        dot = sum(x * rv.get(g, 0.0) for g, x in hv.items())
        na = math.sqrt(sum(x * x for x in hv.values()))
        nb = math.sqrt(sum(x * x for x in rv.values()))
        score += dot / (na * nb) if na > 0 and nb > 0 else 0.0
    return 10.0 * score / 4.0


def meteor(hyp, ref):
    h, r = toks(hyp), toks(ref)
    if not h or not r:
        return 0.0
    used = [False] * len(r)
    align = []
    for w in h:
        pos = next((j for j, x in enumerate(r) if not used[j] and x == w), None)
        if pos is not None:
            used[pos] = True
        align.append(pos)
    m = sum(1 for a in align if a is not None)
    if m == 0:
        return 0.0
    chunks, prev = 0, None
    for a in align:
        if a is not None and a != (prev + 1 if prev is not None else None):
            chunks += 1
        prev = a
    p, q = m / len(h), m / len(r)
    f = p * q / (0.9 * q + 0.1 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return f * (1 - penalty)


PAIRS = [
    # identical sentences: all metrics maximal
    ("a red circle and a blue square", "a red circle and a blue square"),
    # hand case: BLEU-1 clipping 2/7
    ("the the the the the the the", "the cat is on the mat"),
    # hand case: ROUGE-L 2/3
    ("a b c", "a c b"),
    # hand case: METEOR chunk penalty on reversal
    ("square blue triangle green", "green triangle blue square"),
    # article / punctuation normalization
    ("The circle is red.", "circle is red"),
    ("yes there is a circle", "yes there is a circle"),
    ("no there is no square", "yes there is a square"),
    ("there are two objects", "there are three objects"),
    ("a green triangle at row zero column two", "a green triangle at row zero column two"),
    ("a green triangle at row two column zero", "a green triangle at row zero column two"),
    ("the square is yellow", "the square is blue"),
    ("it sits at row one column three", "it sits at row one column three"),
    ("it sits at row three column one", "it sits at row one column three"),
    ("blue square red circle", "a red circle and a blue square"),
    ("a red red red circle", "a red circle"),
    ("true", "true"),
    ("false", "true"),
    ("(b)", "(b)"),
    ("completely disjoint words here", "nothing shared at all"),
    ("a yellow circle and a yellow circle", "a yellow circle and a yellow square"),
]


def main():
    refs = [r for _, r in PAIRS]
    dfs, ndocs = cider_df(refs)
    rows = []
    for hyp, ref in PAIRS:
        rows.append({
            "hyp": hyp,
            "ref": ref,
            "em": em(hyp, ref),
            "bleu1": bleu(hyp, ref, 1),
            "bleu2": bleu(hyp, ref, 2),
            "rouge1": rouge1(hyp, ref),
            "rouge_l": rouge_l(hyp, ref),
            "cider": cider(hyp, ref, dfs, ndocs),
            "meteor": meteor(hyp, ref),
        })
    out = os.path.join(os.path.dirname(__file__), "..",
                       "crates", "ipn", "tests", "fixtures",
                       "metrics_fixture.json")
    os.makedirs(os.path.dirname(out), exist_ok=True)
    with open(out, "w") as f:
        json.dump(rows, f, indent=1)
        f.write("\n")
    print(f"wrote {len(rows)} pairs to {out}")
    # sanity: the frozen hand-derived values
    assert abs(rows[1]["bleu1"] - 2 / 7) < 1e-12  # 7 >= 6 tokens: no BP
    assert abs(rows[2]["rouge_l"] - 2 / 3) < 1e-12
    assert abs(rows[3]["meteor"] - 0.5) < 1e-12
    assert abs(rows[0]["meteor"] - (1 - 0.5 * (1 / 7) ** 3)) < 1e-12


if __name__ == "__main__":
    main()
