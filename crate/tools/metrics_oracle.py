#!/usr/bin/env python3
"""Independent spreadsheet-style computation of the captioning metrics on
the frozen test fixture. Prints the constants pasted into the metric tests.

Formulas mirror the documented definitions:
  bleu4: corpus clipped precisions, add-one smoothing for n>=2,
         brevity penalty min(1, exp(1 - r/c)).
  rouge_l: per-item max-over-refs LCS F with beta=1.2, mean over items.
  cider: tf-idf cosine per n=1..4, idf = ln((M+1)/max(1, df)),
         default variant clips counts and applies the Gaussian length
         penalty with sigma=6; plain variant is the raw cosine. Scores x10.
"""

import math
from collections import Counter

FIXTURE = [
    ("a b c d", ["a b c d"]),
    ("a a b x", ["a b c e"]),
    ("p q r s", ["p q r u t"]),
]


def tokenize(s):
    out = []
    for w in s.lower().split():
        w = "".join(ch for ch in w if not (33 <= ord(ch) <= 47 or 58 <= ord(ch) <= 64
                                           or 91 <= ord(ch) <= 96 or 123 <= ord(ch) <= 126))
        if w:
            out.append(w)
    return out


def ngrams(toks, n):
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu4(items):
    matches = [0.0] * 4
    totals = [0.0] * 4
    c_len = 0
    r_len = 0
    for cand, refs in items:
        ct = tokenize(cand)
        rts = [tokenize(r) for r in refs]
        c_len += len(ct)
        r_len += min((abs(len(r) - len(ct)), len(r)) for r in rts)[1]
        for n in range(1, 5):
            cc = ngrams(ct, n)
            max_ref = Counter()
            for rt in rts:
                rc = ngrams(rt, n)
                for g, k in rc.items():
                    max_ref[g] = max(max_ref[g], k)
            for g, k in cc.items():
                totals[n - 1] += k
                matches[n - 1] += min(k, max_ref.get(g, 0))
    if totals[0] == 0 or matches[0] == 0:
        return 0.0
    log_sum = math.log(matches[0] / totals[0])
    for n in range(1, 4):
        log_sum += math.log((matches[n] + 1.0) / (totals[n] + 1.0))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_sum / 4.0)


def lcs(a, b):
    dp = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            dp[i][j] = dp[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] \
                else max(dp[i - 1][j], dp[i][j - 1])
    return dp[-1][-1]


def rouge_l(items, beta=1.2):
    scores = []
    for cand, refs in items:
        ct = tokenize(cand)
        best = 0.0
        for r in refs:
            rt = tokenize(r)
            if not ct or not rt:
                continue
            l = lcs(ct, rt)
            p = l / len(ct)
            rec = l / len(rt)
            denom = rec + beta * beta * p
            f = (1 + beta * beta) * p * rec / denom if denom > 0 else 0.0
            best = max(best, f)
        scores.append(best)
    return sum(scores) / len(scores)


def cider(items, clipped=True, sigma=6.0):
    m = len(items)
    dfs = [Counter() for _ in range(4)]
    for _, refs in items:
        for n in range(1, 5):
            seen = set()
            for r in refs:
                seen |= set(ngrams(tokenize(r), n))
            for g in seen:
                dfs[n - 1][g] += 1

    def idf(n, g):
        return math.log((m + 1.0) / max(1.0, dfs[n - 1].get(g, 0.0)))

    scores = []
    for cand, refs in items:
        ct = tokenize(cand)
        total = 0.0
        for r in refs:
            rt = tokenize(r)
            per_n = 0.0
            for n in range(1, 5):
                cv = {g: k * idf(n, g) for g, k in ngrams(ct, n).items()}
                rv = {g: k * idf(n, g) for g, k in ngrams(rt, n).items()}
                cn = math.sqrt(sum(v * v for v in cv.values()))
                rn = math.sqrt(sum(v * v for v in rv.values()))
                if cn == 0 or rn == 0:
                    continue
                if clipped:
                    dot = sum(min(v, rv[g]) * rv[g] for g, v in cv.items() if g in rv)
                else:
                    dot = sum(v * rv[g] for g, v in cv.items() if g in rv)
                val = dot / (cn * rn)
                if clipped:
                    delta = len(ct) - len(rt)
                    val *= math.exp(-delta * delta / (2 * sigma * sigma))
                per_n += val
            total += per_n / 4.0
        scores.append(10.0 * total / len(refs))
    return sum(scores) / len(scores)


if __name__ == "__main__":
    print(f"const ORACLE_BLEU4: f64 = {bleu4(FIXTURE)!r};")
    print(f"const ORACLE_ROUGE_L: f64 = {rouge_l(FIXTURE)!r};")
    print(f"const ORACLE_CIDER_D: f64 = {cider(FIXTURE, clipped=True)!r};")
    print(f"const ORACLE_CIDER_PLAIN: f64 = {cider(FIXTURE, clipped=False)!r};")
