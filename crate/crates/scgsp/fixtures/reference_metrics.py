#!/usr/bin/env python3
"""Independent reference implementation of the caption metrics.

Reads metric_fixture.json and writes metric_golden.json with BLEU@4,
ROUGE-L, CIDEr, Div-n, m-BLEU, and self-CIDEr values computed from
scratch (numpy only). Serves as the oracle the Rust implementation is
checked against; keep it independent of the Rust code.

Usage: python3 reference_metrics.py [fixture] [output]
"""

import json
import math
import string
import sys
from collections import Counter

import numpy as np

EPS = 1e-9
SIGMA = 6.0
BETA = 1.2


def tokenize(text):
    out = []
    for word in text.lower().split():
        w = "".join(ch for ch in word if ch not in string.punctuation)
        if w:
            out.append(w)
    return out


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def build_stats(docs):
    """docs: list of documents, each a list of token lists."""
    df = [Counter() for _ in range(4)]
    for doc in docs:
        for n in range(1, 5):
            seen = set()
            for caption in doc:
                seen.update(ngrams(caption, n).keys())
            for g in seen:
                df[n - 1][g] += 1
    return df, len(docs)


def idf(df, num_docs, n, gram):
    return math.log(max(num_docs, 1) / max(df[n - 1].get(gram, 0), 1))


def bleu4(candidate, references):
    if not candidate:
        return 0.0
    c_len = len(candidate)
    r_len = min((abs(len(r) - c_len), len(r)) for r in references)[1]
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    log_sum = 0.0
    for n in range(1, 5):
        cand = ngrams(candidate, n)
        total = sum(cand.values())
        if total == 0:
            log_sum += 0.25 * math.log(EPS)
            continue
        max_ref = Counter()
        for r in references:
            for g, c in ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        matched = sum(min(c, max_ref.get(g, 0)) for g, c in cand.items())
        p = matched / total if matched else EPS
        log_sum += 0.25 * math.log(p)
    return bp * math.exp(log_sum)


def lcs(a, b):
    dp = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            dp[i + 1][j + 1] = dp[i][j] + 1 if x == y else max(dp[i][j + 1], dp[i + 1][j])
    return dp[len(a)][len(b)]


def rouge_l(candidate, references):
    if not candidate:
        return 0.0
    best = 0.0
    for r in references:
        if not r:
            continue
        l = lcs(candidate, r)
        if l == 0:
            continue
        prec = l / len(candidate)
        rec = l / len(r)
        f = (1 + BETA ** 2) * prec * rec / (rec + BETA ** 2 * prec)
        best = max(best, f)
    return best


def tfidf(tokens, n, df, num_docs):
    return {g: c * idf(df, num_docs, n, g) for g, c in ngrams(tokens, n).items()}


def cosine(a, b):
    na = math.sqrt(sum(x * x for x in a.values()))
    nb = math.sqrt(sum(x * x for x in b.values()))
    if na <= 0 or nb <= 0:
        return 0.0
    dot = sum(x * b[g] for g, x in a.items() if g in b)
    return dot / (na * nb)


def cider(candidate, references, df, num_docs):
    if not candidate:
        return 0.0
    score = 0.0
    for n in range(1, 5):
        cv = tfidf(candidate, n, df, num_docs)
        sim = 0.0
        for r in references:
            rv = tfidf(r, n, df, num_docs)
            delta = len(candidate) - len(r)
            sim += math.exp(-delta * delta / (2 * SIGMA * SIGMA)) * cosine(cv, rv)
        score += sim / len(references)
    return 10.0 * score / 4.0


def div_n(captions, n):
    distinct = set()
    total = 0
    for c in captions:
        if len(c) < n:
            continue
        for g, cnt in ngrams(c, n).items():
            total += cnt
            distinct.add(g)
    return len(distinct) / total if total else 1.0


def m_bleu(captions):
    vals = []
    for j, c in enumerate(captions):
        rest = [r for i, r in enumerate(captions) if i != j]
        vals.append(bleu4(c, rest))
    return sum(vals) / len(vals)


def self_cider(captions, df, num_docs):
    m = len(captions)
    k = np.zeros((m, m))
    for a in range(m):
        for b in range(m):
            k[a, b] = cider(captions[a], [captions[b]], df, num_docs)
    kn = np.zeros((m, m))
    for a in range(m):
        for b in range(m):
            denom = math.sqrt(k[a, a] * k[b, b])
            if a == b:
                kn[a, b] = 1.0
            elif denom > 0:
                kn[a, b] = k[a, b] / denom
    sym = (kn + kn.T) / 2
    eig = np.clip(np.linalg.eigvalsh(sym), 0.0, None)
    s = eig.sum()
    if s <= 0:
        return 0.0, 1.0
    r = eig.max() / s
    return min(max(-math.log(r) / math.log(m), 0.0), 1.0), r


def main():
    fixture_path = sys.argv[1] if len(sys.argv) > 1 else "metric_fixture.json"
    out_path = sys.argv[2] if len(sys.argv) > 2 else "metric_golden.json"
    with open(fixture_path) as f:
        fixture = json.load(f)

    docs = [[tokenize(c) for c in doc] for doc in fixture["stats_docs"]]
    df, num_docs = build_stats(docs)

    golden = {"relevance": [], "sets": []}
    for case in fixture["relevance_cases"]:
        cand = tokenize(case["candidate"])
        refs = [tokenize(r) for r in case["references"]]
        golden["relevance"].append({
            "bleu4": bleu4(cand, refs),
            "rouge_l": rouge_l(cand, refs),
            "cider": cider(cand, refs, df, num_docs),
        })
    for case in fixture["set_cases"]:
        caps = [tokenize(c) for c in case["captions"]]
        sc, ratio = self_cider(caps, df, num_docs)
        golden["sets"].append({
            "div1": div_n(caps, 1),
            "div2": div_n(caps, 2),
            "m_bleu": m_bleu(caps),
            "self_cider": sc,
            "self_cider_ratio": ratio,
        })

    with open(out_path, "w") as f:
        json.dump(golden, f, indent=2)
    print(f"wrote {out_path}")


if __name__ == "__main__":
    main()
