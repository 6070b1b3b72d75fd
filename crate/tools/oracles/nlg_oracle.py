"""Reference values for the text metrics, computed from first principles.

Tokenization: lowercase, split on whitespace and punctuation, drop
punctuation-only tokens.
"""
import math
import re
from collections import Counter


def toks(s):
    return [w for w in re.findall(r"[a-z0-9]+|[^a-z0-9\s]", s.lower()) if re.search(r"[a-z0-9]", w)]


def grams(t, n):
    return Counter(tuple(t[i:i + n]) for i in range(len(t) - n + 1))


def bleu4(c, refs, smooth=False):
    c = toks(c)
    refs = [toks(r) for r in refs]
    if not c:
        return 0.0
    logs = 0.0
    for n in range(1, 5):
        cg = grams(c, n)
        mx = Counter()
        for r in refs:
            for g, k in grams(r, n).items():
                mx[g] = max(mx[g], k)
        m = sum(min(k, mx[g]) for g, k in cg.items())
        tot = max(len(c) - n + 1, 0)
        if smooth and n > 1:
            m, tot = m + 1, tot + 1
        if m == 0 or tot == 0:
            return 0.0
        logs += math.log(m / tot)
    r = min((abs(len(x) - len(c)), len(x)) for x in refs)[1]
    bp = 1.0 if len(c) > r else math.exp(1 - r / len(c))
    return bp * math.exp(logs / 4)


def rouge_l(c, r, beta=1.2):
    c, r = toks(c), toks(r)
    L = [[0] * (len(r) + 1) for _ in range(len(c) + 1)]
    for i in range(len(c)):
        for j in range(len(r)):
            L[i + 1][j + 1] = L[i][j] + 1 if c[i] == r[j] else max(L[i][j + 1], L[i + 1][j])
    l = L[-1][-1]
    if l == 0:
        return 0.0
    p, rec = l / len(c), l / len(r)
    return (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)


def cider(c, refs, docs, sigma=6.0):
    df = Counter()
    for d in docs:
        seen = set()
        for r in d:
            t = toks(r)
            for n in range(1, 5):
                seen |= set(grams(t, n))
        df.update(seen)
    logn = math.log(len(docs))

    def vec(t):
        out = []
        for n in range(1, 5):
            out.append({g: k * (logn - math.log(max(1.0, df[g]))) for g, k in grams(t, n).items()})
        return out

    ct = toks(c)
    cv = vec(ct)
    total = 0.0
    for r in refs:
        rt = toks(r)
        rv = vec(rt)
        d = len(ct) - len(rt)
        s = 0.0
        for n in range(4):
            nc = math.sqrt(sum(x * x for x in cv[n].values()))
            nr = math.sqrt(sum(x * x for x in rv[n].values()))
            if nc == 0 or nr == 0:
                continue
            dot = sum(min(w, rv[n][g]) * rv[n][g] for g, w in cv[n].items() if g in rv[n])
            s += dot / (nc * nr) * math.exp(-d * d / (2 * sigma ** 2))
        total += 10 * s / 4
    return total / len(refs)


if __name__ == "__main__":
    print("bleu cat", repr(bleu4("the cat sat on the mat", ["the cat is on the mat"])))
    print("bleu cat smooth", repr(bleu4("the cat sat on the mat", ["the cat is on the mat"], True)))
    multi = ["A small nodule is seen in the left upper zone.", "There is a nodule in the upper zone."]
    print("bleu multi", repr(bleu4("There is a small nodule in the left upper zone.", multi)))
    print("bleu short", repr(bleu4("The heart is normal.", ["The heart size is normal today."])))
    print("rouge five", repr(rouge_l("heart size is normal today", "normal heart size today is")))
    print("rouge cat", repr(rouge_l("the cat sat on the mat", "the cat is on the mat")))
    docs = [["the lungs are clear"], ["the heart is normal"], ["the lungs show a small nodule"]]
    print("cider toy", repr(cider("the lungs are normal", docs[0], docs)))
    print("cider toy2", repr(cider("the lungs show a nodule", docs[2], docs)))
    print("cider self", repr(cider("the heart is normal", docs[1], docs)))
