#!/usr/bin/env python3
"""Regenerates the metric golden files from a standalone implementation.

Run from this directory: python3 make_golden.py
"""

import json
import math
import random
from collections import Counter

EPS = 1e-9


def bleu4(hyp, ref):
    if not hyp:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        h = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
        r = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        matched = sum(min(c, r[g]) for g, c in h.items())
        total = max(len(hyp) - n + 1, 0)
        num = EPS if matched == 0 else float(matched)
        log_sum += math.log(num / max(total, 1))
    bp = math.exp(min(0.0, 1.0 - len(ref) / len(hyp)))
    return bp * math.exp(log_sum / 4.0)


def lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            table[i + 1][j + 1] = table[i][j] + 1 if x == y else max(table[i][j + 1], table[i + 1][j])
    return table[len(a)][len(b)]


def rouge_l(hyp, ref):
    if not hyp or not ref:
        return 0.0
    l = lcs(hyp, ref)
    if l == 0:
        return 0.0
    p, r = l / len(hyp), l / len(ref)
    return 2 * p * r / (p + r)


CONDITIONS = ["cardiomegaly", "effusion", "pneumothorax", "consolidation", "edema", "atelectasis",
              "nodule", "opacity", "fracture", "emphysema", "pneumonia", "hernia"]
LOCATIONS = ["left", "right", "upper", "lower", "apical", "basal"]
FILLER = ["there", "is", "seen", "in", "the", "zone", "be", "present", "lungs", "are", "clear", "acute", "disease"]


def extract(words):
    """Entities as (word, kind, attribute) and relations as (head, tail)."""
    entities, relations = [], []
    sentences, cur = [], []
    for w in words:
        if w == ".":
            sentences.append(cur)
            cur = []
        else:
            cur.append(w)
    sentences.append(cur)
    for s in sentences:
        if "no" in s:
            attr = "absent"
        elif "possible" in s or "may" in s:
            attr = "uncertain"
        else:
            attr = "present"
        last = None
        for w in s:
            if w in CONDITIONS:
                last = (w, "condition", attr)
                entities.append(last)
            elif w in LOCATIONS:
                loc = (w, "location", None)
                entities.append(loc)
                if last is not None:
                    relations.append((last, loc))
    return entities, relations


def er_f1(hyp, ref):
    he, hr = hyp
    re_, rr = ref
    hs, rs = len(he) + len(hr), len(re_) + len(rr)
    if hs == 0 and rs == 0:
        return 1.0
    if hs == 0 or rs == 0:
        return 0.0
    m = sum((Counter(he) & Counter(re_)).values()) + sum((Counter(hr) & Counter(rr)).values())
    if m == 0:
        return 0.0
    p, r = m / hs, m / rs
    return 2 * p * r / (p + r)


def reward(hyp, ref):
    scores = []
    for h, r in zip(hyp, ref):
        if r is None:
            continue
        hg = extract(h.split()) if h is not None else ([], [])
        scores.append(er_f1(hg, extract(r.split())))
    return sum(scores) / len(scores)


def random_sentence(rng):
    cue = rng.choice([[], [], ["no"], ["possible"], ["may"]])
    body = [rng.choice(CONDITIONS) for _ in range(rng.randint(0, 2))]
    locs = [rng.choice(LOCATIONS) for _ in range(rng.randint(0, 2))]
    filler = [rng.choice(FILLER) for _ in range(rng.randint(0, 3))]
    words = cue + body + locs + filler
    rng.shuffle(words)
    return words + ["."]


def random_section(rng, p_missing):
    if rng.random() < p_missing:
        return None
    words = []
    for _ in range(rng.randint(0, 4)):
        words += random_sentence(rng)
    if words and rng.random() < 0.2:
        words.pop()
    return " ".join(words)


def mutate(rng, text):
    if text is None:
        return random_section(rng, 0.0)
    words = text.split()
    for _ in range(rng.randint(0, 3)):
        op = rng.randrange(3)
        if op == 0 and words:
            del words[rng.randrange(len(words))]
        elif op == 1:
            words.insert(rng.randint(0, len(words)), rng.choice(CONDITIONS + LOCATIONS + ["no", "may", "."]))
        elif words:
            words[rng.randrange(len(words))] = rng.choice(CONDITIONS + LOCATIONS)
    return " ".join(words)


HAND_BLEU = [
    ("a b c d e", "a b c d e"),
    ("a b c d", "a b c d e"),
    ("x y z w", "a b c d"),
    ("", "a b c"),
    ("a b c d e f", "a b c d"),
    ("a", "a"),
    ("a a a a", "a b c d"),
]

HAND_ROUGE = [
    ("a b c d", "a b c d"),
    ("a c d", "a b c d"),
    ("d c b a", "a b c d"),
    ("", "a b"),
    ("a b", ""),
    ("x y", "a b"),
]


def token_cases(rng, n, alphabet):
    out = []
    for _ in range(n):
        ref = [rng.choice(alphabet) for _ in range(rng.randint(1, 12))]
        if rng.random() < 0.5:
            hyp = list(ref)
            for _ in range(rng.randint(0, 4)):
                i = rng.randrange(len(hyp) + 1)
                if rng.random() < 0.5 and hyp:
                    del hyp[min(i, len(hyp) - 1)]
                else:
                    hyp.insert(i, rng.choice(alphabet))
        else:
            hyp = [rng.choice(alphabet) for _ in range(rng.randint(1, 12))]
        out.append((" ".join(hyp), " ".join(ref)))
    return out


def write_tokens(path, cases, f):
    with open(path, "w") as out:
        for hyp, ref in cases:
            row = {"hyp": hyp, "ref": ref, "score": f(hyp.split(), ref.split())}
            out.write(json.dumps(row) + "\n")


def main():
    rng = random.Random(20241016)
    alphabet = list("abcdef")
    write_tokens("bleu4_golden.jsonl", HAND_BLEU + token_cases(rng, 20, alphabet), bleu4)
    write_tokens("rouge_l_golden.jsonl", HAND_ROUGE + token_cases(rng, 20, alphabet), rouge_l)
    with open("reward_fuzz.jsonl", "w") as out:
        for _ in range(500):
            ref = [random_section(rng, 0.15), random_section(rng, 0.15)]
            if ref[0] is None and ref[1] is None:
                ref[rng.randrange(2)] = ""
            hyp = [mutate(rng, r) if rng.random() < 0.6 else random_section(rng, 0.2) for r in ref]
            row = {
                "hyp_findings": hyp[0],
                "hyp_impression": hyp[1],
                "ref_findings": ref[0],
                "ref_impression": ref[1],
                "reward": reward(hyp, ref),
            }
            out.write(json.dumps(row) + "\n")


if __name__ == "__main__":
    main()
