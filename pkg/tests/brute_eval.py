"""Slow, loop-only re-identification metrics used as an oracle."""
import math


def _dist(a, b, kind):
    if kind == "euclidean":
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0 or nb == 0:
        return 1.0
    return 1 - sum(x * y for x, y in zip(a, b)) / (na * nb)


def brute_metrics(q, qids, g, gids, distractors=(), kind="euclidean"):
    items = [(list(v), gid) for v, gid in zip(g, gids)] + [(list(v), None) for v in distractors]
    r1 = r5 = r10 = 0
    aps = []
    for qv, qid in zip(q, qids):
        scored = [(_dist(qv, v, kind), i) for i, (v, _) in enumerate(items)]
        # ties keep gallery order, then distractor order
        scored.sort(key=lambda s: (s[0], s[1]))
        rel = [items[i][1] == qid for _, i in scored]
        first = rel.index(True)
        r1 += first < 1
        r5 += first < 5
        r10 += first < 10
        hits, precisions = 0, []
        for rank, ok in enumerate(rel, start=1):
            if ok:
                hits += 1
                precisions.append(hits / rank)
        aps.append(sum(precisions) / len(precisions))
    n = len(qids)
    return r1 / n, r5 / n, r10 / n, sum(aps) / n
