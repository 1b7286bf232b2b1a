"""Reference values for test_pruning.cpp."""
import numpy as np

# LAMP: sort ascending, unit i gets s_i^2 / sum_{j >= i} s_j^2
s = np.array([3.0, 1.0, 4.0, 1.5, 9.0, 2.6])
order = np.argsort(s, kind="stable")
sq = s[order] ** 2
tail = np.cumsum(sq[::-1])[::-1]
lamp = np.empty_like(s)
lamp[order] = sq / tail
print("lamp", [repr(float(v)) for v in lamp])

# greedy global pruning of a 2 -> [4, 3] -> 2 net, embed 2, with fixed scores
widths, d_in, emb = [4, 3], 2, 2
scores = {(0, 0): 0.5, (0, 1): 0.1, (0, 2): 0.9, (0, 3): 0.3, (1, 0): 0.2, (1, 1): 0.4, (1, 2): 0.05}


def count(w):
    n, prev = 0, d_in
    for x in w:
        n += (prev + emb) * x + x
        prev = x
    return n + prev * d_in + d_in


dense = count(widths)
for target in (0.2, 0.35, 0.5):
    w = list(widths)
    removed = []
    for (l, u) in sorted(scores, key=lambda k: (scores[k], k[0], k[1])):
        before = 1 - count(w) / dense
        if before >= target:
            break
        if w[l] <= 1:
            continue
        w2 = list(w)
        w2[l] -= 1
        after = 1 - count(w2) / dense
        if after >= target and after - target >= target - before:
            break
        w = w2
        removed.append((l, u))
    print("target", target, "removed", removed, "ratio", repr(1 - count(w) / dense))
