"""Scalar reference implementations written with plain ``math``, independent of the package code."""
import math


def mean_var(q):
    m = sum(q) / len(q)
    return m, sum((x - m) ** 2 for x in q) / (len(q) - 1)


def phi(z):
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def pair_rewards(qi, qj, y, gamma):
    _, vi = mean_var(qi)
    mj, vj = mean_var(qj)
    out = []
    for q in qi:
        p = phi((q - mj) / math.sqrt(vi + vj + gamma))
        out.append(y * p + (1 - y) * (1 - p))
    return out


def advantages(r):
    m = sum(r) / len(r)
    sd = math.sqrt(sum((x - m) ** 2 for x in r) / len(r))
    return [(x - m) / (sd + 1e-8) for x in r]


def grpo_objective(new, old, ref, rewards, eps, beta):
    adv = advantages(rewards)
    total = 0.0
    for n, o, f, a in zip(new, old, ref, adv):
        rho = math.exp(n - o)
        surr = min(rho * a, max(1 - eps, min(1 + eps, rho)) * a)
        kl = math.exp(f - n) - (f - n) - 1
        total += surr - beta * kl
    return total / len(new)


def acc(s, mos, tau):
    return math.exp(-abs(s - mos) / tau)


def rect_iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def pixel_iou(a, b):
    def pixels(r):
        x, y, w, h = r
        return {(i, j) for i in range(x, x + w) for j in range(y, y + h)}
    pa, pb = pixels(a), pixels(b)
    return len(pa & pb) / len(pa | pb)


def average_ranks(v):
    order = sorted(range(len(v)), key=lambda i: v[i])
    ranks = [0.0] * len(v)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def spearman(a, b):
    return pearson(average_ranks(a), average_ranks(b))
