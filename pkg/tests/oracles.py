"""Slow, independent reference implementations used as test oracles.

Nothing here imports the package under test; everything is written with
plain loops, fractions or the most literal formula available.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


# -- tiling -------------------------------------------------------------------

def brute_dilate(mask, r):
    h, w = len(mask), len(mask[0])
    out = [[0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            v = 0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and mask[yy][xx]:
                        v = 1
            out[y][x] = v
    return out


def brute_erode(mask, r):
    # outside the raster counts as foreground
    h, w = len(mask), len(mask[0])
    out = [[0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            v = 1
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and not mask[yy][xx]:
                        v = 0
            out[y][x] = v
    return out


def brute_close_open(mask, r):
    closed = brute_erode(brute_dilate(mask, r), r)
    return brute_dilate(brute_erode(closed, r), r)


def enumerate_positions(length, size, stride):
    return [p for p in range(0, length) if p % stride == 0 and p + size <= length]


def tile_count_closed_form(w, h, n, stride):
    if w < n or h < n:
        return 0
    return ((w - n) // stride + 1) * ((h - n) // stride + 1)


# -- colour -------------------------------------------------------------------

_LMS = [[0.3811, 0.5783, 0.0402], [0.1967, 0.7244, 0.0782], [0.0241, 0.1288, 0.8444]]


def brute_lab_pixel(r, g, b):
    lms = [row[0] * r + row[1] * g + row[2] * b for row in _LMS]
    L, M, S = (math.log10(max(v, 1e-6)) for v in lms)
    return ((L + M + S) / math.sqrt(3), (L + M - 2 * S) / math.sqrt(6), (L - M) / math.sqrt(2))


def brute_lab_stats(tile):
    px = [brute_lab_pixel(*map(float, p)) for p in np.asarray(tile).reshape(-1, 3)]
    n = len(px)
    means = [sum(p[c] for p in px) / n for c in range(3)]
    stds = [math.sqrt(sum((p[c] - means[c]) ** 2 for p in px) / n) for c in range(3)]
    return means, stds


def exact_blue_ratio(r, g, b) -> Fraction:
    return Fraction(100 * b, 1 + r + g) * Fraction(256, 1 + r + g + b)


# -- features -----------------------------------------------------------------

def _percentile(sorted_vals, q):
    # linear interpolation between closest ranks
    pos = (len(sorted_vals) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_vals) - 1)
    return sorted_vals[lo] + (sorted_vals[hi] - sorted_vals[lo]) * (pos - lo)


def brute_first_order(gray):
    xs = [float(v) for v in np.asarray(gray).ravel()]
    n = len(xs)
    mean = sum(xs) / n
    var = sum((v - mean) ** 2 for v in xs) / n
    std = math.sqrt(var)
    s = sorted(xs)
    p10, p25, med, p75, p90 = (_percentile(s, q) for q in (10, 25, 50, 75, 90))
    skew = (sum((v - mean) ** 3 for v in xs) / n) / var ** 1.5 if var > 0 else 0.0
    kurt = (sum((v - mean) ** 4 for v in xs) / n) / var ** 2 if var > 0 else 0.0
    counts = {}
    for v in xs:
        b = min(255, max(0, math.floor(v)))
        counts[b] = counts.get(b, 0) + 1
    entropy = -sum(c / n * math.log2(c / n) for c in counts.values())
    return [mean, var, std, s[0], s[-1], s[-1] - s[0], med, p10, p90, p75 - p25, skew, kurt,
            sum(v * v for v in xs), entropy, sum(abs(v - mean) for v in xs) / n,
            math.sqrt(sum(v * v for v in xs) / n)]


def brute_glcm(gray, offset, levels=32):
    g = np.asarray(gray, dtype=np.float64)
    h, w = g.shape
    q = [[min(levels - 1, int(math.floor(g[y, x] * levels / 256.0))) for x in range(w)] for y in range(h)]
    P = [[0] * levels for _ in range(levels)]
    dy, dx = offset
    for y in range(h):
        for x in range(w):
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w:
                P[q[y][x]][q[yy][xx]] += 1
                P[q[yy][xx]][q[y][x]] += 1
    total = sum(map(sum, P))
    return [[c / total for c in row] for row in P]


def brute_glcm_stats(P):
    n = len(P)
    cells = [(i, j, P[i][j]) for i in range(n) for j in range(n)]
    contrast = sum((i - j) ** 2 * p for i, j, p in cells)
    mi = sum(i * p for i, j, p in cells)
    mj = sum(j * p for i, j, p in cells)
    vi = sum((i - mi) ** 2 * p for i, j, p in cells)
    vj = sum((j - mj) ** 2 * p for i, j, p in cells)
    corr = sum((i - mi) * (j - mj) * p for i, j, p in cells) / math.sqrt(vi * vj) if vi > 1e-15 and vj > 1e-15 else 1.0
    energy = sum(p * p for _, _, p in cells)
    homog = sum(p / (1 + (i - j) ** 2) for i, j, p in cells)
    ent = -sum(p * math.log2(p) for _, _, p in cells if p > 0)
    return [contrast, corr, energy, homog, ent]


# -- attention MIL --------------------------------------------------------------

def attention_forward_loops(params, X, n_att):
    """Plain-loop attention forward on already standardized inputs.

    Returns (alpha k x a, bag_repr a x d_e, logits).
    """
    W_emb, b_emb = params["W_emb"], params["b_emb"]
    W1, b1, W2, b2 = params["W_att1"], params["b_att1"], params["W_att2"], params["b_att2"]
    Wc, bc = params["W_cls"], params["b_cls"]
    k, d = X.shape
    d_e, h = W_emb.shape[1], W1.shape[1]
    E = [[max(0.0, b_emb[j] + sum(X[i, t] * W_emb[t, j] for t in range(d))) for j in range(d_e)] for i in range(k)]
    H = [[math.tanh(b1[j] + sum(E[i][t] * W1[t, j] for t in range(d_e))) for j in range(h)] for i in range(k)]
    S = [[b2[c] + sum(H[i][t] * W2[t, c] for t in range(h)) for c in range(n_att)] for i in range(k)]
    alpha = [[0.0] * n_att for _ in range(k)]
    for c in range(n_att):
        m = max(S[i][c] for i in range(k))
        ex = [math.exp(S[i][c] - m) for i in range(k)]
        z = sum(ex)
        for i in range(k):
            alpha[i][c] = ex[i] / z
    R = [[sum(alpha[i][c] * E[i][j] for i in range(k)) for j in range(d_e)] for c in range(n_att)]
    flat = [v for row in R for v in row]
    logits = [bc[o] + sum(flat[t] * Wc[t, o] for t in range(len(flat))) for o in range(Wc.shape[1])]
    return np.array(alpha), np.array(R), np.array(logits)


def weighted_nll(logits, label, weight):
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    return weight * (lse - logits[label])


# -- selection ----------------------------------------------------------------

def largest_remainder_exact(weights, total):
    """Hamilton apportionment with exact fractions; ties go to the lower index."""
    w = [Fraction(x).limit_denominator(10 ** 12) for x in weights]
    s = sum(w)
    quotas = [total * x / s for x in w]
    base = [math.floor(q) for q in quotas]
    left = total - sum(base)
    order = sorted(range(len(w)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def covariance_loops(X):
    k, d = X.shape
    mu = [sum(X[i, j] for i in range(k)) / k for j in range(d)]
    C = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            C[a, b] = sum((X[i, a] - mu[a]) * (X[i, b] - mu[b]) for i in range(k)) / (k - 1)
    return C


# -- metrics ------------------------------------------------------------------

def brute_kappa(O, weighting):
    n = len(O)
    total = sum(map(sum, O))
    rows = [sum(O[i]) for i in range(n)]
    cols = [sum(O[i][j] for i in range(n)) for j in range(n)]
    if weighting == "none":
        po = sum(O[i][i] for i in range(n)) / total
        pe = sum(rows[i] * cols[i] for i in range(n)) / total ** 2
        return 0.0 if pe >= 1 else (po - pe) / (1 - pe)
    num = den = 0.0
    for i in range(n):
        for j in range(n):
            w = (abs(i - j) if weighting == "linear" else (i - j) ** 2) / (
                (n - 1) if weighting == "linear" else (n - 1) ** 2)
            num += w * O[i][j]
            den += w * rows[i] * cols[j] / total
    return 0.0 if den <= 0 else 1 - num / den


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    acc = 0.0
    for p in pos:
        for q in neg:
            acc += 1.0 if p > q else 0.5 if p == q else 0.0
    return acc / (len(pos) * len(neg))


def brute_ap(scores, labels):
    """Sweep every distinct score as a threshold, highest first."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        hit = s >= t
        tp = int(np.count_nonzero(hit & y))
        fp = int(np.count_nonzero(hit & ~y))
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap
