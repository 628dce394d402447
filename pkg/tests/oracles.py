"""Independent, deliberately naive reference implementations used by the tests."""
import math

import numpy as np


def average_ranks_loop(values):
    """1-based ranks; tied values share the mean of the positions they occupy."""
    values = list(values)
    n = len(values)
    ranks = [0.0] * n
    for i in range(n):
        below = sum(1 for v in values if v < values[i])
        equal = sum(1 for v in values if v == values[i])
        ranks[i] = below + (equal + 1) / 2.0
    return ranks


def pearson_textbook(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return 0.0
    return sxy / math.sqrt(sxx * syy)


def spearman_oracle(x, y):
    return pearson_textbook(average_ranks_loop(x), average_ranks_loop(y))


def pooled_z(a, b):
    a, b = list(map(float, a)), list(map(float, b))
    n1, n2 = len(a), len(b)
    m1, m2 = sum(a) / n1, sum(b) / n2
    ss1 = sum((v - m1) ** 2 for v in a)
    ss2 = sum((v - m2) ** 2 for v in b)
    sp2 = (ss1 + ss2) / (n1 + n2 - 2)
    return (m1 - m2) / math.sqrt(sp2 * (1 / n1 + 1 / n2))


def head_map_loop(w, layer, head, k):
    d = w.shape[2]
    out = np.zeros(k)
    for j in range(k):
        total = 0.0
        for i in range(d):
            total += float(w[layer, head, i, j])
        out[j] = total / d
    return out


def justifier_forward_loop(weights, dims, grid, aux):
    """Straight-line single-record forward pass with explicit convolution loops."""
    c, co = dims.channels, dims.conv_channels
    padded = np.zeros((9, 9, c))
    padded[1:8, 1:8] = grid
    conv = np.zeros((7, 7, co))
    for i in range(7):
        for j in range(7):
            for o in range(co):
                s = weights["conv_b"][o]
                for di in range(3):
                    for dj in range(3):
                        for ch in range(c):
                            s += padded[i + di, j + dj, ch] * weights["conv_w"][di, dj, ch, o]
                conv[i, j, o] = math.tanh(s)
    img = np.tanh(conv.reshape(-1) @ weights["img_w"] + weights["img_b"])
    parts = [img]
    for enc, x in zip("qsg", aux):
        u = np.tanh(x @ weights[f"{enc}_w1"] + weights[f"{enc}_b1"])
        parts.append(np.tanh(u @ weights[f"{enc}_w2"] + weights[f"{enc}_b2"]))
    h = np.concatenate(parts)
    z = h @ weights["fail_w"] + weights["fail_b"][0]
    p = 1.0 / (1.0 + math.exp(-z))
    jatt = 1.0 / (1.0 + np.exp(-(h @ weights["att_w"] + weights["att_b"])))
    return p, jatt


def central_difference(f, x, eps=1e-5):
    """Gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def max_relative_error(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
