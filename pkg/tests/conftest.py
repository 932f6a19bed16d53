import math

import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile("default", deadline=None, max_examples=50)
hypothesis.settings.load_profile("default")


def naive_conv(x, w, b, stride=1, pad=0):
    """Six nested loops over (n, o, i, j, c, ki/kj); the reference for conv2d_forward."""
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for a in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(c_in):
                        for p in range(kh):
                            for q in range(kw):
                                acc += w[o, c, p, q] * xp[a, c, i * stride + p, j * stride + q]
                    out[a, o, i, j] = acc
    return out


def brute_confusion(pred, truth, evaluated, k=4):
    cm = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        if t in evaluated:
            cm[t, p] += 1
    return cm


def brute_boundary(label, c):
    h, w = label.shape
    out = set()
    for y in range(h):
        for x in range(w):
            if label[y, x] != c:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and label[yy, xx] != c:
                    out.add((y, x))
                    break
    return out


def brute_bf(pred, truth, c, tol):
    """Pairwise-distance boundary matching; NaN when c is absent from both."""
    pb, tb = brute_boundary(pred, c), brute_boundary(truth, c)
    if not pb and not tb:
        in_p, in_t = bool((pred == c).any()), bool((truth == c).any())
        if not in_p and not in_t:
            return math.nan
        return 1.0 if in_p and in_t else 0.0

    def matched(a, b):
        return sum(1 for (y, x) in a if any((y - v) ** 2 + (x - u) ** 2 <= tol * tol for (v, u) in b))

    precision = matched(pb, tb) / len(pb) if pb else 0.0
    recall = matched(tb, pb) / len(tb) if tb else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
