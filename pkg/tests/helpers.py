"""Independent oracles shared by the test modules."""

import itertools
import math

import numpy as np
import torch
from scipy.ndimage import gaussian_filter


def smooth_images(rng, n=4, c=3, h=32, w=32, sigma=5.0):
    """Gaussian-blurred noise rescaled to [0, 1] (float64)."""
    raw = rng.random((n, c, h, w))
    sm = np.stack([[gaussian_filter(raw[i, j], sigma, mode="wrap") for j in range(c)]
                   for i in range(n)])
    lo = sm.min(axis=(2, 3), keepdims=True)
    hi = sm.max(axis=(2, 3), keepdims=True)
    return torch.from_numpy((sm - lo) / (hi - lo))


def closed_form_inverse(m):
    """Inverse of a 2x3 affine matrix from the 2x2 adjugate formula."""
    a, b, tx = m[0]
    c, d, ty = m[1]
    det = a * d - b * c
    inv = np.array([[d, -b], [-c, a]]) / det
    t = -inv @ np.array([tx, ty])
    return np.hstack([inv, t[:, None]])


def brute_force_info_nce(z, pos, tau):
    n = len(z)
    total = 0.0
    for i in range(n):
        def s(k):
            return float(np.dot(z[i], z[k]) / (np.linalg.norm(z[i]) * np.linalg.norm(z[k])))
        den = sum(math.exp(s(k) / tau) for k in range(n) if k != i)
        total += -(s(pos[i]) / tau - math.log(den))
    return total / n


def log_softmax_ce(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


def softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def brute_force_best_permutation(contingency):
    """Max over all permutations of sum_i C[i, perm[i]]."""
    k = contingency.shape[0]
    return max(sum(contingency[i, p[i]] for i in range(k))
               for p in itertools.permutations(range(k)))


def central_difference_grad(f, x, h=1e-3):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g
