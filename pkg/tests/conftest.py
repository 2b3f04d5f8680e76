"""Shared test helpers."""

import numpy as np

from geoattn.gatv2 import AttentionExport


def random_export(n, seed, extra_edges=3):
    """Self-loops plus a random ring with spare chords; alphas softmax-like."""
    rng = np.random.default_rng(seed)
    src, dst = [], []
    for i in range(n):
        src += [i, i, (i + 1) % n]
        dst += [i, (i + 1) % n, i]
    for _ in range(extra_edges * n):
        i, j = rng.integers(0, n, 2)
        src.append(int(i))
        dst.append(int(j))
    src, dst = np.array(src), np.array(dst)
    raw = rng.uniform(0.05, 1.0, len(src))
    alpha = np.zeros(len(src))
    for i in range(n):
        sel = dst == i
        alpha[sel] = raw[sel] / raw[sel].sum()
    return AttentionExport(src=src, dst=dst, alpha_mean=alpha)
