"""Pure-Python twin of the compiled Poisson-binomial kernels."""
import numpy as np


def pb_quantile(p, beta):
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    if n == 0:
        raise ValueError("empty probability list")
    pmf = np.zeros(n + 1)
    pmf[0] = 1.0
    for i, pi in enumerate(p):
        pmf[1:i + 2] = pmf[1:i + 2] * (1.0 - pi) + pmf[0:i + 1] * pi
        pmf[0] *= 1.0 - pi
    acc = 0.0
    for j in range(n + 1):
        acc += pmf[j]
        if acc >= beta:
            return j
    return n


def window_violations(flags, probs, beta):
    flags = np.asarray(flags, dtype=bool)
    counts = flags.sum(axis=0)
    out = np.zeros(flags.shape[1], dtype=bool)
    for q in np.flatnonzero(counts):
        out[q] = counts[q] > pb_quantile(probs[:, q], beta)
    return out
