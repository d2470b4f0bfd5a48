"""Independent reference implementations used as test oracles.

They are deliberately naive: Python sorting, explicit threshold sweeps,
arbitrary-precision arithmetic and finite differences.  Nothing here imports
the routine it checks.
"""
import math

import mpmath
import numpy as np


def mp_softmax(logits, dps=50):
    with mpmath.workdps(dps):
        xs = [mpmath.mpf(float(v)) for v in logits]
        m = max(xs)
        es = [mpmath.e ** (x - m) for x in xs]
        s = mpmath.fsum(es)
        return [float(e / s) for e in es]


def mp_normalized_entropy(probs, dps=50):
    with mpmath.workdps(dps):
        ps = [mpmath.mpf(str(p)) for p in probs]
        h = -mpmath.fsum(p * mpmath.log(p) for p in ps if p > 0)
        return float(h / mpmath.log(len(ps)))


def central_difference(f, arrays, step=1e-5):
    """d f / d a for every entry of every array in ``arrays`` (mutated in place, restored)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + step
            up = f()
            a[idx] = old - step
            down = f()
            a[idx] = old
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def sorted_forget(ids, labels, entropies, dominant, rho):
    pool = [(i, h) for i, y, h in zip(ids, labels, entropies) if y in dominant]
    pool.sort(key=lambda t: (-t[1], t[0]))
    n = math.floor(rho * len(pool) + 1e-9)
    return [i for i, _ in pool[:n]]


def sorted_loc(ids, labels, entropies, k, rho_loc, exclude=()):
    chosen = []
    for c in range(k):
        pool = [(i, h) for i, y, h in zip(ids, labels, entropies) if y == c and i not in exclude]
        if not pool:
            continue
        pool.sort(key=lambda t: (t[1], t[0]))
        n = max(1, math.floor(rho_loc * len(pool) + 1e-9))
        chosen += [i for i, _ in pool[:n]]
    return chosen


def sweep_ap(scores, truth):
    """AP by sweeping every distinct threshold t (predict positive iff score >= t)
    from high to low and summing precision(t) * (recall(t) - recall(previous t))."""
    scores = np.ravel(np.asarray(scores, dtype=float))
    truth = np.ravel(np.asarray(truth)).astype(bool)
    n_pos = truth.sum()
    ap, prev_recall = 0.0, 0.0
    for t in np.unique(scores)[::-1]:
        hit = scores >= t
        tp = np.count_nonzero(hit & truth)
        recall = tp / n_pos
        ap += tp / np.count_nonzero(hit) * (recall - prev_recall)
        prev_recall = recall
    return ap
