"""Independent reference computations used by the tests.

Nothing here imports the package's numerics; each oracle is written from
the defining formula with plain Python or numpy.
"""

import math

import numpy as np


def central_fd(f, leaves, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of every array in ``leaves``.

    ``leaves`` are perturbed in place and restored.
    """
    out = []
    for arr in leaves:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_rel_err(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a)
        n = np.asarray(n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def linear_bar_alphas(T, beta_start, beta_end):
    """Cumulative products of 1 - beta for a linear schedule, in pure Python."""
    if T == 1:
        betas = [beta_start]
    else:
        betas = [beta_start + (beta_end - beta_start) * i / (T - 1) for i in range(T)]
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return betas, out


def adam_scalar(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on a scalar, one entry of ``grads`` per step."""
    m = v = 0.0
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** k)) / (math.sqrt(v / (1 - b2 ** k)) + eps)
    return theta


def pointmass_step(p, v, a, dt=0.1, vmax=2.0, pmax=3.0, cost=0.1):
    """Scalar-loop double integrator, written out per coordinate."""
    r = -math.hypot(p[0], p[1]) - cost * math.hypot(a[0], a[1])
    v2 = [min(max(v[i] + dt * a[i], -vmax), vmax) for i in range(2)]
    p2 = [min(max(p[i] + dt * v2[i], -pmax), pmax) for i in range(2)]
    return p2, v2, r


def auc(pos, neg):
    """Probability a random positive outranks a random negative (ties count half)."""
    pos = np.asarray(pos)[:, None]
    neg = np.asarray(neg)[None, :]
    return float(np.mean(pos > neg) + 0.5 * np.mean(pos == neg))
