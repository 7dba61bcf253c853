"""Adam."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import tree_flatten, tree_unflatten


@dataclass
class AdamState:
    """Moment buffers are kept as flat lists in parameter-leaf order."""

    m: list
    v: list
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    leaves = tree_flatten(params)[0]
    return AdamState([np.zeros_like(p) for p in leaves], [np.zeros_like(p) for p in leaves],
                     0, lr, beta1, beta2, eps)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Inputs are not mutated, so a previously returned parameter tree stays valid.
    """
    p_leaves, treedef = tree_flatten(params)
    g_leaves = tree_flatten(grads)[0]
    if len(p_leaves) != len(g_leaves) or len(p_leaves) != len(state.m):
        raise ValueError(f"gradient tree has {len(g_leaves)} leaves, parameters have {len(p_leaves)}, "
                         f"optimizer state has {len(state.m)}")
    for i, (p, g, m) in enumerate(zip(p_leaves, g_leaves, state.m)):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(m):
            raise ValueError(f"leaf {i}: gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
    step = state.step + 1
    b1, b2, lr, eps = state.beta1, state.beta2, state.lr, state.eps
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_leaves, g_leaves, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return tree_unflatten(treedef, new_p), AdamState(new_m, new_v, step, lr, b1, b2, eps)
