"""Pure-numpy reference kernels for the dense network hot path.

Same interface as the compiled module `sidlab._speedups`; `sidlab.backend`
picks one of the two at import time. Layout contract: all arrays are
C-contiguous float64; `weights[i]` has shape (fan_in, fan_out) and every
layer except the last is followed by SiLU.
"""

import numpy as np
from scipy.special import expit

NAME = "numpy"


def silu(z):
    return z * expit(z)


def mlp_forward(xcat, weights, biases):
    """Run the MLP on a pre-concatenated input batch.

    Returns (out, cache); cache holds the activations needed by
    mlp_backward and must be treated as opaque by callers.
    """
    h = xcat
    hidden = []
    for w, b in zip(weights[:-1], biases[:-1]):
        z = h @ w + b
        s = expit(z)
        h = z * s
        hidden.append((z, s, h))
    out = h @ weights[-1] + biases[-1]
    return out, (xcat, hidden)


def mlp_backward(weights, cache, g_out, need_wgrads=True):
    """Vector-Jacobian product of mlp_forward.

    Returns (g_xcat, g_weights, g_biases); the weight/bias gradients are
    None when need_wgrads is false (frozen-network evaluations only need
    the input gradient).
    """
    xcat, hidden = cache
    g_ws = [None] * len(weights) if not need_wgrads else []
    g_bs = [None] * len(weights) if not need_wgrads else []

    a_prev = hidden[-1][2] if hidden else xcat
    if need_wgrads:
        g_ws.append(a_prev.T @ g_out)
        g_bs.append(g_out.sum(axis=0))
    g_h = g_out @ weights[-1].T

    inputs = [xcat] + [h for (_, _, h) in hidden[:-1]]
    for i in range(len(hidden) - 1, -1, -1):
        z, s, _ = hidden[i]
        # d silu(z)/dz = s + z*s*(1-s)
        g_z = g_h * (s + z * s * (1.0 - s))
        if need_wgrads:
            g_ws.append(inputs[i].T @ g_z)
            g_bs.append(g_z.sum(axis=0))
        g_h = g_z @ weights[i].T

    if need_wgrads:
        g_ws.reverse()
        g_bs.reverse()
        return g_h, g_ws, g_bs
    return g_h, None, None
