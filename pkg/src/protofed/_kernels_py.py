"""numpy implementation of the batched net kernels.

Fallback used when the compiled extension is unavailable; semantics match
``_kernels.pyx`` (same shapes, same reduction structure).
"""
from __future__ import annotations

import numpy as np


def net_forward(x, weights, biases, relu_flags):
    """Run a stack of affine layers over a batch.

    x: (n, d_in) float64. weights[i]: (out_i, in_i), biases[i]: (out_i,).
    Returns (pre_activations, activations) lists of (n, out_i) arrays.
    """
    pre = []
    act = []
    a = x
    for w, b, relu in zip(weights, biases, relu_flags):
        z = a @ w.T + b
        a = np.maximum(z, 0.0) if relu else z
        pre.append(z)
        act.append(a)
    return pre, act


def net_backward(x, pre, act, weights, relu_flags, d_out, d_embed, embed_layer):
    """Backpropagate seed gradients through the layer stack.

    d_out seeds the last layer's output; d_embed (may be None) is added to
    the gradient at act[embed_layer]. Returns (d_weights, d_biases, d_x).
    """
    n_layers = len(weights)
    d_ws = [None] * n_layers
    d_bs = [None] * n_layers
    da = d_out
    for i in range(n_layers - 1, -1, -1):
        dz = np.where(pre[i] > 0.0, da, 0.0) if relu_flags[i] else da
        a_prev = x if i == 0 else act[i - 1]
        d_ws[i] = dz.T @ a_prev
        d_bs[i] = dz.sum(axis=0)
        da = dz @ weights[i]
        if d_embed is not None and i - 1 == embed_layer:
            da = da + d_embed
    return d_ws, d_bs, da
