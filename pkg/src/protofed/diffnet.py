"""Small dense nets with hand-written forward and backward passes.

A model is a stack of affine layers with ReLU on every hidden layer and a
linear head. The activation of the last hidden layer is the embedding that
prototype computations consume. Backward passes accept two gradient seeds,
one at the logits and one at the embedding, so losses defined on either
point (or both) reuse the same kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import InputError
from .rng import Rng


@dataclass
class Model:
    weights: list  # per layer, shape (out, in)
    biases: list  # per layer, shape (out,)
    relu_flags: list
    embed_layer: int  # layer index whose activation is the embedding

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weights[self.embed_layer].shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]


@dataclass
class ForwardTrace:
    pre: list  # pre-activation per layer, shape (n, out)
    act: list  # post-activation per layer
    embed_layer: int

    @property
    def embedding(self) -> np.ndarray:
        return self.act[self.embed_layer]

    @property
    def logits(self) -> np.ndarray:
        return self.act[-1]


@dataclass
class Gradients:
    d_weights: list
    d_biases: list


def init_model(input_dim: int, hidden_sizes, num_classes: int, rng: Rng) -> Model:
    """Build a model with He-scaled normal weights and zero biases."""
    if input_dim < 1 or num_classes < 2:
        raise InputError("need input_dim >= 1 and num_classes >= 2")
    hidden_sizes = list(hidden_sizes)
    if not hidden_sizes or any(h < 1 for h in hidden_sizes):
        raise InputError("hidden_sizes must be a non-empty list of positive ints")
    sizes = [input_dim] + hidden_sizes + [num_classes]
    weights = []
    biases = []
    relu_flags = []
    for i in range(1, len(sizes)):
        fan_in = sizes[i - 1]
        scale = math.sqrt(2.0 / fan_in)
        flat = [rng.normal(0.0, scale) for _ in range(sizes[i] * fan_in)]
        weights.append(np.array(flat, dtype=np.float64).reshape(sizes[i], fan_in))
        biases.append(np.zeros(sizes[i], dtype=np.float64))
        relu_flags.append(i < len(sizes) - 1)
    return Model(weights, biases, relu_flags, embed_layer=len(hidden_sizes) - 1)


def clone_model(model: Model) -> Model:
    return Model(
        [w.copy() for w in model.weights],
        [b.copy() for b in model.biases],
        list(model.relu_flags),
        model.embed_layer,
    )


def model_is_finite(model: Model) -> bool:
    return all(np.isfinite(w).all() for w in model.weights) and all(
        np.isfinite(b).all() for b in model.biases
    )


def forward_batch(model: Model, x: np.ndarray) -> ForwardTrace:
    """Run the net over a batch x of shape (n, input_dim)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise InputError("x must have shape (n, %d)" % model.input_dim)
    pre, act = backend.net_forward(x, model.weights, model.biases, model.relu_flags)
    return ForwardTrace(pre, act, model.embed_layer)


def forward(model: Model, x: np.ndarray) -> ForwardTrace:
    """Single-sample convenience wrapper around forward_batch."""
    return forward_batch(model, np.asarray(x, dtype=np.float64)[None, :])


def predict_batch(model: Model, x: np.ndarray) -> np.ndarray:
    """Argmax class labels from the head logits."""
    return np.argmax(forward_batch(model, x).logits, axis=1)


def loss_ce(logits: np.ndarray, labels) -> tuple:
    """Mean cross-entropy over the batch and its gradient at the logits.

    Uses the log-sum-exp form so large logits stay finite.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    rows = np.arange(n)
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = m[:, 0] + np.log(np.exp(shifted).sum(axis=1))
    loss = float((lse - logits[rows, labels]).mean())
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    d_logits = probs
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    return loss, d_logits


def backward_batch(model: Model, x: np.ndarray, trace: ForwardTrace,
                   d_logits: np.ndarray, d_embed=None) -> tuple:
    """Backpropagate seeds at the logits and (optionally) the embedding.

    Returns (Gradients, d_x) where d_x is the gradient at the input batch.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    d_out = np.ascontiguousarray(d_logits, dtype=np.float64)
    if d_embed is not None:
        d_embed = np.ascontiguousarray(d_embed, dtype=np.float64)
        if model.embed_layer == len(model.weights) - 1:
            # embedding and head coincide, fold the seed into d_out
            d_out = d_out + d_embed
            d_embed = None
    d_ws, d_bs, d_x = backend.net_backward(
        x, trace.pre, trace.act, model.weights, model.relu_flags,
        d_out, d_embed, model.embed_layer,
    )
    return Gradients(d_ws, d_bs), d_x


def zeros_like_gradients(model: Model) -> Gradients:
    return Gradients(
        [np.zeros_like(w) for w in model.weights],
        [np.zeros_like(b) for b in model.biases],
    )


def add_scaled(total: Gradients, grads: Gradients, scale: float) -> None:
    """total += scale * grads, in place."""
    for t, g in zip(total.d_weights, grads.d_weights):
        t += scale * g
    for t, g in zip(total.d_biases, grads.d_biases):
        t += scale * g


def scale_gradients(grads: Gradients, scale: float) -> Gradients:
    """scale * grads as a new Gradients."""
    return Gradients(
        [scale * w for w in grads.d_weights],
        [scale * b for b in grads.d_biases],
    )


def combine_gradients(ga: Gradients, gb: Gradients, wa: float, wb: float) -> Gradients:
    """wa * ga + wb * gb as a new Gradients."""
    return Gradients(
        [wa * a + wb * b for a, b in zip(ga.d_weights, gb.d_weights)],
        [wa * a + wb * b for a, b in zip(ga.d_biases, gb.d_biases)],
    )


def sgd_step(model: Model, grads: Gradients, lr: float) -> None:
    """In-place vanilla SGD update."""
    for w, dw in zip(model.weights, grads.d_weights):
        w -= lr * dw
    for b, db in zip(model.biases, grads.d_biases):
        b -= lr * db


def _central_diff(loss_fn, flat, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    up = loss_fn()
    flat[i] = orig - h
    down = loss_fn()
    flat[i] = orig
    return (up - down) / (2.0 * h)


def grad_check(loss_fn, params, grads, rng: Rng, h: float = 1e-6,
               max_entries: int = 24) -> float:
    """Worst relative error of analytic grads vs central finite differences.

    loss_fn() must re-evaluate the scalar loss from the current contents of
    the arrays in params; params and grads are parallel lists. Relative
    error is |a - n| / max(1, |a|, |n|). Entries are subsampled when an
    array has more than max_entries elements. Entries whose error looks
    large are re-measured at h/16: a perturbation that crosses a relu kink
    mixes two linear branches, and shrinking the step window resolves that
    without hiding a genuinely wrong analytic gradient.
    """
    worst = 0.0
    for arr, g in zip(params, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        size = flat.size
        if size <= max_entries:
            idxs = range(size)
        else:
            idxs = [rng.next_below(size) for _ in range(max_entries)]
        for i in idxs:
            analytic = float(gflat[i])

            def rel_err(numeric):
                return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))

            err = rel_err(_central_diff(loss_fn, flat, i, h))
            if err > 1e-7:
                err = rel_err(_central_diff(loss_fn, flat, i, h / 16.0))
            if err > worst:
                worst = err
    return worst
