"""Dense net forward/backward tests with hand oracles and finite differences."""
import math

import numpy as np
import pytest

from protofed import diffnet
from protofed.errors import InputError
from protofed.rng import Rng


def small_model(seed=0, input_dim=6, hidden=(5, 4), classes=3):
    return diffnet.init_model(input_dim, list(hidden), classes, Rng(seed))


def numeric_grads(loss_fn, arrays, h=1e-6):
    """Central finite differences, independent of diffnet.grad_check."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def test_init_model_shapes_and_flags():
    m = small_model()
    assert [w.shape for w in m.weights] == [(5, 6), (4, 5), (3, 4)]
    assert [b.shape for b in m.biases] == [(5,), (4,), (3,)]
    assert m.relu_flags == [True, True, False]
    assert m.embed_layer == 1
    assert m.num_classes == 3 and m.embed_dim == 4 and m.input_dim == 6
    assert all(not b.any() for b in m.biases)


def test_init_model_determinism():
    a, b = small_model(7), small_model(7)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    c = small_model(8)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_init_model_he_scale():
    m = diffnet.init_model(100, [200], 3, Rng(5))
    ratio = m.weights[0].std() / math.sqrt(2.0 / 100)
    assert 0.9 < ratio < 1.1


def test_init_model_validation():
    with pytest.raises(InputError):
        diffnet.init_model(0, [4], 3, Rng(0))
    with pytest.raises(InputError):
        diffnet.init_model(4, [4], 1, Rng(0))
    with pytest.raises(InputError):
        diffnet.init_model(4, [], 3, Rng(0))
    with pytest.raises(InputError):
        diffnet.init_model(4, [4, 0], 3, Rng(0))


def test_forward_hand_oracle():
    # one hidden layer, weights chosen so the relu clamps one unit
    m = diffnet.Model(
        weights=[np.array([[1.0, -1.0], [0.5, 0.5]]),
                 np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])],
        biases=[np.array([0.0, -1.0]), np.array([0.1, 0.2, 0.3])],
        relu_flags=[True, False],
        embed_layer=0,
    )
    x = np.array([[2.0, 1.0], [0.0, 3.0]])
    trace = diffnet.forward_batch(m, x)
    h = np.maximum(x @ m.weights[0].T + m.biases[0], 0.0)
    assert np.allclose(trace.embedding, h)
    assert np.allclose(trace.embedding, [[1.0, 0.5], [0.0, 0.5]])
    logits = h @ m.weights[1].T + m.biases[1]
    assert np.allclose(trace.logits, logits)
    assert np.allclose(trace.logits, [[1.1, 1.2, 1.8], [0.1, 1.2, 0.8]])
    one = diffnet.forward(m, np.array([2.0, 1.0]))
    assert np.allclose(one.logits, trace.logits[:1])
    assert np.array_equal(diffnet.predict_batch(m, x), [2, 1])


def test_forward_rejects_bad_shapes():
    m = small_model()
    with pytest.raises(InputError):
        diffnet.forward_batch(m, np.zeros((2, 5)))
    with pytest.raises(InputError):
        diffnet.forward_batch(m, np.zeros(6))


def test_loss_ce_uniform_and_peaked():
    logits = np.zeros((4, 10))
    loss, _ = diffnet.loss_ce(logits, np.array([0, 3, 5, 9]))
    assert abs(loss - math.log(10.0)) < 1e-12
    peaked = np.full((1, 4), -30.0)
    peaked[0, 2] = 30.0
    loss, _ = diffnet.loss_ce(peaked, np.array([2]))
    assert loss < 1e-12


def test_loss_ce_gradient_is_softmax_minus_onehot():
    logits = np.array([[0.0, 0.0]])
    _, d = diffnet.loss_ce(logits, np.array([0]))
    assert np.allclose(d, [[-0.5, 0.5]])
    logits = np.array([[1.0, -1.0, 0.5], [0.0, 2.0, 0.0]])
    _, d = diffnet.loss_ce(logits, np.array([2, 1]))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    probs[0, 2] -= 1.0
    probs[1, 1] -= 1.0
    assert np.allclose(d, probs / 2.0, atol=1e-12)


def test_loss_ce_stable_at_large_logits():
    logits = np.array([[1000.0, 0.0]])
    loss, d = diffnet.loss_ce(logits, np.array([1]))
    assert math.isfinite(loss) and loss > 900
    assert np.isfinite(d).all()


def test_backward_matches_finite_differences():
    for seed in range(5):
        rng = Rng(100 + seed)
        m = small_model(seed)
        for b in m.biases:  # move off the relu kinks
            b += np.array([0.1 * rng.normal() for _ in range(b.shape[0])])
        x = np.array([[rng.next_double() for _ in range(6)] for _ in range(3)])
        y = np.array([rng.next_below(3) for _ in range(3)], dtype=np.int64)

        def loss_fn():
            return diffnet.loss_ce(diffnet.forward_batch(m, x).logits, y)[0]

        trace = diffnet.forward_batch(m, x)
        _, d_logits = diffnet.loss_ce(trace.logits, y)
        grads, d_x = diffnet.backward_batch(m, x, trace, d_logits)
        numeric = numeric_grads(loss_fn, m.weights + m.biases)
        for a, n in zip(grads.d_weights + grads.d_biases, numeric):
            assert np.allclose(a, n, atol=1e-7)
        assert np.allclose(d_x, numeric_grads(loss_fn, [x])[0], atol=1e-7)


def test_backward_embedding_seed_path():
    # loss = <s_logits, logits> + <s_embed, embedding> is linear, so its
    # parameter gradient isolates the two seed paths exactly
    rng = Rng(50)
    m = small_model(4)
    for b in m.biases:
        b += np.array([0.1 * rng.normal() for _ in range(b.shape[0])])
    x = np.array([[rng.next_double() for _ in range(6)] for _ in range(2)])
    s_logits = np.array([[rng.normal() for _ in range(3)] for _ in range(2)])
    s_embed = np.array([[rng.normal() for _ in range(4)] for _ in range(2)])

    def loss_fn():
        t = diffnet.forward_batch(m, x)
        return float((s_logits * t.logits).sum() + (s_embed * t.embedding).sum())

    trace = diffnet.forward_batch(m, x)
    grads, _ = diffnet.backward_batch(m, x, trace, s_logits, s_embed)
    numeric = numeric_grads(loss_fn, m.weights + m.biases)
    for a, n in zip(grads.d_weights + grads.d_biases, numeric):
        assert np.allclose(a, n, atol=1e-6)


def test_backward_folds_embed_seed_when_head_is_embedding():
    m = diffnet.Model(
        weights=[np.array([[1.0, 2.0], [3.0, 4.0]])],
        biases=[np.array([0.5, -0.5])],
        relu_flags=[False],
        embed_layer=0,
    )
    x = np.array([[1.0, 1.0]])
    trace = diffnet.forward_batch(m, x)
    s = np.array([[1.0, 0.0]])
    e = np.array([[0.0, 2.0]])
    grads, _ = diffnet.backward_batch(m, x, trace, s, e)
    # seeds fold together: d_w = (s + e)^T x
    assert np.allclose(grads.d_weights[0], [[1.0, 1.0], [2.0, 2.0]])
    assert np.allclose(grads.d_biases[0], [1.0, 2.0])


def test_gradient_container_algebra():
    m = small_model(2)
    g = diffnet.zeros_like_gradients(m)
    ones = diffnet.Gradients(
        [np.ones_like(w) for w in m.weights],
        [np.ones_like(b) for b in m.biases],
    )
    diffnet.add_scaled(g, ones, 2.0)
    assert all(np.allclose(w, 2.0) for w in g.d_weights)
    scaled = diffnet.scale_gradients(ones, -3.0)
    assert all(np.allclose(b, -3.0) for b in scaled.d_biases)
    combo = diffnet.combine_gradients(ones, scaled, 1.0, 1.0)
    assert all(np.allclose(w, -2.0) for w in combo.d_weights)


def test_sgd_step_moves_against_gradient():
    m = small_model(3)
    before = [w.copy() for w in m.weights]
    g = diffnet.Gradients(
        [np.ones_like(w) for w in m.weights],
        [np.ones_like(b) for b in m.biases],
    )
    diffnet.sgd_step(m, g, 0.1)
    for w, prev in zip(m.weights, before):
        assert np.allclose(w, prev - 0.1)
    assert all(np.allclose(b, -0.1) for b in m.biases)


def test_clone_model_is_independent():
    m = small_model(1)
    c = diffnet.clone_model(m)
    c.weights[0][0, 0] += 1.0
    assert m.weights[0][0, 0] != c.weights[0][0, 0]
    assert diffnet.model_is_finite(m)
    m.weights[1][0, 0] = math.nan
    assert not diffnet.model_is_finite(m)


def test_grad_check_accepts_true_and_rejects_corrupt():
    rng = Rng(60)
    m = small_model(6)
    for b in m.biases:
        b += np.array([0.1 * rng.normal() for _ in range(b.shape[0])])
    x = np.array([[rng.next_double() for _ in range(6)] for _ in range(3)])
    y = np.array([rng.next_below(3) for _ in range(3)], dtype=np.int64)

    def loss_fn():
        return diffnet.loss_ce(diffnet.forward_batch(m, x).logits, y)[0]

    trace = diffnet.forward_batch(m, x)
    _, d_logits = diffnet.loss_ce(trace.logits, y)
    grads, _ = diffnet.backward_batch(m, x, trace, d_logits)
    params = m.weights + m.biases
    analytic = grads.d_weights + grads.d_biases
    assert diffnet.grad_check(loss_fn, params, analytic, Rng(61)) < 1e-6
    analytic[0] = analytic[0].copy()
    analytic[0][0, 0] += 0.01
    assert diffnet.grad_check(loss_fn, params, analytic, Rng(61)) > 1e-3
