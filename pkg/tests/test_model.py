import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradleak.errors import AlreadyLinear, EmptyBatch, ShapeMismatch
from gradleak.model import (
    Batch,
    FcnParams,
    GradientBundle,
    average_gradient,
    dpsgd_obfuscate,
    forward,
    generate_model,
    loss_and_vector,
    pattern_of,
    per_sample_gradient,
    remove_first_relu,
)


def loss_of(params, x, y):
    logits, _ = forward(params, x)
    return loss_and_vector(logits, y)[0]


def with_param(params, kind, i, idx, value):
    ws = [w.copy() for w in params.weights]
    bs = [b.copy() for b in params.biases]
    (ws if kind == "w" else bs)[i][idx] = value
    return FcnParams(params.dims, ws, bs, params.first_layer_relu)


def fd_check(params, x, y, h=1e-5, rtol=1e-6, max_coords=None, rng=None):
    """Central differences on every (or a random subset of) coordinate."""
    grad = per_sample_gradient(params, x, y)
    worst = 0.0
    for kind, arrays, garrays in (
        ("w", params.weights, grad.weight_grads),
        ("b", params.biases, grad.bias_grads),
    ):
        for i, (a, g) in enumerate(zip(arrays, garrays)):
            idxs = list(np.ndindex(a.shape))
            if max_coords and len(idxs) > max_coords:
                pick = rng.choice(len(idxs), max_coords, replace=False)
                idxs = [idxs[p] for p in pick]
            for idx in idxs:
                v = a[idx]
                fp = loss_of(with_param(params, kind, i, idx, v + h), x, y)
                fm = loss_of(with_param(params, kind, i, idx, v - h), x, y)
                fd = (fp - fm) / (2 * h)
                err = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-4)
                worst = max(worst, err)
    assert worst <= rtol
    return worst


def test_zero_weights_logits_equal_last_bias():
    dims = (3, 4, 2)
    b0 = np.array([1.0, -1.0, 0.5, 0.0])
    params = FcnParams(dims, [np.zeros((4, 3)), np.zeros((2, 4))], [b0, np.array([0.3, -0.2])])
    logits, masks = forward(params, np.array([0.2, -0.7, 0.9]))
    assert np.array_equal(logits, [0.3, -0.2])
    assert np.array_equal(masks[0], [True, False, True, False])


def test_layer_one_mask_example():
    params = FcnParams((4, 4, 2), [np.eye(4), np.ones((2, 4))], [np.zeros(4), np.zeros(2)])
    _, masks = forward(params, np.array([0.5, -0.5, 0.3, -0.2]))
    assert masks[0].astype(int).tolist() == [1, 0, 1, 0]


def test_pattern_matches_straight_line_evaluation():
    rng = np.random.default_rng(0)
    params = generate_model((6, 9, 7, 3), 5)
    x = rng.uniform(-1, 1, size=6)
    _, masks = forward(params, x)
    h = x
    for i in range(params.depth):
        z = np.array([sum(params.weights[i][j, k] * h[k] for k in range(len(h))) + params.biases[i][j]
                      for j in range(params.dims[i + 1])])
        assert np.array_equal(masks[i], z > 0)
        h = np.maximum(z, 0)


def test_loss_vector_zero_logits():
    loss, lv = loss_and_vector(np.zeros(2), 0)
    assert np.allclose(lv.g, [-0.5, 0.5]) and loss == pytest.approx(np.log(2))
    _, lv = loss_and_vector(np.zeros(4), 2)
    assert np.allclose(lv.g, [0.25, 0.25, -0.75, 0.25])


@settings(max_examples=40, deadline=None)
@given(k=st.integers(2, 12), seed=st.integers(0, 2**31))
def test_loss_vector_properties(k, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=5, size=k)
    y = int(rng.integers(k))
    loss, lv = loss_and_vector(logits, y)
    assert abs(lv.g.sum()) <= 1e-12
    assert np.flatnonzero(lv.g < 0).tolist() == [y]
    h = 1e-5
    for c in range(k):
        e = np.zeros(k)
        e[c] = h
        fd = (loss_and_vector(logits + e, y)[0] - loss_and_vector(logits - e, y)[0]) / (2 * h)
        assert abs(fd - lv.g[c]) <= 1e-6 * max(abs(fd), 1e-3)


def test_single_linear_layer_gradient():
    params = FcnParams((2, 2), [np.zeros((2, 2))], [np.zeros(2)])
    g = per_sample_gradient(params, np.array([1.0, 0.0]), 0)
    assert np.allclose(g.weight_grads[0], [[-0.5, 0.0], [0.5, 0.0]])
    assert np.allclose(g.bias_grads[0], [-0.5, 0.5])


def test_last_bias_gradient_is_loss_vector():
    params = generate_model((5, 8, 4), 1)
    x = np.random.default_rng(1).uniform(-1, 1, 5)
    logits, _ = forward(params, x)
    assert np.array_equal(per_sample_gradient(params, x, 2).bias_grads[-1], loss_and_vector(logits, 2)[1].g)


@pytest.mark.parametrize("dims", [(6, 8, 7, 5, 3), (32, 64, 48, 10)])
def test_finite_differences(dims):
    rng = np.random.default_rng(len(dims))
    params = generate_model(dims, 7)
    x = rng.uniform(-1, 1, dims[0])
    fd_check(params, x, int(rng.integers(dims[-1])), max_coords=60, rng=rng)


def test_finite_differences_without_first_relu():
    rng = np.random.default_rng(9)
    params = remove_first_relu(generate_model((5, 6, 4, 3), 2))
    fd_check(params, rng.uniform(-1, 1, 5), 1)


def test_gradient_vanishes_off_pattern():
    params = generate_model((10, 20, 15, 4), 3)
    x = np.random.default_rng(3).uniform(-1, 1, 10)
    g = per_sample_gradient(params, x, 1)
    _, masks = forward(params, x)
    for l, mk in enumerate(masks, start=1):
        assert not g.weight_grads[l - 1][~mk].any()
        assert not g.bias_grads[l - 1][~mk].any()


def random_batch(d0, k, M, seed):
    rng = np.random.default_rng(seed)
    return Batch(rng.uniform(-1, 1, (M, d0)), rng.integers(0, k, M))


def test_average_gradient_examples():
    params = generate_model((6, 10, 4), 0)
    b1 = random_batch(6, 4, 1, 0)
    one = average_gradient(params, b1)
    single = per_sample_gradient(params, b1.inputs[0], int(b1.labels[0]))
    assert np.allclose(one.flat(), single.flat(), rtol=0, atol=1e-15)

    b4 = random_batch(6, 4, 4, 1)
    avg = average_gradient(params, b4)
    mean = sum(per_sample_gradient(params, b4.inputs[m], int(b4.labels[m])).flat() for m in range(4)) / 4
    assert np.abs(avg.flat() - mean).max() <= 1e-12

    dup = Batch(np.vstack([b4.inputs, b4.inputs]), np.concatenate([b4.labels, b4.labels]))
    assert np.abs(average_gradient(params, dup).flat() - avg.flat()).max() <= 1e-15

    perm = b4.subset([2, 0, 3, 1])
    assert np.abs(average_gradient(params, perm).flat() - avg.flat()).max() <= 1e-15


def test_average_gradient_errors():
    params = generate_model((3, 4, 2), 0)
    with pytest.raises(EmptyBatch):
        average_gradient(params, Batch(np.zeros((0, 3)), np.zeros(0)))
    with pytest.raises(ShapeMismatch):
        per_sample_gradient(params, np.zeros(4), 0)


def test_remove_first_relu():
    params = generate_model((8, 12, 6, 3), 4)
    lin = remove_first_relu(params)
    assert not lin.first_layer_relu
    with pytest.raises(AlreadyLinear):
        remove_first_relu(lin)
    batch = random_batch(8, 3, 16, 4)
    assert pattern_of(lin, batch).layer(1).all()
    # exposed gradients keep W0 and W1 separate, never their product
    shapes = [w.shape for w in average_gradient(lin, batch).weight_grads]
    assert shapes == [(12, 8), (6, 12), (3, 6)]


def test_remove_first_relu_keeps_logits_when_all_positive():
    W0 = np.eye(3)
    params = FcnParams((3, 3, 2), [W0, np.ones((2, 3))], [np.full(3, 2.0), np.zeros(2)])
    x = np.array([0.1, -0.5, 0.9])
    assert np.array_equal(forward(params, x)[0], forward(remove_first_relu(params), x)[0])
    x2 = np.array([-3.0, 0.0, 0.0])
    assert not np.array_equal(forward(params, x2)[0], forward(remove_first_relu(params), x2)[0])


def bundle(values):
    return GradientBundle([values.reshape(2, -1)], [np.zeros(2)])


def test_dpsgd_no_noise():
    g = bundle(np.array([0.3, 0.4, 0.0, 0.0]))
    assert np.array_equal(dpsgd_obfuscate(g, 1.0, 0.0, 0).flat(), g.flat())
    g2 = bundle(np.array([1.2, 1.6, 0.0, 0.0]))
    assert np.allclose(dpsgd_obfuscate(g2, 1.0, 0.0, 0).flat(), g2.flat() / 2)


def test_dpsgd_noise_statistics_and_determinism():
    g = GradientBundle([np.zeros((100, 100))], [np.zeros(100)])
    a = dpsgd_obfuscate(g, 1.0, 0.5, 11)
    b = dpsgd_obfuscate(g, 1.0, 0.5, 11)
    assert np.array_equal(a.flat(), b.flat())
    std = a.weight_grads[0].std()
    assert abs(std - 0.5) <= 0.05 * 0.5


def test_generate_model_shapes_and_determinism():
    p = generate_model((48, 256, 10), 3)
    assert [w.shape for w in p.weights] == [(256, 48), (10, 256)]
    assert [b.shape for b in p.biases] == [(256,), (10,)]
    q = generate_model((48, 256, 10), 3)
    assert all(np.array_equal(a, b) for a, b in zip(p.weights, q.weights))
