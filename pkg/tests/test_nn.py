import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from fedbif.errors import DataError, DimensionError, SpecificationError
from fedbif.nn import (
    Layer,
    MlpSpec,
    forward,
    init_model,
    loss_and_backward,
    sgd_step,
    softmax_cross_entropy,
    train_sgd,
)


def straight_line_logits(layers, x):
    """Independent re-implementation: explicit loops over units."""
    h = [list(row) for row in x]
    for k, layer in enumerate(layers):
        w, b = layer.weight, layer.bias
        out = []
        for row in h:
            z = [sum(row[i] * w[i, j] for i in range(len(row))) + b[j] for j in range(w.shape[1])]
            out.append(z if k == len(layers) - 1 else [max(v, 0.0) for v in z])
        h = out
    return np.array(h)


def loss_of(layers, x, y):
    logits, _ = forward(layers, x)
    return softmax_cross_entropy(logits, y)[0]


def test_init_is_deterministic_and_biases_zero():
    a = init_model(MlpSpec([4, 3], seed=7))
    b = init_model(MlpSpec([4, 3], seed=7))
    assert np.array_equal(a.layers[0].weight, b.layers[0].weight)
    assert all(np.all(l.bias == 0) for l in a.layers)


def test_init_variance_matches_kaiming():
    w = init_model(MlpSpec([512, 512], seed=0)).layers[0].weight
    assert abs(w.var() - 2 / 512) / (2 / 512) < 0.2


@pytest.mark.parametrize("widths", [[4], [4, 0], []])
def test_init_rejects_bad_widths(widths):
    with pytest.raises(SpecificationError):
        init_model(MlpSpec(widths))


def test_zero_model_gives_zero_logits(rng):
    layers = [Layer(np.zeros((3, 4)), np.zeros(4)), Layer(np.zeros((4, 2)), np.zeros(2))]
    logits, _ = forward(layers, rng.normal(size=(5, 3)))
    assert np.all(logits == 0)


def test_relu_hidden_values():
    layers = [Layer(np.eye(2), np.zeros(2)), Layer(np.eye(2), np.zeros(2))]
    _, cache = forward(layers, np.array([[-1.0, 2.0]]))
    assert np.array_equal(cache.inputs[1], [[0.0, 2.0]])


def test_forward_matches_straight_line_oracle(rng):
    model = init_model(MlpSpec([5, 4, 3, 2], seed=3))
    for l in model.layers:
        l.bias[:] = rng.normal(size=l.bias.shape)
    x = rng.normal(size=(6, 5))
    logits, _ = forward(model.layers, x)
    assert np.allclose(logits, straight_line_logits(model.layers, x), rtol=0, atol=1e-12)


def test_forward_shape_mismatch():
    model = init_model(MlpSpec([3, 2]))
    with pytest.raises(DimensionError):
        forward(model.layers, np.zeros((1, 4)))


def test_uniform_logits_loss_is_log_c():
    loss, _ = softmax_cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))
    assert loss == pytest.approx(np.log(7), abs=1e-15)


def test_label_out_of_range():
    with pytest.raises(DataError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_confident_prediction_loss_near_zero():
    logits = np.array([[20.0, 0.0, 0.0]])
    assert softmax_cross_entropy(logits, np.array([0]))[0] < 1e-3


@given(seed=st.integers(0, 2**32 - 1), depth=st.integers(1, 3))
def test_gradients_match_finite_differences(seed, depth):
    rng = np.random.default_rng(seed)
    widths = [int(rng.integers(2, 6)) for _ in range(depth + 1)]
    model = init_model(MlpSpec(widths, seed=seed))
    for l in model.layers:
        l.bias[:] = 0.1 * rng.normal(size=l.bias.shape)
    x = rng.normal(size=(4, widths[0]))
    y = rng.integers(widths[-1], size=4)
    logits, cache = forward(model.layers, x)
    _, grads = loss_and_backward(logits, y, cache)
    # finite differences are meaningless across a ReLU kink
    assume(all(np.min(np.abs(z)) > 1e-4 for z in cache.pre[:-1]))
    h = 1e-5
    for layer, grad in zip(model.layers, grads):
        for param, g in ((layer.weight, grad.weight), (layer.bias, grad.bias)):
            for idx in np.ndindex(param.shape):
                old = param[idx]
                param[idx] = old + h
                up = loss_of(model.layers, x, y)
                param[idx] = old - h
                down = loss_of(model.layers, x, y)
                param[idx] = old
                fd = (up - down) / (2 * h)
                assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-6) + 1e-9


def test_duplicated_batch_gives_same_loss_and_grads(rng):
    model = init_model(MlpSpec([3, 4, 2], seed=1))
    x = rng.normal(size=(5, 3))
    y = rng.integers(2, size=5)
    logits, cache = forward(model.layers, x)
    l1, g1 = loss_and_backward(logits, y, cache)
    x2, y2 = np.repeat(x, 2, axis=0), np.repeat(y, 2)
    logits, cache = forward(model.layers, x2)
    l2, g2 = loss_and_backward(logits, y2, cache)
    assert l1 == pytest.approx(l2, rel=1e-14)
    for a, b in zip(g1, g2):
        assert np.allclose(a.weight, b.weight, atol=1e-15)
        assert np.allclose(a.bias, b.bias, atol=1e-15)


def test_sgd_step_definition():
    p = [Layer(np.array([[1.0]]), np.array([0.0]))]
    g = [Layer(np.array([[0.5]]), np.array([0.0]))]
    assert sgd_step(p, g, 0.1)[0].weight[0, 0] == 1.0 - 0.1 * 0.5
    assert sgd_step(p, g, 0.0)[0].weight[0, 0] == 1.0


def test_sgd_step_shape_mismatch():
    p = [Layer(np.zeros((2, 2)), np.zeros(2))]
    g = [Layer(np.zeros((2, 3)), np.zeros(3))]
    with pytest.raises(DimensionError):
        sgd_step(p, g, 0.1)


def test_training_is_deterministic(rng):
    model = init_model(MlpSpec([3, 5, 2], seed=2))
    x = rng.normal(size=(20, 3))
    y = (x[:, 0] > 0).astype(int)
    a, la = train_sgd(model.layers, x, y, 2, 4, 0.1, np.random.default_rng(9))
    b, lb = train_sgd(model.layers, x, y, 2, 4, 0.1, np.random.default_rng(9))
    assert la == lb
    assert all(np.array_equal(p.weight, q.weight) for p, q in zip(a, b))
