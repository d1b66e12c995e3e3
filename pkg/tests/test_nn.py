import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from admmq import nn
from admmq.data import Dataset, synth_blobs
from admmq.errors import DivergenceError, ShapeError

from conftest import fd_grad, rel_err


def dense_model(w, b):
    m = nn.Model([nn.Dense(w.shape[1], w.shape[0])], (w.shape[1],))
    m.set("dense1.weight", w)
    m.set("dense1.bias", b)
    return m


def test_identity_dense_layer():
    m = dense_model(np.eye(3), np.zeros(3))
    assert np.array_equal(nn.forward(m, np.array([[1.0, 2.0, 3.0]])), [[1.0, 2.0, 3.0]])


def test_zero_dense_layer(rng):
    m = dense_model(np.zeros((4, 3)), np.zeros(4))
    assert not np.any(nn.forward(m, rng.standard_normal((5, 3))))


def test_maxpool_2x2():
    y, _ = nn.MaxPool2D(2).forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert y.tolist() == [[[[4.0]]]]


def test_input_shape_mismatch_names_layer():
    m = nn.lenet5(seed=0)
    with pytest.raises(ShapeError, match="conv1"):
        nn.forward(m, np.zeros((2, 1, 27, 28)))


def test_loss_uniform_two_classes():
    assert nn.loss(np.array([[0.0, 0.0]]), [0]) == pytest.approx(math.log(2), abs=1e-15)


def test_loss_saturated_is_stable():
    v = nn.loss(np.array([[1000.0, -1000.0]]), [0])
    assert np.isfinite(v) and 0.0 <= v < 1e-12


def test_loss_against_scalar_reference(rng):
    logits = rng.standard_normal((6, 4)) * 3
    labels = rng.integers(0, 4, 6)
    ref = np.mean([math.log(sum(math.exp(z) for z in row)) - row[y] for row, y in zip(logits.tolist(), labels)])
    assert nn.loss(logits, labels) == pytest.approx(ref, abs=1e-12)


def test_loss_rejects_bad_label():
    with pytest.raises(ShapeError):
        nn.loss(np.zeros((1, 3)), [3])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_loss_shift_invariance(seed, c):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((5, 7))
    labels = r.integers(0, 7, 5)
    assert nn.loss(logits + c, labels) == pytest.approx(nn.loss(logits, labels), abs=1e-12)


def test_perfect_logits_give_tiny_gradient():
    m = dense_model(np.array([[100.0, 0.0], [0.0, 100.0]]), np.zeros(2))
    grads = nn.backward(m, nn.Batch(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1])))
    assert all(np.linalg.norm(g) < 1e-6 for g in grads.values())


# every layer kind, parameters and inputs, against central differences
TOY_NETS = {
    "dense": lambda: nn.Model([nn.Dense(4, 5), nn.ReLU(), nn.Dense(5, 3)], (4,)),
    "conv": lambda: nn.Model(
        [nn.Conv2D(2, 3, 3, stride=1, padding=1), nn.ReLU(), nn.Flatten(), nn.Dense(3 * 5 * 5, 3)], (2, 5, 5)
    ),
    "conv_strided": lambda: nn.Model([nn.Conv2D(1, 2, 3, stride=2), nn.Flatten(), nn.Dense(2 * 3 * 3, 3)], (1, 7, 7)),
    "maxpool": lambda: nn.Model(
        [nn.Conv2D(1, 2, 3), nn.MaxPool2D(2), nn.ReLU(), nn.Flatten(), nn.Dense(2 * 3 * 3, 3)], (1, 8, 8)
    ),
}


@pytest.mark.parametrize("kind", sorted(TOY_NETS))
def test_finite_differences(kind):
    m = TOY_NETS[kind]().init_params(7)
    r = np.random.default_rng(3)
    x = r.standard_normal((3, *m.input_shape))
    y = r.integers(0, 3, 3)
    _, grads = m.loss_and_grad(x, y)
    for name, p in m.parameters().items():
        num = fd_grad(lambda: m.loss(x, y), p)
        assert rel_err(grads[name], num) < 1e-4, name
    num = fd_grad(lambda: m.loss(x, y), x)
    assert rel_err(m.input_grad(x, y), num) < 1e-4


def test_dense_gradient_is_per_sample_average(rng):
    m = nn.mlp(3, (4,), 2, seed=1)
    x = rng.standard_normal((2, 3))
    y = np.array([0, 1])
    g = nn.backward(m, nn.Batch(x, y))
    g0 = nn.backward(m, nn.Batch(x[:1], y[:1]))
    g1 = nn.backward(m, nn.Batch(x[1:], y[1:]))
    for k in g:
        np.testing.assert_allclose(g[k], (g0[k] + g1[k]) / 2, rtol=0, atol=1e-15)


def test_sgd_step_arithmetic():
    p = {"w": np.array([1.0])}
    nn.optimizer_step(p, {"w": np.array([0.5])}, nn.OptimizerState("sgd", 0.1))
    assert p["w"][0] == 0.95


def test_zero_gradient_steps():
    p = {"w": np.array([1.0, -2.0])}
    nn.optimizer_step(p, {"w": np.zeros(2)}, nn.OptimizerState("sgd", 0.1))
    assert p["w"].tolist() == [1.0, -2.0]
    opt = nn.OptimizerState("adam", 0.1)
    nn.optimizer_step(p, {"w": np.zeros(2)}, opt)
    assert p["w"].tolist() == [1.0, -2.0]
    assert opt.t == 1 and "w" in opt.m


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([0.0])}
    nn.optimizer_step(p, {"w": np.array([1.0])}, nn.OptimizerState("adam", 1e-3))
    # bias-corrected: m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p["w"][0] == pytest.approx(-1e-3, rel=1e-7)


def test_non_finite_gradient_aborts():
    with pytest.raises(DivergenceError):
        nn.optimizer_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, nn.OptimizerState("sgd", 0.1))


def test_constant_predictor_on_balanced_set():
    m = dense_model(np.zeros((10, 2)), np.zeros(10))  # all logits tie -> class 0
    ds = Dataset(np.zeros((100, 2)), np.repeat(np.arange(10), 10))
    assert nn.evaluate(m, ds) == 0.1


def test_memorizer_scores_one():
    ds = synth_blobs(classes=2, n_per_class=50, dim=2, seed=0, spacing=10)
    m = nn.mlp(2, (8,), 2, seed=0)
    opt = nn.OptimizerState("adam", 1e-2)
    r = np.random.default_rng(0)
    for _ in range(30):
        nn.train_epoch(m, ds, opt, 16, r)
    assert nn.evaluate(m, ds) == 1.0


def test_determinism():
    ds = synth_blobs(classes=3, n_per_class=40, dim=4, seed=1)

    def run():
        m = nn.mlp(4, (8,), 3, seed=5)
        opt = nn.OptimizerState("adam", 1e-2)
        r = np.random.default_rng(9)
        for _ in range(3):
            nn.train_epoch(m, ds, opt, 8, r)
        return m.parameters()

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_composition(rng):
    m = nn.lenet5(seed=2)
    x = rng.random((3, 1, 28, 28))
    y = x
    for layer in m.layers:
        y, _ = layer.forward(y)
    assert np.array_equal(nn.forward(m, x), y)


def test_lenet5_shape_and_count():
    m = nn.lenet5()
    assert m.N == 5
    assert m.weight_names() == ["conv1.weight", "conv2.weight", "dense1.weight", "dense2.weight", "dense3.weight"]
    assert nn.forward(m, np.zeros((2, 1, 28, 28))).shape == (2, 10)


def test_architecture_round_trip():
    m = nn.lenet5(seed=4)
    m2 = nn.Model.from_architecture(m.architecture())
    for k, v in m.parameters().items():
        m2.set(k, v)
    x = np.random.default_rng(0).random((2, 1, 28, 28))
    assert np.array_equal(nn.forward(m, x), nn.forward(m2, x))


@pytest.mark.slow
def test_lenet5_two_epochs(mnist_path):
    from admmq.data import load_mnist

    d = load_mnist(mnist_path)
    m = nn.lenet5(seed=0)
    opt = nn.OptimizerState("adam", 1e-3)
    r = np.random.default_rng(0)
    for _ in range(2):
        nn.train_epoch(m, d["train"], opt, 64, r)
    assert nn.evaluate(m, d["test"]) > 0.9
