import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fgmask import diffnet
from fgmask.diffnet import Conv2D, Dense, MaxPool, Model, ReLU


def central_diff(f, arr, h=1e-4):
    """Independent finite-difference gradient of scalar f() w.r.t. arr (perturbed in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def softmax_xent(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    return float(np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]))


def small_cnn(seed):
    layers = [Conv2D(3, 3, 2, 3, 1, 1), ReLU(), MaxPool(2, 2), Conv2D(3, 3, 3, 4, 1, 0), ReLU(), Dense(16, 3)]
    m = diffnet.init_model(layers, (2, 8, 8), seed)
    rng = np.random.default_rng(seed + 100)
    return m.with_params([tuple(a if a.ndim > 1 else rng.uniform(-0.1, 0.1, a.shape) for a in p)
                          for p in m.params])


# forward ---------------------------------------------------------------------

def test_dense_identity():
    m = Model([Dense(2, 2)], (2,), [(np.eye(2), np.zeros(2))])
    np.testing.assert_array_equal(diffnet.forward(m, [[0.3, 0.7]]), [[0.3, 0.7]])


def test_conv_identity_kernel():
    m = Model([Conv2D(1, 1, 1, 1)], (1, 5, 4), [(np.ones((1, 1, 1, 1)), np.zeros(1))])
    x = np.random.default_rng(0).random((2, 1, 5, 4))
    np.testing.assert_array_equal(diffnet.forward(m, x), x)


def test_forward_deterministic():
    layers = [Conv2D(3, 3, 1, 4, 1, 1), ReLU(), Conv2D(3, 3, 4, 2, 2, 0), ReLU(), Dense(18, 3)]
    m = diffnet.init_model(layers, (1, 7, 7), seed=7)
    x = np.random.default_rng(7).random((3, 1, 7, 7))
    a, b = diffnet.forward(m, x), diffnet.forward(m, x)
    assert a.tobytes() == b.tobytes()


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    layer = Conv2D(3, 2, 2, 3, stride=2, pad=1)
    w, b = rng.normal(size=(3, 2, 3, 2)), rng.normal(size=3)
    m = Model([layer], (2, 6, 5), [(w, b)])
    x = rng.normal(size=(2, 2, 6, 5))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    _, ho, wo = layer.out_shape((2, 6, 5))
    ref = np.zeros((2, 3, ho, wo))
    for n in range(2):
        for f in range(3):
            for i in range(ho):
                for j in range(wo):
                    ref[n, f, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 2] * w[f]).sum() + b[f]
    np.testing.assert_allclose(diffnet.forward(m, x), ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), k=st.integers(1, 4), s=st.integers(1, 3), p=st.integers(0, 2))
def test_conv_output_dims(h, w, k, s, p):
    layer = Conv2D(k, k, 1, 2, s, p)
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        with pytest.raises(ValueError):
            layer.out_shape((1, h, w))
        return
    assert layer.out_shape((1, h, w)) == (2, ho, wo)
    m = Model([layer], (1, h, w))
    assert diffnet.forward(m, np.zeros((1, 1, h, w))).shape == (1, 2, ho, wo)


def test_shape_mismatch_names_layer():
    with pytest.raises(ValueError, match=r"layer 2 \(Dense\)"):
        Model([Conv2D(3, 3, 1, 2), ReLU(), Dense(10, 2)], (1, 6, 6))
    m = Model([Conv2D(3, 3, 1, 2), ReLU(), Dense(32, 2)], (1, 6, 6))
    with pytest.raises(ValueError, match=r"layer 0 \(Conv2D\)"):
        diffnet.forward(m, np.zeros((1, 1, 5, 6)))


# loss and gradients ----------------------------------------------------------

def test_uniform_logits_loss():
    m = Model([Dense(4, 10)], (4,))
    loss, _ = diffnet.loss_and_grads(m, np.ones((3, 4)), np.array([0, 5, 9]))
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert math.log(10) == pytest.approx(2.302585, abs=1e-6)


def test_dense_analytic_gradient():
    rng = np.random.default_rng(2)
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    m = Model([Dense(4, 3)], (4,), [(w, b)])
    x = rng.normal(size=(2, 4))
    y = np.array([1, 2])
    _, g = diffnet.loss_and_grads(m, x, y, want_input_grad=True)
    z = x @ w.T + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    d = p.copy()
    d[np.arange(2), y] -= 1
    d /= 2
    np.testing.assert_allclose(g.input, d @ w, rtol=1e-12)
    np.testing.assert_allclose(g.params[0][0], d.T @ x, rtol=1e-12)
    np.testing.assert_allclose(g.params[0][1], d.sum(0), rtol=1e-12)


def test_input_grad_only_when_requested():
    m = small_cnn(0)
    x = np.random.default_rng(0).random((2, 2, 8, 8))
    _, g = diffnet.loss_and_grads(m, x, np.array([0, 1]))
    assert g.input is None
    _, g = diffnet.loss_and_grads(m, x, np.array([0, 1]), want_input_grad=True)
    assert g.input.shape == x.shape
    assert [a.shape for a in g.flat()] == [a.shape for a in m.flat_params()]


def _small_cnn_worst_error(seed, h):
    m = small_cnn(seed)
    assert m.n_params() <= 500
    rng = np.random.default_rng(seed)
    x = rng.random((3, 2, 8, 8))
    y = rng.integers(0, 3, 3)
    _, g = diffnet.loss_and_grads(m, x, y, want_input_grad=True)
    probe = [a.copy() for a in m.flat_params()]
    it = iter(probe)
    pm = m.with_params([tuple(next(it) for _ in p) for p in m.params])
    xx = x.copy()

    def f():
        return softmax_xent(diffnet.forward(pm, xx), y)

    worst = 0.0
    for analytic, arr in zip(g.flat() + [g.input], pm.flat_params() + [xx]):
        numeric = central_diff(f, arr, h)
        err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, err.max())
    return worst


def test_small_cnn_gradients_vs_finite_differences():
    assert _small_cnn_worst_error(0, 1e-4) < 1e-3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_small_cnn_gradients_with_small_step(seed):
    # a step of 1e-6 rarely straddles a ReLU or pooling kink, so every coordinate is comparable
    assert _small_cnn_worst_error(seed, 1e-6) < 1e-3


def test_softmax_rows_sum_to_one():
    logits = np.random.default_rng(3).normal(scale=30, size=(50, 7))
    np.testing.assert_allclose(diffnet.softmax(logits).sum(axis=1), 1.0, atol=1e-6)


def test_maxpool_tie_routes_to_first():
    m = Model([MaxPool(2, 2), Dense(1, 2)], (1, 2, 2), [(), (np.array([[1.0], [-1.0]]), np.zeros(2))])
    x = np.full((1, 1, 2, 2), 0.5)
    _, g = diffnet.loss_and_grads(m, x, np.array([0]), want_input_grad=True)
    gi = g.input[0, 0]
    assert gi[0, 0] != 0 and gi[0, 1] == gi[1, 0] == gi[1, 1] == 0


def test_label_out_of_range():
    m = Model([Dense(2, 3)], (2,))
    with pytest.raises(ValueError, match="labels"):
        diffnet.loss_and_grads(m, np.zeros((1, 2)), np.array([3]))
    with pytest.raises(ValueError):
        diffnet.loss_and_grads(m, np.zeros((1, 2)), np.array([-1]))


def test_loss_and_grads_pure():
    m = small_cnn(4)
    x = np.random.default_rng(4).random((2, 2, 8, 8))
    y = np.array([0, 2])
    l1, g1 = diffnet.loss_and_grads(m, x, y, True)
    l2, g2 = diffnet.loss_and_grads(m, x, y, True)
    assert l1 == l2
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1.flat() + [g1.input], g2.flat() + [g2.input]))


# grad_check ------------------------------------------------------------------

def test_grad_check_dense():
    rng = np.random.default_rng(5)
    m = Model([Dense(3, 2)], (3,), [(rng.normal(size=(2, 3)), rng.normal(size=2))])
    rep = diffnet.grad_check(m, rng.normal(size=(4, 3)), np.array([0, 1, 1, 0]), 1e-4, 1e-4)
    assert rep.passed and rep.max_rel_err <= 1e-4


def test_grad_check_cnn_seed3():
    m = small_cnn(3)
    rng = np.random.default_rng(3)
    rep = diffnet.grad_check(m, rng.random((2, 2, 8, 8)), np.array([1, 2]), 1e-4, 1e-3)
    assert rep.passed, rep


def test_grad_check_zero_tolerance_fails():
    m = small_cnn(3)
    rng = np.random.default_rng(3)
    rep = diffnet.grad_check(m, rng.random((2, 2, 8, 8)), np.array([1, 2]), 1e-4, 0.0)
    assert not rep.passed and rep.max_rel_err > 0


def test_grad_check_subsamples_large_models():
    m = diffnet.small_vgg((3, 8, 8), 2, seed=0, widths=(8, 8, 8), hidden=16)
    assert m.n_params() > 1000
    x = np.random.default_rng(0).random((1, 3, 8, 8))
    rep = diffnet.grad_check(m, x, np.array([1]), max_coords=200)
    assert rep.n_checked == 200


# sgd -------------------------------------------------------------------------

def _scalar_model(p):
    return Model([Dense(1, 1)], (1,), [(np.array([[p]]), np.zeros(1))])


def _grads(g):
    return diffnet.Gradients([(np.array([[g]]), np.zeros(1))])


def test_sgd_zero_lr_unchanged():
    m = small_cnn(0)
    _, g = diffnet.loss_and_grads(m, np.random.default_rng(0).random((2, 2, 8, 8)), np.array([0, 1]))
    m2, _ = diffnet.sgd_step(m, g, 0.0, 0.9, None)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(m.flat_params(), m2.flat_params()))


def test_sgd_single_step():
    m, _ = diffnet.sgd_step(_scalar_model(1.0), _grads(0.5), 0.1, 0.0)
    assert m.params[0][0][0, 0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_momentum_two_steps():
    m, st1 = diffnet.sgd_step(_scalar_model(0.0), _grads(1.0), 0.1, 0.9)
    assert m.params[0][0][0, 0] == pytest.approx(-0.1, abs=1e-15)
    m, st2 = diffnet.sgd_step(m, _grads(1.0), 0.1, 0.9, st1)
    assert st2.velocity[0][0, 0] == pytest.approx(1.9, abs=1e-15)
    assert m.params[0][0][0, 0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_rejects_bad_args():
    m = _scalar_model(0.0)
    with pytest.raises(ValueError):
        diffnet.sgd_step(m, _grads(1.0), -0.1)
    with pytest.raises(ValueError):
        diffnet.sgd_step(m, _grads(1.0), 0.1, 1.0)
    with pytest.raises(ValueError, match="mirror"):
        diffnet.sgd_step(m, diffnet.Gradients([(np.zeros((2, 1)), np.zeros(1))]), 0.1)


def test_sgd_leaves_input_model_untouched():
    m = _scalar_model(1.0)
    before = m.params[0][0].copy()
    diffnet.sgd_step(m, _grads(0.5), 0.1, 0.5)
    np.testing.assert_array_equal(m.params[0][0], before)


# checkpoints -----------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    m = diffnet.small_vgg((3, 16, 16), 4, seed=1)
    path = tmp_path / "m.mbnet"
    diffnet.save_model(m, path)
    raw = path.read_bytes()
    assert raw.startswith(b"MBNET1\ninput 3 16 16\nconv 3 3 3 16 1 1\nrelu\n")
    loaded = diffnet.load_model(path)
    assert loaded.layers == m.layers and loaded.input_shape == m.input_shape
    for a, b in zip(loaded.flat_params(), m.flat_params()):
        np.testing.assert_array_equal(a, b.astype(np.float32).astype(np.float64))
    assert diffnet.checkpoint_bytes(loaded) == raw


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE\n")
    with pytest.raises(ValueError, match="MBNET1"):
        diffnet.load_model(p)
    m = diffnet.init_model([Dense(2, 2)], (2,), 0)
    p.write_bytes(diffnet.checkpoint_bytes(m)[:-4])
    with pytest.raises(ValueError, match="parameter bytes"):
        diffnet.load_model(p)


def test_init_deterministic_and_bounded():
    a = diffnet.small_vgg((3, 32, 32), 2, seed=9)
    b = diffnet.small_vgg((3, 32, 32), 2, seed=9)
    assert a == b
    w = a.params[0][0]
    assert np.abs(w).max() <= math.sqrt(6 / (27 + 144))
    assert a.output_shape == (2,)
