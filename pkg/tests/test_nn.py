import numpy as np
import pytest

from fedstein import normalization
from fedstein.errors import ContractError, DegenerateBatchError, DimensionError
from fedstein.nn import (
    DEFAULT_GRADCHECK_SPECS,
    LayerSpec,
    ParamKind,
    apply_batch_stats,
    backward,
    build_model,
    cross_entropy,
    forward,
    grad_check,
    sgd_step,
)

from oracles import central_difference, rel_err

DENSE2 = [LayerSpec("dense", out=5), LayerSpec("relu"), LayerSpec("dense", out=3)]
DENSE_BN = [LayerSpec("dense", out=6), LayerSpec("norm", norm="batch"), LayerSpec("relu"), LayerSpec("dense", out=2)]


def test_single_dense_hand_value():
    m = build_model([LayerSpec("dense", out=1)], (1,))
    m.layers[0].params["weight"] = np.array([[2.0]])
    m.layers[0].params["bias"] = np.array([1.0])
    logits, _ = forward(m, [[3.0]])
    np.testing.assert_array_equal(logits, [[7.0]])


def test_zero_weights_give_zero_logits():
    m = build_model(DENSE2, (4,))
    for i, name, _, w in list(m.named()):
        m.layers[i].params[name] = np.zeros_like(w)
    logits, _ = forward(m, np.random.default_rng(0).standard_normal((3, 4)))
    assert not logits.any()


def test_bn_train_batch_of_one_fails():
    m = build_model(DENSE_BN, (3,))
    with pytest.raises(DegenerateBatchError):
        forward(m, np.ones((1, 3)), "train")
    forward(m, np.ones((1, 3)), "eval")


def test_build_validates_shapes():
    with pytest.raises(DimensionError):
        build_model([LayerSpec("conv2d", out=2)], (4,))
    with pytest.raises(DimensionError):
        build_model([LayerSpec("conv2d", out=4), LayerSpec("norm", norm="group", groups=3)], (1, 5, 5))
    with pytest.raises(DimensionError):
        forward(build_model(DENSE2, (4,)), np.ones((2, 5)))


def test_param_kinds_partition():
    m = build_model(DENSE_BN + [LayerSpec("norm", norm="layer")], (3,))
    kinds = {(i, n): k for i, n, k, _ in m.named()}
    assert kinds[(1, "gamma")] == ParamKind.BN_AFFINE
    assert kinds[(1, "running_var")] == ParamKind.BN_STATS
    assert kinds[(4, "gamma")] == ParamKind.GENERIC
    assert kinds[(0, "weight")] == ParamKind.GENERIC


def test_initialization_convention():
    m = build_model(DENSE_BN, (3,), seed=0)
    a = np.sqrt(6 / (3 + 6))
    w = m.layers[0].params["weight"]
    assert np.all(np.abs(w) <= a) and np.abs(w).max() > 0.5 * a
    assert not m.layers[0].params["bias"].any()
    np.testing.assert_array_equal(m.layers[1].params["gamma"], 1)
    np.testing.assert_array_equal(m.layers[1].params["running_var"], 1)
    np.testing.assert_array_equal(m.layers[1].params["running_mean"], 0)


def test_cross_entropy_examples():
    loss, d = cross_entropy([[0.0, 0.0]], [0])
    assert loss == pytest.approx(np.log(2), abs=1e-15)
    np.testing.assert_allclose(d, [[-0.5, 0.5]])
    loss, _ = cross_entropy([[1000.0, 0.0]], [0])
    assert 0 <= loss < 1e-12
    with pytest.raises(ValueError):
        cross_entropy([[0.0, 0.0]], [5])


def test_cross_entropy_gradient_finite_difference():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 3))
    y = np.array([0, 2, 1, 2])
    _, d = cross_entropy(logits, y)
    num = central_difference(lambda: cross_entropy(logits, y)[0], logits)
    np.testing.assert_allclose(d, num, atol=1e-9)


def _fd_check(specs, shape, seed):
    rng = np.random.default_rng(seed)
    m = build_model(specs, shape, rng)
    x = rng.standard_normal((5,) + shape)
    y = rng.integers(0, m.layers[-1].out_shape[0], 5)
    logits, cache = forward(m, x, "train")
    grads = backward(m, cache, cross_entropy(logits, y)[1])
    worst = 0.0
    for i, name, _, w in list(m.named((ParamKind.GENERIC, ParamKind.BN_AFFINE))):
        num = central_difference(lambda: cross_entropy(forward(m, x, "train")[0], y)[0], w)
        worst = max(worst, max(rel_err(a, n) for a, n in zip(grads[i][name].ravel(), num.ravel())))
    return worst


def test_backward_frozen_two_layer_net():
    assert _fd_check(DENSE2, (4,), 0) < 1e-4


def test_backward_zero_dlogits():
    m = build_model(DENSE_BN, (3,))
    _, cache = forward(m, np.random.default_rng(1).standard_normal((4, 3)), "train")
    grads = backward(m, cache, np.zeros((4, 2)))
    assert all(not g.any() for layer in grads for g in layer.values())


def test_backward_duplicated_rows_double_weight_grad():
    m = build_model([LayerSpec("dense", out=2)], (3,), seed=2)
    row = np.array([[0.3, -1.0, 2.0]])
    dl = np.array([[0.5, -0.25]])
    _, c1 = forward(m, row, "train")
    g1 = backward(m, c1, dl)[0]["weight"]
    _, c2 = forward(m, np.vstack([row, row]), "train")
    g2 = backward(m, c2, np.vstack([dl, dl]))[0]["weight"]
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-15)


def test_backward_rejects_eval_cache():
    m = build_model(DENSE2, (4,))
    _, cache = forward(m, np.ones((2, 4)), "eval")
    with pytest.raises(ContractError):
        backward(m, cache, np.zeros((2, 3)))


def test_sgd_step_examples():
    m = build_model([LayerSpec("dense", out=1)], (1,))
    m.layers[0].params["weight"] = np.array([[1.0]])
    g = [{"weight": np.array([[2.0]]), "bias": np.array([0.0])}]
    out = sgd_step(m, g, 0.1)
    assert out.layers[0].params["weight"][0, 0] == pytest.approx(0.8, abs=1e-15)
    zero = [{"weight": np.array([[0.0]]), "bias": np.array([0.0])}]
    np.testing.assert_array_equal(sgd_step(m, zero, 0.1).layers[0].params["weight"], [[1.0]])
    anchor = m.copy()
    np.testing.assert_array_equal(sgd_step(m, zero, 0.1, 5.0, anchor).layers[0].params["weight"], [[1.0]])
    with pytest.raises(ContractError):
        sgd_step(m, zero, 0.1, 0.5, None)


def test_sgd_proximal_pulls_to_anchor():
    m = build_model([LayerSpec("dense", out=1)], (1,))
    anchor = m.copy()
    anchor.layers[0].params["weight"] = np.array([[0.0]])
    m.layers[0].params["weight"] = np.array([[1.0]])
    zero = [{"weight": np.array([[0.0]]), "bias": np.array([0.0])}]
    out = sgd_step(m, zero, 0.1, 2.0, anchor)
    assert out.layers[0].params["weight"][0, 0] == pytest.approx(0.8)


def test_sgd_leaves_bn_stats_and_lr_zero_is_identity():
    rng = np.random.default_rng(3)
    m = build_model(DENSE_BN, (3,), seed=1)
    logits, cache = forward(m, rng.standard_normal((4, 3)), "train")
    grads = backward(m, cache, cross_entropy(logits, [0, 1, 1, 0])[1])
    out = sgd_step(m, grads, 0.0)
    for (i, name, _, w), (_, _, _, w2) in zip(m.named(), out.named()):
        assert np.array_equal(w, w2), name
    out = sgd_step(m, grads, 0.5)
    np.testing.assert_array_equal(out.layers[1].params["running_mean"], m.layers[1].params["running_mean"])


def test_apply_batch_stats_moves_running_stats():
    m = build_model(DENSE_BN, (3,), seed=0)
    x = np.random.default_rng(0).standard_normal((8, 3)) + 4
    _, cache = forward(m, x, "train")
    out = apply_batch_stats(m, cache)
    b = cache.batch_stats[1]
    np.testing.assert_allclose(out.layers[1].params["running_mean"], 0.1 * b.mean)
    np.testing.assert_allclose(out.layers[1].params["running_var"], 0.9 + 0.1 * b.var)


def test_determinism_bitwise():
    def train(seed):
        rng = np.random.default_rng(seed)
        m = build_model(DENSE_BN, (3,), seed=seed)
        x = rng.standard_normal((16, 3))
        y = rng.integers(0, 2, 16)
        for _ in range(10):
            logits, cache = forward(m, x, "train")
            m = apply_batch_stats(m, cache)
            m = sgd_step(m, backward(m, cache, cross_entropy(logits, y)[1]), 0.1)
        return m
    a, b = train(4), train(4)
    for (_, _, _, w1), (_, _, _, w2) in zip(a.named(), b.named()):
        assert np.array_equal(w1, w2)


def test_loss_decreases_on_separable_blobs():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(-2, 0.5, (40, 2)), rng.normal(2, 0.5, (40, 2))])
    y = np.repeat([0, 1], 40)
    m = build_model([LayerSpec("dense", out=8), LayerSpec("norm"), LayerSpec("relu"), LayerSpec("dense", out=2)],
                    (2,), seed=0)
    first = None
    for step in range(50):
        logits, cache = forward(m, x, "train")
        loss, d = cross_entropy(logits, y)
        first = loss if first is None else first
        m = sgd_step(apply_batch_stats(m, cache), backward(m, cache, d), 0.05)
    assert loss < first


def test_grad_check_examples():
    assert grad_check(DENSE2, (4,), seed=0, h=1e-5, tol=1e-4).passed
    conv_bn_dense = [LayerSpec("conv2d", out=2, kernel=3, pad=1), LayerSpec("norm"), LayerSpec("flatten"),
                     LayerSpec("dense", out=3)]
    assert grad_check(conv_bn_dense, (1, 4, 4), seed=1).passed


def test_grad_check_catches_sign_flipped_bn_backward(monkeypatch):
    real = normalization.bn_backward

    def flipped(cache, dy):
        dx, dg, db = real(cache, dy)
        return -dx, dg, db

    monkeypatch.setattr(normalization, "bn_backward", flipped)
    _, layers, shape = DEFAULT_GRADCHECK_SPECS[0]
    assert not grad_check(layers, shape, seed=0).passed


def test_grad_check_rejects_bad_h():
    with pytest.raises(ValueError):
        grad_check(DENSE2, (4,), h=0.1)
