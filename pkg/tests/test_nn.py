import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import layer_cases, layer_fd_error, single
from splitvfl.errors import CacheError, ConfigError, DataError, NonFiniteError, ShapeError
from splitvfl.nn import (
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2d,
    OptimizerConfig,
    ParameterStore,
    ReLU,
    ResidualBlock,
    Stack,
    backward,
    forward,
    grad_check,
    init_params,
    sgd_step,
    softmax_cross_entropy,
)
from splitvfl.nn import kernels
from splitvfl.nn.layers import LAYER_KINDS


def direct_conv(x, w, b, stride, padding):
    """Nested-loop reference convolution (cross-correlation), float64."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for s in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = float(b[f])
                    for ch in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[s, ch, i * stride + di, j * stride + dj] * w[f, ch, di, dj]
                    out[s, f, i, j] = acc
    return out


# ------------------------------------------------------------------ init ---

def test_init_is_deterministic():
    layers = [Dense(4, 5), ReLU(), Dense(5, 3)]
    a = init_params(layers, 9)
    b = init_params(layers, 9)
    assert a.bit_equal(b)
    assert a.digest() == b.digest()
    assert not a.bit_equal(init_params(layers, 10))


def test_dense_bias_is_zero():
    store = init_params([Dense(2, 3)], 0)
    np.testing.assert_array_equal(store["0.bias"].value, np.zeros(3))


def test_glorot_bound_dense_10x10():
    w = init_params([Dense(10, 10)], 42)["0.weight"].value
    bound = math.sqrt(6 / 20)
    assert bound == pytest.approx(0.5477, abs=1e-4)
    assert np.all(np.abs(w) < bound)
    # the draw should actually use the range, not a narrower one
    assert np.abs(w).max() > 0.8 * bound


def test_conv_glorot_fans():
    store = init_params([Conv2d(2, 4)], 3, input_shape=(2, 6, 6))
    w = store["0.weight"].value
    assert w.shape == (4, 2, 3, 3)
    assert np.all(np.abs(w) < math.sqrt(6 / (2 * 9 + 4 * 9)))


def test_chain_mismatch_names_layer_index():
    with pytest.raises(ShapeError, match="layer 2"):
        Stack([Dense(4, 5), ReLU(), Dense(6, 3)], (4,))
    with pytest.raises(ShapeError, match="layer 0"):
        Stack([Conv2d(3, 4)], (1, 8, 8))


def test_duplicate_parameter_names_rejected():
    store = ParameterStore()
    store.add("w", np.zeros(2, dtype=np.float32))
    with pytest.raises(KeyError, match="duplicate"):
        store.add("w", np.zeros(2, dtype=np.float32))


def test_store_iteration_order_is_insertion_order():
    store = init_params([Dense(3, 4), ReLU(), Dense(4, 2)], 0)
    assert store.names() == ["0.weight", "0.bias", "2.weight", "2.bias"]


# --------------------------------------------------------------- forward ---

def test_dense_identity():
    stack, store = single(Dense(4, 4), (4,))
    store["0.weight"].value[...] = np.eye(4)
    v = np.array([[1.0, -2.0, 3.5, 0.25]], dtype=np.float32)
    y, _ = stack.forward(store, v)
    np.testing.assert_array_equal(y, v)


def test_relu_forward():
    y, _ = forward(ReLU(), {}, np.array([[-1.0, 0.0, 2.0]], dtype=np.float32))
    np.testing.assert_array_equal(y, [[0, 0, 2]])


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("shape", [(1, 1, 8, 8), (2, 3, 7, 9), (1, 2, 16, 16)])
def test_conv_matches_direct_oracle(backend, rng, shape, stride):
    n, c, h, w = shape
    layer = Conv2d(c, 4, stride=stride)
    stack, store = single(layer, (c, h, w), seed=5)
    store["0.bias"].value[...] = rng.standard_normal(4).astype(np.float32)
    x = rng.standard_normal(shape).astype(np.float32)
    y, _ = stack.forward(store, x)
    ref = direct_conv(x.astype(np.float64), store["0.weight"].value.astype(np.float64),
                      store["0.bias"].value, stride, 1)
    assert y.shape == ref.shape
    assert np.abs(y - ref).max() < 1e-6 * max(1.0, np.abs(ref).max())


def test_conv_1x1_matches_direct_oracle(rng):
    stack, store = single(Conv2d(3, 2, stride=2, kernel=1), (3, 6, 6))
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    y, _ = stack.forward(store, x)
    ref = direct_conv(x, store["0.weight"].value, store["0.bias"].value, 2, 0)
    assert np.abs(y - ref).max() < 1e-6


def test_forward_shape_mismatch_reports_shapes():
    stack, store = single(Dense(4, 2), (4,))
    with pytest.raises(ShapeError, match=r"\(2, 5\)"):
        stack.forward(store, np.zeros((2, 5), dtype=np.float32))


def test_forward_is_bit_reproducible(rng):
    layers = [Conv2d(1, 4), ReLU(), MaxPool2d(), ResidualBlock(4, downsample=True), GlobalAvgPool(), Dense(8, 3)]
    stack = Stack(layers, (1, 12, 12))
    store = stack.init(np.random.default_rng(0))
    x = rng.random((3, 1, 12, 12), dtype=np.float32)
    a, _ = stack.forward(store, x)
    b, _ = stack.forward(store, x)
    assert a.tobytes() == b.tobytes()


# -------------------------------------------------------------- backward ---

def test_dense_zero_grad_output():
    stack, store = single(Dense(3, 2), (3,))
    x = np.ones((4, 3), dtype=np.float32)
    y, caches = stack.forward(store, x)
    gx = stack.backward(store, caches, np.zeros_like(y))
    np.testing.assert_array_equal(gx, 0)
    for p in store:
        np.testing.assert_array_equal(p.grad, 0)


def test_relu_backward_gate():
    x = np.array([[-1.0, 2.0]], dtype=np.float32)
    relu = ReLU()
    _, cache = forward(relu, {}, x)
    gx = backward(relu, {}, cache, np.array([[5.0, 5.0]], dtype=np.float32))
    np.testing.assert_array_equal(gx, [[0, 5]])


def test_stale_cache_rejected():
    layer = ReLU()
    x = np.ones((1, 3), dtype=np.float32)
    _, cache = forward(layer, {}, x)
    backward(layer, {}, cache, x)
    with pytest.raises(CacheError, match="stale"):
        backward(layer, {}, cache, x)


def test_mismatched_cache_rejected():
    _, cache = forward(ReLU(), {}, np.ones((1, 3), dtype=np.float32))
    with pytest.raises(CacheError):
        backward(ReLU(), {}, cache, np.ones((1, 3), dtype=np.float32))


def test_grad_output_shape_checked():
    layer = ReLU()
    _, cache = forward(layer, {}, np.ones((1, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        backward(layer, {}, cache, np.ones((1, 4), dtype=np.float32))


def test_parameter_gradients_accumulate():
    stack, store = single(Dense(2, 2), (2,))
    x = np.ones((1, 2), dtype=np.float32)
    for _ in range(2):
        y, caches = stack.forward(store, x)
        stack.backward(store, caches, np.ones_like(y))
    np.testing.assert_allclose(store["0.bias"].grad, [2, 2])


def test_maxpool_tie_goes_to_first_index(backend):
    x = np.ones((1, 1, 2, 2), dtype=np.float32)
    pool = MaxPool2d()
    _, cache = forward(pool, {}, x)
    gx = backward(pool, {}, cache, np.full((1, 1, 1, 1), 3.0, dtype=np.float32))
    np.testing.assert_array_equal(gx[0, 0], [[3, 0], [0, 0]])


LAYER_CASES = layer_cases()


@pytest.mark.parametrize("name,layer,in_shape", LAYER_CASES, ids=[c[0] for c in LAYER_CASES])
def test_layer_gradients_match_finite_differences(name, layer, in_shape):
    assert int(np.prod(in_shape)) * 2 <= 64
    assert layer_fd_error(layer, in_shape, seed=3) < 1e-2


def test_every_layer_kind_is_gradient_checked():
    assert {c[1].kind for c in LAYER_CASES} == set(LAYER_KINDS)


# ------------------------------------------------------------------ loss ---

@pytest.mark.parametrize("classes", [2, 3, 10])
def test_uniform_logits_give_log_c(classes):
    loss, _ = softmax_cross_entropy(np.zeros((4, classes), dtype=np.float32), np.arange(4) % classes)
    assert abs(loss - math.log(classes)) < 1e-6


def test_saturated_logits():
    logits = np.array([[25.0, 0.0, 0.0], [0.0, 0.0, 30.0]], dtype=np.float32)
    loss, _ = softmax_cross_entropy(logits, [0, 2])
    assert loss < 1e-6


def test_loss_gradient_formula_and_fd(rng):
    logits = rng.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    loss, g = softmax_cross_entropy(logits, labels)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    onehot = np.eye(3)[labels]
    np.testing.assert_allclose(g, (p - onehot) / 5, rtol=1e-12)
    from splitvfl.nn.gradcheck import numeric_gradient, relative_error
    num = numeric_gradient(lambda: softmax_cross_entropy(logits, labels)[0], logits, 1e-3)
    assert relative_error(g, num).max() < 1e-2


def test_loss_label_out_of_range_names_row():
    with pytest.raises(DataError, match="row 1"):
        softmax_cross_entropy(np.zeros((2, 3), dtype=np.float32), [0, 3])


# ------------------------------------------------------------- optimizer ---

def _scalar_store(w, g):
    store = ParameterStore()
    p = store.add("w", np.array([w], dtype=np.float32))
    p.grad[...] = g
    return store


def test_sgd_zero_gradient_is_fixed_point():
    store = init_params([Dense(3, 2)], 0)
    before = store.copy()
    sgd_step(store, OptimizerConfig(0.1, 0.9))
    assert store.bit_equal(before)


def test_sgd_single_step():
    store = _scalar_store(1.0, 2.0)
    sgd_step(store, OptimizerConfig(0.1, 0.0))
    assert store["w"].value[0] == pytest.approx(0.8)
    assert store["w"].grad[0] == 0


def test_sgd_momentum_two_steps_hand_unrolled():
    lr, m, w, g1, g2 = 0.1, 0.9, 1.0, 2.0, -0.5
    store = _scalar_store(w, g1)
    sgd_step(store, OptimizerConfig(lr, m))
    store["w"].grad[...] = g2
    sgd_step(store, OptimizerConfig(lr, m))
    v1 = g1
    w1 = w - lr * v1
    v2 = m * v1 + g2
    w2 = w1 - lr * v2
    assert store["w"].value[0] == pytest.approx(w2, rel=1e-6)


def test_optimizer_config_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(-0.1)
    with pytest.raises(ConfigError):
        OptimizerConfig(0.1, 1.0)
    with pytest.raises(ConfigError):
        OptimizerConfig(0.1, 0.5, kind="adam")


# ------------------------------------------------------------ grad_check ---

def test_grad_check_tabular_bottom(rng):
    layers = [Dense(12, 20), ReLU(), Dense(20, 10)]
    store = init_params(layers, 1)
    x = rng.random((6, 12), dtype=np.float32)
    assert grad_check(layers, store, x, rng.integers(0, 10, 6)) < 1e-2


def test_grad_check_single_dense(rng):
    layers = [Dense(4, 3)]
    store = init_params(layers, 2)
    x = rng.standard_normal((5, 4)).astype(np.float32)
    assert grad_check(layers, store, x, rng.integers(0, 3, 5), include_input=True) < 1e-3


def test_grad_check_parameter_free_chain_returns_zero(rng):
    x = rng.standard_normal((3, 4)).astype(np.float32)
    assert grad_check([ReLU()], ParameterStore(), x, [0, 1, 2]) == 0.0


def test_grad_check_cost_guard(rng):
    layers = [Dense(200, 60)]
    with pytest.raises(ConfigError):
        grad_check(layers, init_params(layers, 0), np.zeros((1, 200), dtype=np.float32), [0])


def test_grad_check_non_finite(rng):
    layers = [Dense(2, 2)]
    x = np.array([[np.nan, 1.0]], dtype=np.float32)
    with pytest.raises(NonFiniteError):
        grad_check(layers, init_params(layers, 0), x, [0])


# ------------------------------------------------------- kernel backends ---

def test_numba_and_numpy_kernels_agree(rng):
    from splitvfl import _backend
    if not _backend.HAVE_NUMBA:
        pytest.skip("numba not installed")
    x = rng.standard_normal((3, 4, 10, 10)).astype(np.float32)
    w = rng.standard_normal((5, 4, 3, 3)).astype(np.float32)
    g = rng.standard_normal((3, 5, 5, 5)).astype(np.float32)
    out = {}
    for name in ("numba", "numpy"):
        before = _backend.backend_name()
        _backend.set_backend(name)
        try:
            y = kernels.conv2d_forward(x, w, 2, 1)
            gx, gw = kernels.conv2d_backward(x, w, g, 2, 1)
            p, arg = kernels.maxpool_forward(x)
            gp = kernels.maxpool_backward(p, arg, x.shape)
        finally:
            _backend.set_backend(before)
        out[name] = (y, gx, gw, p, gp)
    for a, b in zip(out["numba"], out["numpy"]):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)


# ----------------------------------------------------- shape properties ---

@st.composite
def layer_and_shape(draw):
    kind = draw(st.sampled_from(sorted(LAYER_KINDS)))
    c = draw(st.integers(1, 3))
    h = draw(st.integers(2, 6))
    w = draw(st.integers(2, 6))
    if kind == "dense":
        return Dense(c * h, draw(st.integers(1, 5))), (c * h,)
    if kind == "conv2d":
        return Conv2d(c, draw(st.integers(1, 3)), stride=draw(st.sampled_from([1, 2]))), (c, h, w)
    if kind == "relu":
        return ReLU(), (c, h)
    if kind == "maxpool2d":
        return MaxPool2d(), (c, h, w)
    if kind == "global_avg_pool":
        return GlobalAvgPool(), (c, h, w)
    if kind == "flatten":
        return Flatten(), (c, h, w)
    return ResidualBlock(c, downsample=draw(st.booleans())), (c, h, w)


@settings(max_examples=60, deadline=None)
@given(layer_and_shape(), st.integers(1, 3))
def test_backward_round_trips_shapes(case, batch):
    layer, in_shape = case
    stack, store = single(layer, in_shape)
    x = np.random.default_rng(batch).standard_normal((batch, *in_shape)).astype(np.float32)
    y, caches = stack.forward(store, x)
    assert y.shape == (batch, *layer.output_shape(in_shape))
    gx = stack.backward(store, caches, np.ones_like(y))
    assert gx.shape == x.shape
