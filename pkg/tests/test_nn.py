import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import adam_reference, bce_reference, conv2d_loop, layer_cases, layer_gradcheck
from texforensics import nn
from texforensics.errors import CorruptCheckpoint, ShapeMismatch, StaleCache
from texforensics.nn.gradcheck import relative_error


def run(spec, params, x, mode="eval"):
    return nn.forward(spec, params, x, mode)[0]


def apply(layer, x):
    """Parameter-free layer in the input's own precision."""
    return nn.layer_forward(layer, {}, {}, x, False)[0]


# ----------------------------------------------------------------- forward


def test_relu_example():
    y = run([nn.relu()], nn.ModelParams(), np.array([[-1.0, 2.0, 0.0]]))
    assert y.tolist() == [[0.0, 2.0, 0.0]]


def test_identity_1x1_conv():
    spec = [nn.conv("c", 5, 5, 1)]
    params = nn.init_params(spec, np.random.default_rng(0), np.float64)
    params.tensors["c.weight"] = np.eye(5).reshape(5, 5, 1, 1)
    x = np.random.default_rng(1).standard_normal((2, 5, 4, 3))
    assert np.array_equal(run(spec, params, x), x)


@pytest.mark.parametrize("k,stride,pad,bias", [(3, 1, 1, False), (3, 2, 1, False), (3, 1, 0, True), (5, 1, 2, False),
                                               (1, 1, 0, True), (2, 2, 0, False)])
def test_conv_matches_loop_oracle(k, stride, pad, bias):
    spec = [nn.conv("c", 3, 4, k, stride=stride, padding=pad, bias=bias)]
    rng = np.random.default_rng(k + stride)
    params = nn.init_params(spec, rng, np.float64)
    if bias:
        params.tensors["c.bias"] = rng.standard_normal(4)
    x = rng.standard_normal((2, 3, 9, 8))
    ref = conv2d_loop(x, params["c.weight"], stride, pad, params["c.bias"] if bias else None)
    assert np.max(np.abs(run(spec, params, x) - ref)) < 1e-12


def test_two_layer_net_matches_loop_oracle():
    spec = [nn.conv("c1", 30, 8, 3), nn.relu(), nn.conv("c2", 8, 4, 3)]
    params = nn.init_params(spec, np.random.default_rng(0), np.float32)
    x = np.random.default_rng(1).standard_normal((1, 30, 16, 16)).astype(np.float32)
    ref = conv2d_loop(np.maximum(conv2d_loop(x, params["c1.weight"]), 0), params["c2.weight"])
    assert np.max(np.abs(run(spec, params, x) - ref)) < 1e-5


def test_conv_rejects_wrong_input_channels():
    spec = [nn.conv("c", 3, 4, 3)]
    params = nn.init_params(spec, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        run(spec, params, np.zeros((1, 2, 5, 5), dtype=np.float32))


def test_eval_forward_is_idempotent_and_pure():
    spec = [nn.conv("c", 3, 4, 3), nn.batchnorm("bn", 4), nn.relu()]
    params = nn.init_params(spec, np.random.default_rng(0), np.float64)
    x = np.random.default_rng(1).standard_normal((3, 3, 6, 6))
    nn.forward(spec, params, x, "train")
    state = {k: v.copy() for k, v in params.state.items()}
    a = run(spec, params, x)
    b = run(spec, params, x)
    assert np.array_equal(a, b)
    assert all(np.array_equal(state[k], params.state[k]) for k in state)


def test_train_forward_updates_running_stats():
    spec = [nn.batchnorm("bn", 2)]
    params = nn.init_params(spec, np.random.default_rng(0), np.float64)
    x = np.random.default_rng(1).standard_normal((4, 2, 3, 3)) * 3 + 5
    nn.forward(spec, params, x, "train")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    assert np.allclose(params.state["bn.running_mean"], 0.1 * mean)
    assert np.allclose(params.state["bn.running_var"], 0.9 + 0.1 * var)


@given(arrays(np.float64, (2, 3, 6, 8), elements=st.floats(-100, 100)))
def test_avgpool_then_replicate_preserves_window_means(x):
    y = apply(nn.avgpool(2, 2), x)
    up = np.repeat(np.repeat(y, 2, axis=2), 2, axis=3)
    assert np.array_equal(apply(nn.avgpool(2, 2), up), y)
    windows = x.reshape(2, 3, 3, 2, 4, 2).mean(axis=(3, 5))
    assert np.allclose(windows, y, atol=1e-9)


@given(arrays(np.float64, (2, 4, 5, 7), elements=st.floats(-10, 10)))
def test_adaptive_pool_to_one_is_channel_mean(x):
    y = apply(nn.adaptive_avgpool((1, 1)), x)
    assert y.shape == (2, 4, 1, 1)
    assert np.max(np.abs(y[:, :, 0, 0] - x.mean(axis=(2, 3)))) < 1e-6


def test_adaptive_pool_bins():
    x = np.arange(5 * 7, dtype=np.float64).reshape(1, 1, 5, 7)
    y = apply(nn.adaptive_avgpool((2, 3)), x)[0, 0]
    # floor/ceil bin edges: rows [0,3) [2,5); cols [0,3) [2,5) [4,7)
    for i, (r0, r1) in enumerate([(0, 3), (2, 5)]):
        for j, (c0, c1) in enumerate([(0, 3), (2, 5), (4, 7)]):
            assert y[i, j] == x[0, 0, r0:r1, c0:c1].mean()


# --------------------------------------------------------------- gradients


@pytest.mark.parametrize("case", layer_cases(), ids=lambda c: c[0])
def test_layer_gradients_match_finite_differences(case):
    _, layer, x, tensors, train = case
    errors = layer_gradcheck(layer, x, tensors, eps=1e-6, train=train)
    assert max(errors.values()) < 1e-6, errors


def test_fully_connected_gradient_eps_1e3():
    layer = nn.fully_connected("fc", 5, 2)
    rng = np.random.default_rng(0)
    tensors = {"fc.weight": rng.standard_normal((2, 5)), "fc.bias": rng.standard_normal(2)}
    errors = layer_gradcheck(layer, rng.standard_normal((3, 5)), tensors, eps=1e-3)
    assert max(errors.values()) < 1e-6


def test_zero_upstream_gives_zero_gradients():
    spec = [nn.conv("c", 2, 3, 3), nn.batchnorm("bn", 3), nn.relu(), nn.flatten(), nn.fully_connected("fc", 48, 1)]
    params = nn.init_params(spec, np.random.default_rng(0), np.float64)
    _, cache = nn.forward(spec, params, np.random.default_rng(1).standard_normal((2, 2, 4, 4)), "train")
    grads, dx = nn.backward(spec, params, cache, np.zeros((2, 1)))
    assert set(grads) == set(params.tensors)
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(dx == 0)


def test_stale_cache_after_step_or_other_stack():
    spec = [nn.fully_connected("fc", 3, 1)]
    params = nn.init_params(spec, np.random.default_rng(0), np.float64)
    _, cache = nn.forward(spec, params, np.ones((2, 3)), "train")
    other = [nn.fully_connected("fc2", 3, 1)]
    with pytest.raises(StaleCache):
        nn.backward(other, params, cache, np.ones((2, 1)))
    grads, _ = nn.backward(spec, params, cache, np.ones((2, 1)))
    nn.adam_step(params, grads)
    with pytest.raises(StaleCache):
        nn.backward(spec, params, cache, np.ones((2, 1)))


# -------------------------------------------------------------------- loss


def test_bce_midpoint_is_ln2():
    for y in (0, 1):
        loss, _ = nn.bce_loss(np.array([0.5]), np.array([y]))
        assert abs(loss - math.log(2)) < 1e-9


def test_bce_batch_example():
    loss, _ = nn.bce_loss(np.array([0.9, 0.2]), np.array([1, 0]))
    assert abs(loss - 0.1643) < 1e-4
    assert abs(loss - (-math.log(0.9) - math.log(0.8)) / 2) < 1e-12


def test_bce_perfect_prediction_is_zero():
    loss, _ = nn.bce_loss(np.array([1.0, 0.0, 1.0]), np.array([1, 0, 1]))
    assert loss == 0.0


@given(arrays(np.float64, 6, elements=st.floats(1e-6, 1 - 1e-6)), arrays(np.int64, 6, elements=st.integers(0, 1)))
def test_bce_matches_reference_and_is_positive(p, y):
    loss, grad = nn.bce_loss(p, y)
    assert loss > 0
    assert abs(loss - bce_reference(p, y)) < 1e-9
    for i in range(len(p)):
        eps = 1e-4 * min(p[i], 1 - p[i])
        d = np.zeros_like(p)
        d[i] = eps
        hi = bce_reference(p + d, y)
        lo = bce_reference(p - d, y)
        assert relative_error(grad[i], (hi - lo) / (2 * eps)) < 1e-4


# Beyond |z| ~ 15 the probability form itself loses digits to 1 - p.
@given(arrays(np.float64, 5, elements=st.floats(-15, 15)), arrays(np.int64, 5, elements=st.integers(0, 1)))
def test_logit_form_agrees_with_probability_form(z, y):
    loss_z, dz = nn.bce_with_logits(z, y)
    p = nn.sigmoid(z)
    assert abs(loss_z - nn.bce_loss(p, y)[0]) < 1e-8
    assert np.allclose(dz, (p - y) / len(z))


def test_bce_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        nn.bce_loss(np.array([0.5, 0.5]), np.array([1]))


# -------------------------------------------------------------------- adam


def _single(value):
    params = nn.ModelParams({"w": np.array([value], dtype=np.float64)})
    return params


def test_adam_zero_gradient_leaves_parameters():
    params = _single(0.7)
    for _ in range(3):
        nn.adam_step(params, {"w": np.zeros(1)})
    assert params["w"][0] == 0.7
    assert params.step == 3


def test_adam_first_step_magnitude():
    params = _single(1.0)
    nn.adam_step(params, {"w": np.ones(1)}, lr=1e-3)
    assert abs((1.0 - params["w"][0]) - 1e-3 / (1 + 1e-8)) < 1e-15


def test_adam_matches_textbook_reference():
    rng = np.random.default_rng(0)
    start = rng.standard_normal(7)
    grads = [rng.standard_normal(7) for _ in range(25)]
    params = nn.ModelParams({"w": start.copy()})
    for g in grads:
        nn.adam_step(params, {"w": g}, lr=0.01)
    assert np.allclose(params["w"], adam_reference(start, grads, lr=0.01), rtol=0, atol=1e-12)


def test_adam_is_deterministic():
    def ten_steps():
        spec = [nn.fully_connected("fc", 4, 2)]
        params = nn.init_params(spec, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        for _ in range(10):
            x = rng.standard_normal((5, 4)).astype(np.float32)
            _, cache = nn.forward(spec, params, x, "train")
            grads, _ = nn.backward(spec, params, cache, np.ones((5, 2), dtype=np.float32))
            nn.adam_step(params, grads)
        return nn.checkpoint_bytes(params)

    assert ten_steps() == ten_steps()


def test_adam_shape_mismatch():
    params = _single(0.0)
    with pytest.raises(ShapeMismatch):
        nn.adam_step(params, {"w": np.zeros(2)})
    with pytest.raises(ShapeMismatch):
        nn.adam_step(params, {"nope": np.zeros(1)})


# -------------------------------------------------------------- checkpoint


def trained_params():
    spec = [nn.conv("c", 2, 3, 3), nn.batchnorm("bn", 3), nn.relu(), nn.flatten(), nn.fully_connected("fc", 27, 1)]
    params = nn.init_params(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((2, 2, 3, 3)).astype(np.float32)
    for _ in range(3):
        _, cache = nn.forward(spec, params, x, "train")
        grads, _ = nn.backward(spec, params, cache, np.ones((2, 1), dtype=np.float32))
        nn.adam_step(params, grads)
    return spec, params, x


def test_checkpoint_round_trip(tmp_path):
    spec, params, x = trained_params()
    nn.save_checkpoint(tmp_path / "m.ckpt", params)
    back = nn.load_checkpoint(tmp_path / "m.ckpt")
    assert back.step == params.step == 3
    for d1, d2 in ((params.tensors, back.tensors), (params.state, back.state), (params.adam_m, back.adam_m),
                   (params.adam_v, back.adam_v)):
        assert d1.keys() == d2.keys()
        assert all(np.array_equal(d1[k], d2[k]) for k in d1)
    assert np.array_equal(run(spec, params, x), run(spec, back, x))
    assert nn.checkpoint_bytes(back) == nn.checkpoint_bytes(params)


def test_checkpoint_large_step_count():
    params = _single(1.0)
    params.tensors["w"] = params.tensors["w"].astype(np.float32)
    params.step = (1 << 30) + 12345
    assert nn.params_from_bytes(nn.checkpoint_bytes(params)).step == params.step


@pytest.mark.parametrize("where", [10, -2, 40])
def test_checkpoint_corruption_detected(where):
    _, params, _ = trained_params()
    data = bytearray(nn.checkpoint_bytes(params))
    data[where] ^= 0x40
    with pytest.raises(CorruptCheckpoint):
        nn.params_from_bytes(bytes(data))


def test_checkpoint_rejects_foreign_and_truncated_bytes():
    _, params, _ = trained_params()
    data = nn.checkpoint_bytes(params)
    with pytest.raises(CorruptCheckpoint):
        nn.params_from_bytes(b"PK\x03\x04" + data[4:])
    with pytest.raises(CorruptCheckpoint):
        nn.params_from_bytes(data[:-20])


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 3)),
              elements=st.floats(-1e3, 1e3, width=32)))
def test_tensor_dump_round_trip(arr):
    data = nn.tensor_dump_bytes(arr)
    assert data[:4] == b"TXTD"
    assert int.from_bytes(data[4:8], "little") == 3
    assert [int.from_bytes(data[8 + 8 * i:16 + 8 * i], "little") for i in range(3)] == list(arr.shape)
    assert np.array_equal(nn.read_tensor_dump(data), arr)
