import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uts.numerics import (GradTape, Tensor, activation, backward, conv2d, dense,
                          finite_diff_grad, global_pool, layer_norm, softmax,
                          spatial_pool_over_channels, sum_all)
from uts.numerics import ops


def naive_conv(x, k, b, stride, dilation, padding):
    """Nested-loop cross-correlation used as the independent conv oracle."""
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    eh, ew = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
        th = max((ho - 1) * stride + eh - h, 0)
        tw = max((wo - 1) * stride + ew - w, 0)
        top, left = th // 2, tw // 2
    else:
        ho, wo = (h - eh) // stride + 1, (w - ew) // stride + 1
        top = left = 0
    out = np.zeros((ho, wo, cout))
    for r in range(ho):
        for c in range(wo):
            for o in range(cout):
                acc = b[o]
                for i in range(kh):
                    for j in range(kw):
                        rr = r * stride + i * dilation - top
                        cc = c * stride + j * dilation - left
                        if 0 <= rr < h and 0 <= cc < w:
                            for ci in range(cin):
                                acc += x[rr, cc, ci] * k[i, j, ci, o]
                out[r, c, o] = acc
    return out


class TestConv2d:
    def test_ones_center(self):
        y = conv2d(np.ones((3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1))
        assert y.data[1, 1, 0] == 9.0

    def test_dilated_constant_field(self):
        y = conv2d(np.ones((5, 5, 1)), np.ones((3, 3, 1, 1)), np.zeros(1), dilation=2)
        assert y.data[2, 2, 0] == 9.0

    @pytest.mark.parametrize("stride,dilation,padding", [
        (1, 1, "same"), (2, 1, "same"), (1, 2, "same"), (2, 2, "same"),
        (1, 1, "valid"), (2, 1, "valid"),
    ])
    def test_matches_loop_oracle(self, stride, dilation, padding):
        rng = np.random.default_rng(stride * 10 + dilation)
        x = rng.normal(size=(4, 4, 2))
        k = rng.normal(size=(3, 3, 2, 1))
        b = rng.normal(size=1)
        if padding == "valid" and dilation > 1:
            pytest.skip("kernel larger than input")
        got = conv2d(x, k, b, stride=stride, dilation=dilation, padding=padding).data
        assert np.allclose(got, naive_conv(x, k, b, stride, dilation, padding), atol=1e-10, rtol=0)

    def test_even_size_same_padding_extra_on_high_side(self):
        # 4-wide, 2-wide kernel: total pad 1, all on the high side
        x = np.arange(4.0).reshape(1, 4, 1)
        y = conv2d(x, np.ones((1, 2, 1, 1)), np.zeros(1)).data[0, :, 0]
        assert np.allclose(y, [1, 3, 5, 3])

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_constant_interior(self, d):
        v, kk = 2.5, 3
        y = conv2d(np.full((12, 12, 1), v), np.ones((kk, kk, 1, 1)), np.zeros(1), dilation=d)
        assert y.data[6, 6, 0] == pytest.approx(kk * kk * v)

    def test_batch_equals_per_item(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 6, 6, 2))
        k = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=4)
        batched = conv2d(x, k, b, stride=2).data
        for i in range(3):
            assert np.array_equal(batched[i], conv2d(x[i], k, b, stride=2).data)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(4, 4, 3\).*\(3, 3, 2, 1\)"):
            conv2d(np.ones((4, 4, 3)), np.ones((3, 3, 2, 1)))

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            conv2d(np.ones((0, 4, 1)), np.ones((3, 3, 1, 1)))

    def test_output_extent_formula(self):
        y = conv2d(np.ones((11, 9, 1)), np.ones((3, 3, 1, 1)), dilation=2, padding="valid")
        assert y.shape == (11 - 4, 9 - 4, 1)
        y = conv2d(np.ones((11, 9, 1)), np.ones((3, 3, 1, 1)), stride=2)
        assert y.shape == (6, 5, 1)


class TestDense:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        assert np.array_equal(dense(x, np.eye(3), np.zeros(3)).data, x)

    def test_zero_weight_gives_bias(self):
        b = np.array([0.5, -1.5])
        assert np.array_equal(dense(np.ones(3), np.zeros((3, 2)), b).data, b)

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=3), rng.normal(size=(3, 2)), rng.normal(size=2)
        expect = [sum(x[i] * w[i, j] for i in range(3)) + b[j] for j in range(2)]
        assert np.allclose(dense(x, w, b).data, expect, atol=1e-12, rtol=0)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            dense(np.ones(3), np.ones((4, 2)), np.zeros(2))


class TestPooling:
    def test_global_avg_and_max(self):
        x = np.array([[1.0, 3.0], [5.0, 7.0]])[..., None]
        assert global_pool(x, "avg").data[0] == 4.0
        assert global_pool(x, "max").data[0] == 7.0

    def test_global_avg_loop_oracle(self):
        x = np.random.default_rng(1).normal(size=(5, 5, 3))
        expect = [sum(x[r, c, ch] for r in range(5) for c in range(5)) / 25 for ch in range(3)]
        assert np.allclose(global_pool(x, "avg").data, expect, atol=1e-12, rtol=0)

    def test_channel_pool(self):
        x = np.array([2.0, 4.0]).reshape(1, 1, 2)
        assert spatial_pool_over_channels(x, "avg").data[0, 0, 0] == 3.0
        assert spatial_pool_over_channels(x, "max").data[0, 0, 0] == 4.0

    def test_channel_pool_loop_oracle(self):
        x = np.random.default_rng(2).normal(size=(3, 3, 4))
        avg = spatial_pool_over_channels(x, "avg").data
        mx = spatial_pool_over_channels(x, "max").data
        assert avg.shape == (3, 3, 1)
        for r in range(3):
            for c in range(3):
                assert abs(avg[r, c, 0] - sum(x[r, c]) / 4) < 1e-12
                assert mx[r, c, 0] == max(x[r, c])


class TestActivationSoftmaxNorm:
    def test_activation_values(self):
        assert activation(np.array(0.0), "sigmoid").data == 0.5
        assert activation(np.array(-3.0), "relu").data == 0.0
        assert activation(np.array(math.log(3)), "sigmoid").data == pytest.approx(0.75, abs=1e-15)

    def test_sigmoid_extremes_finite(self):
        s = activation(np.array([-1000.0, 1000.0]), "sigmoid").data
        assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0

    def test_softmax_examples(self):
        assert np.allclose(softmax(np.zeros(3)).data, 1 / 3)
        assert np.allclose(softmax(np.array([math.log(2), 0.0])).data, [2 / 3, 1 / 3])
        assert np.array_equal(softmax(np.array([1000.0, 1000.0])).data, [0.5, 0.5])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
    def test_softmax_sum_and_shift(self, xs, c):
        x = np.array(xs)
        p = softmax(x).data
        assert abs(p.sum() - 1) < 1e-6 and np.all(p >= 0)
        assert np.allclose(softmax(x + c).data, p, atol=1e-9, rtol=0)

    def test_layer_norm_examples(self):
        assert np.array_equal(layer_norm(np.full(4, 3.0), np.ones(4), np.zeros(4)).data, np.zeros(4))
        y = layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2), epsilon=1e-15).data
        assert np.allclose(y, [-1, 1], atol=1e-12)

    def test_layer_norm_moments(self):
        x = np.random.default_rng(5).normal(size=8) * 3 + 1
        y = layer_norm(x, np.ones(8), np.zeros(8)).data
        assert abs(y.mean()) < 1e-6 and abs(y.var() - 1) < 1e-4


class TestBackward:
    def test_linear_map_gradient(self):
        x = np.array([1.0, 2.0, 3.0])
        w = Tensor(np.random.default_rng(0).normal(size=(3, 2)))
        with GradTape([w]) as tape:
            loss = sum_all(dense(x, w))
        (gw,) = backward(tape, loss)
        assert np.array_equal(gw, np.repeat(x[:, None], 2, axis=1))

    def test_unused_parameter_zero(self):
        w = Tensor(np.ones((3, 2)))
        p = Tensor(np.ones(5))
        with GradTape([w, p]) as tape:
            loss = sum_all(dense(np.ones(3), w))
        gw, gp = backward(tape, loss)
        assert np.array_equal(gp, np.zeros(5))

    def test_loss_not_scalar(self):
        w = Tensor(np.ones((3, 2)))
        with GradTape([w]) as tape:
            out = dense(np.ones(3), w)
        with pytest.raises(ValueError):
            backward(tape, out)

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        k = Tensor(rng.normal(size=(3, 3, 2, 3)))
        x = rng.normal(size=(2, 6, 6, 2))

        def run():
            with GradTape([k]) as tape:
                loss = sum_all(ops.relu(conv2d(x, k, stride=2)))
            return backward(tape, loss)[0]

        assert np.array_equal(run(), run())

    def test_no_tape_no_record(self):
        w = Tensor(np.ones((2, 2)))
        out = dense(np.ones(2), w)
        assert isinstance(out, Tensor)


class TestFiniteDiff:
    def test_quadratic(self):
        assert finite_diff_grad(lambda p: float(p[0] ** 2), np.array([3.0]))[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        assert np.array_equal(finite_diff_grad(lambda p: 4.0, np.ones(3)), np.zeros(3))

    def test_sigmoid_slope(self):
        f = lambda p: float(activation(p, "sigmoid").data[0])
        assert finite_diff_grad(f, np.array([0.0]))[0] == pytest.approx(0.25, abs=1e-6)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda p: 0.0, np.ones(1), h=0)


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def check_op_grad(build, shapes, seed):
    """Compare tape gradients of ``sum(build(*params) * probe)`` with central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    params = [Tensor(a.copy()) for a in arrays]
    out_shape = build(*params).shape
    probe = rng.normal(size=out_shape)
    with GradTape(params) as tape:
        loss = sum_all(ops.mul(build(*params), probe))
    grads = backward(tape, loss)
    for i, g in enumerate(grads):
        def f(v, i=i):
            args = [Tensor(v) if j == i else Tensor(arrays[j]) for j in range(len(arrays))]
            return float((build(*args).data * probe).sum())
        fd = finite_diff_grad(f, arrays[i], h=1e-4)
        assert rel_err(g, fd) <= 1e-3, (i, rel_err(g, fd))


GRAD_CASES = {
    "conv2d": (lambda x, k, b: conv2d(x, k, b, stride=2, dilation=1), [(2, 5, 5, 2), (3, 3, 2, 2), (2,)]),
    "conv2d_dilated": (lambda x, k: conv2d(x, k, dilation=2), [(4, 4, 2), (3, 3, 2, 1)]),
    "dense": (lambda x, w, b: dense(x, w, b), [(3, 4), (4, 2), (2,)]),
    "global_avg": (lambda x: global_pool(x, "avg"), [(2, 3, 3, 2)]),
    "global_max": (lambda x: global_pool(x, "max"), [(2, 3, 3, 2)]),
    "channel_avg": (lambda x: spatial_pool_over_channels(x, "avg"), [(3, 3, 4)]),
    "channel_max": (lambda x: spatial_pool_over_channels(x, "max"), [(3, 3, 4)]),
    "sigmoid": (lambda x: activation(x, "sigmoid"), [(6,)]),
    "relu": (lambda x: activation(x, "relu"), [(6,)]),
    "softmax": (lambda x: softmax(x), [(2, 5)]),
    "layer_norm": (lambda x, g, b: layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    "avg_pool2d": (lambda x: ops.avg_pool2d(x, 2), [(2, 4, 4, 3)]),
    "matmul": (lambda a, b: ops.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_operator_gradients(name, seed):
    build, shapes = GRAD_CASES[name]
    check_op_grad(build, shapes, seed)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 1])
    t = Tensor(logits.copy())
    with GradTape([t]) as tape:
        loss = ops.cross_entropy(softmax(t), labels)
    (g,) = backward(tape, loss)
    fd = finite_diff_grad(lambda v: ops.cross_entropy(softmax(v), labels).item(), logits)
    assert rel_err(g, fd) <= 1e-3


@pytest.mark.parametrize("name", ["conv2d", "conv2d_dilated", "dense", "layer_norm"])
def test_parameterized_gradients_over_100_seeds(name):
    build, shapes = GRAD_CASES[name]
    for seed in range(100, 200):
        check_op_grad(build, shapes, seed)
