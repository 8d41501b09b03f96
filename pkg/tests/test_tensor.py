import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from nsbench import tensor as T
from nsbench.nn import Adam, AdamState, Linear, Module, adam_step, load_archive, save_archive
from nsbench.tensor import ShapeError, Tensor, grad_check

TOL = 1e-4
dims = st.integers(1, 4)
seeds = st.integers(0, 2**32 - 1)


def rand(rng, *shape):
    return rng.standard_normal(shape)


def naive_conv(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


class TestGradients:
    """Analytic vs central-difference gradients on random shapes at float64."""

    @settings(max_examples=50, deadline=None)
    @given(dims, dims, dims, st.booleans(), seeds)
    def test_matmul(self, n, k, m, batched, seed):
        rng = np.random.default_rng(seed)
        if batched:
            a, b = rand(rng, 2, n, k), rand(rng, 2, k, m)
        else:
            a, b = rand(rng, 3, n, k), rand(rng, k, m)
        assert grad_check(T.matmul, [a, b]) < TOL

    @settings(max_examples=50, deadline=None)
    @given(dims, dims, st.booleans(), seeds)
    def test_add_mul_bias(self, n, m, bias, seed):
        rng = np.random.default_rng(seed)
        a = rand(rng, n, m)
        b = rand(rng, m) if bias else rand(rng, n, m)
        assert grad_check(T.add, [a, b]) < TOL
        assert grad_check(T.mul, [a, b]) < TOL

    @settings(max_examples=50, deadline=None)
    @given(dims, dims, dims, seeds)
    def test_shape_ops(self, a, b, c, seed):
        rng = np.random.default_rng(seed)
        x = rand(rng, a, b, c)
        assert grad_check(lambda t: T.scale(t, -1.7), [x]) < TOL
        assert grad_check(lambda t: T.reshape(t, (b, a * c)), [x]) < TOL
        assert grad_check(lambda t: T.transpose(t, (2, 0, 1)), [x]) < TOL
        assert grad_check(lambda t, u: T.concat([t, u], axis=1), [x, rand(rng, a, 2, c)]) < TOL
        assert grad_check(lambda t: T.slice_(t, (slice(None), slice(0, 1), slice(None, None, 2))), [x]) < TOL
        assert grad_check(lambda t: T.broadcast_to(t, (3, a, b, c)), [x]) < TOL
        assert grad_check(lambda t: T.roll(t, (1, 2), (1, 2)), [x]) < TOL
        assert grad_check(lambda t: T.pad(t, ((0, 0), (1, 2), (0, 1))), [x]) < TOL
        assert grad_check(lambda t: T.take(t, np.array([[0, a - 1], [a - 1, a - 1]])), [x]) < TOL
        assert grad_check(lambda t: T.sum_(t, axis=1), [x]) < TOL
        assert grad_check(lambda t: T.mean(t, axis=(0, 2), keepdims=True), [x]) < TOL

    @settings(max_examples=50, deadline=None)
    @given(dims, st.integers(2, 6), seeds)
    def test_activations(self, n, m, seed):
        x = rand(np.random.default_rng(seed), n, m) * 2
        assume(np.min(np.abs(x)) > 1e-3)
        assert grad_check(T.relu, [x]) < TOL
        assert grad_check(T.gelu, [x]) < TOL

    @settings(max_examples=50, deadline=None)
    @given(dims, st.integers(2, 6), st.sampled_from([0, 1, -1]), seeds)
    def test_softmax(self, n, m, axis, seed):
        x = rand(np.random.default_rng(seed), n, m, 3) * 3
        assert grad_check(lambda t: T.softmax(t, axis), [x]) < TOL

    @settings(max_examples=50, deadline=None)
    @given(dims, st.integers(2, 6), st.sampled_from([-1, 1]), seeds)
    def test_layer_norm(self, n, m, axis, seed):
        rng = np.random.default_rng(seed)
        x = rand(rng, n, m, m)
        # curvature scales with the spread of the normalized values; keep it well above the FD step
        assume(np.min(np.std(x, axis=axis)) > 1e-2)
        d = x.shape[axis]
        assert grad_check(lambda t, g, b: T.layer_norm(t, g, b, axis=axis),
                          [x, rand(rng, d), rand(rng, d)]) < TOL
        assert grad_check(lambda t: T.layer_norm(t, axis=axis), [x]) < TOL

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]),
           st.integers(1, 2), st.integers(0, 1), st.integers(3, 6), seeds)
    def test_conv2d(self, b, c, o, k, stride, pad, size, seed):
        rng = np.random.default_rng(seed)
        x, w, bias = rand(rng, b, c, size, size + 1), rand(rng, o, c, k, k), rand(rng, o)
        assert grad_check(lambda t, u, v: T.conv2d(t, u, v, stride, pad), [x, w, bias]) < TOL

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 2), st.integers(1, 3), st.integers(2, 7), st.integers(2, 3), seeds)
    def test_pooling(self, b, c, size, k, seed):
        x = rand(np.random.default_rng(seed), b, c, size, size + 1)
        assume(size >= k)
        win = np.sort(T._pool_windows(x, k), axis=-1)
        assume(np.min(win[..., -1] - win[..., -2]) > 1e-3)
        assert grad_check(lambda t: T.max_pool2d(t, k), [x]) < TOL
        assert grad_check(lambda t: T.mean_pool2d(t, k), [x]) < TOL

    @settings(max_examples=50, deadline=None)
    @given(dims, dims, dims, seeds)
    def test_linear_mse(self, n, i, o, seed):
        rng = np.random.default_rng(seed)
        x, w, b, y = rand(rng, n, i), rand(rng, i, o), rand(rng, o), rand(rng, n, o)
        assert grad_check(T.linear, [x, w, b]) < TOL
        assert grad_check(lambda t: T.mse_loss(t, y), [x @ w]) < TOL

    def test_fan_out_accumulates(self):
        x = np.array([0.3, -1.2, 2.0])

        def twice(t):
            return T.add(T.gelu(t), T.gelu(t))

        xt = Tensor(x.copy(), requires_grad=True)
        T.backward(T.sum_(twice(xt)))
        single = Tensor(x.copy(), requires_grad=True)
        T.backward(T.sum_(T.gelu(single)))
        np.testing.assert_allclose(xt.grad, 2 * single.grad, rtol=1e-12)
        assert grad_check(twice, [x]) < TOL

    def test_grad_check_detects_wrong_gradient(self):
        def broken(t):
            return T._make(t.data ** 2, (t,), lambda g: (g * t.data,), "broken")

        assert grad_check(broken, [np.array([1.0, 2.0])]) > 0.1


class TestForward:
    def test_softmax_equal_logits(self):
        out = T.softmax(Tensor(np.full((1, 3), 4.2))).data
        np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)

    def test_matmul_identity(self):
        a = np.random.default_rng(0).standard_normal((4, 5))
        assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(5))).data, a)

    def test_conv_scalar_kernel(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0))).data
        assert np.array_equal(out, np.full((1, 1, 3, 3), 2.0))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 0)])
    def test_conv_matches_loops(self, stride, pad):
        rng = np.random.default_rng(stride + 10 * pad)
        x, w, b = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        np.testing.assert_allclose(out, naive_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_conv_same_padding(self):
        x = np.random.default_rng(1).standard_normal((1, 2, 5, 5))
        w = np.random.default_rng(2).standard_normal((3, 2, 5, 5))
        assert T.conv2d(Tensor(x), Tensor(w), padding="same").shape == (1, 3, 5, 5)

    def test_pool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        assert T.max_pool2d(Tensor(x)).data[0, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]
        assert T.mean_pool2d(Tensor(x)).data[0, 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 9), st.floats(0.01, 30.0), seeds)
    def test_softmax_is_distribution(self, n, m, spread, seed):
        x = np.random.default_rng(seed).standard_normal((n, m)) * spread
        s = T.softmax(Tensor(x)).data
        assert np.all(s >= 0) and np.all(np.abs(s.sum(-1) - 1) < 1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 16), st.floats(0.1, 100.0), st.floats(-50, 50), seeds)
    def test_layer_norm_moments(self, n, m, spread, shift, seed):
        x = np.random.default_rng(seed).standard_normal((n, m)) * spread + shift
        assume(np.all(x.std(-1) > 1e-2))
        y = T.layer_norm(Tensor(x), eps=0.0).data
        assert np.all(np.abs(y.mean(-1)) < 1e-6)
        assert np.all(np.abs(y.var(-1) - 1) < 1e-5)

    def test_gelu_tanh_form(self):
        x = np.array([-2.0, 0.0, 1.0])
        ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-15)

    def test_dtype_preserved(self):
        x = Tensor(np.ones((2, 3), dtype=np.float32))
        assert T.gelu(T.linear(x, Tensor(np.ones((3, 2), dtype=np.float32)))).dtype == np.float32


class TestErrors:
    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(2,\)"):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_no_general_broadcasting(self):
        with pytest.raises(ShapeError):
            T.mul(Tensor(np.ones((3, 1))), Tensor(np.ones((1, 3))))

    def test_backward_needs_scalar(self):
        with pytest.raises(ShapeError):
            T.backward(Tensor(np.ones(3), requires_grad=True))

    def test_bad_softmax_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor(np.ones((2, 2))), axis=2)

    def test_conv_rank_and_channels(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((3, 3))), Tensor(np.ones((1, 1, 1, 1))))
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 3, 1, 1))))

    def test_mse_shape(self):
        with pytest.raises(ShapeError):
            T.mse_loss(Tensor(np.ones((2, 1))), np.ones(2))

    def test_finite_check(self, monkeypatch):
        monkeypatch.setattr(T, "CHECK_FINITE", True)
        with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
            T.scale(Tensor(np.array([1e308])), 10.0)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = T.scale(x, 2.0)
        assert not y.requires_grad and y.parents == ()


class TestAdam:
    def test_zero_gradient(self):
        p = [np.array([1.0, -2.0])]
        st1 = AdamState(3, [np.array([0.5, 0.5])], [np.array([0.1, 0.1])])
        new, st2 = adam_step(p, [np.zeros(2)], st1)
        # a non-zero first moment still moves the parameter; a fresh state does not
        fresh, st3 = adam_step(p, [np.zeros(2)], AdamState())
        assert np.array_equal(fresh[0], p[0])
        assert np.all(np.abs(st2.m[0]) < np.abs(st1.m[0])) and np.all(st2.v[0] < st1.v[0])

    def test_first_step_size(self):
        new, _ = adam_step([np.array([1.0])], [np.array([1.0])], AdamState(), lr=0.1)
        assert new[0][0] == pytest.approx(0.9, abs=1e-6)

    def test_hand_two_steps(self):
        p, s = [np.array([0.0])], AdamState()
        p, s = adam_step(p, [np.array([2.0])], s, lr=0.01)
        p, s = adam_step(p, [np.array([-1.0])], s, lr=0.01)
        m = 0.9 * 0.2 + 0.1 * -1.0
        v = 0.999 * 0.004 + 0.001 * 1.0
        step1 = 0.01 * (0.2 / 0.1) / (np.sqrt(0.004 / (1 - 0.999)) + 1e-8)
        step2 = 0.01 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        assert p[0][0] == pytest.approx(-step1 - step2, rel=1e-10)

    def test_deterministic(self):
        args = ([np.array([0.3, 0.1])], [np.array([0.2, -0.4])], AdamState(1, [np.ones(2)], [np.ones(2)]))
        a, _ = adam_step(*args)
        b, _ = adam_step(*args)
        assert np.array_equal(a[0], b[0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step([np.zeros(2)], [np.zeros(3)], AdamState())

    def test_optimizer_minimizes_quadratic(self):
        w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam([w], lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            T.backward(T.sum_(T.mul(w, w)))
            opt.step()
        assert np.all(np.abs(w.data) < 1e-2)


class TestArchive:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        named = {"b.weight": rng.standard_normal((3, 4)).astype(np.float32), "a": np.arange(5, dtype=np.float32)}
        save_archive(named, tmp_path)
        back = load_archive(tmp_path)
        assert set(back) == set(named)
        for k in named:
            assert back[k].dtype == np.float32 and np.array_equal(back[k], named[k])

    def test_little_endian_layout(self, tmp_path):
        save_archive({"x": np.array([1.0, -2.0], dtype=np.float32)}, tmp_path)
        assert (tmp_path / "weights.bin").read_bytes() == np.array([1.0, -2.0], dtype="<f4").tobytes()

    def test_truncated(self, tmp_path):
        save_archive({"x": np.ones(10, dtype=np.float32)}, tmp_path)
        raw = (tmp_path / "weights.bin").read_bytes()
        (tmp_path / "weights.bin").write_bytes(raw[:-4])
        with pytest.raises(ValueError, match="truncated"):
            load_archive(tmp_path)

    def test_module_state_strict(self):
        class Net(Module):
            def __init__(self):
                self.layers = [Linear(2, 3, np.random.default_rng(0)), Linear(3, 1, np.random.default_rng(1))]

        net = Net()
        state = net.state_dict()
        assert sorted(state) == ["layers.0.bias", "layers.0.weight", "layers.1.bias", "layers.1.weight"]
        with pytest.raises(ValueError, match="missing"):
            net.load_state_dict({k: v for k, v in state.items() if k != "layers.1.bias"})
        bad = dict(state, **{"layers.0.weight": np.zeros((3, 2))})
        with pytest.raises(ValueError, match="layers.0.weight"):
            net.load_state_dict(bad)
