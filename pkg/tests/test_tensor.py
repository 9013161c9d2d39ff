import numpy as np
import pytest

from lanegen.errors import BadHeadDim
from lanegen.nn import (
    Conv2d,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    sinusoidal_positions_2d,
)
from lanegen.tensor import Tensor, concat, conv2d, grad_check, no_grad, stack


def naive_conv2d(x, w, b, stride, pad):
    """Direct-loop convolution oracle."""
    bs, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp = (h + 2 * pad - kh) // stride + 1
    wp = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((bs, cout, hp, wp))
    for n in range(bs):
        for co in range(cout):
            for i in range(hp):
                for j in range(wp):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, co, i, j] = np.sum(patch * w[co]) + b[co]
    return out


class TestForward:
    def test_conv_matches_naive(self):
        rng = np.random.default_rng(0)
        for stride, pad, k in [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 2)]:
            x = rng.normal(size=(2, 3, 9, 8))
            w = rng.normal(size=(4, 3, k, k))
            b = rng.normal(size=4)
            got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
            ref = naive_conv2d(x, w, b, stride, pad)
            assert got.shape == ref.shape
            assert np.allclose(got.data, ref, atol=1e-5)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(4, 7)))
        y = x.softmax(axis=-1)
        assert np.allclose(y.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_layernorm_zero_mean_unit_var(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(2.0, 3.0, size=(5, 16)))
        y = x.layernorm()
        assert np.allclose(y.data.mean(axis=-1), 0.0, atol=1e-6)
        assert np.allclose(y.data.var(axis=-1), 1.0, atol=1e-3)

    def test_matmul_broadcasts_batch(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(5, 4, 3)))
        b = Tensor(rng.normal(size=(3, 2)))
        assert (a @ b).shape == (5, 4, 2)

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert y._backward_fn is None
        assert not y.requires_grad


class TestGradients:
    """Central finite differences in double precision as the oracle."""

    def test_elementwise_ops(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 4)) + 3.0  # keep log/sqrt well-defined

        cases = {
            "add": lambda t: (t + 2.5).sum(),
            "mul": lambda t: (t * t).sum(),
            "div": lambda t: (t / 2.0).sum(),
            "rsub": lambda t: (1.0 - t).sum(),
            "pow": lambda t: (t**3).sum(),
            "exp": lambda t: (t * 0.1).exp().sum(),
            "log": lambda t: t.log().sum(),
            "sqrt": lambda t: t.sqrt().sum(),
            "relu": lambda t: t.relu().sum(),
            "abs": lambda t: t.abs().sum(),
            "mean": lambda t: t.mean(),
            "mean_axis": lambda t: (t.mean(axis=0) * np.arange(4.0)).sum(),
        }
        for name, fn in cases.items():
            err = grad_check(fn, [x])
            assert err < 1e-6, f"{name}: {err}"

    def test_broadcast_add_mul(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4,))
        err = grad_check(lambda x, y: ((x + y) * y).sum(), [a, b])
        assert err < 1e-6

    def test_matmul(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        err = grad_check(lambda x, y: (x @ y).sum(), [a, b])
        assert err < 1e-6

    def test_batched_matmul(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(4, 5))
        err = grad_check(lambda x, y: ((x @ y) ** 2).sum(), [a, b])
        assert err < 1e-6

    def test_reshape_transpose_slice(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(4, 6))

        def fn(t):
            y = t.reshape(2, 2, 6).transpose(1, 0, 2)
            return (y[:, 1, 2:5] * 3.0).sum()

        assert grad_check(fn, [x]) < 1e-6

    def test_fancy_index(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(5, 3))
        idx = np.array([0, 2, 2, 4])

        def fn(t):
            return (t[idx] * np.arange(12.0).reshape(4, 3)).sum()

        assert grad_check(fn, [x]) < 1e-6

    def test_concat_stack(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 2))

        def fn(x, y):
            c = concat([x, y], axis=1)
            s = stack([c.sum(axis=0), c.sum(axis=0) * 2.0], axis=0)
            return (s * s).sum()

        assert grad_check(fn, [a, b]) < 1e-6

    def test_expand(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 4))
        err = grad_check(lambda t: (t.expand((3, 4)) * np.arange(12.0).reshape(3, 4)).sum(), [x])
        assert err < 1e-6

    def test_softmax(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        err = grad_check(lambda t: (t.softmax(axis=-1) * w).sum(), [x])
        assert err < 1e-5

    def test_log_softmax(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        err = grad_check(lambda t: (t.log_softmax(axis=-1) * w).sum(), [x])
        assert err < 1e-5

    def test_layernorm(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(4, 8))
        w = rng.normal(size=(4, 8))
        err = grad_check(lambda t: (t.layernorm() * w).sum(), [x])
        assert err < 1e-5

    def test_conv2d_grad(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=(4,))
        for stride in (1, 2):
            err = grad_check(
                lambda t, u, v: (conv2d(t, u, v, stride=stride, pad=1) ** 2).sum(),
                [x, w, b],
            )
            assert err < 1e-6, f"stride {stride}: {err}"

    def test_conv2d_grad_odd_size(self):
        # stride-2 with odd input exercises the cropped transposed conv
        rng = np.random.default_rng(16)
        x = rng.normal(size=(1, 2, 7, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=(3,))
        err = grad_check(
            lambda t, u, v: (conv2d(t, u, v, stride=2, pad=1) ** 2).sum(), [x, w, b]
        )
        assert err < 1e-6


class TestModules:
    def test_linear_grad(self):
        rng = np.random.default_rng(17)
        lin = Linear(4, 3, rng).astype(np.float64)
        x = rng.normal(size=(5, 4))
        err = grad_check(lambda t: (lin(t) ** 2).sum(), [x])
        assert err < 1e-6

    def test_attention_block_grad(self):
        rng = np.random.default_rng(18)
        mha = MultiHeadAttention(8, 2, rng).astype(np.float64)
        x = rng.normal(size=(1, 3, 8))

        def fn(t):
            return (mha(t, t, t) ** 2).sum()

        assert grad_check(fn, [x]) < 1e-4

    def test_ffn_and_layernorm_grad(self):
        rng = np.random.default_rng(19)
        ffn = FeedForward(6, 12, rng).astype(np.float64)
        ln = LayerNorm(6).astype(np.float64)

        def fn(t):
            return (ffn(ln(t)) ** 2).sum()

        x = rng.normal(size=(2, 4, 6))
        assert grad_check(fn, [x]) < 1e-4

    def test_bad_head_dim(self):
        rng = np.random.default_rng(20)
        with pytest.raises(BadHeadDim):
            MultiHeadAttention(10, 3, rng)

    def test_parameter_accumulation_across_steps(self):
        rng = np.random.default_rng(21)
        lin = Linear(3, 2, rng)
        x = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
        loss1 = (lin(x) ** 2).sum()
        loss1.backward()
        g1 = lin.weight.grad.copy()
        lin.zero_grad()
        loss2 = (lin(x) ** 2).sum()
        loss2.backward()
        assert np.allclose(g1, lin.weight.grad)

    def test_named_parameters(self):
        rng = np.random.default_rng(22)
        mha = MultiHeadAttention(8, 2, rng)
        names = [n for n, _ in mha.named_parameters()]
        assert "q_proj.weight" in names and "out_proj.bias" in names

    def test_positional_encoding_distinct(self):
        pos = sinusoidal_positions_2d(4, 4, 32)
        assert pos.shape == (16, 32)
        d = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() > 1e-3

    def test_dropout_scales_expectation(self):
        rng = np.random.default_rng(23)
        x = Tensor(np.ones((200, 200), dtype=np.float32))
        y = x.dropout(0.3, rng)
        assert abs(y.data.mean() - 1.0) < 0.02
        kept = y.data != 0
        assert np.allclose(y.data[kept], 1.0 / 0.7)
