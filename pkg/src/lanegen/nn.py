"""Neural network layers on top of the autodiff tensor core."""

from __future__ import annotations

import numpy as np

from .errors import BadHeadDim
from .tensor import Tensor, conv2d


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2 * std, 2 * std).astype(np.float32)


def xavier_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    return trunc_normal(rng, shape, std=float(np.sqrt(2.0 / (fan_in + fan_out))))


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class Module:
    """Base with recursive parameter discovery and train/eval mode."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        self.training = mode
        for _, value in vars(self).items():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Cast all parameters in place (float64 for gradient checking)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Tensor(xavier_normal(rng, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        # flatten leading dims so BLAS sees one large GEMM
        shape = x.shape
        flat = x.reshape(-1, shape[-1]) if x.ndim > 2 else x
        y = flat @ self.weight
        if self.bias is not None:
            y = y + self.bias
        if x.ndim > 2:
            y = y.reshape(*shape[:-1], self.weight.shape[-1])
        return y


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        pad: int = 0,
    ):
        super().__init__()
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(
            he_normal(rng, (c_out, c_in, kernel, kernel), fan_in), requires_grad=True
        )
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gamma = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x.layernorm(self.gamma, self.beta)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.p <= 0.0:
            return x
        return x.dropout(self.p, self.rng)


class MultiHeadAttention(Module):
    """Dense scaled dot-product attention over (B, L, d) sequences."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, dropout: float = 0.0):
        super().__init__()
        if d % n_heads != 0:
            raise BadHeadDim(f"embed dim {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)
        self.attn_drop = Dropout(dropout, rng)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        b, lq, _ = query.shape
        lk = key.shape[1]
        h, hd = self.n_heads, self.head_dim
        q = self.q_proj(query).reshape(b, lq, h, hd).transpose(0, 2, 1, 3)
        k = self.k_proj(key).reshape(b, lk, h, hd).transpose(0, 2, 1, 3)
        v = self.v_proj(value).reshape(b, lk, h, hd).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        attn = self.attn_drop(scores.softmax(axis=-1))
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, lq, self.d)
        return self.out_proj(ctx)


class FeedForward(Module):
    def __init__(self, d: int, d_hidden: int, rng: np.random.Generator, dropout: float = 0.0):
        super().__init__()
        self.fc1 = Linear(d, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d, rng)
        self.drop = Dropout(dropout, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.drop(self.fc1(x).relu()))


class MLP(Module):
    """Two-layer ReLU MLP used by the prediction heads."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


def sinusoidal_positions_2d(h: int, w: int, d: int) -> np.ndarray:
    """(h*w, d) sinusoidal embedding: first half encodes y, second half x."""
    if d % 4 != 0:
        raise ValueError("positional encoding needs d divisible by 4")
    d_half = d // 2
    freqs = 1.0 / (10000.0 ** (np.arange(0, d_half, 2) / d_half))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")

    def encode(coord):
        ang = coord.reshape(-1)[:, None] * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    pos = np.concatenate([encode(ys), encode(xs)], axis=1)
    return pos.astype(np.float32)
