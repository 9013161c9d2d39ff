"""Reverse-mode automatic differentiation on numpy arrays.

Small tape-based engine: each op records its parents and a closure that
pushes the output gradient back to them. Everything routes through numpy,
so the heavy lifting (matmuls, convolutions as im2col GEMMs) runs in BLAS.

Training runs in float32; gradient checking builds float64 graphs.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a gradient back to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward_fn = None
        self._grad_owned = False

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _make(data, parents, backward_fn) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def _const(self, other) -> np.ndarray:
        if isinstance(other, Tensor):
            return other
        return np.asarray(other, dtype=self.data.dtype)

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = self._const(other)
        if isinstance(other, Tensor):
            out_data = self.data + other.data

            def backward(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g, b.data.shape))

            return Tensor._make(out_data, (self, other), backward)

        def backward(g, a=self):
            a._accum(_unbroadcast(g, a.data.shape))

        return Tensor._make(self.data + other, (self,), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g, a=self):
            a._accum(-g)

        return Tensor._make(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -self._const(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._const(other)
        if isinstance(other, Tensor):
            out_data = self.data * other.data

            def backward(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g * a.data, b.data.shape))

            return Tensor._make(out_data, (self, other), backward)

        def backward(g, a=self, c=other):
            a._accum(_unbroadcast(g * c, a.data.shape))

        return Tensor._make(self.data * other, (self,), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._const(other)
        if isinstance(other, Tensor):
            out_data = self.data / other.data

            def backward(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

            return Tensor._make(out_data, (self, other), backward)

        def backward(g, a=self, c=other):
            a._accum(_unbroadcast(g / c, a.data.shape))

        return Tensor._make(self.data / other, (self,), backward)

    def __pow__(self, exponent: float):
        out_data = self.data**exponent

        def backward(g, a=self, e=exponent):
            a._accum(g * e * a.data ** (e - 1))

        return Tensor._make(out_data, (self,), backward)

    # -- shape ops -------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        out_data = self.data.reshape(shape)

        def backward(g, a=self, orig=orig):
            a._accum(g.reshape(orig))

        return Tensor._make(out_data, (self,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def backward(g, a=self, inv=inv):
            a._accum(g.transpose(inv))

        return Tensor._make(out_data, (self,), backward)

    def expand(self, shape):
        """Broadcast to ``shape`` (read-only view semantics)."""
        out_data = np.broadcast_to(self.data, shape)

        def backward(g, a=self):
            a._accum(_unbroadcast(g, a.data.shape))

        return Tensor._make(np.ascontiguousarray(out_data), (self,), backward)

    def __getitem__(self, idx):
        out_data = self.data[idx]
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)

        def backward(g, a=self, idx=idx, basic=basic):
            gx = np.zeros_like(a.data)
            if basic:
                gx[idx] += g  # basic indexing never aliases
            else:
                np.add.at(gx, idx, g)
            a._accum(gx)

        return Tensor._make(out_data, (self,), backward)

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g, a=self, axis=axis, keepdims=keepdims):
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

        return Tensor._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- elementwise nonlinearities ---------------------------------------------

    def relu(self):
        out_data = np.maximum(self.data, 0.0)

        def backward(g, a=self, y=out_data):
            a._accum(g * (y > 0))

        return Tensor._make(out_data, (self,), backward)

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g, a=self, y=out_data):
            a._accum(g * y)

        return Tensor._make(out_data, (self,), backward)

    def log(self):
        out_data = np.log(self.data)

        def backward(g, a=self):
            a._accum(g / a.data)

        return Tensor._make(out_data, (self,), backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g, a=self, y=out_data):
            a._accum(g * 0.5 / y)

        return Tensor._make(out_data, (self,), backward)

    def abs(self):
        out_data = np.abs(self.data)

        def backward(g, a=self, s=np.sign(self.data)):
            a._accum(g * s)

        return Tensor._make(out_data, (self,), backward)

    # -- fused ops ----------------------------------------------------------------

    def matmul(self, other: "Tensor"):
        out_data = np.matmul(self.data, other.data)

        def backward(g, a=self, b=other):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accum(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum(_unbroadcast(gb, b.data.shape))

        return Tensor._make(out_data, (self, other), backward)

    __matmul__ = matmul

    def softmax(self, axis: int = -1):
        y = self.data - self.data.max(axis=axis, keepdims=True)
        np.exp(y, out=y)
        y /= y.sum(axis=axis, keepdims=True)

        def backward(g, a=self, y=y, axis=axis):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accum(y * (g - dot))

        return Tensor._make(y, (self,), backward)

    def log_softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        y = shifted - logsum

        def backward(g, a=self, y=y, axis=axis):
            a._accum(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

        return Tensor._make(y, (self,), backward)

    def layernorm(self, gamma: "Tensor | None" = None, beta: "Tensor | None" = None,
                  eps: float = 1e-5):
        """Normalize over the last axis, with optional fused affine."""
        mean = self.data.mean(axis=-1, keepdims=True)
        xc = self.data - mean
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if gamma is None:
            out = xhat

            def backward(g, a=self, xhat=xhat, inv=inv):
                n = a.data.shape[-1]
                gsum = g.sum(axis=-1, keepdims=True)
                xg = (g * xhat).sum(axis=-1, keepdims=True)
                a._accum((g - gsum / n - xhat * xg / n) * inv)

            return Tensor._make(out, (self,), backward)

        out = xhat * gamma.data + beta.data

        def backward_affine(g, a=self, gamma=gamma, beta=beta, xhat=xhat, inv=inv):
            if gamma.requires_grad:
                gamma._accum((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
            if beta.requires_grad:
                beta._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))
            if a.requires_grad:
                gh = g * gamma.data
                n = a.data.shape[-1]
                gsum = gh.sum(axis=-1, keepdims=True)
                xg = (gh * xhat).sum(axis=-1, keepdims=True)
                a._accum((gh - gsum / n - xhat * xg / n) * inv)

        return Tensor._make(out, (self, gamma, beta), backward_affine)

    def dropout(self, p: float, rng: np.random.Generator):
        if p <= 0.0:
            return self
        mask = (rng.random(self.data.shape) >= p).astype(self.data.dtype) / (1.0 - p)
        return self * Tensor(mask)

    def concat(self, others, axis: int = -1):
        return concat([self, *others], axis=axis)

    # -- autodiff driver -----------------------------------------------------------

    def _accum(self, g: np.ndarray):
        # copy-on-write: borrow the pushed buffer until a second consumer
        # arrives, then switch to an owned accumulator
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif not self._grad_owned:
            self.grad = self.grad + g
            self._grad_owned = True
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                node.grad = None if node is not self else node.grad
        # free the tape
        for node in topo:
            if node is not self:
                node._parents = ()
                node._backward_fn = None


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g, tensors=tuple(tensors), offsets=offsets, axis=axis):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor._make(out_data, tuple(tensors), backward)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g, tensors=tuple(tensors), axis=axis):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return Tensor._make(out_data, tuple(tensors), backward)


# -----------------------------------------------------------------------------
# Convolution (im2col / col2im via dilated transposed convolution)
# -----------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    hp = (h + 2 * pad - kh) // stride + 1
    wp = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        (b, c, kh, kw, hp, wp),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(
        b, hp * wp, c * kh * kw
    )
    return cols, hp, wp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution; weight is (C_out, C_in, kh, kw)."""
    b, c_in, h, w = x.data.shape
    c_out, c_in_w, kh, kw = weight.data.shape
    if c_in != c_in_w:
        raise ValueError(f"conv2d channel mismatch: {c_in} vs {c_in_w}")
    cols, hp, wp = _im2col(x.data, kh, kw, stride, pad)
    w_mat = weight.data.reshape(c_out, -1)
    out = np.matmul(cols.reshape(-1, cols.shape[-1]), w_mat.T).reshape(b, hp * wp, c_out)
    if bias is not None:
        out = out + bias.data
    out_data = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(b, c_out, hp, wp)

    def backward(g, x=x, weight=weight, bias=bias, cols=cols, stride=stride, pad=pad,
                 kh=kh, kw=kw, h=h, w=w):
        b_, c_out_, hp_, wp_ = g.shape
        g_flat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b_, hp_ * wp_, c_out_)
        if weight.requires_grad:
            gw = np.matmul(
                g_flat.reshape(-1, c_out_).T, cols.reshape(-1, cols.shape[-1])
            )
            weight._accum(gw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g_flat.sum(axis=(0, 1)))
        if x.requires_grad:
            # transposed convolution: dilate the output grad by the stride,
            # pad (asymmetrically, to recover stride-remainder rows/cols),
            # then correlate with the spatially flipped kernel
            if stride > 1:
                dil = np.zeros(
                    (b_, c_out_, (hp_ - 1) * stride + 1, (wp_ - 1) * stride + 1),
                    dtype=g.dtype,
                )
                dil[:, :, ::stride, ::stride] = g
            else:
                dil = g
            r_h = (h + 2 * pad - kh) % stride
            r_w = (w + 2 * pad - kw) % stride
            ph, pw = kh - 1 - pad, kw - 1 - pad
            dil = np.pad(
                dil, ((0, 0), (0, 0), (ph, ph + r_h), (pw, pw + r_w))
            )
            w_flip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            cols_g, gh, gw_ = _im2col(dil, kh, kw, 1, 0)
            w_flat = w_flip.reshape(w_flip.shape[0], -1)
            gx = np.matmul(cols_g.reshape(-1, cols_g.shape[-1]), w_flat.T).reshape(
                b_, gh * gw_, -1
            )
            gx = np.ascontiguousarray(gx.transpose(0, 2, 1)).reshape(
                b_, x.data.shape[1], gh, gw_
            )
            x._accum(gx[:, :, :h, :w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out_data, parents, backward)


# -----------------------------------------------------------------------------
# Gradient checking
# -----------------------------------------------------------------------------


def grad_check(fn, inputs: list[np.ndarray], eps: float = 1e-5) -> float:
    """Max elementwise relative error between reverse-mode gradients of the
    scalar ``fn(*tensors)`` and double-precision central finite differences.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    out.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad
        if analytic is None:
            analytic = np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.ravel()
        num_flat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = fn(*tensors).item()
            flat[i] = orig - eps
            with no_grad():
                lo = fn(*tensors).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
