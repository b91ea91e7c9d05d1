"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Tensor` wraps an ndarray together with a gradient buffer and a
reference to the operation that produced it.  Calling :meth:`Tensor.backward`
on a scalar walks the graph once in reverse topological order and accumulates
gradients into every tensor created with ``requires_grad=True``.

Only the operations needed by the convolutional branches are provided:
elementwise arithmetic, matmul, reshape/transpose, reductions, relu, exp,
log, strided convolution (stride 1), 2-window max pooling and L2
normalization.  All ops preserve the dtype of their inputs; mixing float32
and float64 operands raises instead of upcasting silently.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "conv2d",
    "conv1d",
    "maxpool2d",
    "maxpool1d",
    "l2_normalize",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional real array with gradient accumulation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same values that stops gradient flow."""
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.grad is not None})"

    # -- graph construction -----------------------------------------------

    @staticmethod
    def _lift(other, like: "Tensor") -> "Tensor":
        if isinstance(other, Tensor):
            if other.data.dtype != like.data.dtype:
                raise TypeError(
                    f"mixed dtypes in op: {other.data.dtype} vs {like.data.dtype}"
                )
            return other
        return Tensor(np.asarray(other, dtype=like.data.dtype))

    def _make(self, data: np.ndarray, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other, self)
        out_data = self.data + other.data

        def backward(grad):
            if self.requires_grad:
                self._accumulate(_unbroadcast(grad, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(grad, other.shape))

        return self._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        other = self._lift(other, self)
        return self + (-other)

    def __rsub__(self, other):
        return self._lift(other, self) + (-self)

    def __mul__(self, other):
        other = self._lift(other, self)
        out_data = self.data * other.data

        def backward(grad):
            if self.requires_grad:
                self._accumulate(_unbroadcast(grad * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(grad * self.data, other.shape))

        return self._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other, self)
        return self * other.pow(-1.0)

    def __rtruediv__(self, other):
        return self._lift(other, self) * self.pow(-1.0)

    def pow(self, exponent: float) -> "Tensor":
        """Elementwise power with a constant (non-tensor) exponent."""
        e = float(exponent)
        out_data = self.data**e

        def backward(grad):
            if self.requires_grad:
                self._accumulate(grad * e * self.data ** (e - 1.0))

        return self._make(out_data, (self,), backward)

    def sqrt(self) -> "Tensor":
        return self.pow(0.5)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def backward(grad):
            if self.requires_grad:
                self._accumulate(grad * out_data)

        return self._make(out_data, (self,), backward)

    def log(self) -> "Tensor":
        out_data = np.log(self.data)

        def backward(grad):
            if self.requires_grad:
                self._accumulate(grad / self.data)

        return self._make(out_data, (self,), backward)

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0)

        def backward(grad):
            if self.requires_grad:
                self._accumulate(grad * (self.data > 0))

        return self._make(out_data, (self,), backward)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.shape
        out_data = self.data.reshape(shape)

        def backward(grad):
            if self.requires_grad:
                self._accumulate(grad.reshape(in_shape))

        return self._make(out_data, (self,), backward)

    def transpose(self) -> "Tensor":
        """2-D transpose."""
        if self.data.ndim != 2:
            raise ValueError("transpose expects a 2-D tensor")
        out_data = self.data.T.copy()

        def backward(grad):
            if self.requires_grad:
                self._accumulate(grad.T)

        return self._make(out_data, (self,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __matmul__(self, other):
        other = self._lift(other, self)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul expects 2-D tensors")
        out_data = self.data @ other.data

        def backward(grad):
            if self.requires_grad:
                self._accumulate(grad @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ grad)

        return self._make(out_data, (self, other), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        in_shape = self.shape

        def backward(grad):
            if not self.requires_grad:
                return
            g = grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, in_shape))

        return self._make(np.asarray(out_data), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = 1
            for a in axes:
                n *= self.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- backward pass ----------------------------------------------------

    def backward(self) -> int:
        """Reverse-mode sweep from a scalar; returns the node visit count."""
        if self.size != 1:
            raise ValueError("backward requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        visits = 0
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                visits += 1
        return visits


# -- convolution and pooling ---------------------------------------------


def _check_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise TypeError(f"mixed dtypes in op: {t.data.dtype} vs {dt}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int) -> Tensor:
    """Cross-correlation, stride 1, symmetric zero padding.

    ``x`` is (B, C, H, W), ``weight`` is (O, C, kh, kw), ``bias`` is (O,).
    Output spatial size is ``in + 2*padding - k + 1``.
    """
    tensors = (x, weight) if bias is None else (x, weight, bias)
    _check_dtype(*tensors)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    batch, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    p = int(padding)
    hout = h + 2 * p - kh + 1
    wout = w + 2 * p - kw + 1
    if hout < 1 or wout < 1:
        raise ValueError("conv2d kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(batch * hout * wout, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out_data = (cols @ wmat.T).reshape(batch, hout, wout, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    out_data = np.ascontiguousarray(out_data)

    def backward(grad):
        gflat = grad.transpose(0, 2, 3, 1).reshape(batch * hout * wout, cout)
        if weight.requires_grad:
            gw = (gflat.T @ cols).reshape(cout, cin, kh, kw)
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gflat.sum(axis=0))
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(batch, hout, wout, cin, kh, kw)
            gxp = np.zeros((batch, cin, h + 2 * p, w + 2 * p), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + hout, j : j + wout] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
            x._accumulate(gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return x._make(out_data, parents, backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int) -> Tensor:
    """Cross-correlation over (B, C, L) with stride 1 and scalar padding."""
    tensors = (x, weight) if bias is None else (x, weight, bias)
    _check_dtype(*tensors)
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise ValueError("conv1d expects 3-D input and weight")
    batch, cin, length = x.shape
    cout, cin_w, k = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv1d channel mismatch: input {cin}, weight {cin_w}")
    p = int(padding)
    lout = length + 2 * p - k + 1
    if lout < 1:
        raise ValueError("conv1d kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    cols = win.transpose(0, 2, 1, 3).reshape(batch * lout, cin * k)
    wmat = weight.data.reshape(cout, cin * k)
    out_data = (cols @ wmat.T).reshape(batch, lout, cout).transpose(0, 2, 1)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None]
    out_data = np.ascontiguousarray(out_data)

    def backward(grad):
        gflat = grad.transpose(0, 2, 1).reshape(batch * lout, cout)
        if weight.requires_grad:
            weight._accumulate((gflat.T @ cols).reshape(cout, cin, k))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gflat.sum(axis=0))
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(batch, lout, cin, k)
            gxp = np.zeros((batch, cin, length + 2 * p), dtype=x.data.dtype)
            for i in range(k):
                gxp[:, :, i : i + lout] += gcols[:, :, :, i].transpose(0, 2, 1)
            x._accumulate(gxp[:, :, p : p + length] if p else gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return x._make(out_data, parents, backward)


def maxpool2d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; odd trailing rows/cols are dropped."""
    if x.data.ndim != 4:
        raise ValueError("maxpool2d expects a 4-D tensor")
    batch, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ValueError("maxpool2d needs spatial dims >= 2")
    cropped = x.data[:, :, : 2 * h2, : 2 * w2]
    win = cropped.reshape(batch, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(batch, c, h2, w2, 4)
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_data = np.ascontiguousarray(out_data)

    def backward(grad):
        if not x.requires_grad:
            return
        gwin = np.zeros((batch, c, h2, w2, 4), dtype=x.data.dtype)
        np.put_along_axis(gwin, idx[..., None], grad[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * h2, : 2 * w2] = (
            gwin.reshape(batch, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, c, 2 * h2, 2 * w2)
        )
        x._accumulate(gx)

    return x._make(out_data, (x,), backward)


def maxpool1d(x: Tensor) -> Tensor:
    """Non-overlapping 2-window max pooling over (B, C, L); floor semantics."""
    if x.data.ndim != 3:
        raise ValueError("maxpool1d expects a 3-D tensor")
    batch, c, length = x.shape
    l2 = length // 2
    if l2 < 1:
        raise ValueError("maxpool1d needs length >= 2")
    win = x.data[:, :, : 2 * l2].reshape(batch, c, l2, 2)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out_data = np.ascontiguousarray(out_data)

    def backward(grad):
        if not x.requires_grad:
            return
        gwin = np.zeros((batch, c, l2, 2), dtype=x.data.dtype)
        np.put_along_axis(gwin, idx[..., None], grad[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * l2] = gwin.reshape(batch, c, 2 * l2)
        x._accumulate(gx)

    return x._make(out_data, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale rows of ``x`` to unit Euclidean norm along ``axis``.

    Raises on any zero-norm slice; downstream dot products of the result are
    cosine similarities in [-1, 1].
    """
    sq = (x * x).sum(axis=axis, keepdims=True)
    if np.any(sq.data == 0):
        raise ValueError("l2_normalize: zero vector")
    return x * sq.pow(-0.5)
