"""Dense multi-dimensional arrays with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array (row-major, 32-bit floats by default) and
records the operation that produced it. The graph is define-by-run: every
forward call rebuilds it, ``backward()`` walks it once in reverse
topological order and accumulates into ``grad`` buffers. Only the ops the
reconstruction model actually needs are provided; there is no general
broadcasting beyond what those ops use.

``set_default_dtype(numpy.float64)`` switches newly created tensors to
64-bit, which the test suite uses for tight finite-difference checks.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Array node in the autodiff graph.

    ``data`` is always a numpy array; ``grad`` is lazily allocated with the
    same shape during ``backward``. Tensors with ``requires_grad=False`` and
    no differentiable parents carry no graph state at all, so frozen
    sub-networks run without bookkeeping overhead.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss into all reachable grads."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.data.shape}")
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar for the common arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    """Wrap an op result; graph state attaches only if a parent needs grads."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along axes numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def collect_parameters(root: Tensor) -> list[Tensor]:
    """All requires_grad leaves reachable from ``root`` through the graph."""
    found: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.requires_grad and not node._parents:
            found.append(node)
        stack.extend(node._parents)
    return found


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def backward(g):
        a._accumulate(2.0 * a.data * g)

    return _make(data, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at the origin."""
    data = np.abs(a.data)

    def backward(g):
        a._accumulate(np.sign(a.data) * g)

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign to stay stable for large |x|
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype)

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode (identity when p == 0)."""
    if p <= 0.0:
        return a
    if p >= 1.0:
        raise ConfigError(f"dropout probability must be < 1, got {p}")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    data = a.data * keep

    def backward(g):
        a._accumulate(g * keep)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    data = a.data.sum()

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(data, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = a.data.mean()

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(data, (a,), backward)


def sum_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(ax % a.ndim for ax in axes)
    data = a.data.sum(axis=axes)

    def backward(g):
        shape = [1 if i in axes else n for i, n in enumerate(a.shape)]
        a._accumulate(np.broadcast_to(g.reshape(shape), a.shape))

    return _make(data, (a,), backward)


def mean_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(ax % a.ndim for ax in axes)
    count = int(np.prod([a.shape[i] for i in axes]))
    data = a.data.mean(axis=axes)

    def backward(g):
        shape = [1 if i in axes else n for i, n in enumerate(a.shape)]
        a._accumulate(np.broadcast_to(g.reshape(shape) / count, a.shape))

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# structure


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _make(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tensors, backward)


def narrow(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice rows [start, stop) along the leading axis."""
    data = a.data[start:stop]

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a._accumulate(full)

    return _make(data, (a,), backward)


def expand0(a: Tensor, n: int) -> Tensor:
    """Prepend a length-``n`` leading axis by repetition (summed in reverse)."""
    data = np.broadcast_to(a.data, (n,) + a.shape).copy()

    def backward(g):
        a._accumulate(g.sum(axis=0))

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product on the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, b.data.swapaxes(-1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(a.data.swapaxes(-1, -2), g))

    return _make(data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the trailing feature axis: ``x @ w + b``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} x {w.shape}")
    data = np.matmul(x.data, w.data)
    if b is not None:
        data = data + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.matmul(g, w.data.T))
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.shape[-1])
            w._accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, backward)


# ---------------------------------------------------------------------------
# softmax family


def softmax_last_axis(x: Tensor) -> Tensor:
    """Stabilized softmax over the trailing axis; rejects NaN inputs."""
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate(y * (g - inner))

    return _make(y, (x,), backward)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the trailing axis with ``mask == True`` entries forced to 0.

    ``mask`` is a boolean array broadcastable to ``x``; every trailing slice
    must keep at least one visible entry.
    """
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    mask = np.broadcast_to(np.asarray(mask, bool), x.shape)
    if mask.all(axis=-1).any():
        raise NumericError("masked_softmax: a slice has every entry masked")
    neg = np.where(mask, -np.inf, x.data)
    shifted = neg - neg.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    y = np.where(mask, 0.0, y).astype(x.data.dtype)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate(np.where(mask, 0.0, y * (g - inner)).astype(x.data.dtype))

    return _make(y, (x,), backward)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then scale."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} do not match feature dim {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gx - m1 - xhat * m2) * inv)
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0))

    return _make(data, (x, gain, bias), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel-last batch normalization.

    Statistics are taken over every axis except the trailing channel axis.
    Training mode normalizes with batch statistics and updates the running
    buffers in place; evaluation mode uses the running buffers.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm params {gamma.shape}/{beta.shape} do not match channels {c}")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // c
        unbiased = var * (n / max(n - 1, 1))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        data = xhat * gamma.data + beta.data

        def backward(g):
            if x.requires_grad:
                gx = g * gamma.data
                m1 = gx.mean(axis=axes)
                m2 = (gx * xhat).mean(axis=axes)
                x._accumulate((gx - m1 - xhat * m2) * inv)
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).reshape(-1, c).sum(axis=0))
            if beta.requires_grad:
                beta._accumulate(g.reshape(-1, c).sum(axis=0))

        return _make(data, (x, gamma, beta), backward)

    inv = 1.0 / np.sqrt(running_var + eps)
    data = (x.data - running_mean) * inv * gamma.data + beta.data
    xhat_eval = (x.data - running_mean) * inv

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * gamma.data * inv)
        if gamma.requires_grad:
            gamma._accumulate((g * xhat_eval).reshape(-1, c).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, c).sum(axis=0))

    return _make(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# spatial ops (channel-last; accept (h, w, c) or (b, h, w, c))


def _promote_bhwc(x: Tensor):
    """Raw data viewed as (b, h, w, c) plus whether a batch axis was added."""
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected (h, w, c) or (b, h, w, c), got {x.shape}")


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor, pad: int = 1) -> Tensor:
    """3x3 convolution with same padding; weight layout (3, 3, c_in, c_out)."""
    x4, squeezed = _promote_bhwc(x)
    bs, h, wd, cin = x4.shape
    if w.shape[:3] != (3, 3, cin):
        raise ShapeError(f"conv2d_3x3 weight {w.shape} does not match input {x4.shape}")
    cout = w.shape[3]
    xp = np.pad(x4, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh, ow = h + 2 * pad - 2, wd + 2 * pad - 2
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d_3x3 output would underflow for input {x4.shape}")
    # im2col: (bs, oh, ow, 3, 3, cin) without copying more than needed
    view = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = view.transpose(0, 1, 2, 4, 5, 3).reshape(bs * oh * ow, 9 * cin)
    wmat = w.data.reshape(9 * cin, cout)
    out = (cols @ wmat + b.data).reshape(bs, oh, ow, cout)

    def backward(g):
        g2 = g.reshape(bs * oh * ow, cout)
        if w.requires_grad:
            w._accumulate((cols.T @ g2).reshape(3, 3, cin, cout))
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(bs, oh, ow, 3, 3, cin)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + oh, j:j + ow, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + h, pad:pad + wd, :]
            x._accumulate(gx.reshape(x.shape))

    out_t = _make(out, (x, w, b), backward)
    return reshape(out_t, out.shape[1:]) if squeezed else out_t


def conv2d_1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise convolution; weight layout (c_in, c_out)."""
    return linear(x, w, b)


def deconv2d_2x2_stride2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Transposed 2x2 stride-2 convolution: doubles height and width exactly.

    Weight layout (2, 2, c_in, c_out); every input pixel expands into a
    disjoint 2x2 output block, so there is no overlap to accumulate.
    """
    x4, squeezed = _promote_bhwc(x)
    bs, h, wd, cin = x4.shape
    if w.shape[:3] != (2, 2, cin):
        raise ShapeError(f"deconv2d weight {w.shape} does not match input {x4.shape}")
    cout = w.shape[3]
    blocks = np.einsum("bhwc,ijco->bhiwjo", x4, w.data, optimize=True)
    out = blocks.reshape(bs, 2 * h, 2 * wd, cout) + b.data

    def backward(g):
        g6 = g.reshape(bs, h, 2, wd, 2, cout)
        if x.requires_grad:
            gx = np.einsum("bhiwjo,ijco->bhwc", g6, w.data, optimize=True)
            x._accumulate(gx.reshape(x.shape))
        if w.requires_grad:
            w._accumulate(np.einsum("bhwc,bhiwjo->ijco", x4, g6, optimize=True))
        if b.requires_grad:
            b._accumulate(g.reshape(-1, cout).sum(axis=0))

    out_t = _make(out, (x, w, b), backward)
    return reshape(out_t, out.shape[1:]) if squeezed else out_t


def avg_pool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling; spatial dims must be even."""
    x4, squeezed = _promote_bhwc(x)
    bs, h, wd, c = x4.shape
    if h % 2 or wd % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial dims, got {x4.shape}")
    blocks = x4.reshape(bs, h // 2, 2, wd // 2, 2, c)
    out = blocks.mean(axis=(2, 4))

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
        x._accumulate(gx.reshape(x.shape))

    out_t = _make(out, (x,), backward)
    return reshape(out_t, out.shape[1:]) if squeezed else out_t


def _resize_coords(n_in: int, n_out: int):
    """Half-pixel (align_corners=false) source indices and blend weights."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation (align_corners=false) on the spatial axes."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target ({out_h}, {out_w}) invalid")
    x4, squeezed = _promote_bhwc(x)
    bs, h, wd, c = x4.shape
    r0, r1, fy = _resize_coords(h, out_h)
    c0, c1, fx = _resize_coords(wd, out_w)
    fy = fy[:, None, None].astype(x.data.dtype)
    fx = fx[None, :, None].astype(x.data.dtype)
    top = x4[:, r0][:, :, c0] * (1 - fx) + x4[:, r0][:, :, c1] * fx
    bot = x4[:, r1][:, :, c0] * (1 - fx) + x4[:, r1][:, :, c1] * fx
    out = top * (1 - fy) + bot * fy

    def backward(g):
        gx = np.zeros_like(x4)
        wts = ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)
        rows = (r0, r0, r1, r1)
        cols = (c0, c1, c0, c1)
        for wt, rr, cc in zip(wts, rows, cols):
            np.add.at(gx, (slice(None), rr[:, None], cc[None, :]), g * wt)
        x._accumulate(gx.reshape(x.shape))

    out_t = _make(out, (x,), backward)
    return reshape(out_t, out.shape[1:]) if squeezed else out_t
