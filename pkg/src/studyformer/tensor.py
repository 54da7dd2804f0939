"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (float32 or float64) plus an optional gradient
accumulator. Operations record a dynamic tape: each result keeps references
to its inputs and a closure that routes the upstream gradient to them.
``Tensor.backward`` walks the tape in reverse topological order, then frees
the interior of the graph (the graph is consumed).

Shapes are checked explicitly on every operation. There is no implicit
broadcasting except scalar-with-tensor arithmetic and the explicit
``add_bias`` suffix broadcast.

Tensors are immutable once created except for gradient accumulation (and
parameter updates applied by an optimizer, which owns its parameters).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    # -- autodiff --------------------------------------------------------
    def backward(self):
        """Populate .grad on every requires-grad leaf reachable from this scalar.

        Gradients accumulate (+=) into leaves, so successive backward calls on
        different graphs sum. The traversed graph is consumed afterwards.
        """
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        for node in topo:
            if node._op != "leaf":
                node.grad = None
                node._parents = ()
                node._backward_fn = None


def _toposort(root):
    topo, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return topo


def _accum(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, backward_fn, op):
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
        return out
    return Tensor(data)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_dtypes(*ts):
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise DimensionError(f"mixed dtypes: {dt} vs {t.dtype}")


def _is_scalar(t):
    return t.size == 1 and t.ndim == 0


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    """a + b for identical shapes, or scalar-with-tensor."""
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_dtypes(a, b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data

    def backward(g):
        _accum(a, g if a.shape == out_data.shape else g.sum())
        _accum(b, g if b.shape == out_data.shape else g.sum())

    return _make(out_data, (a, b), backward, "add")


def neg(a):
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def mul(a, b):
    """a * b for identical shapes, or scalar-with-tensor."""
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_dtypes(a, b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    out_data = a.data * b.data

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        _accum(a, ga if a.shape == out_data.shape else ga.sum())
        _accum(b, gb if b.shape == out_data.shape else gb.sum())

    return _make(out_data, (a, b), backward, "mul")


def add_bias(x, b):
    """x + b where b's shape equals a trailing suffix of x's shape.

    The only sanctioned non-scalar broadcast: b is repeated over the leading
    axes of x (bias vectors, positional tables).
    """
    _check_dtypes(x, b)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_bias: {b.shape} is not a suffix of {x.shape}")
    lead = x.ndim - b.ndim

    def backward(g):
        _accum(x, g)
        _accum(b, g.sum(axis=tuple(range(lead))) if lead else g)

    return _make(x.data + b.data, (x, b), backward, "add_bias")


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient is zero where the input was clamped."""
    out_data = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)

    def backward(g):
        _accum(x, g * mask)

    return _make(out_data, (x,), backward, "clip")


def maximum(a, b):
    """Elementwise max of two same-shape tensors; ties route the gradient to a."""
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"maximum: shapes {a.shape} and {b.shape} differ")
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g):
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)

    return _make(out_data, (a, b), backward, "maximum")


def log(x):
    out_data = np.log(x.data)

    def backward(g):
        _accum(x, g / x.data)

    return _make(out_data, (x,), backward, "log")


def powc(x, p):
    """x ** p for a constant real exponent (x must be positive)."""
    p = float(p)
    out_data = x.data**p

    def backward(g):
        _accum(x, g * p * x.data ** (p - 1.0))

    return _make(out_data, (x,), backward, "powc")


def sigmoid(x):
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward, "sigmoid")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x):
    """GELU with the tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(inner)
    out_data = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd**2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
        _accum(x, g * d)

    return _make(out_data, (x,), backward, "gelu")


# -- reductions ------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None):
    axis = _norm_axis(axis, x.ndim)
    out_data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(out_data, (x,), backward, "sum")


def reduce_mean(x, axis=None):
    axis = _norm_axis(axis, x.ndim)
    out_data = x.data.mean(axis=axis)
    if axis is None:
        n = x.size
    else:
        n = int(np.prod([x.shape[a] for a in axis]))

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / n, x.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g / n, axis), x.shape))

    return _make(out_data, (x,), backward, "mean")


# -- shape manipulation -----------------------------------------------------


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    out_data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _make(out_data, (x,), backward, "reshape")


def transpose(x, axes):
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for ndim {x.ndim}")
    out_data = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, g.transpose(inv))

    return _make(out_data, (x,), backward, "transpose")


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    _check_dtypes(*tensors)
    axis = axis % tensors[0].ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = base[axis]
        if s != base:
            raise DimensionError(f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward, "concat")


def narrow(x, axis, start, length):
    """Contiguous slice of `length` entries from `start` along `axis`."""
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(f"narrow: [{start}:{start + length}) out of range for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = x.data[sl].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        _accum(x, gx)

    return _make(out_data, (x,), backward, "narrow")


def tile_leading(x, n):
    """Repeat x along a new leading axis of extent n."""
    out_data = np.broadcast_to(x.data, (int(n),) + x.shape).copy()

    def backward(g):
        _accum(x, g.sum(axis=0))

    return _make(out_data, (x,), backward, "tile_leading")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """Matrix product.

    Supports 2-D x 2-D, batched ND x ND with identical leading dims, and the
    shared-weight case ND x 2-D. Inner extents must match.
    """
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading extents differ for {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if b.ndim == 2:
            _accum(a, g @ b.data.T)
            k, n = b.shape
            _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
        else:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, (a, b), backward, "matmul")


# -- convolution and pooling --------------------------------------------------

_COL2IM_CACHE = {}


def _conv_windows(xp, kh, kw, stride, out_h, out_w):
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (b, c, out_h, out_w, kh, kw),
        (s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )


def _col2im_index(cin, h2, w2, kh, kw, stride, out_h, out_w):
    key = (cin, h2, w2, kh, kw, stride, out_h, out_w)
    idx = _COL2IM_CACHE.get(key)
    if idx is None:
        oh = np.arange(out_h).reshape(out_h, 1, 1, 1, 1)
        ow = np.arange(out_w).reshape(1, out_w, 1, 1, 1)
        ci = np.arange(cin).reshape(1, 1, cin, 1, 1)
        r = np.arange(kh).reshape(1, 1, 1, kh, 1)
        s = np.arange(kw).reshape(1, 1, 1, 1, kw)
        idx = (ci * (h2 * w2) + (oh * stride + r) * w2 + (ow * stride + s)).reshape(out_h * out_w, cin * kh * kw)
        _COL2IM_CACHE[key] = idx
    return idx


def conv2d(x, w, bias=None, stride=1, padding=0):
    """2-D cross-correlation of x[B,Cin,H,W] with kernels w[Cout,Cin,kh,kw]."""
    _check_dtypes(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: need 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_k, kh, kw = w.shape
    if cin != cin_k:
        raise DimensionError(f"conv2d: input channels {cin} != kernel channels {cin_k}")
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride {stride} / padding {padding} invalid")
    h2, w2 = h + 2 * padding, wd + 2 * padding
    if kh > h2 or kw > w2:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h2}x{w2}")
    out_h = (h2 - kh) // stride + 1
    out_w = (w2 - kw) // stride + 1
    if bias is not None:
        _check_dtypes(x, bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = _conv_windows(xp, kh, kw, stride, out_h, out_w)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * out_h * out_w, cin * kh * kw)
    wk = w.data.reshape(cout, -1).T
    out = (cols @ wk).reshape(bsz, out_h, out_w, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if w.requires_grad:
            _accum(w, (g2.T @ cols).reshape(cout, cin, kh, kw))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = g2 @ wk.T
            idx = _col2im_index(cin, h2, w2, kh, kw, stride, out_h, out_w)
            img = cin * h2 * w2
            full = idx.ravel()[None, :] + (np.arange(bsz) * img)[:, None]
            gxp = np.bincount(full.ravel(), weights=gcols.reshape(bsz, -1).ravel(), minlength=bsz * img)
            gxp = gxp.reshape(bsz, cin, h2, w2)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
            _accum(x, gxp)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, backward, "conv2d")


def avg_pool2d(x, k):
    """Non-overlapping k x k average pooling; spatial extents must divide by k."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d: need 4-D input, got {x.shape}")
    bsz, c, h, w = x.shape
    k = int(k)
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: window {k} does not divide {h}x{w}")
    out_data = x.data.reshape(bsz, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        _accum(x, np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k))

    return _make(out_data, (x,), backward, "avg_pool2d")


# -- normalization and attention primitives -----------------------------------


def softmax(x):
    """Row softmax over the last axis, computed with max subtraction."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (x,), backward, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _check_dtypes(x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            _accum(x, inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)))

    return _make(out_data, (x, gamma, beta), backward, "layer_norm")


# -- fixture file format -------------------------------------------------------

_DTYPE_TOKEN = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_TOKEN_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def write_tensor(path, t):
    """Write `TNSR v1 <rank> <extent...> <dtype>` + little-endian row-major data."""
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def read_tensor(path):
    with open(path, "rb") as f:
        blob = f.read()
    return tensor_from_bytes(blob)


def tensor_to_bytes(t):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    header = f"TNSR v1 {data.ndim} {' '.join(str(s) for s in data.shape)} {_DTYPE_TOKEN[data.dtype]}\n"
    return header.encode("ascii") + np.ascontiguousarray(data).astype(data.dtype.newbyteorder("<")).tobytes()


def tensor_from_bytes(blob):
    from .errors import FormatError

    nl = blob.find(b"\n")
    if nl < 0 or not blob.startswith(b"TNSR v1 "):
        raise FormatError("not a TNSR v1 blob")
    fields = blob[:nl].decode("ascii").split()
    rank = int(fields[2])
    if len(fields) != 4 + rank:
        raise FormatError(f"TNSR header field count {len(fields)} does not match rank {rank}")
    shape = tuple(int(s) for s in fields[3:3 + rank])
    token = fields[3 + rank]
    if token not in _TOKEN_DTYPE:
        raise FormatError(f"unknown TNSR dtype token {token!r}")
    dt = _TOKEN_DTYPE[token]
    need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    payload = blob[nl + 1:nl + 1 + need]
    if len(payload) != need:
        raise FormatError(f"TNSR payload truncated: need {need} bytes, have {len(payload)}")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return Tensor(arr)
