"""Dense float64 tensor with a define-by-run reverse-mode tape.

Every stored value is finite by construction; an op producing NaN/Inf raises
immediately, which doubles as the training divergence guard. Broadcasting is
restricted to scalar-vs-tensor; everything else must be reshaped explicitly.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "finite_diff_grad",
    "count_multiplies",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "split",
    "exp",
    "log",
    "sigmoid",
    "silu",
    "softplus",
    "tensor_abs",
    "sum_all",
    "mean_all",
    "cumsum",
    "softmax_rows",
    "layer_norm_rows",
    "add_rowvec",
    "mul_rowvec",
    "conv2d",
    "conv2d_same",
    "causal_depthwise_conv",
]


class MultiplyCounter:
    """Accumulates the scalar multiply count of matmul-like ops."""

    def __init__(self):
        self.total = 0


_active_counters: list[MultiplyCounter] = []


@contextmanager
def count_multiplies():
    c = MultiplyCounter()
    _active_counters.append(c)
    try:
        yield c
    finally:
        _active_counters.remove(c)


def tally_multiplies(n):
    """Record n scalar multiplies against every active counter."""
    for c in _active_counters:
        c.total += int(n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor values must be finite (got NaN/Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; non-Tensor operands are treated as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Build an op output; the backward closure is kept only when needed."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tape:
    """Topologically ordered record of the ops reachable from an output."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order = []
        seen = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        return cls(order)


def backward(loss):
    """Reverse-mode sweep from a scalar loss; grads accumulate additively."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def _bcast_ok(a, b):
    return a.shape == b.shape or a.size == 1 or b.size == 1


def _reduce_to(g, t):
    if t.size == 1:
        return np.full_like(t.data, g.sum())
    return g


def add(a, b):
    if not _bcast_ok(a, b):
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a))
        if b.requires_grad:
            _accum(b, _reduce_to(g, b))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    if not _bcast_ok(a, b):
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a))
        if b.requires_grad:
            _accum(b, _reduce_to(-g, b))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    if not _bcast_ok(a, b):
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b))

    return _make(a.data * b.data, (a, b), bw)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    tally_multiplies(m * k * n)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a):
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), bw)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ValueError(f"reshape {a.shape} -> {shape}: size mismatch")

    def bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def concat(parts, axis=0):
    parts = list(parts)
    if not parts:
        raise ValueError("concat of zero tensors")
    nd = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != nd:
            raise ValueError("concat rank mismatch")
        for ax in range(nd):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise ValueError(
                    f"concat shape mismatch off axis {axis}: "
                    f"{parts[0].shape} vs {p.shape}"
                )
    sizes = [p.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            if p.requires_grad:
                sl = [slice(None)] * nd
                sl[axis] = slice(lo, hi)
                _accum(p, g[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def split(a, sizes, axis=0):
    sizes = [int(s) for s in sizes]
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not sum to dim {a.shape[axis]}")
    nd = a.data.ndim
    offs = np.cumsum([0] + sizes)
    outs = []
    for lo, hi in zip(offs[:-1], offs[1:]):
        sl = [slice(None)] * nd
        sl[axis] = slice(lo, hi)
        sl = tuple(sl)

        def bw(g, sl=sl):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[sl] = g
                _accum(a, full)

        outs.append(_make(a.data[sl].copy(), (a,), bw))
    return outs


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a):
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")

    def bw(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    s = _sigmoid(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), bw)


def silu(a):
    s = _sigmoid(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * (s + a.data * s * (1.0 - s)))

    return _make(a.data * s, (a,), bw)


def softplus(a):
    s = _sigmoid(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * s)

    return _make(np.logaddexp(0.0, a.data), (a,), bw)


def tensor_abs(a):
    sign = np.sign(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * sign)

    return _make(np.abs(a.data), (a,), bw)


def sum_all(a):
    def bw(g):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, float(g)))

    return _make(np.array(a.data.sum()), (a,), bw)


def mean_all(a):
    n = a.size

    def bw(g):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, float(g) / n))

    return _make(np.array(a.data.mean()), (a,), bw)


def cumsum(a, axis=0):
    def bw(g):
        if a.requires_grad:
            rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
            _accum(a, rev)

    return _make(np.cumsum(a.data, axis=axis), (a,), bw)


# ---------------------------------------------------------------------------
# row-structured ops


def softmax_rows(x):
    if x.data.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            _accum(x, y * (g - dot))

    return _make(y, (x,), bw)


def layer_norm_rows(x, eps=1e-12):
    """Normalize each row to mean 0, variance 1 (no affine)."""
    if x.data.ndim != 2:
        raise ValueError(f"layer_norm_rows expects a matrix, got shape {x.shape}")
    n = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        if x.requires_grad:
            gm = g.mean(axis=1, keepdims=True)
            gy = (g * y).mean(axis=1, keepdims=True)
            _accum(x, inv * (g - gm - y * gy))

    return _make(y, (x,), bw)


def add_rowvec(x, b):
    if x.data.ndim != 2 or b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ValueError(f"add_rowvec shape mismatch: {x.shape} + {b.shape}")

    def bw(g):
        if x.requires_grad:
            _accum(x, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _make(x.data + b.data[None, :], (x, b), bw)


def mul_rowvec(x, b):
    if x.data.ndim != 2 or b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ValueError(f"mul_rowvec shape mismatch: {x.shape} * {b.shape}")

    def bw(g):
        if x.requires_grad:
            _accum(x, g * b.data[None, :])
        if b.requires_grad:
            _accum(b, (g * x.data).sum(axis=0))

    return _make(x.data * b.data[None, :], (x, b), bw)


# ---------------------------------------------------------------------------
# convolutions


def _im2col(xpad, k, stride, out_h, out_w):
    win = np.lib.stride_tricks.sliding_window_view(xpad, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, out_h, out_w, k, k)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(xpad.shape[0] * k * k, out_h * out_w)
    return np.ascontiguousarray(cols)


def conv2d(x, w, b=None, stride=1):
    """2-D convolution, zero 'same' padding of (k-1)/2, odd kernels only.

    x: (C_in, H, W); w: (C_out, C_in, k, k); b: (C_out,) or None.
    Output spatial dims are ceil(H/stride) x ceil(W/stride).
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects x (C,H,W), w (O,C,k,k); got {x.shape}, {w.shape}")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if c_in != x.shape[0]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[0]}, kernel {c_in}")
    pad = (k - 1) // 2
    _, h, wd = x.shape
    out_h = -(-h // stride)
    out_w = -(-wd // stride)
    xpad = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xpad, k, stride, out_h, out_w)
    wm = w.data.reshape(c_out, -1)
    tally_multiplies(c_out * c_in * k * k * out_h * out_w)
    y = wm @ cols
    if b is not None:
        if b.data.ndim != 1 or b.shape[0] != c_out:
            raise ValueError(f"conv2d bias shape {b.shape} != ({c_out},)")
        y = y + b.data[:, None]

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gm = g.reshape(c_out, -1)
        if w.requires_grad:
            _accum(w, (gm @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, gm.sum(axis=1))
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape(c_in, k, k, out_h, out_w)
            gpad = np.zeros_like(xpad)
            for di in range(k):
                for dj in range(k):
                    sub = gpad[:, di : di + stride * out_h : stride, dj : dj + stride * out_w : stride]
                    sub += gcols[:, di, dj, : sub.shape[1], : sub.shape[2]]
            _accum(x, gpad[:, pad : pad + h, pad : pad + wd])

    return _make(y.reshape(c_out, out_h, out_w), parents, bw)


def conv2d_same(x, w, b=None):
    """Stride-1 'same' convolution: spatial dims preserved exactly."""
    return conv2d(x, w, b, stride=1)


def causal_depthwise_conv(x, w):
    """Per-channel causal FIR: y[t] = sum_i w[i] * x[t-i], x[<0] = 0.

    x: (T, D); w: (K, D).
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"causal conv shape mismatch: x {x.shape}, w {w.shape}")
    t = x.shape[0]
    kw = w.shape[0]
    y = np.zeros_like(x.data)
    for i in range(kw):
        if i == 0:
            y += w.data[0][None, :] * x.data
        elif i < t:
            y[i:] += w.data[i][None, :] * x.data[:-i]

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kw):
                if i == 0:
                    gx += w.data[0][None, :] * g
                elif i < t:
                    gx[:-i] += w.data[i][None, :] * g[i:]
            _accum(x, gx)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kw):
                if i == 0:
                    gw[0] = (g * x.data).sum(axis=0)
                elif i < t:
                    gw[i] = (g[i:] * x.data[:-i]).sum(axis=0)
            _accum(w, gw)

    return _make(y, (x, w), bw)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of one tensor."""
    flat = x.data.reshape(-1).copy()
    out = np.zeros_like(flat)

    def eval_at(vals):
        r = f(Tensor(vals.reshape(x.shape)))
        return r.item() if isinstance(r, Tensor) else float(r)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = eval_at(flat)
        flat[i] = orig - h
        fm = eval_at(flat)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)
