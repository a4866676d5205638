"""Selective state-space (Mamba-2 style) sequence kernels.

Three numerically equivalent computation paths are provided for the per-head
scalar-decay SSM: the sequential recurrence (ground truth), the quadratic
masked-attention form, and the linear chunked form. ``mamba_block`` wraps
them as a multi-head, gated, pre-norm residual block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    add_rowvec,
    causal_depthwise_conv,
    concat,
    cumsum,
    exp,
    layer_norm_rows,
    matmul,
    mul,
    mul_rowvec,
    reshape,
    silu,
    softplus,
    split,
    sub,
    transpose,
)

MASK_NEG = -1e9  # additive mask; exp(MASK_NEG) underflows to exactly 0.0


@dataclass
class SSDConfig:
    seq_len: int
    d_model: int
    heads: int
    head_dim: int
    state_dim: int
    chunk_size: int = 16

    def __post_init__(self):
        for name in ("seq_len", "d_model", "heads", "head_dim", "state_dim", "chunk_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"SSDConfig.{name} must be positive")
        if self.heads * self.head_dim != self.d_model:
            raise ValueError(
                f"heads*head_dim must equal d_model: "
                f"{self.heads}*{self.head_dim} != {self.d_model}"
            )


@dataclass
class SSDParams:
    """Single-head selective SSM parameters over a length-T sequence.

    a: scalar decay, must be negative; delta: (T,) positive step sizes;
    B, C: (T, N) input/output state projections.
    """

    a: Tensor
    delta: Tensor
    B: Tensor
    C: Tensor

    @property
    def seq_len(self):
        return self.B.shape[0]

    @property
    def state_dim(self):
        return self.B.shape[1]


def discretize(a, delta):
    """Zero-order-hold transition plus Euler input scaling.

    Returns (abar, bbar_scale) with abar_t = exp(delta_t * a) and
    bbar_scale_t = delta_t (the input enters as delta_t * B_t).
    """
    if np.any(delta.data <= 0):
        raise ValueError("discretize requires strictly positive delta")
    return exp(mul(delta, a)), delta


def _ones(shape):
    return Tensor(np.ones(shape))


def _decay_mask(s):
    """Lower-triangular cumulative-decay mask L from inclusive log-decay sums s."""
    q = s.shape[0]
    s_col = reshape(s, (q, 1))
    srow = matmul(s_col, _ones((1, q)))
    scol = matmul(_ones((q, 1)), transpose(s_col))
    tril = np.tril(np.ones((q, q)))
    masked = mul(sub(srow, scol), Tensor(tril)) + Tensor(MASK_NEG * (1.0 - tril))
    return exp(masked)


def _scale_rows(m, v):
    """Multiply row t of m (T,N) by v_t, v shape (T,)."""
    n = m.shape[1]
    return mul(m, matmul(reshape(v, (v.shape[0], 1)), _ones((1, n))))


def ssm_recurrence_reference(params, x):
    """Sequential left-to-right evaluation; oracle for both fast modes."""
    t, p = x.shape
    n = params.state_dim
    abar, _ = discretize(params.a, params.delta)
    a_elems = split(abar, [1] * t)
    d_elems = split(params.delta, [1] * t)
    x_rows = split(x, [1] * t)
    b_rows = split(params.B, [1] * t)
    c_rows = split(params.C, [1] * t)
    h = Tensor(np.zeros((n, p)))
    ys = []
    for i in range(t):
        bbar = mul(b_rows[i], d_elems[i])
        h = mul(a_elems[i], h) + matmul(transpose(bbar), x_rows[i])
        ys.append(matmul(c_rows[i], h))
    return concat(ys, axis=0)


def materialize_m(params, limit=512):
    """Dense T x T lower-triangular transform matrix (numpy oracle)."""
    t = params.seq_len
    if t > limit:
        raise ValueError(f"materialize_m guard: T={t} exceeds limit {limit}")
    a = float(params.a.data.reshape(-1)[0])
    delta = params.delta.data
    s = np.cumsum(delta * a)
    g = params.C.data @ (params.B.data * delta[:, None]).T
    with np.errstate(over="ignore"):
        decay = np.exp(s[:, None] - s[None, :])
    m = g * decay
    return np.tril(m)


def ssd_quadratic(params, x):
    """Masked quadratic mode: y = ((C B_bar^T) . L) x."""
    logdec = mul(params.delta, params.a)
    s = cumsum(logdec)
    ell = _decay_mask(s)
    bbar = _scale_rows(params.B, params.delta)
    g = mul(matmul(params.C, transpose(bbar)), ell)
    return matmul(g, x)


def ssd_linear_chunked(params, x, chunk_size, _corrupt_boundary=False):
    """Linear mode: intra-chunk quadratic blocks plus inter-chunk state carry.

    The final ragged chunk is shortened, not padded. ``_corrupt_boundary`` is
    a test hook that perturbs the first carried state.
    """
    t, p = x.shape
    n = params.state_dim
    q = int(chunk_size)
    if not 1 <= q:
        raise ValueError(f"chunk_size must be >= 1, got {q}")
    sizes = [min(q, t - lo) for lo in range(0, t, q)]
    d_chunks = split(params.delta, sizes)
    b_chunks = split(params.B, sizes)
    c_chunks = split(params.C, sizes)
    x_chunks = split(x, sizes)
    h = Tensor(np.zeros((n, p)))
    outs = []
    for k, qc in enumerate(sizes):
        logdec = mul(d_chunks[k], params.a)
        s = cumsum(logdec)  # inclusive within-chunk log decay
        bbar = _scale_rows(b_chunks[k], d_chunks[k])
        g = mul(matmul(c_chunks[k], transpose(bbar)), _decay_mask(s))
        y = matmul(g, x_chunks[k])
        # contribution of the incoming state, decayed through each token
        cbar = _scale_rows(c_chunks[k], exp(s))
        y = y + matmul(cbar, h)
        # carry: decay the old state across the chunk, absorb chunk inputs
        s_last = split(s, [qc - 1, 1])[1]
        b_out = _scale_rows(bbar, exp(sub(s_last, s)))
        h = mul(exp(s_last), h) + matmul(transpose(b_out), x_chunks[k])
        if _corrupt_boundary and k == 0:
            h = h + Tensor(1e-3)
        outs.append(y)
    return concat(outs, axis=0)


def flop_proxy(mode, t, d):
    """Leading-order multiply count: T^2*D for attention, T*D^2 for SSD."""
    t, d = int(t), int(d)
    if t < 1 or d < 1:
        raise ValueError("flop_proxy requires positive T and D")
    if mode == "attention":
        return t * t * d
    if mode == "ssd":
        return t * d * d
    raise ValueError(f"unknown flop_proxy mode {mode!r} (expected 'attention' or 'ssd')")


# ---------------------------------------------------------------------------
# multi-head Mamba block


@dataclass
class MambaBlockWeights:
    ln_g: Tensor
    ln_b: Tensor
    w_in: Tensor
    b_in: Tensor
    conv_w: Tensor
    conv_b: Tensor
    w_bproj: Tensor
    w_cproj: Tensor
    w_dt: Tensor
    b_dt: Tensor
    a_log: Tensor  # per-head decay is -exp(a_log), always negative
    w_out: Tensor
    b_out: Tensor


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def init_mamba_block(rng, d_model, heads, state_dim, conv_width=4):
    if d_model % heads != 0:
        raise ValueError(f"heads {heads} must divide d_model {d_model}")
    d = d_model
    # softplus(b_dt) starts in ~[1e-3, 0.1] so early decays stay near 1
    dt0 = rng.uniform(1e-3, 0.1, size=heads)
    b_dt = np.log(np.expm1(dt0))
    return MambaBlockWeights(
        ln_g=Tensor(np.ones(d), requires_grad=True),
        ln_b=Tensor(np.zeros(d), requires_grad=True),
        w_in=xavier_uniform(rng, d, 2 * d),
        b_in=Tensor(np.zeros(2 * d), requires_grad=True),
        conv_w=Tensor(rng.uniform(-0.5, 0.5, size=(conv_width, d)) / math.sqrt(conv_width), requires_grad=True),
        conv_b=Tensor(np.zeros(d), requires_grad=True),
        w_bproj=xavier_uniform(rng, d, state_dim),
        w_cproj=xavier_uniform(rng, d, state_dim),
        w_dt=xavier_uniform(rng, d, heads),
        b_dt=Tensor(b_dt, requires_grad=True),
        a_log=Tensor(rng.uniform(math.log(0.5), math.log(2.0), size=heads), requires_grad=True),
        w_out=xavier_uniform(rng, d, d),
        b_out=Tensor(np.zeros(d), requires_grad=True),
    )


def mamba_block(x, w, chunk_size=16, mode="chunked"):
    """Pre-norm residual Mamba block; preserves the (T, D) shape."""
    t, d = x.shape
    if w.w_in.shape[0] != d:
        raise ValueError(f"mamba_block dim mismatch: input D={d}, weights D={w.w_in.shape[0]}")
    heads = w.a_log.shape[0]
    p = d // heads
    h = add_rowvec(mul_rowvec(layer_norm_rows(x), w.ln_g), w.ln_b)
    xz = add_rowvec(matmul(h, w.w_in), w.b_in)
    xb, z = split(xz, [d, d], axis=1)
    xb = silu(add_rowvec(causal_depthwise_conv(xb, w.conv_w), w.conv_b))
    b_proj = matmul(xb, w.w_bproj)
    c_proj = matmul(xb, w.w_cproj)
    dt = softplus(add_rowvec(matmul(xb, w.w_dt), w.b_dt))
    a = mul(exp(w.a_log), Tensor(-1.0))
    a_h = split(a, [1] * heads)
    dt_h = split(dt, [1] * heads, axis=1)
    x_h = split(xb, [p] * heads, axis=1)
    ys = []
    for i in range(heads):
        params = SSDParams(a=a_h[i], delta=reshape(dt_h[i], (t,)), B=b_proj, C=c_proj)
        if mode == "chunked":
            ys.append(ssd_linear_chunked(params, x_h[i], chunk_size))
        elif mode == "quadratic":
            ys.append(ssd_quadratic(params, x_h[i]))
        elif mode == "recurrence":
            ys.append(ssm_recurrence_reference(params, x_h[i]))
        else:
            raise ValueError(f"unknown ssd mode {mode!r}")
    y = mul(concat(ys, axis=1), silu(z))
    return x + add_rowvec(matmul(y, w.w_out), w.b_out)


# ---------------------------------------------------------------------------
# equivalence suite


def random_instance(rng, max_t=64, max_n=8, max_heads=4):
    """Random per-head SSD instances sharing one sequence."""
    t = int(rng.integers(1, max_t + 1))
    n = int(rng.integers(1, max_n + 1))
    p = int(rng.integers(1, max_n + 1))
    heads = int(rng.integers(1, max_heads + 1))
    insts = []
    for _ in range(heads):
        a = Tensor(-np.exp(rng.uniform(math.log(0.5), math.log(2.0), size=1)))
        delta = Tensor(np.logaddexp(0.0, rng.normal(size=t)) + 1e-3)
        b = Tensor(rng.normal(size=(t, n)) * 0.5)
        c = Tensor(rng.normal(size=(t, n)) * 0.5)
        x = Tensor(rng.normal(size=(t, p)))
        insts.append((SSDParams(a=a, delta=delta, B=b, C=c), x))
    return insts


def _rel_err(y, ref):
    scale = max(np.abs(ref).max(), 1e-12)
    return float(np.abs(y - ref).max() / scale)


def equivalence_trials(trials, max_t=64, seed=0, chunk_sizes=(1, 2, 3, 8, 16), inject_fault=False):
    """Three-way agreement of recurrence / quadratic / chunked modes.

    Returns (worst relative error, instance count) across all trials, heads,
    and modes. ``inject_fault`` perturbs the chunked mode's first carried
    state, which the check must flag; it exists to prove the harness can fail.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    n_instances = 0
    for _ in range(trials):
        for params, x in random_instance(rng, max_t=max_t):
            n_instances += 1
            t = params.seq_len
            ref = ssm_recurrence_reference(params, x).data
            worst = max(worst, _rel_err(ssd_quadratic(params, x).data, ref))
            qs = sorted({min(q, t) for q in chunk_sizes} | {t})
            for q in qs:
                y = ssd_linear_chunked(params, x, q, _corrupt_boundary=inject_fault and q < t)
                worst = max(worst, _rel_err(y.data, ref))
    return worst, n_instances
