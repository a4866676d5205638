"""Composable layers: multi-scale convolution, Mamba fusion, feature-state
dropout, cross-attention, and the Mamba-Transformer decoder layer.

All layers are pure functions of (weights, inputs, seed); stochastic masking
takes an explicit seed and is active only in training mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .ssd import MambaBlockWeights, init_mamba_block, mamba_block, xavier_uniform
from .tensor import (
    Tensor,
    add_rowvec,
    concat,
    conv2d_same,
    layer_norm_rows,
    matmul,
    mul,
    mul_rowvec,
    reshape,
    silu,
    softmax_rows,
    split,
    transpose,
)

FUSION_TAG = "fusion"
EGO_TAG = "ego"


@dataclass
class FeatureMap:
    data: Tensor  # (C, H, W)
    modality: str

    def __post_init__(self):
        c, h, w = self.data.shape
        if h < 1 or w < 1:
            raise ValueError(f"FeatureMap spatial dims must be positive, got {self.data.shape}")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def tokens(self):
        """Flatten to (H*W, C) token-major layout."""
        c, h, w = self.data.shape
        return transpose(reshape(self.data, (c, h * w)))


def tokens_to_map(tokens, channels, height, width, modality):
    return FeatureMap(
        data=reshape(transpose(tokens), (channels, height, width)), modality=modality
    )


@dataclass
class TokenSequence:
    data: Tensor  # (T, D)
    tags: list = field(default_factory=list)

    def __post_init__(self):
        if self.tags and len(self.tags) != self.data.shape[0]:
            raise ValueError(
                f"tag count {len(self.tags)} != token count {self.data.shape[0]}"
            )


# ---------------------------------------------------------------------------
# multi-scale convolution


@dataclass
class MSCWeights:
    convs: list  # [(w, b)] for kernel sizes 5, 7, 9
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


MSC_KERNELS = (5, 7, 9)


def init_msc(rng, c_in, c_out):
    convs = []
    for k in MSC_KERNELS:
        fan = c_in * k * k
        w = Tensor(rng.normal(size=(c_out, c_in, k, k)) * math.sqrt(2.0 / fan), requires_grad=True)
        b = Tensor(np.zeros(c_out), requires_grad=True)
        convs.append((w, b))
    return MSCWeights(
        convs=convs,
        mlp_w1=xavier_uniform(rng, c_out, c_out),
        mlp_b1=Tensor(np.zeros(c_out), requires_grad=True),
        mlp_w2=xavier_uniform(rng, c_out, c_out),
        mlp_b2=Tensor(np.zeros(c_out), requires_grad=True),
    )


def multi_scale_conv(x, w):
    """Parallel 5/7/9 same-padded convolutions summed, then a residual
    per-position two-layer MLP. Zeroing mlp_w2/mlp_b2 makes the MLP the
    identity on the branch sum."""
    c_in = x.data.shape[0]
    if w.convs[0][0].shape[1] != c_in:
        raise ValueError(
            f"multi_scale_conv channel mismatch: input {c_in}, weights {w.convs[0][0].shape[1]}"
        )
    y = None
    for (cw, cb) in w.convs:
        branch = conv2d_same(x.data, cw, cb)
        y = branch if y is None else y + branch
    c_out, h, wd = y.shape
    tok = transpose(reshape(y, (c_out, h * wd)))
    hmid = silu(add_rowvec(matmul(tok, w.mlp_w1), w.mlp_b1))
    tok = tok + add_rowvec(matmul(hmid, w.mlp_w2), w.mlp_b2)
    return FeatureMap(data=reshape(transpose(tok), (c_out, h, wd)), modality=x.modality)


# ---------------------------------------------------------------------------
# fusion blocks


@dataclass
class FusionWeights:
    mamba: MambaBlockWeights


def init_fusion(rng, d_model, heads, state_dim):
    return FusionWeights(mamba=init_mamba_block(rng, d_model, heads, state_dim))


def _fuse(cam, lidar, mix):
    """Shared wiring: tokenize, concat, mix, split, reshape, residual add."""
    if cam.channels != lidar.channels:
        raise ValueError(
            f"fusion channel mismatch: camera {cam.channels} vs lidar {lidar.channels}"
        )
    c = cam.channels
    _, ch, cw = cam.data.shape
    _, lh, lw = lidar.data.shape
    n_cam, n_lid = ch * cw, lh * lw
    seq = concat([cam.tokens, lidar.tokens], axis=0)
    mixed = mix(seq)
    cam_tok, lid_tok = split(mixed, [n_cam, n_lid], axis=0)
    cam_out = tokens_to_map(cam_tok, c, ch, cw, cam.modality)
    lid_out = tokens_to_map(lid_tok, c, lh, lw, lidar.modality)
    return (
        FeatureMap(data=cam.data + cam_out.data, modality=cam.modality),
        FeatureMap(data=lidar.data + lid_out.data, modality=lidar.modality),
    )


def mamba_fusion(cam, lidar, w, chunk_size=16):
    """Mix concatenated camera+lidar tokens with one Mamba block; the mixed
    residual (block output minus its input) is added back per modality."""

    def mix(seq):
        return mamba_block(seq, w.mamba, chunk_size=chunk_size) - seq

    return _fuse(cam, lidar, mix)


@dataclass
class SelfAttentionFusionWeights:
    ln_g: Tensor
    ln_b: Tensor
    attn: "CrossAttentionWeights"


def init_transformer_fusion(rng, d_model, heads):
    return SelfAttentionFusionWeights(
        ln_g=Tensor(np.ones(d_model), requires_grad=True),
        ln_b=Tensor(np.zeros(d_model), requires_grad=True),
        attn=init_cross_attention(rng, d_model, heads),
    )


def transformer_fusion_baseline(cam, lidar, w):
    """Same wiring as mamba_fusion with a pre-norm softmax self-attention
    block as the mixer; retained for the complexity comparison."""

    def mix(seq):
        s = TokenSequence(add_rowvec(mul_rowvec(layer_norm_rows(seq), w.ln_g), w.ln_b))
        return cross_attention(s, s, w.attn).data

    return _fuse(cam, lidar, mix)


# ---------------------------------------------------------------------------
# feature state dropout


@dataclass
class FSDConfig:
    state_rate: float
    fusion_rate: float
    mask_vector: Tensor  # (D,)
    positional_embedding: Tensor  # (T, D)

    def __post_init__(self):
        for name in ("state_rate", "fusion_rate"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"FSDConfig.{name} must be in [0, 1], got {r}")


def init_fsd(rng, n_tokens, d_model, state_rate=0.5, fusion_rate=0.1):
    return FSDConfig(
        state_rate=state_rate,
        fusion_rate=fusion_rate,
        mask_vector=Tensor(rng.normal(size=d_model) * 0.02, requires_grad=True),
        positional_embedding=Tensor(rng.normal(size=(n_tokens, d_model)) * 0.02, requires_grad=True),
    )


def add_positions(tokens, cfg):
    """Add the learnable positional embedding; runs before the dropout."""
    t, d = tokens.data.shape
    if cfg.positional_embedding.shape != (t, d):
        raise ValueError(
            f"positional embedding shape {cfg.positional_embedding.shape} != tokens {(t, d)}"
        )
    return TokenSequence(tokens.data + cfg.positional_embedding, tags=list(tokens.tags))


def feature_state_dropout(tokens, cfg, training, seed):
    """Replace each token with the learned mask vector at its tag's rate.

    Expects position-augmented tokens; masked slots get the mask vector plus
    their positional row so position identity survives. In eval mode, or at
    zero rates, the input passes through untouched.
    """
    t, d = tokens.data.shape
    if not tokens.tags:
        raise ValueError("feature_state_dropout requires per-token origin tags")
    if cfg.positional_embedding.shape != (t, d):
        raise ValueError(
            f"positional embedding shape {cfg.positional_embedding.shape} != tokens {(t, d)}"
        )
    if not training:
        return tokens
    rng = np.random.default_rng(seed)
    draws = rng.random(t)
    rates = np.array(
        [cfg.state_rate if tag == EGO_TAG else cfg.fusion_rate for tag in tokens.tags]
    )
    keep = (draws >= rates).astype(float)
    if np.all(keep == 1.0):
        return tokens
    keep_m = Tensor(np.repeat(keep[:, None], d, axis=1))
    drop_m = Tensor(np.repeat((1.0 - keep)[:, None], d, axis=1))
    mask_rows = matmul(Tensor(np.ones((t, 1))), reshape(cfg.mask_vector, (1, d)))
    out = mul(tokens.data, keep_m) + mul(mask_rows + cfg.positional_embedding, drop_m)
    return TokenSequence(out, tags=list(tokens.tags))


# ---------------------------------------------------------------------------
# attention and the Mamba-Transformer decoder layer


@dataclass
class CrossAttentionWeights:
    heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor


def init_cross_attention(rng, d_model, heads):
    if d_model % heads != 0:
        raise ValueError(f"heads {heads} must divide d_model {d_model}")
    return CrossAttentionWeights(
        heads=heads,
        w_q=xavier_uniform(rng, d_model, d_model),
        w_k=xavier_uniform(rng, d_model, d_model),
        w_v=xavier_uniform(rng, d_model, d_model),
        w_o=xavier_uniform(rng, d_model, d_model),
        b_o=Tensor(np.zeros(d_model), requires_grad=True),
    )


def cross_attention(q_seq, kv_seq, w, return_weights=False):
    """Multi-head scaled dot-product attention of queries against memory."""
    d = q_seq.data.shape[1]
    heads = w.heads
    dk = d // heads
    q = matmul(q_seq.data, w.w_q)
    k = matmul(kv_seq.data, w.w_k)
    v = matmul(kv_seq.data, w.w_v)
    q_h = split(q, [dk] * heads, axis=1)
    k_h = split(k, [dk] * heads, axis=1)
    v_h = split(v, [dk] * heads, axis=1)
    outs = []
    weights = []
    scale = 1.0 / math.sqrt(dk)
    for i in range(heads):
        att = softmax_rows(mul(matmul(q_h[i], transpose(k_h[i])), Tensor(scale)))
        weights.append(att)
        outs.append(matmul(att, v_h[i]))
    out = add_rowvec(matmul(concat(outs, axis=1), w.w_o), w.b_o)
    result = TokenSequence(out, tags=list(q_seq.tags))
    if return_weights:
        return result, weights
    return result


@dataclass
class MTLayerWeights:
    mamba: MambaBlockWeights
    ln_attn_g: Tensor
    ln_attn_b: Tensor
    attn: CrossAttentionWeights
    ln_ffn_g: Tensor
    ln_ffn_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


def init_mt_layer(rng, d_model, heads, state_dim, ffn_dim=None):
    ffn_dim = ffn_dim or 2 * d_model
    return MTLayerWeights(
        mamba=init_mamba_block(rng, d_model, heads, state_dim),
        ln_attn_g=Tensor(np.ones(d_model), requires_grad=True),
        ln_attn_b=Tensor(np.zeros(d_model), requires_grad=True),
        attn=init_cross_attention(rng, d_model, heads),
        ln_ffn_g=Tensor(np.ones(d_model), requires_grad=True),
        ln_ffn_b=Tensor(np.zeros(d_model), requires_grad=True),
        ffn_w1=xavier_uniform(rng, d_model, ffn_dim),
        ffn_b1=Tensor(np.zeros(ffn_dim), requires_grad=True),
        ffn_w2=xavier_uniform(rng, ffn_dim, d_model),
        ffn_b2=Tensor(np.zeros(d_model), requires_grad=True),
    )


def mamba_transformer_decoder_layer(query, memory, w, chunk_size=16):
    """Mamba self-mixing, cross-attention to memory, position-wise FFN; all
    three sub-blocks pre-normalized with residual connections."""
    x = mamba_block(query.data, w.mamba, chunk_size=chunk_size)
    qn = TokenSequence(
        add_rowvec(mul_rowvec(layer_norm_rows(x), w.ln_attn_g), w.ln_attn_b),
        tags=list(query.tags),
    )
    x = x + cross_attention(qn, memory, w.attn).data
    fn = add_rowvec(mul_rowvec(layer_norm_rows(x), w.ln_ffn_g), w.ln_ffn_b)
    hmid = silu(add_rowvec(matmul(fn, w.ffn_w1), w.ffn_b1))
    x = x + add_rowvec(matmul(hmid, w.ffn_w2), w.ffn_b2)
    return TokenSequence(x, tags=list(query.tags))
