"""End-to-end planner: dual CNN encoders with four interleaved Mamba fusion
stages, feature-state dropout over BEV+ego tokens, and a learnable query
decoded by Mamba-Transformer layers into an 8-waypoint trajectory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import blocks
from .blocks import (
    EGO_TAG,
    FUSION_TAG,
    FeatureMap,
    FSDConfig,
    TokenSequence,
    add_positions,
    feature_state_dropout,
    init_fsd,
    init_fusion,
    init_msc,
    init_mt_layer,
    mamba_fusion,
    mamba_transformer_decoder_layer,
    multi_scale_conv,
)
from .ssd import xavier_uniform
from .tensor import (
    Tensor,
    add_rowvec,
    concat,
    conv2d,
    layer_norm_rows,
    matmul,
    mean_all,
    mul,
    mul_rowvec,
    reshape,
    silu,
    split,
    tensor_abs,
    transpose,
)

N_WAYPOINTS = 8
WAYPOINT_DT = 0.5  # 2 Hz over 4 s
COMMANDS = ("turn-left", "turn-right", "lane-change", "follow")


class ConfigError(ValueError):
    """Raised when inputs do not match the model configuration."""


def wrap_angle(x):
    """Wrap angles to (-pi, pi]."""
    r = np.remainder(np.asarray(x, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(r == -np.pi, np.pi, r)


@dataclass
class EgoStatus:
    velocity: np.ndarray  # (2,) m/s
    acceleration: np.ndarray  # (2,) m/s^2
    command: np.ndarray  # one-hot over COMMANDS

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=float)
        self.acceleration = np.asarray(self.acceleration, dtype=float)
        self.command = np.asarray(self.command, dtype=float)
        if self.velocity.shape != (2,) or self.acceleration.shape != (2,):
            raise ValueError("EgoStatus velocity/acceleration must be 2-vectors")
        if self.command.shape != (len(COMMANDS),) or not (
            np.all(np.isin(self.command, (0.0, 1.0))) and self.command.sum() == 1.0
        ):
            raise ValueError("EgoStatus command must be one-hot over four commands")
        if not (np.all(np.isfinite(self.velocity)) and np.all(np.isfinite(self.acceleration))):
            raise ValueError("EgoStatus values must be finite")

    @property
    def command_name(self):
        return COMMANDS[int(np.argmax(self.command))]


@dataclass
class Trajectory:
    points: np.ndarray  # (8, 3): x [m], y [m], heading (-pi, pi]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.shape != (N_WAYPOINTS, 3):
            raise ValueError(f"Trajectory must be {N_WAYPOINTS}x3, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("Trajectory must be finite")
        h = self.points[:, 2]
        if np.any(h <= -np.pi) or np.any(h > np.pi):
            raise ValueError("Trajectory headings must be wrapped to (-pi, pi]")

    @property
    def xy(self):
        return self.points[:, :2]

    @property
    def headings(self):
        return self.points[:, 2]

    @property
    def times(self):
        return WAYPOINT_DT * np.arange(1, N_WAYPOINTS + 1)


@dataclass
class ModelConfig:
    image_shape: tuple = (3, 64, 256)
    bev_shape: tuple = (1, 64, 64)
    d_model: int = 64
    msc_channels: int = 16
    stages: int = 4
    mt_layers: int = 3
    heads: int = 4
    state_dim: int = 16
    chunk_size: int = 16
    query_tokens: int = 1
    ffn_dim: int = 0  # 0 -> 2 * d_model
    state_rate: float = 0.5
    fusion_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        self.bev_shape = tuple(int(s) for s in self.bev_shape)
        if len(self.image_shape) != 3 or len(self.bev_shape) != 3:
            raise ConfigError("image_shape and bev_shape must be (C, H, W)")
        f = 1 << self.stages
        for name, (_, h, w) in (("image_shape", self.image_shape), ("bev_shape", self.bev_shape)):
            if h % f or w % f:
                raise ConfigError(f"{name} spatial dims must be divisible by 2^stages={f}")
        if self.d_model % self.heads:
            raise ConfigError(f"heads {self.heads} must divide d_model {self.d_model}")
        for name in ("d_model", "msc_channels", "stages", "mt_layers", "heads",
                     "state_dim", "chunk_size", "query_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelConfig.{name} must be positive")

    @property
    def ffn_width(self):
        return self.ffn_dim or 2 * self.d_model

    @property
    def bev_token_count(self):
        _, h, w = self.bev_shape
        f = 1 << self.stages
        return (h // f) * (w // f)

    @property
    def memory_tokens(self):
        return self.bev_token_count + 3  # velocity, acceleration, command tokens

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["bev_shape"] = list(self.bev_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# weights


@dataclass
class StageConvWeights:
    w: Tensor
    b: Tensor
    ln_g: Tensor
    ln_b: Tensor


@dataclass
class ModelWeights:
    msc_cam: blocks.MSCWeights
    msc_lidar: blocks.MSCWeights
    stage_cam: list
    stage_lidar: list
    fusions: list
    fsd: FSDConfig
    ego_w_vel: Tensor
    ego_b_vel: Tensor
    ego_w_acc: Tensor
    ego_b_acc: Tensor
    ego_w_cmd: Tensor
    ego_b_cmd: Tensor
    query: Tensor
    mt_layers: list
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor


def _init_stage_conv(rng, c_in, c_out):
    fan = c_in * 9
    return StageConvWeights(
        w=Tensor(rng.normal(size=(c_out, c_in, 3, 3)) * np.sqrt(2.0 / fan), requires_grad=True),
        b=Tensor(np.zeros(c_out), requires_grad=True),
        ln_g=Tensor(np.ones(c_out), requires_grad=True),
        ln_b=Tensor(np.zeros(c_out), requires_grad=True),
    )


def init_model(cfg):
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_model
    stage_cam, stage_lidar, fusions = [], [], []
    c_cam, c_lid = cfg.msc_channels, cfg.msc_channels
    for _ in range(cfg.stages):
        stage_cam.append(_init_stage_conv(rng, c_cam, d))
        stage_lidar.append(_init_stage_conv(rng, c_lid, d))
        fusions.append(init_fusion(rng, d, cfg.heads, cfg.state_dim))
        c_cam = c_lid = d
    return ModelWeights(
        msc_cam=init_msc(rng, cfg.image_shape[0], cfg.msc_channels),
        msc_lidar=init_msc(rng, cfg.bev_shape[0], cfg.msc_channels),
        stage_cam=stage_cam,
        stage_lidar=stage_lidar,
        fusions=fusions,
        fsd=init_fsd(rng, cfg.memory_tokens, d, cfg.state_rate, cfg.fusion_rate),
        ego_w_vel=xavier_uniform(rng, 2, d),
        ego_b_vel=Tensor(np.zeros(d), requires_grad=True),
        ego_w_acc=xavier_uniform(rng, 2, d),
        ego_b_acc=Tensor(np.zeros(d), requires_grad=True),
        ego_w_cmd=xavier_uniform(rng, len(COMMANDS), d),
        ego_b_cmd=Tensor(np.zeros(d), requires_grad=True),
        query=Tensor(rng.normal(size=(cfg.query_tokens, d)) * 0.02, requires_grad=True),
        mt_layers=[init_mt_layer(rng, d, cfg.heads, cfg.state_dim, cfg.ffn_width)
                   for _ in range(cfg.mt_layers)],
        head_w1=xavier_uniform(rng, d, cfg.ffn_width),
        head_b1=Tensor(np.zeros(cfg.ffn_width), requires_grad=True),
        head_w2=xavier_uniform(rng, cfg.ffn_width, 3 * N_WAYPOINTS),
        head_b2=Tensor(np.zeros(3 * N_WAYPOINTS), requires_grad=True),
    )


def named_tensors(obj, prefix=""):
    """Deterministic (name, Tensor) walk over learnable weights."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}")


def param_count(weights):
    return sum(t.size for _, t in named_tensors(weights))


# ---------------------------------------------------------------------------
# forward


def _stage_conv(fm, w):
    y = conv2d(fm.data, w.w, w.b, stride=2)
    c, h, wd = y.shape
    tok = transpose(reshape(y, (c, h * wd)))
    tok = add_rowvec(mul_rowvec(layer_norm_rows(tok), w.ln_g), w.ln_b)
    y = reshape(transpose(silu(tok)), (c, h, wd))
    return FeatureMap(data=y, modality=fm.modality)


def encode_stage(cam, lidar, stage_cam_w, stage_lidar_w, fusion_w, chunk_size):
    cam = _stage_conv(cam, stage_cam_w)
    lidar = _stage_conv(lidar, stage_lidar_w)
    return mamba_fusion(cam, lidar, fusion_w, chunk_size=chunk_size)


def _ego_tokens(weights, ego):
    vel = add_rowvec(matmul(Tensor(ego.velocity.reshape(1, 2)), weights.ego_w_vel), weights.ego_b_vel)
    acc = add_rowvec(matmul(Tensor(ego.acceleration.reshape(1, 2)), weights.ego_w_acc), weights.ego_b_acc)
    cmd = add_rowvec(matmul(Tensor(ego.command.reshape(1, -1)), weights.ego_w_cmd), weights.ego_b_cmd)
    return concat([vel, acc, cmd], axis=0)


def forward_tensor(weights, cfg, camera, bev, ego, training=False, seed=0):
    """Full forward pass; returns the (8, 3) waypoint tensor (differentiable)."""
    camera = camera if isinstance(camera, Tensor) else Tensor(camera)
    bev = bev if isinstance(bev, Tensor) else Tensor(bev)
    if camera.shape != cfg.image_shape:
        raise ConfigError(f"camera shape {camera.shape} != config {cfg.image_shape}")
    if bev.shape != cfg.bev_shape:
        raise ConfigError(f"bev shape {bev.shape} != config {cfg.bev_shape}")
    cam = multi_scale_conv(FeatureMap(camera, "camera"), weights.msc_cam)
    lid = multi_scale_conv(FeatureMap(bev, "lidar"), weights.msc_lidar)
    for s in range(cfg.stages):
        cam, lid = encode_stage(
            cam, lid, weights.stage_cam[s], weights.stage_lidar[s],
            weights.fusions[s], cfg.chunk_size,
        )
    bev_tokens = lid.tokens
    n_bev = bev_tokens.shape[0]
    tokens = TokenSequence(
        concat([bev_tokens, _ego_tokens(weights, ego)], axis=0),
        tags=[FUSION_TAG] * n_bev + [EGO_TAG] * 3,
    )
    memory = feature_state_dropout(add_positions(tokens, weights.fsd), weights.fsd, training, seed)
    q = TokenSequence(weights.query, tags=[])
    for layer in weights.mt_layers:
        q = mamba_transformer_decoder_layer(q, memory, layer, chunk_size=cfg.chunk_size)
    # the last query position sees every earlier one through the causal mix
    q0 = q.data if cfg.query_tokens == 1 else split(q.data, [cfg.query_tokens - 1, 1], axis=0)[1]
    hmid = silu(add_rowvec(matmul(q0, weights.head_w1), weights.head_b1))
    out = reshape(add_rowvec(matmul(hmid, weights.head_w2), weights.head_b2), (N_WAYPOINTS, 3))
    xy, theta = split(out, [2, 1], axis=1)
    # wrap via a detached correction: identity gradient almost everywhere
    theta = theta + Tensor(wrap_angle(theta.data) - theta.data)
    return concat([xy, theta], axis=1)


def forward(weights, cfg, camera, bev, ego, training=False, seed=0):
    return Trajectory(forward_tensor(weights, cfg, camera, bev, ego, training, seed).data)


# ---------------------------------------------------------------------------
# loss / metrics


def imitation_loss(pred, gt, heading_weight=1.0):
    """Mean absolute error over x, y, and wrapped heading difference."""
    gt = gt.points if isinstance(gt, Trajectory) else np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"loss shape mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - Tensor(gt)
    dx, dy, dth = split(diff, [1, 1, 1], axis=1)
    dth = dth + Tensor(wrap_angle(dth.data) - dth.data)
    terms = mean_all(tensor_abs(dx)) + mean_all(tensor_abs(dy)) + mul(
        mean_all(tensor_abs(dth)), Tensor(heading_weight)
    )
    return mul(terms, Tensor(1.0 / (2.0 + heading_weight)))


def ade(pred, gt):
    """Average displacement error [m] between waypoint sequences."""
    p = pred.points if isinstance(pred, Trajectory) else np.asarray(pred, dtype=float)
    g = gt.points if isinstance(gt, Trajectory) else np.asarray(gt, dtype=float)
    return float(np.mean(np.linalg.norm(p[:, :2] - g[:, :2], axis=1)))
