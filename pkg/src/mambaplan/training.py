"""AdamW training loop, checkpointing, and batch inference."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .containers import ContainerError, read_container, write_container
from .planner import (
    ModelConfig,
    ade,
    forward,
    forward_tensor,
    imitation_loss,
    init_model,
    named_tensors,
)
from .tensor import Tensor, backward, mul

CHECKPOINT_VERSION = 1
TRAIN_LOG_HEADER = "# mambaplan-train-log v1"


class TrainingDiverged(RuntimeError):
    """Raised when the loss or an update becomes non-finite."""


@dataclass
class OptimizerParams:
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    max_steps: int = 2000
    stop_ade: float = 0.0  # 0 disables the early-stop check
    eval_every: int = 20


class AdamW:
    """Adam with decoupled weight decay over named parameter tensors."""

    def __init__(self, params, lr, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1**self.t)
            vhat = self.v[i] / (1 - b2**self.t)
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if not np.all(np.isfinite(p.data)):
                raise TrainingDiverged(f"non-finite update in parameter {name!r} at step {self.t}")

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: object
    step: int = 0
    seed: int = 0


@dataclass
class LogRow:
    step: int
    epoch: int
    loss: float
    ade: float
    wall_ms: float


def save_checkpoint(ckpt, stem):
    arrays = {name: t.data for name, t in named_tensors(ckpt.weights)}
    meta = {
        "kind": "checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
    }
    write_container(stem, arrays, meta=meta)


def load_checkpoint(stem):
    arrays, meta = read_container(stem)
    if not meta or meta.get("kind") != "checkpoint":
        raise ContainerError(f"{stem} is not a checkpoint container")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ContainerError(f"unsupported checkpoint version {meta.get('checkpoint_version')!r}")
    cfg = ModelConfig.from_dict(meta["config"])
    weights = init_model(cfg)
    names = dict(named_tensors(weights))
    missing = set(names) - set(arrays)
    extra = set(arrays) - set(names)
    if missing or extra:
        raise ContainerError(f"checkpoint weight mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
    for name, t in names.items():
        if arrays[name].shape != t.data.shape:
            raise ContainerError(f"checkpoint entry {name!r} has shape {arrays[name].shape}, expected {t.data.shape}")
        t.data[...] = arrays[name]
    return Checkpoint(config=cfg, weights=weights, step=int(meta["step"]), seed=int(meta["seed"]))


def _fsd_seed(base_seed, step, idx):
    return (base_seed * 1_000_003 + step * 9_176 + idx * 31) % (2**32)


def full_set_ade(weights, cfg, samples):
    total = 0.0
    for s in samples:
        pred = forward(weights, cfg, s.camera, s.bev, s.ego, training=False)
        total += ade(pred, s.gt)
    return total / len(samples)


def train(samples, cfg, opt=None, log_path=None, resume=None):
    """Minibatch AdamW imitation training; deterministic given cfg.seed.

    Returns (Checkpoint, [LogRow]). Aborts with TrainingDiverged on
    non-finite loss or updates.
    """
    if not samples:
        raise ValueError("train requires a non-empty dataset")
    opt = opt or OptimizerParams()
    if resume is not None:
        weights, start_step = resume.weights, resume.step
    else:
        weights, start_step = init_model(cfg), 0
    optimizer = AdamW(
        named_tensors(weights), lr=opt.lr, weight_decay=opt.weight_decay,
        beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
    )
    rows = []
    step = start_step
    epoch = 0
    n = len(samples)
    bs = min(opt.batch_size, n)
    reached_stop = False
    while step < start_step + opt.max_steps and not reached_stop:
        order = np.random.default_rng((cfg.seed, epoch)).permutation(n)
        for lo in range(0, n - bs + 1, bs):
            t0 = time.perf_counter()
            batch = [samples[i] for i in order[lo : lo + bs]]
            losses = None
            preds = []
            try:
                for i, s in enumerate(batch):
                    out = forward_tensor(
                        weights, cfg, s.camera, s.bev, s.ego,
                        training=True, seed=_fsd_seed(cfg.seed, step, i),
                    )
                    preds.append(out.data)
                    loss_i = imitation_loss(out, s.gt)
                    losses = loss_i if losses is None else losses + loss_i
                total = mul(losses, Tensor(1.0 / len(batch)))
                backward(total)
                optimizer.step()
            except ValueError as e:
                raise TrainingDiverged(f"non-finite loss at step {step}: {e}") from e
            finally:
                optimizer.zero_grad()
            step += 1
            batch_ade = float(np.mean([ade(p, s.gt) for p, s in zip(preds, batch)]))
            rows.append(LogRow(
                step=step, epoch=epoch, loss=float(total.data),
                ade=batch_ade, wall_ms=(time.perf_counter() - t0) * 1e3,
            ))
            if opt.stop_ade > 0 and step % opt.eval_every == 0:
                if full_set_ade(weights, cfg, samples) < opt.stop_ade:
                    reached_stop = True
                    break
            if step >= start_step + opt.max_steps:
                break
        epoch += 1
    if log_path is not None:
        write_train_log(log_path, rows)
    return Checkpoint(config=cfg, weights=weights, step=step, seed=cfg.seed), rows


def write_train_log(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        f.write(TRAIN_LOG_HEADER + "\n")
        writer = csv.writer(f)
        writer.writerow(["step", "epoch", "loss", "ade", "wall_ms"])
        for r in rows:
            writer.writerow([r.step, r.epoch, f"{r.loss:.9g}", f"{r.ade:.9g}", f"{r.wall_ms:.3f}"])


def infer_batch(ckpt, samples):
    """Order-preserving eval-mode inference for a list of scenario samples."""
    cfg = ckpt.config
    out = []
    for s in samples:
        if tuple(s.camera.shape) != cfg.image_shape or tuple(s.bev.shape) != cfg.bev_shape:
            from .planner import ConfigError

            raise ConfigError(
                f"scenario rasters {s.camera.shape}/{s.bev.shape} do not match "
                f"checkpoint config {cfg.image_shape}/{cfg.bev_shape}"
            )
        out.append(forward(ckpt.weights, cfg, s.camera, s.bev, s.ego, training=False))
    return out
