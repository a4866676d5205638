"""Cost model and microbenchmarks for attention vs. state-space sequence mixing.

The analytic proxies are attention = T^2 D and ssd = T D^2 for sequence
length T and state width D. Measured multiply counts tally only matmul
scalar multiplies (M K N per product): the attention core performs exactly
2 T^2 D of them and the sequential scan form of the state-space core exactly
2 T D^2. Wall-clock scaling is measured on the vectorized chunked form,
which trades an extra 2 T Q D of work for chunk-level matmuls.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BENCH_HEADER = "# mambaplan-bench v1"


def flop_proxy(mode, t, d):
    if mode == "attention":
        return t * t * d
    if mode == "ssd":
        return t * d * d
    raise ValueError(f"unknown mode {mode!r}; valid: attention, ssd")


# ---------------------------------------------------------------------------
# cores


def attention_core(q, k, v):
    """Single-head attention; returns (out, matmul multiply count)."""
    t, d = q.shape
    scores = q @ k.T / np.sqrt(d)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v, 2 * t * t * d


def ssd_scan_core(x, b, c, decay):
    """Sequential state-space scan; returns (out, matmul multiply count).

    Per step the state picks up an outer product b_t x_t^T and emits
    c_t h, each D x D multiplies; the decay is elementwise.
    """
    t, d = x.shape
    h = np.zeros((d, d))
    y = np.empty_like(x)
    for i in range(t):
        h = decay[i] * h + np.outer(b[i], x[i])
        y[i] = c[i] @ h
    return y, 2 * t * d * d


def ssd_chunked_core(x, b, c, decay, chunk=64):
    """Chunked scan equivalent to ``ssd_scan_core`` built from matmuls."""
    t, d = x.shape
    h = np.zeros((d, d))
    y = np.empty_like(x)
    log_a = np.log(decay)
    for s0 in range(0, t, chunk):
        sl = slice(s0, min(s0 + chunk, t))
        xq, bq, cq = x[sl], b[sl], c[sl]
        cs = np.cumsum(log_a[sl])
        rel = cs[:, None] - cs[None, :]
        mask = np.tril(np.ones_like(rel))
        intra = ((cq @ bq.T) * np.exp(rel * mask) * mask) @ xq
        y[sl] = intra + (cq * np.exp(cs)[:, None]) @ h
        h = np.exp(cs[-1]) * h + (bq * np.exp(cs[-1] - cs)[:, None]).T @ xq
    return y


def _inputs(mode, t, d, rng):
    if mode == "attention":
        return tuple(rng.standard_normal((t, d)) for _ in range(3))
    x, b, c = (rng.standard_normal((t, d)) for _ in range(3))
    decay = rng.uniform(0.6, 0.99, size=t)
    return x, b, c, decay


def measured_multiplies(mode, t, d, rng=None):
    rng = rng or np.random.default_rng(0)
    if mode == "attention":
        return attention_core(*_inputs(mode, t, d, rng))[1]
    return ssd_scan_core(*_inputs(mode, t, d, rng))[1]


def measure_wall_ns(fn, reps=3):
    """Median wall time of ``fn()`` in nanoseconds."""
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times))


def _timed_call(mode, args):
    if mode == "attention":
        return lambda: attention_core(*args)
    return lambda: ssd_chunked_core(*args)


@dataclass
class BenchRow:
    mode: str
    t: int
    d: int
    flop_proxy: int
    multiplies: int
    wall_ns: float

    @property
    def ratio(self):
        return self.multiplies / self.flop_proxy


def bench_point(mode, t, d, reps=3, seed=0):
    rng = np.random.default_rng(seed)
    args = _inputs(mode, t, d, rng)
    if mode == "attention":
        mult = 2 * t * t * d
    elif mode == "ssd":
        mult = 2 * t * d * d
    else:
        raise ValueError(f"unknown mode {mode!r}; valid: attention, ssd")
    wall = measure_wall_ns(_timed_call(mode, args), reps=reps)
    return BenchRow(mode=mode, t=t, d=d, flop_proxy=flop_proxy(mode, t, d), multiplies=mult, wall_ns=wall)


def run_bench(t_list, d_list, reps=3, seed=0):
    rows = []
    for mode in ("attention", "ssd"):
        for t in t_list:
            for d in d_list:
                rows.append(bench_point(mode, int(t), int(d), reps=reps, seed=seed))
    return rows


def write_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        f.write(BENCH_HEADER + "\n")
        w = csv.writer(f)
        w.writerow(["mode", "t", "d", "flop_proxy", "measured_multiplies", "wall_ns", "ratio"])
        for r in rows:
            w.writerow([r.mode, r.t, r.d, r.flop_proxy, r.multiplies, f"{r.wall_ns:.0f}", f"{r.ratio:.6g}"])


def fit_loglog_slope(ts, walls):
    """Least-squares slope of log(wall) against log(T)."""
    return float(np.polyfit(np.log(np.asarray(ts, dtype=float)), np.log(np.asarray(walls, dtype=float)), 1)[0])


def wall_scaling_slopes(t_list=(128, 256, 512, 1024, 2048), d=32, reps=5, seed=0):
    """Empirical wall-time growth exponents in T for both mixing cores."""
    out = {}
    for mode in ("attention", "ssd"):
        walls = [bench_point(mode, int(t), d, reps=reps, seed=seed).wall_ns for t in t_list]
        out[mode] = fit_loglog_slope(t_list, walls)
    return out
