"""Command-line interface.

Exit codes: 0 on success, 1 when a check or run fails, 2 on usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .config import RunConfig, format_config, load_config
from .containers import ContainerError
from .metrics import evaluate_model, score_ground_truth
from .planner import ConfigError
from .scenarios import KINDS, GenerationError, generate_set, kind_counts, read_set, write_set
from .ssd import equivalence_trials
from .training import TrainingDiverged, load_checkpoint, save_checkpoint, train

EQUIV_TOL = 1e-10


def _cmd_equiv_check(args):
    worst, n_inst = equivalence_trials(
        trials=args.trials, max_t=args.max_t, seed=args.seed, inject_fault=args.inject_fault
    )
    ok = worst <= EQUIV_TOL
    print(f"equiv-check: trials={args.trials} instances={n_inst} worst_rel_err={worst:.3e} "
          f"tol={EQUIV_TOL:.0e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _cmd_bench(args):
    rows = bench_mod.run_bench(args.t_list, args.d_list, reps=args.reps, seed=args.seed)
    for r in rows:
        print(f"{r.mode:9s} T={r.t:5d} D={r.d:4d} proxy={r.flop_proxy:>12d} "
              f"multiplies={r.multiplies:>12d} ratio={r.ratio:.3f} wall={r.wall_ns/1e6:.3f}ms")
    if args.slopes:
        slopes = bench_mod.wall_scaling_slopes(tuple(args.t_list), d=args.d_list[0], reps=args.reps, seed=args.seed)
        print(f"wall-time slopes: attention={slopes['attention']:.2f} ssd={slopes['ssd']:.2f}")
    if args.out:
        bench_mod.write_csv(rows, args.out)
        print(f"wrote {args.out}")
    return 0


def _cmd_gen_data(args):
    samples = generate_set(
        seed=args.seed, count=args.count, kinds=args.kinds,
        image_shape=tuple(args.image_shape), bev_shape=tuple(args.bev_shape),
    )
    write_set(args.out, samples)
    for kind, n in sorted(kind_counts(samples).items()):
        print(f"{kind}: {n}")
    print(f"wrote {len(samples)} scenarios to {args.out}")
    return 0


def _cmd_train(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    print("run configuration:")
    print(format_config(cfg))
    samples = read_set(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, rows = train(
        samples, cfg.model, opt=cfg.optimizer,
        log_path=Path(args.out).with_suffix(".log.csv"), resume=resume,
    )
    save_checkpoint(ckpt, args.out)
    last = rows[-1] if rows else None
    if last:
        print(f"trained to step {ckpt.step}: loss={last.loss:.4f} batch_ade={last.ade:.4f}")
    print(f"wrote checkpoint {args.out}")
    return 0


def _cmd_eval(args):
    samples = read_set(args.data)
    if args.gt:
        report = score_ground_truth(samples, out_path=args.out)
    else:
        ckpt = load_checkpoint(args.ckpt)
        report = evaluate_model(ckpt, samples, out_path=args.out)
    print(f"scenarios={len(report['per_scenario'])} mean_pdms={report['mean_pdms']:.4f}")
    for key, val in sorted(report["mean_subscores"].items()):
        print(f"mean_{key}={val:.4f}")
    if args.out:
        print(f"wrote {args.out}")
    return 0


def _cmd_grad_check(args):
    from .tensor import Tensor, finite_diff_grad, backward
    from . import tensor as tt

    rng = np.random.default_rng(args.seed)
    worst = 0.0

    def check(name, fn, x0):
        nonlocal worst
        x = Tensor(x0.copy(), requires_grad=True)
        # weighted sum keeps the loss sensitive even when rows sum to a constant
        probe = Tensor(rng.normal(size=fn(Tensor(x0)).shape))
        loss_of = lambda v: tt.sum_all(tt.mul(fn(v), probe))
        backward(loss_of(x))
        fd = finite_diff_grad(loss_of, x)
        err = np.abs(fd - x.grad).max() / (np.abs(x.grad).max() + 1e-12)
        worst = max(worst, err)
        print(f"  {name:24s} rel_err={err:.3e}")

    check("silu", tt.silu, rng.normal(size=(5, 4)))
    check("softmax_rows", tt.softmax_rows, rng.normal(size=(4, 6)))
    check("layer_norm_rows", tt.layer_norm_rows, rng.normal(size=(4, 6)))
    w = Tensor(rng.normal(size=(4, 3)))
    check("matmul", lambda x: tt.matmul(x, w), rng.normal(size=(5, 4)))
    ok = worst <= 1e-5
    print(f"grad-check: worst_rel_err={worst:.3e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="mambaplan", description="State-space motion planning toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    eq = sub.add_parser("equiv-check", help="verify the three sequence-mixing modes agree")
    eq.add_argument("--trials", type=int, default=250)
    eq.add_argument("--max-t", type=int, default=64)
    eq.add_argument("--seed", type=int, default=0)
    eq.add_argument("--inject-fault", action="store_true",
                    help="corrupt one chunk boundary to prove the check can fail")
    eq.set_defaults(func=_cmd_equiv_check)

    be = sub.add_parser("bench", help="cost proxies, multiply counts, wall times")
    be.add_argument("--t-list", type=int, nargs="+", default=[31, 128, 320, 512])
    be.add_argument("--d-list", type=int, nargs="+", default=[16, 128])
    be.add_argument("--reps", type=int, default=3)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--slopes", action="store_true", help="also fit wall-time scaling exponents")
    be.add_argument("--out", type=str, default=None, help="CSV output path")
    be.set_defaults(func=_cmd_bench)

    gd = sub.add_parser("gen-data", help="generate a synthetic scenario set")
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--count", type=int, default=32)
    gd.add_argument("--kinds", type=str, nargs="+", default=list(KINDS), choices=KINDS,
                    metavar="KIND", help=f"subset of: {', '.join(KINDS)}")
    gd.add_argument("--image-shape", type=int, nargs=3, default=[3, 64, 256])
    gd.add_argument("--bev-shape", type=int, nargs=3, default=[1, 64, 64])
    gd.add_argument("--out", type=str, required=True)
    gd.set_defaults(func=_cmd_gen_data)

    tr = sub.add_parser("train", help="train the planner on a scenario set")
    tr.add_argument("--config", type=str, default=None, help="YAML run config; defaults used if omitted")
    tr.add_argument("--data", type=str, required=True)
    tr.add_argument("--out", type=str, required=True, help="checkpoint stem")
    tr.add_argument("--resume", type=str, default=None, help="checkpoint stem to continue from")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint (or ground truth) on a scenario set")
    group = ev.add_mutually_exclusive_group(required=True)
    group.add_argument("--ckpt", type=str, help="checkpoint stem")
    group.add_argument("--gt", action="store_true", help="score the ground-truth trajectories")
    ev.add_argument("--data", type=str, required=True)
    ev.add_argument("--out", type=str, default=None, help="JSON report path")
    ev.set_defaults(func=_cmd_eval)

    gc = sub.add_parser("grad-check", help="spot-check analytic gradients against finite differences")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=_cmd_grad_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContainerError, GenerationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
