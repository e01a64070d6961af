"""Command line entry point.

One verb per artifact:

    dflsim run               execute the configured arm x seed matrix
    dflsim probe-divergence  same grid, always recording pairwise divergences
    dflsim bound-check       noisy-gradient quadratic runs against the bound
    dflsim gen-data          write dataset/partition snapshots per seed

``--config`` points at a key = value file (omitted: all defaults);
``--arm``, ``--seed``, and ``--out-dir`` override the loaded config for
quick one-off runs. Exit status is 0 only when every run completed.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import convergence, harness
from .errors import ConfigError


def _add_spec_args(sub: argparse.ArgumentParser, with_arm: bool) -> None:
    sub.add_argument("--config", help="path to a key = value experiment file")
    sub.add_argument("--seed", type=int, help="run only this seed")
    sub.add_argument("--out-dir", help="override the configured output directory")
    if with_arm:
        sub.add_argument("--arm", help="run only this algorithm arm")


def _load_spec(args) -> harness.ExperimentSpec:
    if args.config is not None:
        spec = harness.load_config(args.config)
    else:
        spec = harness.parse_config("")
    if getattr(args, "arm", None) is not None:
        spec = replace(spec, arms=(args.arm,))
    if args.seed is not None:
        spec = replace(spec, seeds=(args.seed,))
    if args.out_dir is not None:
        spec = replace(spec, out_dir=args.out_dir)
    return spec


def _report(result: harness.MatrixResult) -> int:
    for path in result.metrics_paths:
        print(f"wrote {path}")
    for path in result.divergence_paths:
        print(f"wrote {path}")
    if result.summary_path:
        print(f"wrote {result.summary_path}")
        for arm, (n, mean, std) in harness.read_summary(result.summary_path).items():
            print(f"{arm}: {100 * mean:.2f}% +- {100 * std:.2f} over {n} runs")
    for arm, seed, message in result.failures:
        print(f"FAILED {arm} seed {seed}: {message}", file=sys.stderr)
    return 0 if result.ok else 1


def _cmd_run(args) -> int:
    return _report(harness.run_matrix(_load_spec(args)))


def _cmd_probe(args) -> int:
    return _report(harness.divergence_probe(_load_spec(args)))


def _cmd_gen_data(args) -> int:
    for path in harness.write_data_snapshots(_load_spec(args)):
        print(f"wrote {path}")
    return 0


def _cmd_bound_check(args) -> int:
    problem = convergence.gen_quadratic_clients(
        args.clients,
        args.dim,
        args.mu,
        args.smoothness,
        args.heterogeneity,
        seed=args.seed,
        sigma=args.sigma,
    )
    record = convergence.mean_gap_trajectory(
        problem, args.rounds, args.n_seeds, seed0=args.seed
    )
    gaps, bounds = record.gaps, record.bounds
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "bound.tsv")
    with open(path, "w") as fh:
        fh.write("# dflsim bound v1\nround\tmean_gap\tbound\n")
        for r in range(args.rounds + 1):
            fh.write(f"{r}\t{'%.17g' % gaps[r]}\t{'%.17g' % bounds[r]}\n")
    print(f"wrote {path}")
    violations = int((gaps > bounds * (1 + 1e-9)).sum())
    print(f"rounds above bound: {violations} of {args.rounds + 1}")
    return 0 if violations == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dflsim",
        description="Desk-scale decentralized personalized FL simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute the configured experiment matrix")
    _add_spec_args(run, with_arm=True)
    run.set_defaults(func=_cmd_run)

    probe = sub.add_parser(
        "probe-divergence", help="run the matrix recording pairwise divergences"
    )
    _add_spec_args(probe, with_arm=True)
    probe.set_defaults(func=_cmd_probe)

    gen = sub.add_parser("gen-data", help="write dataset/partition snapshots")
    _add_spec_args(gen, with_arm=False)
    gen.set_defaults(func=_cmd_gen_data)

    bound = sub.add_parser(
        "bound-check", help="compare noisy quadratic descent against its bound"
    )
    bound.add_argument("--clients", type=int, default=10)
    bound.add_argument("--dim", type=int, default=8)
    bound.add_argument("--mu", type=float, default=0.1)
    bound.add_argument("--smoothness", type=float, default=1.0)
    bound.add_argument("--heterogeneity", type=float, default=1.0)
    bound.add_argument("--sigma", type=float, default=0.0)
    bound.add_argument("--rounds", type=int, default=200)
    bound.add_argument("--n-seeds", type=int, default=20)
    bound.add_argument("--seed", type=int, default=0)
    bound.add_argument("--out-dir", default="runs")
    bound.set_defaults(func=_cmd_bound_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
