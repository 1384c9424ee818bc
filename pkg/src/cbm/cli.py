"""Command-line entry point: ``cbm {train,eval,bisim,verify,sinkhorn}``."""

from __future__ import annotations

import argparse
import csv
import os
import shutil
import sys

import numpy as np

from . import experiment
from .bisim import bisim_fixed_point
from .config import RunConfig, dumps_config, load_config
from .evaluation import DegenerateClusteringError, export_embeddings
from .mdp import load_mdp, value_iteration
from .sinkhorn import code_entropy, codes_from_distances, codes_from_logits


class CliError(Exception):
    """User-facing failure; printed without a traceback."""


def _prepare_out(path: str, overwrite: bool) -> None:
    if os.path.exists(path):
        if not os.path.isdir(path):
            raise CliError(f"{path}: exists and is not a directory")
        if os.listdir(path):
            if not overwrite:
                raise CliError(f"{path}: output directory is not empty (use --overwrite)")
            shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def _write_matrix(path, matrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.atleast_2d(matrix):
            writer.writerow([repr(float(v)) for v in row])


def _read_matrix(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    if not rows or len({len(r) for r in rows}) != 1:
        raise CliError(f"{path}: expected a rectangular numeric CSV")
    return np.array(rows)


def _load_run_config(path) -> tuple[RunConfig, str]:
    if path is None:
        config = RunConfig()
        return config, dumps_config(config)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror}") from None
    return load_config(path), text


def cmd_train(args) -> int:
    config, text = _load_run_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.objective is not None:
        config.cbm.objective = args.objective
    config.validate()
    _prepare_out(args.out, args.overwrite)
    with open(os.path.join(args.out, "config.ini"), "w") as fh:
        fh.write(text)
    with open(os.path.join(args.out, "effective.ini"), "w") as fh:
        fh.write(dumps_config(config))
    summary = experiment.train(config, args.out)
    print(f"seed {summary.seed} {summary.objective}: {summary.steps} steps, "
          f"CH {summary.ch_initial:.3f} -> {summary.ch_final:.3f}")
    return 0


def cmd_eval(args) -> int:
    for path in (args.checkpoint, args.buffer):
        if not os.path.isfile(path):
            raise CliError(f"{path}: no such file")
    try:
        ckpt = experiment.load_checkpoint(args.checkpoint)
        buffer = experiment.load_buffer(args.buffer)
    except (ValueError, KeyError) as exc:
        raise CliError(str(exc)) from None
    try:
        result = experiment.evaluate(ckpt.encoder, ckpt.prototypes, buffer)
    except DegenerateClusteringError as exc:
        raise CliError(f"CH index undefined: {exc}") from None
    _prepare_out(args.out, args.overwrite)
    with open(os.path.join(args.out, "ch_report.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "ch", "n_clusters", "n_points", "median_return_spread"])
        writer.writerow([ckpt.step, repr(result.ch), result.n_clusters, buffer.size,
                         repr(result.median_return_spread)])
    n = buffer.size
    export_embeddings(result.latents, buffer.task_labels[:n], buffer.distractor_labels[:n],
                      result.assignment, os.path.join(args.out, "embeddings.csv"))
    print(f"step {ckpt.step}: CH {result.ch:.6g} over {result.n_clusters} clusters")
    return 0


def cmd_bisim(args) -> int:
    try:
        mdp = load_mdp(args.mdp)
    except OSError as exc:
        raise CliError(f"{args.mdp}: {exc.strerror}") from None
    metric = bisim_fixed_point(mdp, args.c, tol=args.tol)
    _prepare_out(args.out, args.overwrite)
    _write_matrix(os.path.join(args.out, "distances.csv"), metric.dist)
    values = value_iteration(mdp.with_discount(args.c), tol=1e-12).values
    _write_matrix(os.path.join(args.out, "values.csv"), values[:, None])
    print(f"{mdp.n_states} states: converged in {metric.iterations} sweeps")
    return 0


def cmd_verify(args) -> int:
    c_values = [float(v) for v in args.c.split(",") if v.strip()]
    rows = experiment.verify_suite(args.n_mdps, args.max_states, args.max_actions, c_values,
                                   seed=args.seed or 0)
    _prepare_out(args.out, args.overwrite)
    experiment.write_verify_report(rows, os.path.join(args.out, "verify.csv"))
    violations = sum(r.violations for r in rows)
    print(f"{len(rows)} MDPs, {violations} violations")
    return 0 if violations == 0 else 1


def cmd_sinkhorn(args) -> int:
    if args.input is not None:
        scores = _read_matrix(args.input)
    else:
        k, b = args.random
        scores = np.random.default_rng(args.seed or 0).uniform(size=(k, b))
    iters = None if args.iters == "converged" else int(args.iters)
    solver = codes_from_distances if args.kind == "distances" else codes_from_logits
    codes = solver(scores, args.epsilon, iters)
    _prepare_out(args.out, args.overwrite)
    _write_matrix(os.path.join(args.out, "codes.csv"), codes)
    print(f"{codes.shape[0]}x{codes.shape[1]} codes, mean column entropy {code_entropy(codes):.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace a non-empty --out")
        if seed:
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="collect data and train a representation")
    p.add_argument("--config", default=None, help="run configuration file")
    p.add_argument("--objective", choices=("cbm", "dynamics_only"), default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="CH index and embeddings for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--buffer", required=True, help="buffer dump, e.g. eval_buffer.ckpt")
    common(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bisim", help="exact bisimulation metric of a finite MDP file")
    p.add_argument("--mdp", required=True)
    p.add_argument("--c", type=float, default=0.9)
    p.add_argument("--tol", type=float, default=1e-9)
    common(p, seed=False)
    p.set_defaults(func=cmd_bisim)

    p = sub.add_parser("verify", help="check value bounds on random MDPs")
    p.add_argument("--n-mdps", type=int, default=100)
    p.add_argument("--max-states", type=int, default=8)
    p.add_argument("--max-actions", type=int, default=3)
    p.add_argument("--c", default="0.5,0.9", help="comma-separated c values (gamma = c)")
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sinkhorn", help="equipartitioned codes for a score matrix")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", help="K x B CSV of distances or logits")
    source.add_argument("--random", type=int, nargs=2, metavar=("K", "B"))
    p.add_argument("--kind", choices=("distances", "logits"), default="distances")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--iters", default="3", help="Sinkhorn rounds, or 'converged'")
    common(p)
    p.set_defaults(func=cmd_sinkhorn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError) as exc:
        # ConfigError is a ValueError; messages name the offending key
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
