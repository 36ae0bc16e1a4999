"""Command-line entry point: ``pibp <subcommand> [options]``.

Exit status is 0 on success, 1 for domain errors (bad tree, failed
self-test, unreadable input) and 2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _load_tree(path):
    from .tree import read_newick
    return read_newick(path)


def cmd_validate_tree(args, out):
    from .tree import total_edge_length
    tree = _load_tree(args.tree)
    out.write(f"{tree.n_leaves} leaves, total length {total_edge_length(tree):.6g}, depths OK\n")
    return EXIT_OK


def cmd_sample_prior(args, out):
    from .prior import sample_generative
    if args.alpha is None or args.alpha <= 0:
        raise UsageError("--alpha must be given and positive")
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    tree = _load_tree(args.tree)
    rng = np.random.default_rng(args.seed)
    draws = [sample_generative(tree, args.alpha, rng) for _ in range(args.count)]
    if args.summary:
        ones = np.concatenate([d.bits.sum(axis=1) for d in draws]) if draws else np.zeros(0, int)
        kplus = np.array([d.n_columns for d in draws], dtype=int)
        doc = {
            "count": args.count,
            "row_ones_mean": float(ones.mean()) if ones.size else None,
            "row_ones_hist": np.bincount(ones).tolist() if ones.size else [],
            "k_plus_mean": float(kplus.mean()) if kplus.size else None,
            "k_plus_hist": np.bincount(kplus).tolist() if kplus.size else [],
        }
        text = json.dumps(doc) + "\n" if draws else ""
    else:
        text = "".join(d.to_json() + "\n" for d in draws)
    _emit(text, args.out, out)
    return EXIT_OK


def cmd_run_sampler(args, out):
    from .eba import ChoiceData, EBALikelihood
    from .sampler import FlatLikelihood, SamplerConfig, ibp_collapsed_gibbs, run_chain, write_jsonl
    try:
        config = SamplerConfig(iterations=args.iterations, burn_in=args.burn_in, thin=args.thin,
                               seed=args.seed, alpha_init=args.alpha or 1.0,
                               sample_alpha=not args.fixed_alpha)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.data:
        likelihood = EBALikelihood(ChoiceData.load(args.data), epsilon=args.epsilon)
    else:
        likelihood = FlatLikelihood()
    if args.model == "ibp":
        if args.data:
            n = likelihood.data.n_objects
        elif args.tree:
            n = _load_tree(args.tree).n_leaves
        else:
            raise UsageError("the IBP needs --data or --tree to fix the number of objects")
        samples = ibp_collapsed_gibbs(likelihood, n, config)
    else:
        if not args.tree:
            raise UsageError("--tree is required for the pIBP sampler")
        tree = _load_tree(args.tree)
        if args.data and likelihood.data.n_objects != tree.n_leaves:
            raise ValueError("data and tree disagree on the number of objects")
        samples = run_chain(tree, likelihood, config)
    if args.out:
        with open(args.out, "w") as fh:
            write_jsonl(samples, fh, likelihood)
    else:
        write_jsonl(samples, out, likelihood)
    return EXIT_OK


def cmd_run_experiment(args, out):
    from .experiments import ExperimentConfig, load_config, ranking, run_comparison
    if args.config:
        try:
            config = load_config(args.config, paper_scale=args.paper_scale)
        except OSError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
            raise UsageError(f"config error: {msg}") from exc
    else:
        config = ExperimentConfig.paper_scale() if args.paper_scale else ExperimentConfig()
    if args.seed is not None:
        config.chain_seed = args.seed
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    log = (lambda msg: sys.stderr.write(msg + "\n")) if args.verbose else None
    _, summary = run_comparison(config, args.out_dir, jobs=args.jobs, resume=args.resume, log=log)
    for level in config.obs_levels:
        out.write(f"obs_level {level}: " + " > ".join(ranking(summary, level)) + "\n")
    return EXIT_OK


def cmd_self_test(args, out):
    from .selftest import SUITES, run_suites
    names = args.suite or list(SUITES)
    for name in names:
        if name not in SUITES:
            raise UsageError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    results = run_suites(names, seed=args.seed)
    for r in results:
        out.write(r.line() + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_DOMAIN


def _emit(text, path, out):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        out.write(text)


def build_parser():
    p = argparse.ArgumentParser(prog="pibp", description="Phylogenetic IBP tools")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate-tree", help="check a Newick tree has unit leaf depths")
    s.add_argument("--tree", required=True)
    s.set_defaults(func=cmd_validate_tree)

    s = sub.add_parser("sample-prior", help="draw feature matrices from the prior")
    s.add_argument("--tree", required=True)
    s.add_argument("--alpha", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--summary", action="store_true",
                   help="print row one-count and K+ histograms instead of the draws")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample_prior)

    s = sub.add_parser("run-sampler", help="run one MCMC chain and write JSON lines")
    s.add_argument("--tree")
    s.add_argument("--data", help="choice counts as CSV or JSON; omit for a flat likelihood")
    s.add_argument("--model", choices=["pibp", "ibp"], default="pibp")
    s.add_argument("--alpha", type=float, help="initial alpha")
    s.add_argument("--fixed-alpha", action="store_true")
    s.add_argument("--epsilon", type=float, default=0.05)
    s.add_argument("--iterations", type=int, default=1000)
    s.add_argument("--burn-in", type=int, default=0)
    s.add_argument("--thin", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_run_sampler)

    s = sub.add_parser("run-experiment", help="cross-validated pIBP vs IBP comparison")
    s.add_argument("--config")
    s.add_argument("--out-dir", default="results")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int, help="overrides chain_seed")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--paper-scale", action="store_true")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_run_experiment)

    s = sub.add_parser("self-test", help="statistical self-checks")
    s.add_argument("--suite", action="append")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_self_test)
    return p


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args, out)
    except UsageError as exc:
        sys.stderr.write(f"pibp {args.command}: {exc}\n")
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"pibp {args.command}: {exc}\n")
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
