"""Command line interface: ``mcts-decode {decode,sweep,oracle,tree}``.

Exit codes are 0 on success, 1 for configuration and input errors and 2
for I/O errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import typing

from mcts_decode.base.mcts import SearchConfig, TreeArena, decode_mcts
from mcts_decode.base.oracle import exact_argmax_likelihood, exact_argmax_metric
from mcts_decode.base.utils import ConfigurationError
from mcts_decode.harness.dataset import load_dataset
from mcts_decode.harness.experiment import (
    ALGORITHM_KINDS, METRIC_NAMES, AlgorithmSpec, MetricSpec, ModelSpec, RunConfig,
    check_compatibility, run_experiment,
)
from mcts_decode.harness.report import emit_report, format_table, plot_scaling
from mcts_decode.harness.tree import export_tree

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(message)s"

USAGE_ERROR = 1


class Parser(argparse.ArgumentParser):
    """Reports usage errors with the configuration exit code, 2 means I/O."""

    def error(self, message: str) -> typing.NoReturn:
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _tokens(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid token list {text!r}") from None


def _add_model_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument("--model-seed", type=int, default=0)
    group.add_argument("--vocab-size", type=int, default=3)
    group.add_argument("--max-len", type=int, default=3)
    group.add_argument("--context-order", type=int, default=1)
    group.add_argument("--value-noise", type=float, default=0.0)
    group.add_argument("--logit-scale", type=float, default=1.0)
    group.add_argument(
        "--prior", type=float, nargs="+", default=None,
        help="fixed context-free prior instead of a seeded model",
    )


def _add_metric_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("metric")
    group.add_argument("--metric", choices=METRIC_NAMES, default="occupancy")
    group.add_argument("--max-n", type=int, default=4)
    group.add_argument("--target", type=int, default=0)
    group.add_argument("--horizon", type=int, default=3)
    group.add_argument("--embedding-seed", type=int, default=0)
    group.add_argument("--embedding-dim", type=int, default=16)
    group.add_argument("--matching", choices=("greedy", "max"), default="greedy")


def _add_search_args(group) -> None:
    group.add_argument("--c-puct", type=float, default=1.0)
    group.add_argument("--sparse-actions", type=int, default=None)
    group.add_argument("--backup", choices=("average", "max"), default="average")
    group.add_argument(
        "--root-selection", choices=("visit_count", "max_value"), default="visit_count",
    )
    group.add_argument("--value-source", choices=("model", "rollout"), default="model")


def _add_algorithm_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("algorithm")
    group.add_argument("--theta", type=float, default=0.0)
    group.add_argument("--tau", type=float, default=1.0)
    group.add_argument("--length-penalty", choices=("gnmt", "average"), default="gnmt")
    group.add_argument("--alpha", type=float, default=0.5)
    group.add_argument("--value-transform", choices=("linear", "log"), default="linear")
    group.add_argument("--value-fn", choices=("model", "rollout"), default="model")
    group.add_argument(
        "--argmax", action="store_true", help="sample_rerank: take the most likely token",
    )
    _add_search_args(group)


def _add_run_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("dataset", help="line-delimited JSON dataset")
    parser.add_argument("--config", help="JSON run configuration, overrides the flags")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("-o", "--output", help="report file, stdout if omitted")
    parser.add_argument("--format", choices=("json", "table"), default="json")
    _add_model_args(parser)
    _add_metric_args(parser)
    _add_algorithm_args(parser)


def model_spec_from_args(args: argparse.Namespace) -> ModelSpec:
    return ModelSpec(
        seed=args.model_seed,
        vocab_size=len(args.prior) if args.prior else args.vocab_size,
        max_len=args.max_len,
        context_order=args.context_order,
        value_noise=args.value_noise,
        logit_scale=args.logit_scale,
        prior=tuple(args.prior) if args.prior else None,
    )


def metric_spec_from_args(args: argparse.Namespace) -> MetricSpec:
    return MetricSpec(
        name=args.metric,
        max_n=args.max_n,
        target=args.target,
        horizon=args.horizon,
        embedding_seed=args.embedding_seed,
        embedding_dim=args.embedding_dim,
        matching=args.matching,
    )


def algorithm_spec_from_args(kind: str, args: argparse.Namespace) -> AlgorithmSpec:
    return AlgorithmSpec(
        kind=kind,
        theta=args.theta,
        tau=args.tau,
        length_penalty=args.length_penalty,
        alpha=args.alpha,
        value_transform=args.value_transform,
        value_fn=args.value_fn,
        argmax=args.argmax,
        c_puct=args.c_puct,
        num_sparse_actions=args.sparse_actions,
        backup=args.backup,
        root_selection=args.root_selection,
        value_source=args.value_source,
    )


def run_config_from_args(
    args: argparse.Namespace,
    kinds: typing.Sequence[str],
    budgets: typing.Sequence[int],
) -> RunConfig:
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            return RunConfig.from_dict(json.load(f))
    return RunConfig(
        model=model_spec_from_args(args),
        metric=metric_spec_from_args(args),
        algorithms=tuple(algorithm_spec_from_args(kind, args) for kind in kinds),
        budgets=tuple(budgets),
        seed=args.seed,
        workers=args.workers,
    )


def _write_report(report, args) -> None:
    if args.output:
        emit_report(report, args.output, args.format)
    elif args.format == "table":
        sys.stdout.write(format_table(report))
    else:
        json.dump(report.to_dict(), sys.stdout, sort_keys=True, indent=2)
        sys.stdout.write("\n")


def cmd_decode(args: argparse.Namespace) -> None:
    cfg = run_config_from_args(args, [args.algorithm], [args.budget])
    report = run_experiment(cfg, load_dataset(args.dataset))
    _write_report(report, args)


def cmd_sweep(args: argparse.Namespace) -> None:
    cfg = run_config_from_args(args, args.algorithms, args.budgets)
    report = run_experiment(cfg, load_dataset(args.dataset))
    _write_report(report, args)
    if args.plot:
        plot_scaling(report, args.plot)


def cmd_oracle(args: argparse.Namespace) -> None:
    model_spec = model_spec_from_args(args)
    metric = metric_spec_from_args(args).build()
    dataset = load_dataset(args.dataset)
    if args.objective == "metric":
        # scoring every sequence against the reference is fine offline
        check_compatibility(
            RunConfig(
                model=model_spec, metric=metric_spec_from_args(args),
                algorithms=(AlgorithmSpec("greedy"), ),
            ),
            dataset,
        )
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for instance in dataset:
            model = model_spec.build()
            if args.objective == "likelihood":
                candidate = exact_argmax_likelihood(model, instance.source)
            else:
                candidate = exact_argmax_metric(
                    model, instance.source, metric, instance.reference,
                )
            score = metric.score(
                candidate.output, source=instance.source, reference=instance.reference,
            ) if instance.reference is not None or not metric.privileged else None
            out.write(json.dumps({
                "id": instance.id,
                "output": list(candidate.output),
                "log_likelihood": candidate.log_likelihood,
                "score": score,
            }, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_tree(args: argparse.Namespace) -> None:
    model_spec = model_spec_from_args(args)
    metric_spec = metric_spec_from_args(args)
    metric = metric_spec.build()
    if args.value_source == "rollout" and metric.privileged:
        raise ConfigurationError(f"rollouts cannot use the privileged metric {metric.name!r}")
    model = model_spec.build(None if metric.privileged else metric)
    cfg = SearchConfig(
        num_simulations=args.simulations,
        num_sparse_actions=(
            model.vocab_size if args.sparse_actions is None else args.sparse_actions
        ),
        c_puct=args.c_puct,
        tau=args.tau,
        backup=args.backup,
        root_selection=args.root_selection,
        value_source=args.value_source,
    )
    captured = {}

    def _capture(position: int, arena: TreeArena, active: list[int]) -> None:
        if position == args.step:
            captured["snapshot"] = arena.snapshot(0, model)

    decode_mcts(
        model, [model.initial_state(args.source)], cfg, metric=metric, on_search=_capture,
    )
    if "snapshot" not in captured:
        raise ValueError(f"decoding finished before step {args.step}")
    export_tree(captured["snapshot"], args.output, eos_id=model.eos_id)


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(
        prog="mcts-decode",
        description="Compare decoding algorithms on synthetic sequence models.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)

    decode = subparsers.add_parser("decode", help="decode a dataset with one algorithm")
    _add_run_args(decode)
    decode.add_argument("--algorithm", choices=ALGORITHM_KINDS, default="greedy")
    decode.add_argument("--budget", type=int, default=1)
    decode.set_defaults(func=cmd_decode)

    sweep = subparsers.add_parser("sweep", help="decode over a grid of algorithms and budgets")
    _add_run_args(sweep)
    sweep.add_argument(
        "--algorithms", choices=ALGORITHM_KINDS, nargs="+", default=["greedy"],
    )
    sweep.add_argument("--budgets", type=int, nargs="+", default=[1])
    sweep.add_argument("--plot", help="write a scaling figure to this file")
    sweep.set_defaults(func=cmd_sweep)

    oracle = subparsers.add_parser("oracle", help="exact decoding baselines")
    oracle.add_argument("dataset")
    oracle.add_argument("--objective", choices=("likelihood", "metric"), default="likelihood")
    oracle.add_argument("-o", "--output")
    _add_model_args(oracle)
    _add_metric_args(oracle)
    oracle.set_defaults(func=cmd_oracle)

    tree = subparsers.add_parser("tree", help="export the search tree of one decoding step")
    tree.add_argument("--source", type=_tokens, required=True, help="e.g. '0 1 2'")
    tree.add_argument("--simulations", type=int, default=16)
    tree.add_argument("--tau", type=float, default=1.0)
    tree.add_argument("--step", type=int, default=0)
    tree.add_argument("-o", "--output", required=True, help="DOT file")
    _add_search_args(tree)
    _add_model_args(tree)
    _add_metric_args(tree)
    tree.set_defaults(func=cmd_tree)
    return parser


def main(argv: typing.Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT,
    )
    try:
        args.func(args)
    except OSError as e:
        log.error("%s", e)
        return 2
    except ValueError as e:
        log.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
