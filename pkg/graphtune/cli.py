"""command-line interface"""

import argparse
import dataclasses
import logging
import sys
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Optional

from .cora import convert_cora, fetch_cora
from .decoder import save_decoder
from .graph import save_graph, split_nodes
from .harness import (
    DEFAULT_RATIOS,
    VARIANTS,
    ExperimentSpec,
    ResultRow,
    evaluate_accuracy,
    run_ablation,
    run_sweep,
    run_threshold_sweep,
    summarize,
    variant_setup,
    write_manifest,
)
from .optimizers import OPTIMIZERS
from .pretraining import CorpusSpec, pretrain_decoder
from .reference_results import REFERENCE_ABLATION
from .selftrain import TaskContext, run_self_training, write_history
from .training import load_checkpoint, parameter_digest

COMMANDS = ("gen-data", "pretrain-decoder", "train", "selftrain", "eval", "sweep", "ablate", "threshold-sweep")
DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)

_TRUE = ("", "true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")

# flag -> (ExperimentSpec field path, add_argument keywords)
SPEC_FLAGS: dict[str, tuple[str, dict[str, Any]]] = {
    # data
    "--graph": ("graph_path", dict(help="graph JSON file (synthetic graph if omitted)")),
    "--nodes": ("synthetic.n", dict(type=int, help="synthetic graph nodes")),
    "--classes": ("synthetic.classes", dict(type=int, help="synthetic graph classes")),
    "--p-in": ("synthetic.p_in", dict(type=float, help="intra-class edge probability")),
    "--p-out": ("synthetic.p_out", dict(type=float, help="inter-class edge probability")),
    "--words-per-class": ("synthetic.words_per_class", dict(type=int, help="class word pool size")),
    "--shared-words": ("synthetic.shared_words", dict(type=int, help="shared word pool size")),
    "--text-len": ("synthetic.text_len", dict(type=int, help="words per node text")),
    "--class-bias": ("synthetic.class_bias", dict(type=float, help="probability of a class word")),
    "--graph-seed": ("synthetic.seed", dict(type=int, help="synthetic graph seed")),
    "--adjacency": ("adjacency", dict(choices=["symmetric", "self_loop"], help="adjacency normalization")),
    # prompt
    "--max-text-len": ("template.max_text_len", dict(type=int, help="text tokens kept per instruction")),
    "--neighbor-tokens": ("template.neighbor_tokens", dict(type=int, help="neighbor graph tokens per instruction")),
    # decoder
    "--decoder": ("decoder_path", dict(help="frozen decoder checkpoint")),
    "--embed-dim": ("decoder.embed_dim", dict(type=int, help="decoder embedding dim")),
    "--heads": ("decoder.n_heads", dict(type=int, help="decoder attention heads")),
    "--blocks": ("decoder.n_blocks", dict(type=int, help="decoder transformer blocks")),
    "--max-len": ("decoder.max_len", dict(type=int, help="decoder context length")),
    "--mlp-ratio": ("decoder.mlp_ratio", dict(type=int, help="decoder MLP width multiple")),
    "--corpus-examples": ("corpus_examples", dict(type=int, help="pretraining corpus size")),
    "--pretrain-steps": ("pretrain.steps", dict(type=int, help="pretraining steps")),
    "--pretrain-batch-size": ("pretrain.batch_size", dict(type=int, help="pretraining batch size")),
    "--pretrain-lr": ("pretrain.learning_rate", dict(type=float, help="pretraining learning rate")),
    "--decoder-seed": ("decoder_seed", dict(type=int, help="pretraining seed")),
    "--pretrain-log-dir": ("pretrain.log_dir", dict(help="TensorBoard log directory for pretraining")),
    # encoder and projector
    "--gnn-hidden": ("gnn_hidden", dict(type=int, nargs="+", help="encoder layer dims")),
    "--projector-hidden": ("projector_hidden", dict(type=int, help="projector hidden dim")),
    "--activation": ("activation", dict(choices=["relu", "tanh", "gelu", "identity"], help="activation")),
    # fine-tuning
    "--epochs": ("selftrain.train.epochs", dict(type=int, help="full-batch steps per fit")),
    "--lr": ("selftrain.train.learning_rate", dict(type=float, help="fine-tuning learning rate")),
    "--optimizer": ("selftrain.train.optimizer", dict(choices=list(OPTIMIZERS), help="fine-tuning optimizer")),
    "--train-workers": ("selftrain.train.workers", dict(type=int, help="threads per decoder pass")),
    "--log-dir": ("selftrain.train.log_dir", dict(help="TensorBoard log directory")),
    # self-training
    "--threshold": ("selftrain.threshold", dict(type=float, help="confidence threshold")),
    "--rounds": ("selftrain.max_rounds", dict(type=int, help="maximum self-training rounds")),
    "--max-response-len": ("selftrain.max_response_len", dict(type=int, help="generated tokens per response")),
    "--workers": ("selftrain.workers", dict(type=int, help="threads for pseudo-response generation")),
    "--scores-dir": ("selftrain.scores_dir", dict(help="write scored responses per round here")),
    "--rescore": ("selftrain.rescore_accepted", dict(action="store_const", const=True, help="re-score pseudo-labels")),
    "--no-warm-start": ("selftrain.warm_start", dict(action="store_const", const=False, help="refit from scratch")),
    "--no-final-fit": ("selftrain.final_fit", dict(action="store_const", const=False, help="skip the final fit")),
    # grid
    "--seed": ("seeds", dict(type=int, nargs="+", help="split and initialization seeds")),
    "--ratio": ("ratios", dict(type=float, nargs="+", help="labeled-to-unlabeled ratios")),
    "--variants": ("variants", dict(nargs="+", choices=VARIANTS, help="pipeline variants")),
}
_ALIASES = {"--seed": ["--seeds"], "--ratio": ["--ratios"]}
_SWITCHES = {flag for flag, (_, kw) in SPEC_FLAGS.items() if kw.get("action") == "store_const"}


class ArgumentParser(argparse.ArgumentParser):
    """Reads ``@file`` arguments as ``key = value`` lines, keys being flag names."""

    def convert_arg_line_to_args(self, arg_line: str) -> list[str]:
        line = arg_line.split("#", 1)[0].strip()
        if not line:
            return []
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            self.error(f"expected 'key = value' in argument file, got {line!r}")
        flag = "--" + key.lstrip("-").replace("_", "-")
        if flag in _SWITCHES or flag == "--grid":
            if value.lower() in _TRUE:
                return [flag]
            if value.lower() in _FALSE:
                return []
            self.error(f"{key} expects true or false, got {value!r}")
        return [flag, *value.split()]


def _spec_parser() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("experiment")
    for flag, (path, kwargs) in SPEC_FLAGS.items():
        group.add_argument(flag, *_ALIASES.get(flag, []), dest=path, default=argparse.SUPPRESS, **kwargs)
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(
        prog="graphtune",
        description="Semi-supervised instruction tuning of a graph encoder and projector for a frozen decoder.",
        epilog="Arguments can be read from a file of 'key = value' lines with @FILE; later flags override it.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        fromfile_prefix_chars="@",
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)
    spec_flags = _spec_parser()

    for name in COMMANDS:
        p = sub.add_parser(name, parents=[spec_flags], formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--output", help="output file")
        if name == "gen-data":
            p.add_argument("--cora", metavar="DIR", help="download and convert Cora into DIR")
        if name in ("train", "selftrain"):
            p.add_argument("--checkpoint", help="write the encoder, projector and pipeline state here")
            p.add_argument("--history", help="write the per-round log here")
        if name == "selftrain":
            p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a self-training checkpoint")
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="encoder and projector checkpoint")
        if name in ("sweep", "ablate", "threshold-sweep"):
            p.add_argument("--manifest", help="run manifest JSON path")
        if name in ("sweep", "threshold-sweep"):
            p.add_argument("--grid", action="store_true", help="use the default ratio grid")
        if name == "threshold-sweep":
            p.add_argument(
                "--thresholds", type=float, nargs="+", default=list(DEFAULT_THRESHOLDS), help="thresholds to sweep"
            )
    return parser


def _apply(config: Any, overrides: Mapping[str, Any]) -> Any:
    nested: dict[str, dict[str, Any]] = {}
    direct: dict[str, Any] = {}
    for key, value in overrides.items():
        head, _, rest = key.partition(".")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            direct[head] = tuple(value) if isinstance(value, list) else value
    for head, sub in nested.items():
        direct[head] = _apply(getattr(config, head), sub)
    return dataclasses.replace(config, **direct)


def resolve_spec(args: argparse.Namespace) -> ExperimentSpec:
    """Applies the experiment flags given on the command line to the built-in defaults."""
    paths = {path for path, _ in SPEC_FLAGS.values()}
    overrides = {k: v for k, v in vars(args).items() if k in paths}
    if getattr(args, "grid", False):
        overrides["ratios"] = DEFAULT_RATIOS
    if args.output and args.command in ("sweep", "ablate", "threshold-sweep"):
        overrides["output"] = args.output
    return _apply(ExperimentSpec(), overrides)


def cmd_gen_data(spec: ExperimentSpec, args: argparse.Namespace) -> None:
    if args.cora:
        graph = convert_cora(*fetch_cora(args.cora))
    else:
        graph = spec.synthetic.build()
    output = args.output or "data/graph.json"
    save_graph(graph, output)
    print(f"{graph.node_count} nodes, {len(graph.edges)} edges, {len(graph.label_space)} classes -> {output}")


def cmd_pretrain_decoder(spec: ExperimentSpec, args: argparse.Namespace) -> None:
    if spec.graph_path:
        graph = spec.load_graph()
        labeled = split_nodes(graph, spec.ratios[0], spec.seeds[0]).labeled
        corpus = CorpusSpec.from_labeled_nodes(
            graph, labeled, template=spec.template, n_examples=spec.corpus_examples, seed=spec.decoder_seed
        )
    else:
        corpus = spec.synthetic.corpus_spec(spec.template, spec.corpus_examples, spec.decoder_seed)
    params = pretrain_decoder(corpus, spec.decoder, spec.pretrain, spec.decoder_seed)
    output = args.output or "checkpoints/decoder.json"
    save_decoder(params, output)
    print(f"decoder digest {params.digest} -> {output}")


def _single_cell(spec: ExperimentSpec, args: argparse.Namespace, variant: str) -> None:
    graph = spec.load_graph()
    decoder = spec.load_decoder()
    seed, ratio = spec.seeds[0], spec.ratios[0]
    split = split_nodes(graph, ratio, seed)
    config, params = variant_setup(spec, variant, graph.feature_dim, decoder, seed)
    result = run_self_training(
        graph,
        split,
        config,
        seed,
        decoder,
        spec.template,
        params,
        mode=spec.adjacency,
        checkpoint=args.checkpoint,
        resume_from=getattr(args, "resume", None),
    )
    task = TaskContext.build(graph, decoder.vocab, spec.template, spec.adjacency)
    accuracy = evaluate_accuracy(
        result.params, graph, split.unlabeled, task=task, max_response_len=config.max_response_len
    )
    if args.history:
        write_history(args.history, result.state.history)
    print(f"seed {seed} ratio {ratio:g} {variant}: accuracy {accuracy:.4f}, digest {parameter_digest(result.params)}")


def cmd_eval(spec: ExperimentSpec, args: argparse.Namespace) -> None:
    graph = spec.load_graph()
    decoder = spec.load_decoder()
    params, _, round_no = load_checkpoint(args.checkpoint, decoder)
    split = split_nodes(graph, spec.ratios[0], spec.seeds[0])
    task = TaskContext.build(graph, decoder.vocab, spec.template, spec.adjacency)
    accuracy = evaluate_accuracy(
        params, graph, split.unlabeled, task=task, max_response_len=spec.selftrain.max_response_len
    )
    print(f"round {round_no}: accuracy {accuracy:.4f} on {len(split.unlabeled)} nodes")


def _print_summary(rows: list[ResultRow], reference: bool = False, prefix: str = "") -> None:
    for entry in summarize(rows):
        line = f"{prefix}{entry['ratio']:>8g}  {entry['variant']:<16} {entry['mean_accuracy']:>8.4f}  {entry['seeds']:>5}"
        if reference:
            line += f"  {REFERENCE_ABLATION[entry['variant']] / 100:>9.4f}"
        print(line)
    for r in rows:
        if r.error:
            print(f"failed: seed {r.seed} ratio {r.ratio:g} {r.variant}: {r.error}")


def cmd_sweep(spec: ExperimentSpec, args: argparse.Namespace) -> None:
    ablate = args.command == "ablate"
    result = (run_ablation if ablate else run_sweep)(spec)
    if args.manifest:
        write_manifest(args.manifest, spec, {"decoder": result.decoder_digest, "cells": result.parameter_digests})
    print(f"{'ratio':>8}  {'variant':<16} {'accuracy':>8}  seeds" + ("  reference" if ablate else ""))
    _print_summary(result.rows, reference=ablate)


def cmd_threshold_sweep(spec: ExperimentSpec, args: argparse.Namespace) -> None:
    results = run_threshold_sweep(spec, args.thresholds)
    if args.manifest:
        cells = {f"{t:g}/{k}": d for t, r in results.items() for k, d in r.parameter_digests.items()}
        decoder_digest = next(iter(results.values())).decoder_digest
        write_manifest(args.manifest, spec, {"decoder": decoder_digest, "thresholds": args.thresholds, "cells": cells})
    print(f"{'threshold':>9}  {'ratio':>8}  {'variant':<16} {'accuracy':>8}  seeds")
    for threshold in sorted(results):
        _print_summary(results[threshold].rows, prefix=f"{threshold:>9g}  ")


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        spec = resolve_spec(args)
    except (ValueError, TypeError) as e:
        parser.error(str(e))
    for path in (spec.graph_path, spec.decoder_path, getattr(args, "resume", None)):
        if path and not Path(path).is_file():
            parser.error(f"{path} does not exist")

    match args.command:
        case "gen-data":
            cmd_gen_data(spec, args)
        case "pretrain-decoder":
            cmd_pretrain_decoder(spec, args)
        case "train":
            _single_cell(spec, args, "supervised-only")
        case "selftrain":
            _single_cell(spec, args, "full")
        case "eval":
            cmd_eval(spec, args)
        case "sweep" | "ablate":
            cmd_sweep(spec, args)
        case "threshold-sweep":
            cmd_threshold_sweep(spec, args)
    return 0
