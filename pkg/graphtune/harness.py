"""evaluation and experiment orchestration"""

import csv
import io
import json
import logging
import math
from collections import defaultdict
from collections.abc import Iterable, Mapping
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .decoder import Decoder, DecoderConfig, FrozenDecoder, decode_greedy, load_decoder
from .graph import (
    AdjacencyMode,
    TextAttributedGraph,
    load_graph,
    make_synthetic_graph,
    split_nodes,
)
from .instructions import PromptTemplate
from .pretraining import CorpusSpec, PretrainConfig, pretrain_decoder
from .reference_results import REFERENCE_IMPROVEMENTS, ReferenceImprovement
from .selftrain import (
    PipelineState,
    RoundRecord,
    SelfTrainConfig,
    TaskContext,
    pseudo_label_precision,
    run_self_training,
)
from .training import ParameterSet, compute_graph_tokens, init_parameter_set, parameter_digest

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

VARIANTS = ("full", "supervised-only", "w/o-gnn", "w/o-ap", "w/o-cf")
ABLATION_VARIANTS = ("full", "w/o-gnn", "w/o-ap", "w/o-cf")
DEFAULT_RATIOS = (0.005, 0.01, 0.05, 0.2, 0.5, 1.0)


# ------------------------------------------------------------------------------
# metrics
# ------------------------------------------------------------------------------


def evaluate_accuracy(
    params: ParameterSet,
    graph: TextAttributedGraph,
    eval_nodes: Iterable[int],
    template: Optional[PromptTemplate] = None,
    task: Optional[TaskContext] = None,
    max_response_len: int = 4,
) -> float:
    """Returns the fraction of ``eval_nodes`` whose greedy response parses to the true label.

    Rejected and unterminated responses count as incorrect.

    Parameters
    ----------
    params : ParameterSet
        Parameters to evaluate.
    graph : TextAttributedGraph
        Graph.
    eval_nodes : Iterable[int]
        Nodes with ground truth.
    template : PromptTemplate, optional
        Prompt template. Defaults to ``PromptTemplate()``.
    task : TaskContext, optional
        Prebuilt instructions; built from ``graph`` if omitted.
    max_response_len : int, optional
        Maximum generated tokens. Defaults to ``4``.

    Returns
    -------
    float
        Accuracy in ``[0, 1]``.
    """
    nodes = sorted(eval_nodes)
    if not nodes:
        raise ValueError("Cannot evaluate on an empty node set.")
    truths = [graph.label_of(v) for v in nodes]
    if any(t is None for t in truths):
        raise ValueError("Every evaluation node needs a ground-truth label.")
    task = task or TaskContext.build(graph, params.decoder.vocab, template)
    graph_tokens = compute_graph_tokens(params, task.inputs)
    correct = 0
    for v, truth in zip(nodes, truths):
        response = decode_greedy(task.instructions[v], params.decoder, graph_tokens, max_response_len)
        correct += response.parsed_label == truth
    return correct / len(nodes)


def relative_improvement(baseline_acc: float, improved_acc: float) -> float:
    """Returns ``100 * (improved - baseline) / baseline``.

    The value is not rounded; reports format it to one decimal.
    """
    if baseline_acc <= 0:
        raise ValueError(f"Baseline accuracy must be positive, got {baseline_acc}.")
    return 100.0 * (improved_acc - baseline_acc) / baseline_acc


def recompute_reference_improvements() -> list[tuple[ReferenceImprovement, float]]:
    """Applies :func:`relative_improvement` to every published reference pair."""
    return [(ref, relative_improvement(ref.baseline, ref.improved)) for ref in REFERENCE_IMPROVEMENTS]


# ------------------------------------------------------------------------------
# experiment specification
# ------------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticGraphSpec:
    """Arguments of :func:`make_synthetic_graph`."""

    n: int = 300
    classes: int = 3
    p_in: float = 0.1
    p_out: float = 0.01
    words_per_class: int = 20
    text_len: int = 8
    class_bias: float = 0.5
    shared_words: int = 10
    seed: int = 0

    def build(self) -> TextAttributedGraph:
        return make_synthetic_graph(
            self.n,
            self.classes,
            self.p_in,
            self.p_out,
            self.words_per_class,
            self.seed,
            text_len=self.text_len,
            class_bias=self.class_bias,
            shared_words=self.shared_words,
        )

    def corpus_spec(self, template: PromptTemplate, n_examples: int, seed: int) -> CorpusSpec:
        """Pretraining corpus over the same word inventory and text statistics."""
        return CorpusSpec.from_word_pools(
            self.classes,
            self.words_per_class,
            self.shared_words,
            template=template,
            n_examples=n_examples,
            text_len=(max(1, self.text_len // 2), self.text_len),
            class_bias=self.class_bias,
            seed=seed,
        )


@dataclass(frozen=True)
class ExperimentSpec:
    """A grid of ``(seed, ratio, variant)`` cells.

    Parameters
    ----------
    graph_path : str, optional
        Graph JSON file; a synthetic graph is generated if omitted.
    synthetic : SyntheticGraphSpec, optional
        Synthetic graph arguments.
    ratios : tuple[float, ...], optional
        Labeled-to-unlabeled ratios. Defaults to ``(0.01,)``.
    variants : tuple[str, ...], optional
        Pipeline variants. Defaults to ``("full", "supervised-only")``.
    seeds : tuple[int, ...], optional
        Split and initialization seeds. Defaults to ``(1, 2, 3, 4, 5)``.
    selftrain : SelfTrainConfig, optional
        Self-training settings of the full pipeline.
    template : PromptTemplate, optional
        Prompt template.
    decoder : DecoderConfig, optional
        Decoder architecture when the decoder is pretrained on the fly.
    pretrain : PretrainConfig, optional
        Decoder pretraining settings.
    corpus_examples : int, optional
        Pretraining corpus size. Defaults to ``384``.
    decoder_seed : int, optional
        Seed of decoder pretraining. Defaults to ``0``.
    decoder_path : str, optional
        Frozen decoder checkpoint; required for graph files.
    output : str, optional
        CSV output path.
    adjacency : AdjacencyMode, optional
        Adjacency normalization. Defaults to ``symmetric``.
    gnn_hidden : tuple[int, ...], optional
        Encoder layer dims. Defaults to ``(32, 32)``.
    projector_hidden : int, optional
        Projector hidden dim. Defaults to ``64``.
    activation : str, optional
        Encoder and projector activation. Defaults to ``relu``.
    """

    graph_path: Optional[str] = None
    synthetic: SyntheticGraphSpec = field(default_factory=SyntheticGraphSpec)
    ratios: tuple[float, ...] = (0.01,)
    variants: tuple[str, ...] = ("full", "supervised-only")
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    selftrain: SelfTrainConfig = field(default_factory=SelfTrainConfig)
    template: PromptTemplate = field(default_factory=PromptTemplate)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    corpus_examples: int = 384
    decoder_seed: int = 0
    decoder_path: Optional[str] = None
    output: Optional[str] = None
    adjacency: AdjacencyMode = "symmetric"
    gnn_hidden: tuple[int, ...] = (32, 32)
    projector_hidden: int = 64
    activation: str = "relu"

    def __post_init__(self) -> None:
        if not self.ratios or not self.seeds or not self.variants:
            raise ValueError("ratios, seeds and variants must be nonempty.")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"Unknown variants {sorted(unknown)}. Must be among {', '.join(VARIANTS)}.")
        if any(r <= 0 for r in self.ratios):
            raise ValueError("ratios must be positive.")

    def load_graph(self) -> TextAttributedGraph:
        return load_graph(self.graph_path) if self.graph_path else self.synthetic.build()

    def load_decoder(self) -> FrozenDecoder:
        """Loads the decoder checkpoint or pretrains one for the synthetic graph."""
        if self.decoder_path:
            return FrozenDecoder(load_decoder(self.decoder_path))
        if self.graph_path:
            raise ValueError("A decoder checkpoint (decoder_path) is required for graph files.")
        corpus = self.synthetic.corpus_spec(self.template, self.corpus_examples, self.decoder_seed)
        return FrozenDecoder(pretrain_decoder(corpus, self.decoder, self.pretrain, self.decoder_seed))


# ------------------------------------------------------------------------------
# result rows
# ------------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    """One CSV row, keyed by ``(seed, ratio, variant, round)``.

    ``round`` is ``final`` for the model returned by the pipeline and the round
    number for intermediate evaluations.
    """

    seed: int
    ratio: float
    variant: str
    round: str
    accuracy: Optional[float] = None
    n_pseudo_accepted: int = 0
    pseudo_precision: Optional[float] = None
    relative_improvement_vs_supervised: Optional[float] = None
    n_labeled: Optional[int] = None
    n_unlabeled: Optional[int] = None
    projector_grad_norm: Optional[float] = None
    error: str = ""

    def __post_init__(self) -> None:
        if self.accuracy is not None and not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"Accuracy {self.accuracy} outside [0, 1].")

    @property
    def key(self) -> tuple:
        final = self.round == "final"
        return (self.seed, self.ratio, self.variant, final, 0 if final else int(self.round))


def _format(name: str, value: Any) -> str:
    if value is None:
        return ""
    if name == "relative_improvement_vs_supervised":
        return f"{value:.1f}"
    if name == "ratio":
        return f"{value:g}"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def format_results_csv(rows: Iterable[ResultRow]) -> str:
    """Renders rows sorted by key with fixed float formatting."""
    names = [f.name for f in fields(ResultRow)]
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=names, lineterminator="\n")
    writer.writeheader()
    for row in sorted(rows, key=lambda r: r.key):
        writer.writerow({n: _format(n, getattr(row, n)) for n in names})
    return buffer.getvalue()


def write_results_csv(path: PathLike, rows: Iterable[ResultRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_results_csv(rows), encoding="utf-8")
    logger.info("wrote results to %s", path)


def read_results_csv(path: PathLike) -> list[ResultRow]:
    """Reads rows written by :func:`write_results_csv`."""

    def opt(value: str, cast):
        return None if value == "" else cast(value)

    with Path(path).open("r", newline="", encoding="utf-8") as f:
        return [
            ResultRow(
                seed=int(r["seed"]),
                ratio=float(r["ratio"]),
                variant=r["variant"],
                round=r["round"],
                accuracy=opt(r["accuracy"], float),
                n_pseudo_accepted=int(r["n_pseudo_accepted"]),
                pseudo_precision=opt(r["pseudo_precision"], float),
                relative_improvement_vs_supervised=opt(r["relative_improvement_vs_supervised"], float),
                n_labeled=opt(r["n_labeled"], int),
                n_unlabeled=opt(r["n_unlabeled"], int),
                projector_grad_norm=opt(r["projector_grad_norm"], float),
                error=r["error"],
            )
            for r in csv.DictReader(f)
        ]


# ------------------------------------------------------------------------------
# variants and sweeps
# ------------------------------------------------------------------------------


def variant_setup(
    spec: ExperimentSpec, variant: str, feature_dim: int, decoder: Decoder, seed: int
) -> tuple[SelfTrainConfig, ParameterSet]:
    """Returns the self-training config and initial parameters of a variant.

    ``supervised-only`` runs zero rounds, ``w/o-gnn`` feeds raw features to the
    projector, ``w/o-ap`` replaces the projector by a fixed random linear map and
    ``w/o-cf`` accepts every parseable pseudo-response.
    """
    config = spec.selftrain
    use_gnn, trainable_projector = True, True
    match variant:
        case "full":
            pass
        case "supervised-only":
            config = replace(config, max_rounds=0)
        case "w/o-gnn":
            use_gnn = False
        case "w/o-ap":
            trainable_projector = False
        case "w/o-cf":
            config = replace(config, threshold=-math.inf)
        case _:
            raise ValueError(f"Unknown variant {variant!r}.")
    params = init_parameter_set(
        feature_dim,
        decoder,
        seed,
        gnn_hidden=spec.gnn_hidden,
        projector_hidden=spec.projector_hidden,
        activation=spec.activation,
        use_gnn=use_gnn,
        trainable_projector=trainable_projector,
    )
    return config, params


def run_cell(
    spec: ExperimentSpec,
    graph: TextAttributedGraph,
    decoder: Decoder,
    seed: int,
    ratio: float,
    variant: str,
) -> tuple[list[ResultRow], Optional[str]]:
    """Runs one variant on one split and evaluates it on the initially unlabeled nodes.

    Returns
    -------
    list[ResultRow]
        The final row plus one row per self-training round.
    str, optional
        Digest of the final encoder and projector.
    """
    split = split_nodes(graph, ratio, seed)
    eval_nodes = sorted(split.unlabeled)
    task = TaskContext.build(graph, decoder.vocab, spec.template, spec.adjacency)
    config, params = variant_setup(spec, variant, graph.feature_dim, decoder, seed)
    rows: list[ResultRow] = []

    def accuracy_of(p: ParameterSet) -> float:
        return evaluate_accuracy(p, graph, eval_nodes, task=task, max_response_len=config.max_response_len)

    def on_round(state: PipelineState, record: RoundRecord) -> None:
        accuracy = accuracy_of(state.params)
        rows.append(
            ResultRow(
                seed=seed,
                ratio=ratio,
                variant=variant,
                round=str(record.round),
                accuracy=accuracy,
                n_pseudo_accepted=len(state.pseudo_responses),
                pseudo_precision=pseudo_label_precision(state, graph),
                n_labeled=record.n_labeled,
                n_unlabeled=record.n_unlabeled,
            )
        )

    result = run_self_training(
        graph, split, config, seed, decoder, spec.template, params, on_round, spec.adjacency
    )
    state = result.state
    accuracy = accuracy_of(result.params)
    norm = float(np.mean(result.projector_grad_norms)) if result.projector_grad_norms else None
    if variant == "w/o-ap":
        logger.info("w/o-ap projector gradient norm: %s", norm)
    rows.append(
        ResultRow(
            seed=seed,
            ratio=ratio,
            variant=variant,
            round="final",
            accuracy=accuracy,
            n_pseudo_accepted=len(state.pseudo_responses),
            pseudo_precision=pseudo_label_precision(state, graph),
            n_labeled=len(state.labeled_dataset),
            n_unlabeled=len(state.unlabeled),
            projector_grad_norm=norm,
        )
    )
    logger.info("seed %d ratio %g %s: accuracy %.4f", seed, ratio, variant, accuracy)
    return rows, parameter_digest(result.params)


def _fill_improvements(rows: list[ResultRow]) -> list[ResultRow]:
    baselines = {
        (r.seed, r.ratio): r.accuracy
        for r in rows
        if r.variant == "supervised-only" and r.round == "final" and r.accuracy
    }
    filled = []
    for r in rows:
        base = baselines.get((r.seed, r.ratio))
        if base is not None and r.accuracy is not None:
            r = replace(r, relative_improvement_vs_supervised=relative_improvement(base, r.accuracy))
        filled.append(r)
    return filled


@dataclass
class SweepResult:
    rows: list[ResultRow]
    decoder_digest: str
    parameter_digests: dict[str, str]


def run_sweep(
    spec: ExperimentSpec,
    decoder: Optional[Decoder] = None,
    graph: Optional[TextAttributedGraph] = None,
) -> SweepResult:
    """Runs every ``(seed, ratio, variant)`` cell of ``spec``.

    A failing cell becomes a row with the exception in its ``error`` column.
    Rows are sorted by key; the CSV is written to ``spec.output`` when set.

    Parameters
    ----------
    spec : ExperimentSpec
        Experiment grid.
    decoder : Decoder, optional
        Frozen decoder; loaded or pretrained from ``spec`` if omitted.
    graph : TextAttributedGraph, optional
        Graph; loaded or generated from ``spec`` if omitted.

    Returns
    -------
    SweepResult
        Sorted rows and the digests for the run manifest.
    """
    graph = graph or spec.load_graph()
    decoder = decoder or spec.load_decoder()
    decoder_digest = decoder.digest

    rows: list[ResultRow] = []
    digests: dict[str, str] = {}
    for seed in spec.seeds:
        for ratio in spec.ratios:
            for variant in spec.variants:
                try:
                    cell_rows, digest = run_cell(spec, graph, decoder, seed, ratio, variant)
                except Exception as e:
                    logger.warning("seed %d ratio %g %s failed: %s", seed, ratio, variant, e)
                    error = f"{type(e).__name__}: {e}"
                    cell_rows, digest = [ResultRow(seed, ratio, variant, "final", error=error)], None
                rows.extend(cell_rows)
                if digest is not None:
                    digests[f"{seed}/{ratio:g}/{variant}"] = digest

    rows = sorted(_fill_improvements(rows), key=lambda r: r.key)
    if spec.output:
        write_results_csv(spec.output, rows)
    return SweepResult(rows, decoder_digest, digests)


def run_ablation(
    spec: ExperimentSpec,
    decoder: Optional[Decoder] = None,
    graph: Optional[TextAttributedGraph] = None,
) -> SweepResult:
    """Runs the full pipeline and its three ablations at the single ratio of ``spec``."""
    if len(spec.ratios) != 1:
        raise ValueError(f"An ablation runs at exactly one ratio, got {len(spec.ratios)}.")
    return run_sweep(replace(spec, variants=ABLATION_VARIANTS), decoder, graph)


def _jsonable(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, Mapping):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_manifest(path: PathLike, spec: ExperimentSpec, digests: Mapping[str, Any]) -> None:
    """Writes the run manifest: config echo, seeds and digests."""
    doc = {"config": _jsonable(asdict(spec)), "seeds": list(spec.seeds), "digests": _jsonable(dict(digests))}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2), encoding="utf-8")


def summarize(rows: Iterable[ResultRow]) -> list[dict[str, Any]]:
    """Mean final accuracy over seeds per ``(ratio, variant)``; failed cells are skipped."""
    groups: dict[tuple[float, str], list[float]] = defaultdict(list)
    for r in rows:
        if r.round == "final" and r.accuracy is not None and not r.error:
            groups[(r.ratio, r.variant)].append(r.accuracy)
    return [
        {"ratio": ratio, "variant": variant, "mean_accuracy": float(np.mean(accs)), "seeds": len(accs)}
        for (ratio, variant), accs in sorted(groups.items())
    ]


def run_threshold_sweep(
    spec: ExperimentSpec,
    thresholds: Iterable[float],
    decoder: Optional[Decoder] = None,
    graph: Optional[TextAttributedGraph] = None,
) -> dict[float, SweepResult]:
    """Runs the sweep of ``spec`` once per confidence threshold.

    All thresholds share one decoder and graph. The combined CSV is written to
    ``spec.output`` when set.
    """
    graph = graph or spec.load_graph()
    decoder = decoder or spec.load_decoder()
    results = {}
    for threshold in thresholds:
        logger.info("threshold %g", threshold)
        sub = replace(spec, selftrain=replace(spec.selftrain, threshold=threshold), output=None)
        results[threshold] = run_sweep(sub, decoder, graph)
    if spec.output:
        write_threshold_results_csv(spec.output, results)
    return results


def format_threshold_results_csv(results: Mapping[float, SweepResult]) -> str:
    """Renders the rows of every threshold, prefixed by a ``threshold`` column."""
    names = [f.name for f in fields(ResultRow)]
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=["threshold", *names], lineterminator="\n")
    writer.writeheader()
    for threshold in sorted(results):
        for row in sorted(results[threshold].rows, key=lambda r: r.key):
            writer.writerow({"threshold": f"{threshold:g}", **{n: _format(n, getattr(row, n)) for n in names}})
    return buffer.getvalue()


def write_threshold_results_csv(path: PathLike, results: Mapping[float, SweepResult]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_threshold_results_csv(results), encoding="utf-8")
    logger.info("wrote threshold results to %s", path)
