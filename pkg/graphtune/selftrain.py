"""iterative self-training with confidence-filtered pseudo-responses"""

import csv
import json
import logging
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .confidence import ScoredResponse, filter_confident, write_scored_csv
from .decoder import Decoder, decode_greedy
from .errors import InvariantViolationError
from .graph import AdjacencyMode, DataSplit, TextAttributedGraph
from .instructions import InstructionExample, PromptTemplate, build_instruction, handcrafted_response
from .tokenizer import Vocabulary
from .tracking import ScalarLogger
from .optimizers import Optimizer
from .training import (
    GraphInputs,
    ParameterSet,
    TrainConfig,
    compute_graph_tokens,
    fit,
    init_parameter_set,
    read_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SelfTrainConfig:
    """Self-training settings.

    Parameters
    ----------
    threshold : float, optional
        Confidence threshold; a response is selected if its confidence is
        strictly greater. Defaults to ``0.7``.
    max_rounds : int, optional
        Maximum number of self-training rounds. Defaults to ``3``.
    warm_start : bool, optional
        Whether each fit continues from the previous parameters instead of the
        initial ones. Defaults to ``True``.
    final_fit : bool, optional
        Whether to fit once more on the final labeled set. Defaults to ``True``.
    rescore_accepted : bool, optional
        Extension: re-score pseudo-labeled nodes every round and replace their
        target when a confident response names another class. Defaults to ``False``.
    max_response_len : int, optional
        Maximum generated tokens per response. Defaults to ``4``.
    workers : int, optional
        Threads for pseudo-response generation. Defaults to ``1``.
    scores_dir : str, optional
        Directory receiving one scored-response CSV per round. Defaults to ``None``.
    train : TrainConfig, optional
        Fine-tuning settings of every fit.
    """

    threshold: float = 0.7
    max_rounds: int = 3
    warm_start: bool = True
    final_fit: bool = True
    rescore_accepted: bool = False
    max_response_len: int = 4
    workers: int = 1
    scores_dir: Optional[str] = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if self.max_rounds < 0:
            raise ValueError(f"max_rounds must be nonnegative, got {self.max_rounds}.")
        if self.workers < 1:
            raise ValueError("workers must be at least 1.")
        if math.isnan(self.threshold):
            raise ValueError("threshold must not be NaN.")


@dataclass(frozen=True)
class RoundRecord:
    """Per-round log entry."""

    round: int
    n_labeled: int
    n_unlabeled: int
    n_selected: int
    mean_confidence: Optional[float]
    min_confidence: Optional[float]
    max_confidence: Optional[float]
    pseudo_precision: Optional[float]
    first_loss: float
    final_loss: float
    n_relabeled: int = 0


@dataclass(frozen=True)
class TaskContext:
    """Graph, model inputs and the instruction of every node."""

    graph: TextAttributedGraph
    inputs: GraphInputs
    template: PromptTemplate
    vocab: Vocabulary
    instructions: tuple[InstructionExample, ...]

    @classmethod
    def build(
        cls,
        graph: TextAttributedGraph,
        vocab: Vocabulary,
        template: Optional[PromptTemplate] = None,
        mode: AdjacencyMode = "symmetric",
    ) -> "TaskContext":
        template = template or PromptTemplate()
        instructions = tuple(build_instruction(v, graph, template, vocab) for v in range(graph.node_count))
        return cls(graph, GraphInputs.from_graph(graph, mode), template, vocab, instructions)

    def target_example(self, node: int, label: int, provenance: str) -> InstructionExample:
        response = handcrafted_response(label, self.template, self.vocab)
        return self.instructions[node].with_target(response, provenance)


@dataclass(frozen=True)
class PipelineState:
    """State of the self-training loop at a round boundary.

    Parameters
    ----------
    labeled_dataset : tuple[InstructionExample, ...]
        Ground-truth examples followed by accepted pseudo-examples.
    unlabeled : frozenset[int]
        Nodes without a training target.
    selected_last_round : frozenset[int]
        Nodes accepted in the last round.
    round : int
        Completed rounds.
    params : ParameterSet
        Parameters after the latest fit.
    history : tuple[RoundRecord, ...]
        One record per completed round.
    pseudo_responses : Mapping[int, ScoredResponse]
        Raw accepted response of every pseudo-labeled node.
    """

    labeled_dataset: tuple[InstructionExample, ...]
    unlabeled: frozenset[int]
    selected_last_round: frozenset[int]
    round: int
    params: ParameterSet
    history: tuple[RoundRecord, ...] = ()
    pseudo_responses: Mapping[int, ScoredResponse] = field(default_factory=dict)

    @property
    def labeled_nodes(self) -> list[int]:
        return [ex.node_id for ex in self.labeled_dataset]

    @property
    def pseudo_labels(self) -> dict[int, int]:
        return {v: r.parsed_label for v, r in self.pseudo_responses.items()}

    def dump(self) -> dict[str, Any]:
        """JSON-serialisable summary for diagnostics."""
        return {
            "round": self.round,
            "labeled": self.labeled_nodes,
            "provenance": [ex.provenance for ex in self.labeled_dataset],
            "unlabeled": sorted(self.unlabeled),
            "selected_last_round": sorted(self.selected_last_round),
            "history": [asdict(r) for r in self.history],
        }


@dataclass(frozen=True)
class SelfTrainResult:
    """Final parameters and the final pipeline state."""

    params: ParameterSet
    state: PipelineState
    final_losses: tuple[float, ...] = ()
    projector_grad_norms: tuple[float, ...] = ()


def initial_state(task: TaskContext, split: DataSplit, params: ParameterSet) -> PipelineState:
    """Builds the ground-truth labeled set from the labeled side of ``split``."""
    dataset = []
    for v in sorted(split.labeled):
        label = task.graph.label_of(v)
        if label is None:
            raise ValueError(f"Labeled node {v} has no ground-truth label.")
        dataset.append(task.target_example(v, label, "ground-truth"))
    return PipelineState(tuple(dataset), frozenset(split.unlabeled), frozenset(), 0, params)


def generate_pseudo_set(
    state: PipelineState,
    task: TaskContext,
    params: Optional[ParameterSet] = None,
    max_response_len: int = 4,
    workers: int = 1,
    nodes: Optional[Iterable[int]] = None,
) -> list[ScoredResponse]:
    """Generates and scores one pseudo-response per unlabeled node.

    The parameters stay fixed for the whole scan; results are ordered by node id
    regardless of ``workers``.

    Parameters
    ----------
    state : PipelineState
        Current state.
    task : TaskContext
        Graph and instructions.
    params : ParameterSet, optional
        Parameters to generate with. Defaults to ``state.params``.
    max_response_len : int, optional
        Maximum generated tokens. Defaults to ``4``.
    workers : int, optional
        Threads used for decoding. Defaults to ``1``.
    nodes : Iterable[int], optional
        Nodes to score. Defaults to ``state.unlabeled``.

    Returns
    -------
    list[ScoredResponse]
        Scored responses sorted by node id.
    """
    params = params or state.params
    targets = sorted(state.unlabeled if nodes is None else nodes)
    if not targets:
        return []
    graph_tokens = compute_graph_tokens(params, task.inputs)

    def score(v: int) -> ScoredResponse:
        return decode_greedy(task.instructions[v], params.decoder, graph_tokens, max_response_len)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(score, targets))
    return [score(v) for v in targets]


def augment(state: PipelineState, selected: Sequence[ScoredResponse], task: TaskContext) -> PipelineState:
    """Moves the selected nodes from the unlabeled set into the labeled dataset.

    Every selected node receives the handcrafted response of its parsed label as
    target, with provenance ``pseudo``. The round counter advances by one.

    Raises
    ------
    InvariantViolationError
        If a selected node is not unlabeled or its response has no parsed label.
    """
    added, pseudo = [], dict(state.pseudo_responses)
    for r in sorted(selected, key=lambda r: r.node_id):
        if r.node_id not in state.unlabeled:
            raise InvariantViolationError(f"selected node {r.node_id} is not unlabeled", state.dump())
        if r.parsed_label is None:
            raise InvariantViolationError(f"selected node {r.node_id} has no parsed label", state.dump())
        added.append(task.target_example(r.node_id, r.parsed_label, "pseudo"))
        pseudo[r.node_id] = r
    ids = frozenset(r.node_id for r in selected)
    if len(ids) != len(selected):
        raise InvariantViolationError("a node was selected twice", state.dump())
    return replace(
        state,
        labeled_dataset=state.labeled_dataset + tuple(added),
        unlabeled=state.unlabeled - ids,
        selected_last_round=ids,
        round=state.round + 1,
        pseudo_responses=pseudo,
    )


def rescore_accepted(
    state: PipelineState, task: TaskContext, threshold: float, max_response_len: int = 4, workers: int = 1
) -> tuple[PipelineState, int]:
    """Extension: re-scores pseudo-labeled nodes and relabels confident disagreements.

    Ground-truth examples are never touched.

    Returns
    -------
    PipelineState
        State with updated pseudo-targets.
    int
        Number of relabeled nodes.
    """
    scored = generate_pseudo_set(
        state, task, max_response_len=max_response_len, workers=workers, nodes=state.pseudo_responses
    )
    changed = {
        r.node_id: r
        for r in filter_confident(scored, threshold)
        if r.parsed_label != state.pseudo_responses[r.node_id].parsed_label
    }
    if not changed:
        return state, 0
    dataset = tuple(
        task.target_example(ex.node_id, changed[ex.node_id].parsed_label, "pseudo")
        if ex.provenance == "pseudo" and ex.node_id in changed
        else ex
        for ex in state.labeled_dataset
    )
    pseudo = {**state.pseudo_responses, **changed}
    return replace(state, labeled_dataset=dataset, pseudo_responses=pseudo), len(changed)


def check_invariants(
    state: PipelineState,
    previous: PipelineState,
    node_count: int,
    ground_truth: Sequence[InstructionExample],
    max_rounds: int,
    decoder_digest: str,
) -> None:
    """Verifies the round-boundary invariants of the pipeline.

    Raises
    ------
    InvariantViolationError
        With a state dump, if any invariant is broken.
    """

    def fail(message: str) -> None:
        logger.error("invariant violated: %s", message)
        raise InvariantViolationError(message, state.dump())

    labeled = state.labeled_nodes
    if len(set(labeled)) != len(labeled):
        fail("a node appears twice in the labeled dataset")
    if set(labeled) & state.unlabeled:
        fail("labeled and unlabeled node sets overlap")
    covered = set(labeled) | state.unlabeled
    if len(labeled) + len(state.unlabeled) != node_count or covered != set(range(node_count)):
        fail(f"{len(labeled)} labeled + {len(state.unlabeled)} unlabeled nodes do not cover {node_count} nodes")
    if len(labeled) < len(previous.labeled_dataset):
        fail("the labeled dataset shrank")
    if state.round > max_rounds:
        fail(f"round {state.round} exceeds the maximum of {max_rounds}")
    if tuple(state.labeled_dataset[: len(ground_truth)]) != tuple(ground_truth):
        fail("a ground-truth example was removed or overwritten")
    if state.params.decoder.digest != decoder_digest:
        fail("decoder digest changed")


def _precision(graph: TextAttributedGraph, responses: Iterable[ScoredResponse]) -> Optional[float]:
    responses = list(responses)
    truths = [graph.label_of(r.node_id) for r in responses]
    if not responses or any(t is None for t in truths):
        return None
    return float(np.mean([r.parsed_label == t for r, t in zip(responses, truths)]))


def pseudo_label_precision(state: PipelineState, graph: TextAttributedGraph) -> Optional[float]:
    """Fraction of all accepted pseudo-labels that match the ground truth."""
    return _precision(graph, state.pseudo_responses.values())


def _example_label(ex: InstructionExample, state: PipelineState, graph: TextAttributedGraph) -> int:
    if ex.provenance == "pseudo":
        return state.pseudo_responses[ex.node_id].parsed_label
    return graph.label_of(ex.node_id)


def save_state(
    path: PathLike,
    state: PipelineState,
    graph: TextAttributedGraph,
    optimizer: Optional[Optimizer] = None,
    final: bool = False,
) -> None:
    """Checkpoints the pipeline state at a round boundary.

    Besides the parameters and the optimizer state of the latest fit, the
    labeled dataset, the unlabeled set, the accepted responses and the history
    are stored so that :func:`restore_state` can continue the loop.
    """
    doc = {
        "labeled": [(ex.node_id, _example_label(ex, state, graph), ex.provenance) for ex in state.labeled_dataset],
        "unlabeled": sorted(state.unlabeled),
        "selected_last_round": sorted(state.selected_last_round),
        "pseudo_responses": [asdict(r) for _, r in sorted(state.pseudo_responses.items())],
        "history": [asdict(r) for r in state.history],
        "final": final,
    }
    save_checkpoint(path, state.params, optimizer, state.round, doc)


def _scored_from_dict(doc: Mapping[str, Any]) -> ScoredResponse:
    return ScoredResponse(**{**doc, "tokens": tuple(doc["tokens"]), "token_logprobs": tuple(doc["token_logprobs"])})


def restore_state(path: PathLike, task: TaskContext, decoder: Decoder) -> tuple[PipelineState, bool]:
    """Rebuilds the pipeline state written by :func:`save_state`.

    Returns
    -------
    PipelineState
        State at the saved round boundary, bound to ``decoder``.
    bool
        Whether the checkpoint was taken after the final fit.

    Raises
    ------
    ValueError
        If the checkpoint holds no pipeline state.
    """
    ckpt = read_checkpoint(path, decoder)
    doc = ckpt.state
    if doc is None or "labeled" not in doc:
        raise ValueError(f"Checkpoint {path} holds no self-training state.")
    dataset = tuple(task.target_example(v, label, provenance) for v, label, provenance in doc["labeled"])
    state = PipelineState(
        labeled_dataset=dataset,
        unlabeled=frozenset(doc["unlabeled"]),
        selected_last_round=frozenset(doc["selected_last_round"]),
        round=ckpt.round_no,
        params=ckpt.params,
        history=tuple(RoundRecord(**r) for r in doc["history"]),
        pseudo_responses={r["node_id"]: _scored_from_dict(r) for r in doc["pseudo_responses"]},
    )
    return state, bool(doc["final"])


def run_self_training(
    graph: TextAttributedGraph,
    split: DataSplit,
    config: SelfTrainConfig,
    seed: int,
    decoder: Decoder,
    template: Optional[PromptTemplate] = None,
    params: Optional[ParameterSet] = None,
    on_round: Optional[Callable[[PipelineState, RoundRecord], None]] = None,
    mode: AdjacencyMode = "symmetric",
    checkpoint: Optional[PathLike] = None,
    resume_from: Optional[PathLike] = None,
) -> SelfTrainResult:
    """Runs the self-training loop.

    Every round fits on the labeled dataset, generates scored pseudo-responses
    for all unlabeled nodes with the parameters fixed, selects the confident
    ones and moves them into the labeled dataset. The loop stops after
    ``config.max_rounds`` rounds or when no unlabeled node is left; a final fit
    on the final labeled dataset follows.

    Parameters
    ----------
    graph : TextAttributedGraph
        Graph.
    split : DataSplit
        Initial labeled/unlabeled split.
    config : SelfTrainConfig
        Settings.
    seed : int
        Seed of the parameter initialization.
    decoder : Decoder
        Frozen decoder.
    template : PromptTemplate, optional
        Prompt template. Defaults to ``PromptTemplate()``.
    params : ParameterSet, optional
        Initial parameters. Defaults to :func:`init_parameter_set` with ``seed``.
    on_round : Callable, optional
        Called with the state and record after every round.
    mode : AdjacencyMode, optional
        Adjacency normalization. Defaults to ``symmetric``.
    checkpoint : PathLike, optional
        File rewritten with the pipeline state after every round and once more
        when the run ends.
    resume_from : PathLike, optional
        Checkpoint written by an earlier run; the loop continues after its round.

    Returns
    -------
    SelfTrainResult
        Final parameters and state.
    """
    task = TaskContext.build(graph, decoder.vocab, template, mode)
    initial = params or init_parameter_set(graph.feature_dim, decoder, seed)
    state = initial_state(task, split, initial)
    if resume_from is not None:
        state, final = restore_state(resume_from, task, decoder)
        if final:
            logger.warning("resuming from %s, which already includes a final fit", resume_from)
        logger.info("resumed from %s after round %d", resume_from, state.round)
    ground_truth = tuple(ex for ex in state.labeled_dataset if ex.provenance == "ground-truth")
    optimizer: Optional[Optimizer] = None
    digest = decoder.digest
    tracker = ScalarLogger(config.train.log_dir)
    logger.info(
        "self-training: %d labeled, %d unlabeled, threshold %s, max %d rounds",
        len(ground_truth), len(state.unlabeled), config.threshold, config.max_rounds,
    )

    for t in range(state.round + 1, config.max_rounds + 1):
        if not state.unlabeled:
            break
        previous = state
        start = state.params if config.warm_start else initial
        result = fit(state.labeled_dataset, start, task.inputs, config.train, log_tag=f"round_{t}")
        state = replace(state, params=result.params)
        optimizer = result.optimizer

        scored = generate_pseudo_set(state, task, max_response_len=config.max_response_len, workers=config.workers)
        selected = filter_confident(scored, config.threshold)
        if config.scores_dir is not None:
            path = Path(config.scores_dir) / f"round_{t}.csv"
            write_scored_csv(path, scored, [r.node_id for r in selected])
        n_relabeled = 0
        if config.rescore_accepted and state.pseudo_responses:
            state, n_relabeled = rescore_accepted(
                state, task, config.threshold, config.max_response_len, config.workers
            )
        state = augment(state, selected, task)

        finite = [r.confidence for r in scored if math.isfinite(r.confidence)]
        record = RoundRecord(
            round=t,
            n_labeled=len(state.labeled_dataset),
            n_unlabeled=len(state.unlabeled),
            n_selected=len(selected),
            mean_confidence=float(np.mean(finite)) if finite else None,
            min_confidence=min(finite) if finite else None,
            max_confidence=max(finite) if finite else None,
            pseudo_precision=_precision(graph, selected),
            first_loss=result.losses[0],
            final_loss=result.losses[-1],
            n_relabeled=n_relabeled,
        )
        state = replace(state, history=state.history + (record,))
        check_invariants(state, previous, graph.node_count, ground_truth, config.max_rounds, digest)

        tracker.add_scalar("selftrain/selected", len(selected), t)
        if record.mean_confidence is not None:
            tracker.add_scalar("selftrain/mean_confidence", record.mean_confidence, t)
        logger.info(
            "round %d: selected %d, %d labeled examples, %d unlabeled nodes, precision %s",
            t, len(selected), record.n_labeled, record.n_unlabeled, record.pseudo_precision,
        )
        if checkpoint is not None:
            save_state(checkpoint, state, graph, optimizer)
        if on_round is not None:
            on_round(state, record)

    final_losses: tuple[float, ...] = ()
    norms: tuple[float, ...] = ()
    if config.final_fit:
        start = state.params if config.warm_start else initial
        result = fit(state.labeled_dataset, start, task.inputs, config.train, log_tag="final")
        state = replace(state, params=result.params)
        optimizer = result.optimizer
        final_losses = tuple(result.losses)
        norms = tuple(result.projector_grad_norms)
    if checkpoint is not None:
        save_state(checkpoint, state, graph, optimizer, final=config.final_fit)
    if decoder.digest != digest:
        raise InvariantViolationError("decoder digest changed", state.dump())
    return SelfTrainResult(state.params, state, final_losses, norms)


def write_history(path: PathLike, history: Sequence[RoundRecord]) -> None:
    """Writes the per-round log as CSV or, for a ``.json`` suffix, as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [asdict(r) for r in history]
    if path.suffix == ".json":
        path.write_text(json.dumps(rows, sort_keys=True, indent=2), encoding="utf-8")
        return
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=[fd.name for fd in fields(RoundRecord)], lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)
