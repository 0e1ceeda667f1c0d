"""supervised fine-tuning of the encoder and projector"""

import logging
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

import compyute as cp
import numpy as np

from .decoder import Decoder
from .errors import DivergenceError, FreezeViolationError
from .gnn import GnnParams, gnn_backward, gnn_forward, init_gnn_params
from .graph import AdjacencyMode, TextAttributedGraph, normalize_adjacency
from .instructions import InstructionExample, embed_instruction
from .optimizers import OPTIMIZERS, Optimizer, OptimizerName, get_optimizer
from .projector import (
    ProjectorParams,
    fixed_random_projector,
    init_projector_params,
    project,
    project_backward,
)
from .serialization import content_digest
from .tracking import ScalarLogger

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Coordinate = tuple[str, tuple[int, ...]]


@dataclass(frozen=True)
class GraphInputs:
    """Normalized adjacency ``(N, N)`` and feature matrix ``(N, F)`` of a graph."""

    adjacency: np.ndarray
    features: np.ndarray

    @classmethod
    def from_graph(cls, graph: TextAttributedGraph, mode: AdjacencyMode = "symmetric") -> "GraphInputs":
        return cls(normalize_adjacency(graph, mode), graph.features)


@dataclass(frozen=True)
class ParameterSet:
    """Encoder, projector and frozen decoder.

    Only the encoder and the trainable projector are ever updated. Without an
    encoder the projector consumes the raw feature rows.

    Parameters
    ----------
    gnn : GnnParams, optional
        Encoder weights, ``None`` to skip message passing.
    projector : ProjectorParams
        Projector weights.
    decoder : Decoder
        Frozen decoder.
    """

    gnn: Optional[GnnParams]
    projector: ProjectorParams
    decoder: Decoder

    def __post_init__(self) -> None:
        if self.gnn is not None and self.gnn.out_dim != self.projector.in_dim:
            raise ValueError(
                f"Encoder output dim {self.gnn.out_dim} does not match projector input dim "
                f"{self.projector.in_dim}."
            )
        if self.projector.out_dim != self.decoder.embed_dim:
            raise ValueError(
                f"Projector output dim {self.projector.out_dim} does not match decoder "
                f"embedding dim {self.decoder.embed_dim}."
            )

    def trainable(self) -> dict[str, np.ndarray]:
        """Returns the trainable arrays by name."""
        arrays: dict[str, np.ndarray] = {}
        if self.gnn is not None:
            for l, w in enumerate(self.gnn.layer_weights):
                arrays[f"gnn.{l}"] = w
        if self.projector.trainable:
            for name in ("w1", "b1", "w2", "b2"):
                arrays[f"projector.{name}"] = getattr(self.projector, name)
        return arrays

    def with_trainable(self, arrays: Mapping[str, np.ndarray]) -> "ParameterSet":
        """Returns a copy with the named trainable arrays replaced."""
        gnn, projector = self.gnn, self.projector
        if gnn is not None:
            weights = tuple(arrays.get(f"gnn.{l}", w) for l, w in enumerate(gnn.layer_weights))
            gnn = replace(gnn, layer_weights=weights)
        if projector.trainable:
            projector = replace(
                projector,
                **{n: arrays.get(f"projector.{n}", getattr(projector, n)) for n in ("w1", "b1", "w2", "b2")},
            )
        return replace(self, gnn=gnn, projector=projector)


def init_parameter_set(
    feature_dim: int,
    decoder: Decoder,
    seed: int = 0,
    gnn_hidden: Sequence[int] = (32, 32),
    projector_hidden: int = 64,
    activation: str = "relu",
    use_gnn: bool = True,
    trainable_projector: bool = True,
) -> ParameterSet:
    """Initializes the encoder and projector for a graph with ``feature_dim`` features.

    Parameters
    ----------
    feature_dim : int
        Feature dimension ``F``.
    decoder : Decoder
        Frozen decoder whose embedding dim the projector maps into.
    seed : int, optional
        Seed of the initialization. Defaults to ``0``.
    gnn_hidden : Sequence[int], optional
        Output dims of the encoder layers. Defaults to ``(32, 32)``.
    projector_hidden : int, optional
        Hidden dim of the projector. Defaults to ``64``.
    activation : str, optional
        Activation of encoder and projector. Defaults to ``relu``.
    use_gnn : bool, optional
        Whether to use message passing; otherwise the projector reads raw features.
    trainable_projector : bool, optional
        Whether the projector is trainable; otherwise a fixed random linear map
        is used.
    """
    rng = np.random.default_rng(seed)
    gnn = init_gnn_params(feature_dim, gnn_hidden, activation, rng) if use_gnn else None
    in_dim = gnn.out_dim if gnn is not None else feature_dim
    if trainable_projector:
        projector = init_projector_params(in_dim, decoder.embed_dim, projector_hidden, activation, rng)
    else:
        projector = fixed_random_projector(in_dim, decoder.embed_dim, rng)
    return ParameterSet(gnn, projector, decoder)


def compute_graph_tokens(params: ParameterSet, inputs: GraphInputs) -> np.ndarray:
    """Runs encoder and projector forward and returns the graph tokens ``(N, d_emb)``."""
    h = inputs.features
    if params.gnn is not None:
        h = gnn_forward(inputs.adjacency, inputs.features, params.gnn)[0].matrix
    return project(h, params.projector)[0].matrix


@dataclass(frozen=True)
class TrainConfig:
    """Fine-tuning hyperparameters.

    Parameters
    ----------
    epochs : int, optional
        Full-batch steps per fit. Defaults to ``200``.
    learning_rate : float, optional
        Learning rate. Defaults to ``1e-3``.
    optimizer : OptimizerName, optional
        ``sgd``, ``adam`` or ``adamw``. Defaults to ``adam``.
    beta1, beta2, eps : float, optional
        Adam and AdamW constants. Default to ``0.9``, ``0.999`` and ``1e-8``.
    workers : int, optional
        Threads for the per-example decoder passes. Defaults to ``1``.
    log_dir : str, optional
        TensorBoard log directory. Defaults to ``None``.
    """

    epochs: int = 200
    learning_rate: float = 1e-3
    optimizer: OptimizerName = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    workers: int = 1
    log_dir: Optional[str] = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}.")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}.")
        if self.workers < 1:
            raise ValueError("workers must be at least 1.")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"Unknown optimizer {self.optimizer!r}. Must be one of {', '.join(OPTIMIZERS)}.")

    def make_optimizer(self) -> Optimizer:
        if self.optimizer in ("adam", "adamw"):
            return get_optimizer(self.optimizer, self.learning_rate, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        return get_optimizer(self.optimizer, self.learning_rate)


@dataclass(frozen=True)
class LossAndGrads:
    loss: float
    grads: dict[str, np.ndarray]
    projector_grad_norm: float


def _chunks(n: int, k: int) -> list[range]:
    bounds = np.linspace(0, n, min(k, n) + 1).astype(int)
    return [range(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def loss_and_grads(
    params: ParameterSet,
    dataset: Sequence[InstructionExample],
    inputs: GraphInputs,
    workers: int = 1,
) -> LossAndGrads:
    """Computes the mean response loss over ``dataset`` and its gradients.

    Parameters
    ----------
    params : ParameterSet
        Current parameters.
    dataset : Sequence[InstructionExample]
        Instructions with targets.
    inputs : GraphInputs
        Graph the instructions refer to.
    workers : int, optional
        Threads for the decoder passes. Chunks are merged in dataset order.

    Returns
    -------
    LossAndGrads
        Mean loss, gradients of every trainable array and the projector gradient norm.
    """
    if not dataset:
        raise ValueError("Cannot train on an empty dataset.")

    if params.gnn is not None:
        embeddings, gnn_cache = gnn_forward(inputs.adjacency, inputs.features, params.gnn)
        h = embeddings.matrix
    else:
        h = inputs.features
    tokens, proj_cache = project(h, params.projector)

    decoder = params.decoder
    sequences = [
        embed_instruction(ex, tokens.matrix, decoder.token_embeddings(ex.token_ids)) for ex in dataset
    ]

    def run(chunk: range) -> tuple[np.ndarray, list[np.ndarray]]:
        return decoder.response_losses([dataset[i] for i in chunk], [sequences[i] for i in chunk])

    chunks = _chunks(len(dataset), workers)
    if len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(chunks[0])]
    losses = np.concatenate([r[0] for r in results])
    d_sequences = [g for r in results for g in r[1]]

    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite training loss over {len(dataset)} examples")

    # scatter slot gradients back onto the graph tokens, in dataset order
    d_tokens = np.zeros_like(tokens.matrix)
    for ex, g in zip(dataset, d_sequences):
        if ex.graph_slots:
            np.add.at(d_tokens, list(ex.graph_nodes), g[list(ex.graph_slots)] / len(dataset))

    proj_grads, dh = project_backward(proj_cache, d_tokens)
    grads: dict[str, np.ndarray] = {}
    if params.gnn is not None:
        for l, dw in enumerate(gnn_backward(gnn_cache, dh)):
            grads[f"gnn.{l}"] = dw
    proj_norm = 0.0
    if params.projector.trainable:
        for name in ("w1", "b1", "w2", "b2"):
            grads[f"projector.{name}"] = getattr(proj_grads, name)
        proj_norm = float(np.sqrt(sum(np.sum(getattr(proj_grads, n) ** 2) for n in ("w1", "b1", "w2", "b2"))))
    return LossAndGrads(loss, grads, proj_norm)


def sft_step(
    dataset: Sequence[InstructionExample],
    params: ParameterSet,
    inputs: GraphInputs,
    optimizer: Optimizer,
    workers: int = 1,
) -> tuple[ParameterSet, LossAndGrads]:
    """Runs one full-batch forward, backward and optimizer update.

    The decoder is never touched; only encoder and trainable projector arrays
    are updated.

    Returns
    -------
    ParameterSet
        Updated parameters.
    LossAndGrads
        Loss and gradients at the parameters before the update.
    """
    result = loss_and_grads(params, dataset, inputs, workers)
    trainable = params.trainable()
    if not trainable:
        return params, result
    return params.with_trainable(optimizer.step(trainable, result.grads)), result


@dataclass
class FitResult:
    """Parameters after fitting together with the per-epoch loss trace."""

    params: ParameterSet
    losses: list[float]
    optimizer: Optimizer
    projector_grad_norms: list[float] = field(default_factory=list)


def fit(
    dataset: Sequence[InstructionExample],
    params: ParameterSet,
    inputs: GraphInputs,
    config: TrainConfig,
    optimizer: Optional[Optimizer] = None,
    log_tag: str = "train",
) -> FitResult:
    """Runs ``config.epochs`` full-batch steps.

    Parameters
    ----------
    dataset : Sequence[InstructionExample]
        Instructions with targets.
    params : ParameterSet
        Initial parameters.
    inputs : GraphInputs
        Graph the instructions refer to.
    config : TrainConfig
        Hyperparameters.
    optimizer : Optimizer, optional
        Optimizer whose state is continued. Defaults to a fresh one from ``config``.
    log_tag : str, optional
        TensorBoard tag prefix. Defaults to ``train``.

    Returns
    -------
    FitResult
        Final parameters, the mean loss of every epoch (measured before that
        epoch's update) and the projector gradient norms.

    Raises
    ------
    FreezeViolationError
        If the decoder digest changes during fitting.
    """
    digest = params.decoder.digest
    optimizer = optimizer or config.make_optimizer()
    tracker = ScalarLogger(config.log_dir)

    losses, norms = [], []
    for epoch in range(1, config.epochs + 1):
        params, step = sft_step(dataset, params, inputs, optimizer, config.workers)
        losses.append(step.loss)
        norms.append(step.projector_grad_norm)
        tracker.add_scalar(f"{log_tag}/loss", step.loss, epoch)
        logger.debug("epoch %d/%d loss %.6f", epoch, config.epochs, step.loss)

    if params.decoder.digest != digest:
        raise FreezeViolationError("decoder digest changed during fit")
    logger.info(
        "fit %d examples for %d epochs: loss %.4f -> %.4f", len(dataset), config.epochs, losses[0], losses[-1]
    )
    return FitResult(params, losses, optimizer, norms)


# ------------------------------------------------------------------------------
# gradient checking
# ------------------------------------------------------------------------------


def sample_coordinates(
    params: ParameterSet, count: int, rng: Optional[np.random.Generator] = None
) -> list[Coordinate]:
    """Samples ``count`` coordinates uniformly over all trainable entries."""
    rng = rng if rng is not None else np.random.default_rng(0)
    arrays = params.trainable()
    names = sorted(arrays)
    sizes = np.array([arrays[n].size for n in names])
    if sizes.sum() == 0:
        return []
    flat = rng.choice(int(sizes.sum()), size=min(count, int(sizes.sum())), replace=False)
    offsets = np.cumsum(sizes) - sizes
    coordinates = []
    for f in np.sort(flat):
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        index = np.unravel_index(int(f - offsets[k]), arrays[names[k]].shape)
        coordinates.append((names[k], tuple(int(i) for i in index)))
    return coordinates


def finite_difference_check(
    params: ParameterSet,
    dataset: Sequence[InstructionExample],
    inputs: GraphInputs,
    coordinates: Sequence[Coordinate],
    step: float = 1e-5,
) -> float:
    """Compares analytic gradients with central differences.

    The relative error of a coordinate is ``|a - n| / max(|a| + |n|, 1e-6)``.

    Parameters
    ----------
    params : ParameterSet
        Parameters to check.
    dataset : Sequence[InstructionExample]
        Instructions with targets.
    inputs : GraphInputs
        Graph the instructions refer to.
    coordinates : Sequence[Coordinate]
        ``(array name, index)`` pairs of trainable entries.
    step : float, optional
        Difference step. Defaults to ``1e-5``.

    Returns
    -------
    float
        Maximum relative error over the coordinates.
    """
    if not coordinates:
        raise ValueError("no coordinates sampled")
    analytic = loss_and_grads(params, dataset, inputs).grads
    arrays = params.trainable()

    def loss_at(name: str, index: tuple[int, ...], delta: float) -> float:
        shifted = np.array(arrays[name], copy=True)
        shifted[index] += delta
        return loss_and_grads(params.with_trainable({name: shifted}), dataset, inputs).loss

    worst = 0.0
    for name, index in coordinates:
        numeric = (loss_at(name, index, step) - loss_at(name, index, -step)) / (2.0 * step)
        a = float(analytic[name][index])
        worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6))
    return worst


# ------------------------------------------------------------------------------
# checkpoints
# ------------------------------------------------------------------------------


def parameter_digest(params: ParameterSet) -> str:
    """Returns the sha256 digest of the encoder and projector weights."""
    arrays = {f"gnn.{l}": w for l, w in enumerate(params.gnn.layer_weights)} if params.gnn else {}
    arrays.update({f"projector.{n}": getattr(params.projector, n) for n in ("w1", "b1", "w2", "b2")})
    extra = {
        "gnn_activation": params.gnn.activation if params.gnn else None,
        "projector_activation": params.projector.activation,
        "projector_trainable": params.projector.trainable,
    }
    return content_digest(arrays, extra)


@dataclass(frozen=True)
class Checkpoint:
    """Contents of a checkpoint written by :func:`save_checkpoint`.

    Parameters
    ----------
    params : ParameterSet
        Encoder and projector bound to the decoder they were trained against.
    optimizer_state : dict, optional
        State for ``Optimizer.load_state_dict``.
    round_no : int
        Round counter.
    state : dict, optional
        Caller-defined training state, such as the self-training datasets.
    """

    params: ParameterSet
    optimizer_state: Optional[dict[str, Any]]
    round_no: int
    state: Optional[dict[str, Any]] = None


def save_checkpoint(
    path: PathLike,
    params: ParameterSet,
    optimizer: Optional[Optimizer],
    round_no: int,
    state: Optional[Mapping[str, Any]] = None,
) -> None:
    """Writes encoder, projector, optimizer state, round counter and an optional
    training state with ``compyute.save``."""
    doc = {
        "gnn": None
        if params.gnn is None
        else {
            "activation": params.gnn.activation,
            "layers": [np.array(w) for w in params.gnn.layer_weights],
        },
        "projector": {
            **{n: np.array(getattr(params.projector, n)) for n in ("w1", "b1", "w2", "b2")},
            "activation": params.projector.activation,
            "trainable": params.projector.trainable,
        },
        "optimizer": None if optimizer is None else optimizer.get_state_dict(),
        "round": round_no,
        "state": None if state is None else dict(state),
        "decoder_digest": params.decoder.digest,
        "digest": parameter_digest(params),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cp.save(doc, str(path))
    logger.info("saved checkpoint (round %d) to %s", round_no, path)


def read_checkpoint(path: PathLike, decoder: Decoder) -> Checkpoint:
    """Loads a checkpoint written by :func:`save_checkpoint`.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    FreezeViolationError
        If the checkpoint was trained against a decoder with another digest.
    ValueError
        If the stored weights do not match the stored digest.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint {path} does not exist.")
    doc = cp.load(str(path))
    if doc["decoder_digest"] != decoder.digest:
        raise FreezeViolationError(
            f"checkpoint {path} was trained against decoder {doc['decoder_digest'][:12]}, "
            f"got {decoder.digest[:12]}"
        )
    gnn = None
    if doc["gnn"] is not None:
        gnn = GnnParams(tuple(np.asarray(w, dtype=np.float64) for w in doc["gnn"]["layers"]), doc["gnn"]["activation"])
    p = doc["projector"]
    projector = ProjectorParams(
        *(np.asarray(p[n], dtype=np.float64) for n in ("w1", "b1", "w2", "b2")),
        activation=p["activation"],
        trainable=p["trainable"],
    )
    params = ParameterSet(gnn, projector, decoder)
    if parameter_digest(params) != doc["digest"]:
        raise ValueError(f"Checkpoint {path} is corrupt: parameter digest mismatch.")
    return Checkpoint(params, doc["optimizer"], int(doc["round"]), doc["state"])


def load_checkpoint(
    path: PathLike, decoder: Decoder
) -> tuple[ParameterSet, Optional[dict[str, Any]], int]:
    """Loads the parameters, optimizer state and round counter of a checkpoint."""
    ckpt = read_checkpoint(path, decoder)
    return ckpt.params, ckpt.optimizer_state, ckpt.round_no
