"""alignment projector"""

import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from compyute.nn.functional.functions import Function, FunctionContext
from compyute.nn.functional.linear_funcs import LinearFunction
from compyute.tensors import ShapeError, Tensor

from .activation_funcs import get_activation
from .errors import CacheError, DivergenceError
from .gnn import NodeEmbeddings
from .tensor_utils import to_array, to_tensor


@dataclass(frozen=True)
class ProjectorParams:
    r"""Two-layer perceptron mapping node embeddings into the token-embedding space.

    .. math::
        \text{token}_i = W_2 \, \sigma(W_1 h_i + b_1) + b_2

    Weights follow the ``(C_out, C_in)`` layout of :class:`LinearFunction`:
    ``w1`` is ``(h, d_L)`` and ``w2`` is ``(d_emb, h)``.

    Parameters
    ----------
    w1, b1, w2, b2 : np.ndarray
        Weights and biases.
    activation : str, optional
        Hidden activation. Defaults to ``relu``.
    trainable : bool, optional
        Whether fine-tuning updates these weights. Defaults to ``True``.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "relu"
    trainable: bool = True

    def __post_init__(self) -> None:
        for name in ("w1", "b1", "w2", "b2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.b1.shape != (self.w1.shape[0],) or self.w2.shape[1] != self.w1.shape[0]:
            raise ShapeError(f"Hidden layer shapes {self.w1.shape}, {self.b1.shape}, {self.w2.shape} do not chain.")
        if self.b2.shape != (self.w2.shape[0],):
            raise ShapeError(f"Output bias {self.b2.shape} does not match {self.w2.shape}.")
        get_activation(self.activation)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]


@dataclass(frozen=True)
class GraphToken:
    """Graph token embedding of one node."""

    node_id: int
    embedding: np.ndarray


@dataclass(frozen=True)
class GraphTokens:
    """Graph tokens of all nodes, stored as a ``(N, d_emb)`` matrix."""

    matrix: np.ndarray

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def __getitem__(self, node: int) -> GraphToken:
        return GraphToken(node, self.matrix[node])

    def __iter__(self) -> Iterator[GraphToken]:
        return (self[i] for i in range(len(self)))


@dataclass(frozen=True)
class ProjectorGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ProjectorCache:
    """Forward state needed by :func:`project_backward`."""

    ctx: FunctionContext
    output_shape: tuple[int, ...]
    consumed: bool = field(default=False)


def init_projector_params(
    in_dim: int,
    out_dim: int,
    hidden_dim: int = 64,
    activation: str = "relu",
    rng: Optional[np.random.Generator] = None,
) -> ProjectorParams:
    """Initializes a trainable projector.

    Weights and biases are drawn from :math:`\\mathcal{U}(-k, k)`,
    :math:`k = 1/\\sqrt{fan_{in}}`.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    k1 = 1.0 / math.sqrt(in_dim)
    k2 = 1.0 / math.sqrt(hidden_dim)
    return ProjectorParams(
        w1=rng.uniform(-k1, k1, size=(hidden_dim, in_dim)),
        b1=rng.uniform(-k1, k1, size=(hidden_dim,)),
        w2=rng.uniform(-k2, k2, size=(out_dim, hidden_dim)),
        b2=rng.uniform(-k2, k2, size=(out_dim,)),
        activation=activation,
    )


def fixed_random_projector(
    in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None
) -> ProjectorParams:
    """Returns an untrainable random linear map standing in for the projector.

    The map is ``x -> R x`` with ``R`` drawn from :math:`\\mathcal{N}(0, 1/in\\_dim)`.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    return ProjectorParams(
        w1=rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(out_dim, in_dim)),
        b1=np.zeros(out_dim),
        w2=np.eye(out_dim),
        b2=np.zeros(out_dim),
        activation="identity",
        trainable=False,
    )


class ProjectorFunction(Function):
    """Applies the two-layer projector row-wise."""

    @staticmethod
    def forward(ctx: FunctionContext, h: Tensor, params: ProjectorParams) -> Tensor:
        act = get_activation(params.activation)
        z = LinearFunction.forward(ctx, h, to_tensor(params.w1), to_tensor(params.b1))
        y = LinearFunction.forward(ctx, act.forward(ctx, z), to_tensor(params.w2), to_tensor(params.b2))
        ctx.add(params.activation)
        return y

    @staticmethod
    def backward(ctx: FunctionContext, dy: Tensor) -> tuple[Tensor, ProjectorGrads]:
        (activation,) = ctx.get()
        da, dw2, db2 = LinearFunction.backward(ctx, dy)
        dz = get_activation(activation).backward(ctx, da)
        dh, dw1, db1 = LinearFunction.backward(ctx, dz)
        return dh, ProjectorGrads(*(to_array(g) for g in (dw1, db1, dw2, db2)))


def project(
    embeddings: Union[NodeEmbeddings, np.ndarray], params: ProjectorParams
) -> tuple[GraphTokens, ProjectorCache]:
    """Maps node embeddings to one graph token per node.

    Parameters
    ----------
    embeddings : NodeEmbeddings | np.ndarray
        Embeddings of shape ``(N, d_L)``.
    params : ProjectorParams
        Projector weights.

    Returns
    -------
    GraphTokens
        Graph tokens of shape ``(N, d_emb)``.
    ProjectorCache
        Forward state for :func:`project_backward`.
    """
    h = embeddings.matrix if isinstance(embeddings, NodeEmbeddings) else np.asarray(embeddings)
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise ShapeError(f"Embeddings {h.shape} incompatible with projector input dim {params.in_dim}.")
    ctx = FunctionContext()
    tokens = to_array(ProjectorFunction.forward(ctx, to_tensor(h), params))
    if not np.all(np.isfinite(tokens)):
        raise DivergenceError("Non-finite graph tokens.")
    return GraphTokens(tokens), ProjectorCache(ctx, tokens.shape)


def project_backward(
    cache: ProjectorCache, upstream_gradients: np.ndarray
) -> tuple[ProjectorGrads, np.ndarray]:
    """Back-propagates token gradients through the projector.

    Parameters
    ----------
    cache : ProjectorCache
        Forward cache; each cache can be consumed exactly once.
    upstream_gradients : np.ndarray
        Gradient of the loss with respect to every graph token, ``(N, d_emb)``.

    Returns
    -------
    ProjectorGrads
        Gradients with respect to the projector weights.
    np.ndarray
        Gradient with respect to the input embeddings, ``(N, d_L)``.
    """
    if cache.consumed:
        raise CacheError("stale forward cache: project_backward was already run on it")
    if upstream_gradients.shape != cache.output_shape:
        raise CacheError(
            f"mismatched forward cache: gradient {upstream_gradients.shape}, "
            f"tokens {cache.output_shape}"
        )
    cache.consumed = True
    dh, grads = ProjectorFunction.backward(cache.ctx, to_tensor(upstream_gradients))
    return grads, to_array(dh)
