"""graph neural network encoder"""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from compyute.nn.functional.functions import Function, FunctionContext
from compyute.tensors import ShapeError, Tensor

from .activation_funcs import get_activation
from .errors import CacheError, DivergenceError
from .tensor_utils import to_array, to_tensor


@dataclass(frozen=True)
class GnnParams:
    """Per-layer weights of the message-passing encoder.

    Parameters
    ----------
    layer_weights : tuple[np.ndarray, ...]
        Layer weights, layer ``l`` of shape ``(dim_{l-1}, dim_l)``.
    activation : str, optional
        Elementwise activation. Defaults to ``relu``.
    """

    layer_weights: tuple[np.ndarray, ...]
    activation: str = "relu"

    def __post_init__(self) -> None:
        weights = tuple(np.asarray(w, dtype=np.float64) for w in self.layer_weights)
        if not weights:
            raise ValueError("The encoder needs at least one layer.")
        for l, w in enumerate(weights):
            if w.ndim != 2:
                raise ShapeError(f"Layer {l} weight must be 2D, got {w.ndim}D.")
            if l > 0 and weights[l - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"Layer {l - 1} output dim {weights[l - 1].shape[1]} does not match "
                    f"layer {l} input dim {w.shape[0]}."
                )
        get_activation(self.activation)
        object.__setattr__(self, "layer_weights", weights)

    @property
    def layer_count(self) -> int:
        return len(self.layer_weights)

    @property
    def in_dim(self) -> int:
        return self.layer_weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layer_weights[-1].shape[1]


@dataclass(frozen=True)
class NodeEmbeddings:
    """Node embedding matrix :math:`H = H^L` of shape ``(N, d_L)``."""

    matrix: np.ndarray

    @property
    def node_count(self) -> int:
        return self.matrix.shape[0]


@dataclass
class GnnCache:
    """Forward state needed by :func:`gnn_backward`."""

    ctx: FunctionContext
    layer_count: int
    output_shape: tuple[int, ...]
    consumed: bool = field(default=False)


def init_gnn_params(
    in_dim: int,
    hidden_dims: Sequence[int] = (32, 32),
    activation: str = "relu",
    rng: Optional[np.random.Generator] = None,
) -> GnnParams:
    """Initializes encoder weights from :math:`\\mathcal{U}(-k, k)`, :math:`k = 1/\\sqrt{fan_{in}}`.

    Parameters
    ----------
    in_dim : int
        Feature dimension ``F``.
    hidden_dims : Sequence[int], optional
        Output dimension of every layer. Defaults to ``(32, 32)``.
    activation : str, optional
        Elementwise activation. Defaults to ``relu``.
    rng : np.random.Generator, optional
        Random generator. Defaults to a generator seeded with ``0``.

    Returns
    -------
    GnnParams
        Initial parameters.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    dims = (in_dim, *hidden_dims)
    weights = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        k = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-k, k, size=(fan_in, fan_out)))
    return GnnParams(tuple(weights), activation)


class GraphConvFunction(Function):
    r"""Applies one message-passing layer :math:`H' = \sigma(\tilde{A} H \Theta)`.

    Shapes:
        - adjacency :math:`(N, N)`
        - h :math:`(N, d_{in})`
        - w :math:`(d_{in}, d_{out})`
        - output :math:`(N, d_{out})`
    """

    @staticmethod
    def forward(
        ctx: FunctionContext,
        adjacency: Tensor,
        h: Tensor,
        w: Tensor,
        activation: str,
    ) -> Tensor:
        if h.shape[1] != w.shape[0]:
            raise ShapeError(f"Embeddings {h.shape} incompatible with weight {w.shape}.")
        ah = adjacency @ h
        y = get_activation(activation).forward(ctx, ah @ w)
        ctx.add(adjacency, ah, w, activation)
        return y

    @staticmethod
    def backward(ctx: FunctionContext, dy: Tensor) -> tuple[Tensor, Tensor]:
        adjacency, ah, w, activation = ctx.get()
        dz = get_activation(activation).backward(ctx, dy)
        dw = ah.T @ dz
        dh = adjacency.T @ (dz @ w.T)
        return dh, dw


def gnn_forward(
    norm_adjacency: np.ndarray, features: np.ndarray, params: GnnParams
) -> tuple[NodeEmbeddings, GnnCache]:
    """Runs all message-passing layers starting from :math:`H^0 = X`.

    Parameters
    ----------
    norm_adjacency : np.ndarray
        Normalized adjacency matrix of shape ``(N, N)``.
    features : np.ndarray
        Feature matrix of shape ``(N, F)``.
    params : GnnParams
        Encoder weights.

    Returns
    -------
    NodeEmbeddings
        Final embeddings :math:`H^L`.
    GnnCache
        Per-layer intermediates for :func:`gnn_backward`.

    Raises
    ------
    ShapeError
        If the dimensions do not chain.
    DivergenceError
        If an intermediate becomes non-finite.
    """
    n = features.shape[0]
    if norm_adjacency.shape != (n, n):
        raise ShapeError(f"Adjacency {norm_adjacency.shape} does not match {n} nodes.")
    if not np.all(np.isfinite(features)):
        raise DivergenceError("Features contain non-finite values.")

    ctx = FunctionContext()
    adjacency = to_tensor(norm_adjacency)
    h = to_tensor(features)
    for l, w in enumerate(params.layer_weights):
        h = GraphConvFunction.forward(ctx, adjacency, h, to_tensor(w), params.activation)
        if not np.all(np.isfinite(h.data)):
            raise DivergenceError(f"Non-finite embeddings after layer {l + 1}.")
    matrix = to_array(h)
    return NodeEmbeddings(matrix), GnnCache(ctx, params.layer_count, matrix.shape)


def gnn_backward(cache: GnnCache, upstream_gradient: np.ndarray) -> list[np.ndarray]:
    """Back-propagates through every layer of :func:`gnn_forward`.

    Parameters
    ----------
    cache : GnnCache
        Forward cache; each cache can be consumed exactly once.
    upstream_gradient : np.ndarray
        Gradient of the loss with respect to :math:`H^L`.

    Returns
    -------
    list[np.ndarray]
        Gradient of the loss with respect to each layer weight, in layer order.

    Raises
    ------
    CacheError
        If the cache was already consumed or the gradient shape does not match.
    """
    if cache.consumed:
        raise CacheError("stale forward cache: gnn_backward was already run on it")
    if upstream_gradient.shape != cache.output_shape:
        raise CacheError(
            f"mismatched forward cache: gradient {upstream_gradient.shape}, "
            f"embeddings {cache.output_shape}"
        )
    cache.consumed = True

    dh = to_tensor(upstream_gradient)
    grads = []
    for _ in range(cache.layer_count):
        dh, dw = GraphConvFunction.backward(cache.ctx, dh)
        grads.append(to_array(dw))
    return grads[::-1]
