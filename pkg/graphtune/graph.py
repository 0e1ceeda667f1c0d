"""text-attributed graphs"""

import json
import logging
import math
import string
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Literal, Optional, Union

import numpy as np

from .errors import GraphFormatError, SplitError

logger = logging.getLogger(__name__)

AdjacencyMode = Literal["self_loop", "symmetric"]
PathLike = Union[str, Path]


@dataclass(frozen=True)
class TextAttributedGraph:
    """Undirected graph whose nodes carry raw text, numeric features and labels.

    Parameters
    ----------
    features : np.ndarray
        Feature matrix of shape ``(N, F)``.
    texts : tuple[str, ...]
        Raw text of every node.
    edges : frozenset[tuple[int, int]]
        Unordered edges stored as ``(i, j)`` with ``i < j``.
    label_space : tuple[str, ...]
        Ordered class names.
    labels : Mapping[int, int]
        Ground-truth class id of every labeled node.
    """

    features: np.ndarray
    texts: tuple[str, ...]
    edges: frozenset[tuple[int, int]]
    label_space: tuple[str, ...]
    labels: Mapping[int, int] = field(default_factory=dict)
    adjacency: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise GraphFormatError(f"Features must be a 2D matrix, got {features.ndim}D.")
        features.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "texts", tuple(self.texts))
        object.__setattr__(self, "label_space", tuple(self.label_space))
        object.__setattr__(self, "labels", MappingProxyType(dict(self.labels)))

        n = features.shape[0]
        if n < 1:
            raise GraphFormatError("A graph needs at least one node.")
        if len(self.texts) != n:
            raise GraphFormatError(f"Expected {n} texts, got {len(self.texts)}.")
        if len(set(self.label_space)) != len(self.label_space):
            raise GraphFormatError("Label space contains duplicate class names.")

        edges = set()
        for i, j in self.edges:
            if i == j:
                raise GraphFormatError(f"self-loop in input at node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise GraphFormatError(f"Edge ({i}, {j}) references an unknown node.")
            edges.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(edges))

        for node, label in self.labels.items():
            if not 0 <= node < n:
                raise GraphFormatError(f"Label given for unknown node {node}.")
            if not 0 <= label < len(self.label_space):
                raise GraphFormatError(f"Label {label} of node {node} outside label space.")

        adjacency = np.zeros((n, n))
        if edges:
            rows, cols = np.array(sorted(edges)).T
            adjacency[rows, cols] = 1.0
            adjacency[cols, rows] = 1.0
        adjacency.setflags(write=False)
        object.__setattr__(self, "adjacency", adjacency)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TextAttributedGraph):
            return NotImplemented
        return (
            np.array_equal(self.features, other.features)
            and self.texts == other.texts
            and self.edges == other.edges
            and self.label_space == other.label_space
            and dict(self.labels) == dict(other.labels)
        )

    @property
    def node_count(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def neighbors(self, node: int) -> list[int]:
        """Returns the neighbours of ``node`` in ascending id order."""
        return np.flatnonzero(self.adjacency[node]).tolist()

    def label_of(self, node: int) -> Optional[int]:
        return self.labels.get(node)


@dataclass(frozen=True)
class DataSplit:
    """Partition of the nodes into labeled and unlabeled sets."""

    labeled: frozenset[int]
    unlabeled: frozenset[int]

    @property
    def ratio(self) -> float:
        """Labeled-to-unlabeled node ratio."""
        return len(self.labeled) / len(self.unlabeled) if self.unlabeled else math.inf


def label_names(classes: int) -> tuple[str, ...]:
    """Returns the default single-token class names ``label_a``, ``label_b``, ..."""
    if classes <= len(string.ascii_lowercase):
        return tuple(f"label_{string.ascii_lowercase[c]}" for c in range(classes))
    return tuple(f"label_{c}" for c in range(classes))


# ------------------------------------------------------------------------------
# file io
# ------------------------------------------------------------------------------


def load_graph(path: PathLike) -> TextAttributedGraph:
    """Loads a graph from the JSON graph schema.

    Parameters
    ----------
    path : str | Path
        Path to the JSON document.

    Returns
    -------
    TextAttributedGraph
        Validated graph.

    Raises
    ------
    FileNotFoundError
        If the file does not exist.
    GraphFormatError
        If the document violates the schema, contains a self-loop, lists an edge
        asymmetrically or references a label outside the label space.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Graph file {path} does not exist.")
    with path.open("r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise GraphFormatError(f"{path} is not valid JSON: {e}") from e
    return graph_from_dict(doc)


def graph_from_dict(doc: Mapping[str, Any]) -> TextAttributedGraph:
    """Builds a graph from a parsed JSON graph document."""
    for key in ("directed", "label_space", "nodes", "edges"):
        if key not in doc:
            raise GraphFormatError(f"Missing top-level key {key!r}.")
    if doc["directed"] is not False:
        raise GraphFormatError("Only undirected graphs are supported.")

    label_space = [str(c) for c in doc["label_space"]]
    label_ids = {name: i for i, name in enumerate(label_space)}

    nodes = doc["nodes"]
    if not isinstance(nodes, list) or not nodes:
        raise GraphFormatError("'nodes' must be a nonempty list.")
    texts, features, labels = [], [], {}
    feature_dim: Optional[int] = None
    for position, node in enumerate(nodes):
        for key in ("id", "text", "features", "label"):
            if key not in node:
                raise GraphFormatError(f"Node at position {position} lacks {key!r}.")
        if node["id"] != position:
            raise GraphFormatError(
                f"Node ids must be contiguous from 0; node {node['id']} at position {position}."
            )
        if not isinstance(node["text"], str):
            raise GraphFormatError(f"Text of node {position} must be a string.")
        row = node["features"]
        if not isinstance(row, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in row
        ):
            raise GraphFormatError(f"Features of node {position} must be a list of numbers.")
        if feature_dim is None:
            feature_dim = len(row)
        elif len(row) != feature_dim:
            raise GraphFormatError(
                f"Node {position} has {len(row)} features, expected {feature_dim}."
            )
        if node["label"] is not None:
            if node["label"] not in label_ids:
                raise GraphFormatError(
                    f"Label {node['label']!r} of node {position} outside label space."
                )
            labels[position] = label_ids[node["label"]]
        texts.append(node["text"])
        features.append(row)

    return TextAttributedGraph(
        features=np.array(features, dtype=np.float64).reshape(len(nodes), feature_dim or 0),
        texts=tuple(texts),
        edges=_parse_edges(doc["edges"], len(nodes)),
        label_space=tuple(label_space),
        labels=labels,
    )


def _parse_edges(raw_edges: Any, n: int) -> frozenset[tuple[int, int]]:
    if not isinstance(raw_edges, list):
        raise GraphFormatError("'edges' must be a list of node-id pairs.")
    listed: set[tuple[int, int]] = set()
    for position, edge in enumerate(raw_edges):
        if (
            not isinstance(edge, list)
            or len(edge) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in edge)
        ):
            raise GraphFormatError(f"Edge at position {position} must be a pair of node ids.")
        i, j = edge
        if i == j:
            raise GraphFormatError(f"self-loop in input at node {i}")
        if not (0 <= i < n and 0 <= j < n):
            raise GraphFormatError(f"Edge ({i}, {j}) references an unknown node.")
        listed.add((i, j))

    # either every pair is listed once or every pair is listed in both directions
    mirrored = {(i, j) for i, j in listed if (j, i) in listed}
    if mirrored and mirrored != listed:
        i, j = min(listed - mirrored)
        raise GraphFormatError(
            f"asymmetric edge list: edge ({i}, {j}) has no reverse edge ({j}, {i})"
        )
    return frozenset((min(i, j), max(i, j)) for i, j in listed)


def graph_to_dict(graph: TextAttributedGraph) -> dict[str, Any]:
    """Returns the JSON graph document of ``graph``."""
    return {
        "directed": False,
        "label_space": list(graph.label_space),
        "nodes": [
            {
                "id": i,
                "text": graph.texts[i],
                "features": graph.features[i].tolist(),
                "label": (
                    graph.label_space[graph.labels[i]] if i in graph.labels else None
                ),
            }
            for i in range(graph.node_count)
        ],
        "edges": [list(e) for e in sorted(graph.edges)],
    }


def save_graph(graph: TextAttributedGraph, path: PathLike) -> None:
    """Writes ``graph`` in the JSON graph schema.

    Parameters
    ----------
    graph : TextAttributedGraph
        Graph to write.
    path : str | Path
        Output path. Parent directories are created.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(graph_to_dict(graph), f, sort_keys=True)
    logger.info("wrote graph with %d nodes to %s", graph.node_count, path)


# ------------------------------------------------------------------------------
# synthetic graphs
# ------------------------------------------------------------------------------


def synthetic_word_pools(
    classes: int, words_per_class: int, shared_words: int = 10
) -> tuple[tuple[tuple[str, ...], ...], tuple[str, ...]]:
    """Returns the word inventory of synthetic graphs.

    Parameters
    ----------
    classes : int
        Number of classes.
    words_per_class : int
        Size of each class-specific word pool.
    shared_words : int, optional
        Size of the class-agnostic pool. Defaults to ``10``.

    Returns
    -------
    tuple[tuple[str, ...], ...]
        One word pool per class.
    tuple[str, ...]
        Shared word pool.
    """
    class_pools = tuple(
        tuple(f"c{c}w{j:02d}" for j in range(words_per_class)) for c in range(classes)
    )
    shared = tuple(f"s{j:02d}" for j in range(shared_words))
    return class_pools, shared


def make_synthetic_graph(
    n: int,
    classes: int,
    p_in: float,
    p_out: float,
    words_per_class: int,
    seed: int,
    text_len: int = 8,
    class_bias: float = 0.5,
    shared_words: int = 10,
) -> TextAttributedGraph:
    """Generates a stochastic-block-model graph with class-biased bag-of-words text.

    Parameters
    ----------
    n : int
        Number of nodes.
    classes : int
        Number of classes (blocks).
    p_in : float
        Edge probability between nodes of the same class.
    p_out : float
        Edge probability between nodes of different classes.
    words_per_class : int
        Size of each class-specific word pool.
    seed : int
        Random seed.
    text_len : int, optional
        Words per node text. Defaults to ``8``.
    class_bias : float, optional
        Probability that a word is drawn from the node's class pool rather than
        from the shared pool. Defaults to ``0.5``.
    shared_words : int, optional
        Size of the shared pool. Defaults to ``10``.

    Returns
    -------
    TextAttributedGraph
        Fully labeled graph whose features are word counts over the vocabulary.
    """
    if classes < 2:
        raise ValueError("At least two classes are required.")
    if n < classes:
        raise ValueError(f"Need at least one node per class, got n={n} < classes={classes}.")
    if not 0.0 <= p_out < p_in <= 1.0:
        raise ValueError(f"Expected 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}.")
    if words_per_class < 1 or text_len < 1:
        raise ValueError("words_per_class and text_len must be positive.")
    if not 0.0 <= class_bias <= 1.0:
        raise ValueError(f"class_bias must lie in [0, 1], got {class_bias}.")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)

    # stochastic block model over the upper triangle
    same_class = labels[:, None] == labels[None, :]
    probs = np.where(same_class, p_in, p_out)
    draws = rng.random((n, n))
    rows, cols = np.nonzero(np.triu(draws < probs, k=1))
    edges = frozenset(zip(rows.tolist(), cols.tolist()))

    # class-biased texts
    class_pools, shared = synthetic_word_pools(classes, words_per_class, shared_words)
    vocabulary = sorted({w for pool in class_pools for w in pool} | set(shared))
    word_index = {w: i for i, w in enumerate(vocabulary)}
    features = np.zeros((n, len(vocabulary)))
    texts = []
    for node in range(n):
        from_class = rng.random(text_len) < class_bias
        pool = class_pools[labels[node]]
        class_draws = rng.integers(0, len(pool), size=text_len)
        shared_draws = rng.integers(0, max(len(shared), 1), size=text_len)
        words = [
            pool[c] if use_class or not shared else shared[s]
            for use_class, c, s in zip(from_class, class_draws, shared_draws)
        ]
        for w in words:
            features[node, word_index[w]] += 1.0
        texts.append(" ".join(words))

    return TextAttributedGraph(
        features=features,
        texts=tuple(texts),
        edges=edges,
        label_space=label_names(classes),
        labels={i: int(c) for i, c in enumerate(labels)},
    )


def edge_density(graph: TextAttributedGraph) -> tuple[float, float]:
    """Returns the measured intra-class and inter-class edge densities.

    Only node pairs whose both endpoints are labeled are counted.
    """
    nodes = sorted(graph.labels)
    labels = np.array([graph.labels[i] for i in nodes])
    sub = graph.adjacency[np.ix_(nodes, nodes)]
    upper = np.triu(np.ones_like(sub, dtype=bool), k=1)
    same = (labels[:, None] == labels[None, :]) & upper
    diff = (labels[:, None] != labels[None, :]) & upper
    intra = sub[same].sum() / max(same.sum(), 1)
    inter = sub[diff].sum() / max(diff.sum(), 1)
    return float(intra), float(inter)


# ------------------------------------------------------------------------------
# adjacency normalization
# ------------------------------------------------------------------------------


def normalize(adjacency: np.ndarray, mode: AdjacencyMode = "symmetric") -> np.ndarray:
    r"""Adds self-loops to an adjacency matrix and optionally normalizes it.

    .. math::
        \begin{array}{ll} \\
            \tilde{A} = A + I & \text{(self_loop)} \\
            D^{-1/2} (A + I) D^{-1/2} & \text{(symmetric)} \\
        \end{array}

    where :math:`D` is the degree matrix of :math:`A + I`.

    Parameters
    ----------
    adjacency : np.ndarray
        Symmetric binary adjacency matrix with zero diagonal.
    mode : AdjacencyMode, optional
        ``self_loop`` or ``symmetric``. Defaults to ``symmetric``.

    Returns
    -------
    np.ndarray
        Normalized adjacency matrix.
    """
    a_tilde = np.asarray(adjacency, dtype=np.float64) + np.eye(adjacency.shape[0])
    if mode == "self_loop":
        return a_tilde
    if mode == "symmetric":
        d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
        return d_inv_sqrt[:, None] * a_tilde * d_inv_sqrt[None, :]
    raise ValueError(f"Unknown adjacency mode {mode!r}. Must be self_loop or symmetric.")


def normalize_adjacency(
    graph: TextAttributedGraph, mode: AdjacencyMode = "symmetric"
) -> np.ndarray:
    """Returns the self-loop or symmetric-normalized adjacency matrix of ``graph``."""
    return normalize(graph.adjacency, mode)


# ------------------------------------------------------------------------------
# splits
# ------------------------------------------------------------------------------


def _labeled_count(n: int, ratio: float) -> int:
    # solution of L = round(ratio * (N - L)) closest to N * ratio / (1 + ratio)
    estimate = n * ratio / (1.0 + ratio)
    candidates = range(max(0, math.floor(estimate) - 1), min(n, math.ceil(estimate) + 1) + 1)
    consistent = [c for c in candidates if c == math.floor(ratio * (n - c) + 0.5)]
    if consistent:
        return min(consistent, key=lambda c: abs(c - estimate))
    return min(n, math.floor(estimate + 0.5))


def split_nodes(
    graph: TextAttributedGraph, labeled_to_unlabeled_ratio: float, seed: int
) -> DataSplit:
    """Draws a stratified labeled/unlabeled split.

    The labeled set size is ``round(ratio * n_unlabeled)`` subject to
    ``n_labeled + n_unlabeled = N``. Every class first receives one labeled node, the rest
    of the labeled budget is drawn uniformly from the remaining labeled nodes.

    Parameters
    ----------
    graph : TextAttributedGraph
        Graph with ground-truth labels.
    labeled_to_unlabeled_ratio : float
        Target ``n_labeled / n_unlabeled``.
    seed : int
        Random seed.

    Returns
    -------
    DataSplit
        Disjoint, covering split.

    Raises
    ------
    SplitError
        If the ratio yields fewer labeled nodes than there are classes or there are
        not enough nodes with ground truth.
    """
    if labeled_to_unlabeled_ratio <= 0:
        raise ValueError(f"Ratio must be positive, got {labeled_to_unlabeled_ratio}.")
    n = graph.node_count
    n_labeled = _labeled_count(n, labeled_to_unlabeled_ratio)

    present = sorted({graph.labels[i] for i in graph.labels})
    if n_labeled < len(present):
        raise SplitError(
            f"ratio too small to cover all classes: ratio {labeled_to_unlabeled_ratio} "
            f"gives {n_labeled} labeled nodes for {len(present)} classes"
        )
    candidates = sorted(graph.labels)
    if n_labeled > len(candidates):
        raise SplitError(
            f"{n_labeled} labeled nodes requested but only {len(candidates)} have ground truth"
        )

    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for c in present:
        members = [i for i in candidates if graph.labels[i] == c]
        chosen.append(int(members[rng.integers(len(members))]))
    rest = np.array(sorted(set(candidates) - set(chosen)), dtype=np.int64)
    extra = rng.choice(rest, size=n_labeled - len(chosen), replace=False) if len(rest) else []
    labeled = frozenset(chosen) | frozenset(int(i) for i in extra)
    unlabeled = frozenset(range(n)) - labeled
    logger.debug("split %d labeled / %d unlabeled (seed %d)", len(labeled), len(unlabeled), seed)
    return DataSplit(labeled=labeled, unlabeled=unlabeled)
