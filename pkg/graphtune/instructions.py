"""instruction templates and examples"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from typing import Literal, Optional

import numpy as np

from .graph import TextAttributedGraph
from .tokenizer import BOS, EOS, GRAPH, Vocabulary, tokenize

logger = logging.getLogger(__name__)

Provenance = Literal["ground-truth", "pseudo"]

TEXT_SLOT = "{text}"
LABEL_SLOT = "{label}"


@dataclass(frozen=True)
class PromptTemplate:
    """Node-classification prompt.

    Tokens are separated by whitespace. ``<graph>`` marks the graph-token slot and
    ``{text}`` the node-text slot of the instruction; ``{label}`` marks the label
    word of the response.

    Parameters
    ----------
    instruction : str, optional
        Instruction pattern.
    response : str, optional
        Response pattern; must end in ``<eos>``.
    max_text_len : int, optional
        Node-text tokens kept per instruction. Defaults to ``16``.
    neighbor_tokens : int, optional
        Additional graph-token slots filled with the tokens of the lowest-id
        1-hop neighbours, at most ``5``. Defaults to ``0``.
    """

    instruction: str = "node : <graph> text : {text} question : category ? answer :"
    response: str = "{label} <eos>"
    max_text_len: int = 16
    neighbor_tokens: int = 0

    def __post_init__(self) -> None:
        parts = self.instruction.split()
        if parts.count(GRAPH) != 1 or parts.count(TEXT_SLOT) != 1:
            raise ValueError("The instruction needs exactly one <graph> and one {text} slot.")
        response = self.response.split()
        if response.count(LABEL_SLOT) != 1 or response[-1] != EOS:
            raise ValueError("The response needs one {label} slot and must end in <eos>.")
        if not 0 <= self.neighbor_tokens <= 5:
            raise ValueError(f"neighbor_tokens must lie in [0, 5], got {self.neighbor_tokens}.")
        if self.max_text_len < 0:
            raise ValueError("max_text_len must be nonnegative.")

    @property
    def fixed_tokens(self) -> list[str]:
        """Template tokens other than slots and special tokens."""
        slots = {GRAPH, TEXT_SLOT, LABEL_SLOT, EOS, BOS}
        return [t for t in self.instruction.split() + self.response.split() if t not in slots]


@dataclass(frozen=True)
class InstructionExample:
    """One instruction for a node, optionally paired with a target response.

    Parameters
    ----------
    node_id : int
        Node the instruction is about (``-1`` for pretraining corpus entries).
    token_ids : tuple[int, ...]
        Instruction token ids starting with ``<bos>``; graph slots hold the
        ``<graph>`` id.
    graph_slots : tuple[int, ...]
        Positions of the graph-token slots.
    graph_nodes : tuple[int, ...]
        Node whose graph token fills each slot.
    target_tokens : tuple[int, ...], optional
        Response ids ending in ``<eos>``. Defaults to ``()``.
    provenance : Provenance, optional
        ``ground-truth`` or ``pseudo``. Defaults to ``ground-truth``.
    warnings : tuple[str, ...], optional
        Warnings recorded while building the instruction.
    """

    node_id: int
    token_ids: tuple[int, ...]
    graph_slots: tuple[int, ...]
    graph_nodes: tuple[int, ...]
    target_tokens: tuple[int, ...] = ()
    provenance: Provenance = "ground-truth"
    warnings: tuple[str, ...] = ()

    @property
    def length(self) -> int:
        return len(self.token_ids)

    def with_target(
        self, target_tokens: Sequence[int], provenance: Provenance
    ) -> "InstructionExample":
        return replace(self, target_tokens=tuple(target_tokens), provenance=provenance)


def assemble_instruction(
    node_id: int,
    text_ids: Sequence[int],
    graph_nodes: Sequence[int],
    template: PromptTemplate,
    vocab: Vocabulary,
) -> InstructionExample:
    """Fills the template slots and assigns positions left to right."""
    ids = [vocab.bos_id]
    slots: list[int] = []
    for part in template.instruction.split():
        if part == GRAPH:
            for _ in graph_nodes:
                slots.append(len(ids))
                ids.append(vocab.graph_id)
        elif part == TEXT_SLOT:
            ids.extend(text_ids[: template.max_text_len])
        else:
            ids.append(vocab.id_of(part))
    return InstructionExample(node_id, tuple(ids), tuple(slots), tuple(graph_nodes))


def build_instruction(
    node: int,
    graph: TextAttributedGraph,
    template: PromptTemplate,
    vocab: Vocabulary,
) -> InstructionExample:
    """Builds the instruction for ``node`` without a target response.

    The sequence is ``<bos>`` followed by the template with the node's graph
    token(s) at the ``<graph>`` slot and its truncated text at the ``{text}`` slot.
    The graph-token embeddings themselves are inserted by :func:`embed_instruction`.

    Parameters
    ----------
    node : int
        Node id.
    graph : TextAttributedGraph
        Graph the node belongs to.
    template : PromptTemplate
        Prompt template.
    vocab : Vocabulary
        Vocabulary of the decoder.

    Returns
    -------
    InstructionExample
        Instruction; a warning is recorded when the node has neither text nor
        nonzero features.
    """
    if not 0 <= node < graph.node_count:
        raise IndexError(f"Node {node} does not exist in a graph of {graph.node_count} nodes.")
    text_ids = tokenize(graph.texts[node], vocab)
    graph_nodes = [node, *graph.neighbors(node)[: template.neighbor_tokens]]
    example = assemble_instruction(node, text_ids, graph_nodes, template, vocab)

    if not text_ids and not np.any(graph.features[node]):
        message = f"node {node} has empty text and all-zero features"
        logger.warning(message)
        example = replace(example, warnings=(message,))
    return example


def handcrafted_response(label: int, template: PromptTemplate, vocab: Vocabulary) -> tuple[int, ...]:
    """Returns the target response ids for class ``label``."""
    word = vocab.label_words[label]
    return tuple(
        vocab.id_of(word if part == LABEL_SLOT else part) for part in template.response.split()
    )


def embed_instruction(
    example: InstructionExample,
    graph_tokens: Optional[np.ndarray],
    token_embeddings: np.ndarray,
) -> np.ndarray:
    """Returns the instruction embedding sequence of shape ``(T, d_emb)``.

    Parameters
    ----------
    example : InstructionExample
        Instruction.
    graph_tokens : np.ndarray, optional
        Graph-token matrix ``(N, d_emb)``. If ``None`` the graph slots keep the
        embedding of the ``<graph>`` placeholder token.
    token_embeddings : np.ndarray
        Embeddings of the instruction token ids, ``(T, d_emb)``.

    Returns
    -------
    np.ndarray
        Embedding sequence.
    """
    sequence = np.array(token_embeddings, dtype=np.float64)
    if graph_tokens is not None and example.graph_slots:
        sequence[list(example.graph_slots)] = graph_tokens[list(example.graph_nodes)]
    return sequence
