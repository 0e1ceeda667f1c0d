import math
from collections.abc import Callable, Sequence
from typing import Optional

import numpy as np
import pytest

from graphtune.decoder import DecoderConfig, FrozenDecoder, init_decoder_params
from graphtune.graph import TextAttributedGraph, make_synthetic_graph
from graphtune.instructions import InstructionExample, PromptTemplate
from graphtune.loss_funcs import log_softmax
from graphtune.tokenizer import Vocabulary, build_vocabulary, split_words

# node id -> (class, log-probability of the label token), None for no answer
Script = Callable[[int], Optional[tuple[int, float]]]

SHORT_TEMPLATE = PromptTemplate(max_text_len=4)


def graph_vocabulary(graph: TextAttributedGraph, template: PromptTemplate = SHORT_TEMPLATE) -> Vocabulary:
    words = {w for text in graph.texts for w in split_words(text)}
    return build_vocabulary(graph.label_space, words, template.fixed_tokens)


def peaked(size: int, token: int, logprob: float) -> np.ndarray:
    """Log-probabilities with ``token`` at ``logprob`` and the rest spread evenly."""
    p = math.exp(logprob)
    rest = math.log((1.0 - p) / (size - 1)) if p < 1.0 else -50.0
    out = np.full(size, rest)
    out[token] = logprob
    return out


class ScriptedDecoder:
    """Decoder double answering ``<label> <eos>`` as scripted per node.

    The training loss is a linear softmax readout of the first graph slot, so
    fine-tuning has real gradients to follow.
    """

    max_len = 256

    def __init__(self, vocab: Vocabulary, script: Script, name: str, embed_dim: int = 8, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.digest = f"double-{name}"
        self.script = script
        self.table = rng.normal(0.0, 0.5, size=(len(vocab), embed_dim))
        self.readout = rng.normal(0.0, 0.5, size=(embed_dim, len(vocab)))

    def token_embeddings(self, ids: Sequence[int]) -> np.ndarray:
        return self.table[np.asarray(ids, dtype=np.int64)].copy()

    def next_token_logprobs(
        self, example: InstructionExample, embeddings: np.ndarray, response: Sequence[int]
    ) -> np.ndarray:
        size = len(self.vocab)
        answer = self.script(example.node_id)
        if answer is None:
            return np.full(size, -math.log(size))
        label, logprob = answer
        if not response:
            return peaked(size, self.vocab.index[self.vocab.label_words[label]], logprob)
        return peaked(size, self.vocab.eos_id, 0.0)

    def response_losses(
        self, examples: Sequence[InstructionExample], embeddings: Sequence[np.ndarray]
    ) -> tuple[np.ndarray, list[np.ndarray]]:
        size = len(self.vocab)
        losses, grads = [], []
        for example, emb in zip(examples, embeddings):
            if not example.target_tokens:
                raise ValueError(f"empty target for node {example.node_id}")
            slot = example.graph_slots[0]
            logp = log_softmax(emb[slot] @ self.readout)
            targets = list(example.target_tokens)
            losses.append(-float(np.mean(logp[targets])))
            dlogits = np.exp(logp) - np.bincount(targets, minlength=size) / len(targets)
            g = np.zeros_like(emb)
            g[slot] = self.readout @ dlogits
            grads.append(g)
        return np.array(losses), grads


def oracle_script(graph: TextAttributedGraph) -> Script:
    return lambda v: (graph.labels[v], 0.0)


def noisy_script(graph: TextAttributedGraph) -> Script:
    """Every fifth node gets a wrong label with low confidence, the rest the true one."""
    classes = len(graph.label_space)

    def script(v: int) -> tuple[int, float]:
        if v % 5 == 0:
            return (graph.labels[v] + 1) % classes, -1.4
        return graph.labels[v], math.log(0.9)

    return script


@pytest.fixture
def small_graph() -> TextAttributedGraph:
    return make_synthetic_graph(30, 3, 0.3, 0.05, 6, seed=0, text_len=4, shared_words=4)


@pytest.fixture
def tiny_graph() -> TextAttributedGraph:
    return TextAttributedGraph(
        features=np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]]),
        texts=("alpha beta", "gamma", "alpha gamma", ""),
        edges=frozenset({(0, 1), (1, 2), (2, 3)}),
        label_space=("Red", "Blue"),
        labels={0: 0, 1: 1, 2: 0, 3: 1},
    )


@pytest.fixture
def scripted_decoder() -> Callable[..., ScriptedDecoder]:
    def make(graph: TextAttributedGraph, script: Script, name: str = "scripted", embed_dim: int = 8):
        return ScriptedDecoder(graph_vocabulary(graph), script, name, embed_dim)

    return make


@pytest.fixture
def oracle_decoder(small_graph, scripted_decoder) -> ScriptedDecoder:
    return scripted_decoder(small_graph, oracle_script(small_graph), "oracle")


@pytest.fixture
def uniform_decoder(small_graph, scripted_decoder) -> ScriptedDecoder:
    return scripted_decoder(small_graph, lambda v: None, "uniform")


@pytest.fixture
def noisy_decoder(small_graph, scripted_decoder) -> ScriptedDecoder:
    return scripted_decoder(small_graph, noisy_script(small_graph), "noisy")


@pytest.fixture
def tiny_frozen_decoder(small_graph) -> FrozenDecoder:
    config = DecoderConfig(embed_dim=8, n_heads=2, n_blocks=1, max_len=40, mlp_ratio=2)
    return FrozenDecoder(init_decoder_params(graph_vocabulary(small_graph), config, seed=0).freeze())


@pytest.fixture
def constant_decoder(small_graph, scripted_decoder) -> ScriptedDecoder:
    return scripted_decoder(small_graph, lambda v: (0, 0.0), "constant")
