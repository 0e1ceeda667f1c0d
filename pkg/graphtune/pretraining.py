"""deterministic decoder pretraining"""

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from compyute.nn.functional.embedding_funcs import EmbeddingFunction
from compyute.nn.functional.functions import FunctionContext

from .decoder import DecoderConfig, DecoderParams, init_decoder_params
from .decoder_funcs import GPTDecoderFunction, causal_mask
from .errors import DivergenceError
from .graph import TextAttributedGraph, label_names, synthetic_word_pools
from .instructions import PromptTemplate, assemble_instruction, handcrafted_response
from .loss_funcs import MaskedCrossEntropyFunction
from .optimizers import get_optimizer
from .tensor_utils import to_array, to_ids, to_tensor
from .tokenizer import Vocabulary, build_vocabulary, split_words, tokenize
from .tracking import ScalarLogger

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorpusSpec:
    """Synthetic instruction/response corpus the decoder is pretrained on.

    Every entry is an instruction whose text mixes words of one class pool with
    words of the shared pool, followed by the response naming that class. The
    graph slot holds the ``<graph>`` placeholder token.

    Parameters
    ----------
    label_space : tuple[str, ...]
        Class names.
    class_pools : tuple[tuple[str, ...], ...]
        Words characteristic of each class.
    shared_pool : tuple[str, ...]
        Class-agnostic words.
    template : PromptTemplate, optional
        Prompt template.
    n_examples : int, optional
        Number of corpus entries. Defaults to ``384``.
    text_len : tuple[int, int], optional
        Inclusive range of text lengths. Defaults to ``(4, 8)``.
    class_bias : float, optional
        Probability that a text word comes from the class pool. Defaults to ``0.5``.
    extra_words : tuple[str, ...], optional
        Words added to the vocabulary without appearing in the corpus.
    seed : int, optional
        Seed of the corpus sampler. Defaults to ``0``.
    """

    label_space: tuple[str, ...]
    class_pools: tuple[tuple[str, ...], ...]
    shared_pool: tuple[str, ...] = ()
    template: PromptTemplate = field(default_factory=PromptTemplate)
    n_examples: int = 384
    text_len: tuple[int, int] = (4, 8)
    class_bias: float = 0.5
    extra_words: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.class_pools) != len(self.label_space):
            raise ValueError(f"Got {len(self.class_pools)} word pools for {len(self.label_space)} classes.")
        if any(not pool for pool in self.class_pools):
            raise ValueError("Every class needs a nonempty word pool.")
        lo, hi = self.text_len
        if not 1 <= lo <= hi:
            raise ValueError(f"Invalid text length range {self.text_len}.")
        if self.n_examples < 1:
            raise ValueError("The corpus needs at least one example.")
        if not 0.0 <= self.class_bias <= 1.0:
            raise ValueError(f"class_bias must lie in [0, 1], got {self.class_bias}.")

    @classmethod
    def from_word_pools(
        cls,
        classes: int,
        words_per_class: int,
        shared_words: int = 10,
        label_space: Optional[Sequence[str]] = None,
        **kwargs,
    ) -> "CorpusSpec":
        """Uses the word inventory of synthetic graphs with the same arguments."""
        class_pools, shared = synthetic_word_pools(classes, words_per_class, shared_words)
        labels = tuple(label_space) if label_space is not None else label_names(classes)
        return cls(labels, class_pools, shared, **kwargs)

    @classmethod
    def from_labeled_nodes(
        cls, graph: TextAttributedGraph, nodes: Iterable[int], **kwargs
    ) -> "CorpusSpec":
        """Derives class pools from the texts of labeled nodes.

        A word joins the pool of every class whose labeled nodes use it; words
        of no labeled node form the shared pool. Every graph word enters the
        vocabulary.
        """
        pools: list[set[str]] = [set() for _ in graph.label_space]
        for node in nodes:
            label = graph.label_of(node)
            if label is not None:
                pools[label].update(split_words(graph.texts[node]))
        all_words = sorted({w for text in graph.texts for w in split_words(text)})
        pooled = set().union(*pools)
        shared = tuple(w for w in all_words if w not in pooled)
        # a class without labeled text falls back to its own name
        class_pools = tuple(
            tuple(sorted(p)) if p else (name.lower(),) for p, name in zip(pools, graph.label_space)
        )
        return cls(graph.label_space, class_pools, shared, extra_words=tuple(all_words), **kwargs)

    def vocabulary(self) -> Vocabulary:
        words = {w for pool in self.class_pools for w in pool}
        words.update(self.shared_pool, self.extra_words)
        return build_vocabulary(self.label_space, words, self.template.fixed_tokens)


@dataclass(frozen=True)
class Corpus:
    """Padded next-token prediction batch of the whole corpus.

    ``inputs`` and ``targets`` are ``(M, S)`` token ids, ``mask`` marks the
    positions that contribute to the loss and ``labels`` holds the class of every
    entry.
    """

    vocab: Vocabulary
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    instruction_ids: tuple[tuple[int, ...], ...]


def build_corpus(spec: CorpusSpec, response_only: bool = True) -> Corpus:
    """Samples the pretraining corpus.

    Parameters
    ----------
    spec : CorpusSpec
        Corpus description.
    response_only : bool, optional
        Whether only response positions contribute to the loss. Defaults to ``True``.

    Returns
    -------
    Corpus
        Right-padded corpus.
    """
    vocab = spec.vocabulary()
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.text_len

    sequences, starts, labels, instructions = [], [], [], []
    for _ in range(spec.n_examples):
        label = int(rng.integers(len(spec.label_space)))
        length = int(rng.integers(lo, hi + 1))
        pool = spec.class_pools[label]
        words = []
        for _ in range(length):
            if not spec.shared_pool or rng.random() < spec.class_bias:
                words.append(pool[rng.integers(len(pool))])
            else:
                words.append(spec.shared_pool[rng.integers(len(spec.shared_pool))])
        text_ids = tokenize(" ".join(words), vocab)
        example = assemble_instruction(-1, text_ids, (-1,), spec.template, vocab)
        response = handcrafted_response(label, spec.template, vocab)
        sequences.append(example.token_ids + response)
        starts.append(example.length - 1)
        labels.append(label)
        instructions.append(example.token_ids)

    s = max(len(seq) for seq in sequences) - 1
    inputs = np.zeros((len(sequences), s), dtype=np.int64)
    targets = np.zeros((len(sequences), s), dtype=np.int64)
    mask = np.zeros((len(sequences), s))
    for i, (seq, start) in enumerate(zip(sequences, starts)):
        n = len(seq) - 1
        inputs[i, :n] = seq[:-1]
        targets[i, :n] = seq[1:]
        mask[i, start if response_only else 0 : n] = 1.0
    return Corpus(vocab, inputs, targets, mask, np.array(labels), tuple(instructions))


@dataclass(frozen=True)
class PretrainConfig:
    """Decoder pretraining hyperparameters.

    Parameters
    ----------
    steps : int, optional
        Optimizer steps. Defaults to ``400``.
    learning_rate : float, optional
        Adam learning rate. Defaults to ``3e-3``.
    batch_size : int, optional
        Sequences per step. Defaults to ``64``.
    beta1, beta2, eps : float, optional
        Adam constants. Default to ``0.9``, ``0.999`` and ``1e-8``.
    response_only : bool, optional
        Whether the loss covers response positions only. Defaults to ``True``.
    log_dir : str, optional
        TensorBoard log directory. Defaults to ``None``.
    """

    steps: int = 400
    learning_rate: float = 3e-3
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    response_only: bool = True
    log_dir: Optional[str] = None

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive.")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive.")


def pretrain_decoder(
    corpus_spec: CorpusSpec,
    config: Optional[DecoderConfig] = None,
    pretrain_config: Optional[PretrainConfig] = None,
    seed: int = 0,
) -> DecoderParams:
    """Trains the decoder by next-token prediction on the corpus and freezes it.

    Parameters
    ----------
    corpus_spec : CorpusSpec
        Corpus description.
    config : DecoderConfig, optional
        Architecture. Defaults to ``DecoderConfig()``.
    pretrain_config : PretrainConfig, optional
        Hyperparameters. Defaults to ``PretrainConfig()``.
    seed : int, optional
        Seed of the weight initialization and the batch sampler. Defaults to ``0``.

    Returns
    -------
    DecoderParams
        Frozen parameters with their digest recorded.

    Raises
    ------
    DivergenceError
        If the loss becomes non-finite.
    """
    config = config or DecoderConfig()
    pretrain_config = pretrain_config or PretrainConfig()
    corpus = build_corpus(corpus_spec, pretrain_config.response_only)
    if corpus.inputs.shape[1] > config.max_len:
        raise ValueError(
            f"Corpus sequences of length {corpus.inputs.shape[1]} exceed the context length {config.max_len}."
        )

    params = init_decoder_params(corpus.vocab, config, seed)
    weights = dict(params.weights)
    mask = causal_mask(config.max_len)
    optim = get_optimizer(
        "adam",
        pretrain_config.learning_rate,
        beta1=pretrain_config.beta1,
        beta2=pretrain_config.beta2,
        eps=pretrain_config.eps,
    )
    rng = np.random.default_rng(seed)
    tracker = ScalarLogger(pretrain_config.log_dir)

    m = len(corpus.inputs)
    batch_size = min(pretrain_config.batch_size, m)
    for step in range(1, pretrain_config.steps + 1):
        idx = np.sort(rng.choice(m, size=batch_size, replace=False))
        ids, targets, loss_mask = corpus.inputs[idx], corpus.targets[idx], corpus.mask[idx]

        ctx = FunctionContext()
        tensors = {name: to_tensor(w) for name, w in weights.items()}
        x = EmbeddingFunction.forward(ctx, to_ids(ids), tensors["token_emb"])
        logits = GPTDecoderFunction.forward(ctx, x, tensors, config.n_heads, config.n_blocks, mask)
        losses = MaskedCrossEntropyFunction.forward(ctx, logits, targets, loss_mask)
        loss = float(to_array(losses).mean())
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite pretraining loss at step {step}")

        dlogits = MaskedCrossEntropyFunction.backward(ctx, to_tensor(np.full(batch_size, 1.0 / batch_size)))
        dx, grads = GPTDecoderFunction.backward(ctx, dlogits)
        grads = {name: to_array(g) for name, g in grads.items()}
        grads["token_emb"] = grads["token_emb"] + to_array(EmbeddingFunction.backward(ctx, dx))
        weights = optim.step(weights, grads)

        tracker.add_scalar("pretrain/loss", loss, step)
        if step == 1 or step % 50 == 0 or step == pretrain_config.steps:
            logger.info("pretrain step %d/%d loss %.4f", step, pretrain_config.steps, loss)

    frozen = DecoderParams(config, corpus.vocab, weights).freeze()
    logger.info("froze decoder with digest %s", frozen.digest[:12])
    return frozen
