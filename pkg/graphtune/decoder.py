"""frozen generative decoder"""

import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Optional, Protocol, Union

import numpy as np
from compyute.nn.functional.functions import FunctionContext, PseudoContext

from .confidence import ScoredResponse, score_response
from .decoder_funcs import GPTDecoderFunction, causal_mask, decoder_param_names, init_decoder_weights
from .errors import DivergenceError, FreezeViolationError
from .instructions import InstructionExample, embed_instruction
from .loss_funcs import MaskedCrossEntropyFunction, log_softmax
from .serialization import array_from_json, array_to_json, content_digest, dump_json
from .tensor_utils import to_array, to_tensor
from .tokenizer import Vocabulary

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class DecoderConfig:
    """Decoder architecture.

    Parameters
    ----------
    embed_dim : int, optional
        Number of embedding dimensions. Defaults to ``32``.
    n_heads : int, optional
        Number of attention heads. Defaults to ``2``.
    n_blocks : int, optional
        Number of transformer blocks. Defaults to ``2``.
    max_len : int, optional
        Maximum context length. Defaults to ``64``.
    mlp_ratio : int, optional
        Hidden MLP channels as a multiple of ``embed_dim``. Defaults to ``4``.
    """

    embed_dim: int = 32
    n_heads: int = 2
    n_blocks: int = 2
    max_len: int = 64
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}.")
        if min(self.embed_dim, self.n_heads, self.n_blocks, self.max_len, self.mlp_ratio) < 1:
            raise ValueError("Decoder dimensions must be positive.")


@dataclass(frozen=True)
class DecoderParams:
    """Decoder weights together with the vocabulary they were trained on.

    Parameters
    ----------
    config : DecoderConfig
        Architecture.
    vocab : Vocabulary
        Vocabulary.
    weights : Mapping[str, np.ndarray]
        Named weight arrays.
    frozen : bool, optional
        Whether the weights are frozen. Frozen weights are read-only arrays.
    digest : str, optional
        Content digest recorded at freeze time.
    """

    config: DecoderConfig
    vocab: Vocabulary
    weights: Mapping[str, np.ndarray]
    frozen: bool = False
    digest: Optional[str] = None

    def __post_init__(self) -> None:
        expected = decoder_param_names(self.config.n_blocks)
        if sorted(self.weights) != sorted(expected):
            missing = sorted(set(expected) - set(self.weights))
            unknown = sorted(set(self.weights) - set(expected))
            raise ValueError(f"Decoder weights do not match the config: missing {missing}, unknown {unknown}.")
        if self.weights["token_emb"].shape != (len(self.vocab), self.config.embed_dim):
            raise ValueError(
                f"Token embedding {self.weights['token_emb'].shape} does not match "
                f"{len(self.vocab)} tokens of dim {self.config.embed_dim}."
            )

    def compute_digest(self) -> str:
        return content_digest(
            self.weights,
            extra={
                "config": asdict(self.config),
                "tokens": list(self.vocab.tokens),
                "label_words": list(self.vocab.label_words),
            },
        )

    def freeze(self) -> "DecoderParams":
        """Returns read-only copies of the weights with the digest recorded."""
        weights = {}
        for name, w in self.weights.items():
            w = np.array(w, dtype=np.float64)
            w.setflags(write=False)
            weights[name] = w
        params = DecoderParams(self.config, self.vocab, MappingProxyType(weights), frozen=True)
        return DecoderParams(
            self.config, self.vocab, params.weights, frozen=True, digest=params.compute_digest()
        )


def init_decoder_params(
    vocab: Vocabulary, config: Optional[DecoderConfig] = None, seed: int = 0
) -> DecoderParams:
    """Initializes trainable decoder weights for ``vocab``."""
    config = config or DecoderConfig()
    weights = init_decoder_weights(
        vocab_size=len(vocab),
        embed_dim=config.embed_dim,
        n_heads=config.n_heads,
        n_blocks=config.n_blocks,
        max_len=config.max_len,
        mlp_channels=config.mlp_ratio * config.embed_dim,
        rng=np.random.default_rng(seed),
    )
    return DecoderParams(config, vocab, weights)


class Decoder(Protocol):
    """Interface of everything that consumes a frozen decoder."""

    @property
    def vocab(self) -> Vocabulary: ...

    @property
    def embed_dim(self) -> int: ...

    @property
    def max_len(self) -> int: ...

    @property
    def digest(self) -> str: ...

    def token_embeddings(self, ids: Sequence[int]) -> np.ndarray:
        """Returns the input embeddings of ``ids``, ``(T, d_emb)``."""
        ...

    def next_token_logprobs(
        self, example: InstructionExample, embeddings: np.ndarray, response: Sequence[int]
    ) -> np.ndarray:
        """Returns the log-probabilities ``(V,)`` of the token following the partial response."""
        ...

    def response_losses(
        self, examples: Sequence[InstructionExample], embeddings: Sequence[np.ndarray]
    ) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns each example's mean response cross-entropy and its gradient
        with respect to that example's instruction embeddings."""
        ...


class FrozenDecoder:
    """Read-only decoder built from frozen :class:`DecoderParams`.

    Instances are safe to share between threads.

    Parameters
    ----------
    params : DecoderParams
        Frozen parameters.
    """

    def __init__(self, params: DecoderParams) -> None:
        if not params.frozen or params.digest is None:
            raise FreezeViolationError("FrozenDecoder requires frozen parameters with a recorded digest.")
        self.params = params
        self._weights = {name: to_tensor(w) for name, w in params.weights.items()}
        self._mask = causal_mask(params.config.max_len)

    @property
    def vocab(self) -> Vocabulary:
        return self.params.vocab

    @property
    def embed_dim(self) -> int:
        return self.params.config.embed_dim

    @property
    def max_len(self) -> int:
        return self.params.config.max_len

    @property
    def digest(self) -> str:
        """Recomputes the content digest and verifies it against the freeze digest."""
        digest = self.params.compute_digest()
        if digest != self.params.digest:
            raise FreezeViolationError(
                f"decoder weights changed after freezing: digest {digest[:12]} != {self.params.digest[:12]}"
            )
        return digest

    def token_embeddings(self, ids: Sequence[int]) -> np.ndarray:
        return self.params.weights["token_emb"][np.asarray(ids, dtype=np.int64)].copy()

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Forward pass without gradient bookkeeping, ``(B, T, C) -> (B, T, V)``."""
        cfg = self.params.config
        logits = GPTDecoderFunction.forward(
            PseudoContext(), to_tensor(x), self._weights, cfg.n_heads, cfg.n_blocks, self._mask
        )
        return to_array(logits)

    def next_token_logprobs(
        self, example: InstructionExample, embeddings: np.ndarray, response: Sequence[int]
    ) -> np.ndarray:
        x = np.concatenate([embeddings, self.token_embeddings(response)]) if response else embeddings
        if len(x) > self.max_len:
            raise ValueError(f"Sequence of length {len(x)} exceeds the context length {self.max_len}.")
        return log_softmax(self.logits(x[None])[0, -1])

    def response_losses(
        self, examples: Sequence[InstructionExample], embeddings: Sequence[np.ndarray]
    ) -> tuple[np.ndarray, list[np.ndarray]]:
        if not examples:
            raise ValueError("No examples given.")
        batch = _teacher_forcing_batch(examples, embeddings, self, self.max_len)
        x, targets, mask = batch

        cfg = self.params.config
        ctx = FunctionContext()
        logits = GPTDecoderFunction.forward(ctx, to_tensor(x), self._weights, cfg.n_heads, cfg.n_blocks, self._mask)
        losses = MaskedCrossEntropyFunction.forward(ctx, logits, targets, mask)
        dlogits = MaskedCrossEntropyFunction.backward(ctx, to_tensor(np.ones(len(examples))))
        dx, _ = GPTDecoderFunction.backward(ctx, dlogits)
        dx = to_array(dx)
        grads = [dx[i, : len(e)].copy() for i, e in enumerate(embeddings)]
        return to_array(losses), grads


def _teacher_forcing_batch(
    examples: Sequence[InstructionExample],
    embeddings: Sequence[np.ndarray],
    decoder: Decoder,
    max_len: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # instruction embeddings followed by the embedded response minus its last
    # token, right-padded; position len(instruction) - 1 + k predicts response[k]
    lengths = []
    for example, emb in zip(examples, embeddings):
        if not example.target_tokens:
            raise ValueError(f"empty target for node {example.node_id}")
        lengths.append(len(emb) + len(example.target_tokens) - 1)
    s = max(lengths)
    if s > max_len:
        raise ValueError(f"Sequence of length {s} exceeds the context length {max_len}.")

    x = np.zeros((len(examples), s, decoder.embed_dim))
    targets = np.zeros((len(examples), s), dtype=np.int64)
    mask = np.zeros((len(examples), s))
    for i, (example, emb) in enumerate(zip(examples, embeddings)):
        t, response = len(emb), example.target_tokens
        x[i, :t] = emb
        if len(response) > 1:
            x[i, t : lengths[i]] = decoder.token_embeddings(response[:-1])
        targets[i, t - 1 : lengths[i]] = response
        mask[i, t - 1 : lengths[i]] = 1.0
    return x, targets, mask


def response_loss(
    example: InstructionExample, embeddings: np.ndarray, decoder: Decoder
) -> tuple[float, np.ndarray]:
    """Computes the masked response cross-entropy of one instruction.

    Parameters
    ----------
    example : InstructionExample
        Instruction with a nonempty target response.
    embeddings : np.ndarray
        Instruction embedding sequence ``(T, d_emb)``.
    decoder : Decoder
        Frozen decoder.

    Returns
    -------
    float
        Mean next-token cross-entropy over the response positions.
    np.ndarray
        Gradient with respect to every instruction embedding, ``(T, d_emb)``.
    """
    losses, grads = decoder.response_losses([example], [embeddings])
    loss = float(losses[0])
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite response loss for node {example.node_id}")
    return loss, grads[0]


def parse_label(
    response: Union[ScoredResponse, Sequence[int]], vocab: Vocabulary, terminated: bool = True
) -> Optional[int]:
    """Returns the class whose label word appears first in the response.

    Parameters
    ----------
    response : ScoredResponse | Sequence[int]
        Response or its token ids.
    vocab : Vocabulary
        Vocabulary holding the label words.
    terminated : bool, optional
        Whether a plain token sequence ended in ``<eos>``. Ignored for
        :class:`ScoredResponse`. Defaults to ``True``.

    Returns
    -------
    int, optional
        Class id, or ``None`` (reject) if no label word appears or the response
        is unterminated.
    """
    if isinstance(response, ScoredResponse):
        tokens, terminated = response.tokens, response.terminated
    else:
        tokens = response
    if not terminated:
        return None
    label_index = {w: c for c, w in enumerate(vocab.label_words)}
    for t in tokens:
        c = label_index.get(vocab.tokens[t])
        if c is not None:
            return c
    return None


def decode_greedy(
    instruction: InstructionExample,
    decoder: Decoder,
    graph_tokens: Optional[np.ndarray],
    max_response_len: int = 4,
) -> ScoredResponse:
    """Greedily generates a response token by token.

    Ties are broken by the lowest token id. Generation stops after ``<eos>``,
    after ``max_response_len`` tokens or when the next step would exceed the
    decoder's context length; the latter two leave the response unterminated.

    Parameters
    ----------
    instruction : InstructionExample
        Instruction to respond to.
    decoder : Decoder
        Frozen decoder.
    graph_tokens : np.ndarray, optional
        Graph-token matrix ``(N, d_emb)`` filling the graph slots.
    max_response_len : int, optional
        Maximum number of generated tokens. Defaults to ``4``.

    Returns
    -------
    ScoredResponse
        Response with per-token log-probabilities, parsed label and confidence.
    """
    if max_response_len < 1:
        raise ValueError("max_response_len must be positive.")
    vocab = decoder.vocab
    embeddings = embed_instruction(instruction, graph_tokens, decoder.token_embeddings(instruction.token_ids))

    # the k-th step reads the instruction plus k - 1 emitted tokens
    budget = min(max_response_len, decoder.max_len - len(embeddings) + 1)
    if budget < 1:
        logger.warning("instruction of node %d fills the context, no response generated", instruction.node_id)
        return ScoredResponse(instruction.node_id, (), (), False, None, math.inf, -math.inf)

    tokens: list[int] = []
    logprobs: list[float] = []
    while len(tokens) < budget:
        step = decoder.next_token_logprobs(instruction, embeddings, tokens)
        token = int(np.argmax(step))
        tokens.append(token)
        logprobs.append(min(float(step[token]), 0.0))
        if token == vocab.eos_id:
            break

    terminated = tokens[-1] == vocab.eos_id
    return score_response(
        instruction.node_id, tokens, logprobs, terminated, parse_label(tokens, vocab, terminated)
    )


# ------------------------------------------------------------------------------
# checkpoints
# ------------------------------------------------------------------------------


def save_decoder(params: DecoderParams, path: PathLike) -> None:
    """Writes a frozen decoder as a JSON checkpoint."""
    if not params.frozen or params.digest is None:
        raise FreezeViolationError("Only frozen decoders can be saved.")
    doc = {
        "config": asdict(params.config),
        "vocab": {"tokens": list(params.vocab.tokens), "label_words": list(params.vocab.label_words)},
        "weights": {name: array_to_json(w) for name, w in params.weights.items()},
        "digest": params.digest,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(doc), encoding="utf-8")
    logger.info("saved decoder %s to %s", params.digest[:12], path)


def load_decoder(path: PathLike) -> DecoderParams:
    """Loads a decoder checkpoint and verifies its digest.

    Raises
    ------
    FileNotFoundError
        If the file does not exist.
    FreezeViolationError
        If the stored weights do not match the recorded digest.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Decoder checkpoint {path} does not exist.")
    doc = json.loads(path.read_text(encoding="utf-8"))
    vocab = Vocabulary(tuple(doc["vocab"]["tokens"]), tuple(doc["vocab"]["label_words"]))
    weights = {name: array_from_json(w) for name, w in doc["weights"].items()}
    params = DecoderParams(DecoderConfig(**doc["config"]), vocab, weights).freeze()
    if params.digest != doc["digest"]:
        raise FreezeViolationError(
            f"decoder checkpoint {path} is corrupt: digest {params.digest[:12]} != {doc['digest'][:12]}"
        )
    return params
