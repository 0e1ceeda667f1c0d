"""response confidence scoring and filtering"""

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np


@dataclass(frozen=True)
class ScoredResponse:
    """A generated response with its per-token log-probabilities.

    Parameters
    ----------
    node_id : int
        Node the response was generated for.
    tokens : tuple[int, ...]
        Emitted token ids.
    token_logprobs : tuple[float, ...]
        Log-probability of every emitted token given the instruction and the
        previously emitted tokens.
    terminated : bool
        Whether the response ends in ``<eos>``.
    parsed_label : int, optional
        Class parsed from the response, ``None`` if rejected.
    entropy : float
        Mean negative log-likelihood of the emitted tokens.
    confidence : float
        ``1 - entropy``; ``-inf`` for unterminated responses.
    """

    node_id: int
    tokens: tuple[int, ...]
    token_logprobs: tuple[float, ...]
    terminated: bool
    parsed_label: Optional[int]
    entropy: float
    confidence: float

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def accepted(self) -> bool:
        """Whether the response may enter the pseudo-labeled set at all."""
        return self.terminated and self.parsed_label is not None


def response_entropy(token_logprobs: Sequence[float]) -> float:
    r"""Computes the mean per-token negative log-likelihood of a response.

    .. math::
        H = -\frac{1}{L} \sum_{k=1}^{L} \log P(y^k \mid x, y^{<k})

    Parameters
    ----------
    token_logprobs : Sequence[float]
        Natural-log probabilities of the emitted tokens.

    Returns
    -------
    float
        Entropy :math:`H \geq 0`.

    Raises
    ------
    ValueError
        If the sequence is empty or contains a positive or non-finite value.
    """
    logprobs = np.asarray(token_logprobs, dtype=np.float64)
    if logprobs.size == 0:
        raise ValueError("Cannot compute the entropy of an empty response.")
    if not np.all(np.isfinite(logprobs)):
        raise ValueError("Log-probabilities must be finite.")
    if np.any(logprobs > 0.0):
        raise ValueError(f"Log-probabilities must be nonpositive, got max {logprobs.max()}.")
    return float(-logprobs.mean())


def confidence(entropy: float) -> float:
    """Returns the output confidence ``1 - entropy``. The value may be negative."""
    return 1.0 - entropy


def score_response(
    node_id: int,
    tokens: Sequence[int],
    token_logprobs: Sequence[float],
    terminated: bool,
    parsed_label: Optional[int],
) -> ScoredResponse:
    """Builds a :class:`ScoredResponse`, assigning ``-inf`` confidence to unterminated responses."""
    if len(tokens) != len(token_logprobs):
        raise ValueError(f"Got {len(tokens)} tokens but {len(token_logprobs)} log-probabilities.")
    entropy = response_entropy(token_logprobs)
    return ScoredResponse(
        node_id=node_id,
        tokens=tuple(int(t) for t in tokens),
        token_logprobs=tuple(float(p) for p in token_logprobs),
        terminated=terminated,
        parsed_label=parsed_label if terminated else None,
        entropy=entropy,
        confidence=confidence(entropy) if terminated else -math.inf,
    )


def filter_confident(scored: Iterable[ScoredResponse], threshold: float) -> list[ScoredResponse]:
    """Selects responses whose confidence strictly exceeds ``threshold``.

    Rejected and unterminated responses are never selected. The result is sorted
    by node id.

    Parameters
    ----------
    scored : Iterable[ScoredResponse]
        Scored pseudo-responses.
    threshold : float
        Confidence threshold; ``-inf`` accepts every parseable response.

    Returns
    -------
    list[ScoredResponse]
        Selected responses.
    """
    selected = [r for r in scored if r.accepted and r.confidence > threshold]
    return sorted(selected, key=lambda r: r.node_id)


def write_scored_csv(
    path: Union[str, Path], scored: Iterable[ScoredResponse], selected_ids: Iterable[int]
) -> None:
    """Writes one row per scored response (node_id, confidence, entropy, parsed_label, selected)."""
    selected = set(selected_ids)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["node_id", "confidence", "entropy", "parsed_label", "selected"])
        for r in sorted(scored, key=lambda r: r.node_id):
            writer.writerow(
                [
                    r.node_id,
                    f"{r.confidence:.6f}",
                    f"{r.entropy:.6f}",
                    "" if r.parsed_label is None else r.parsed_label,
                    int(r.node_id in selected),
                ]
            )
