"""response cross-entropy"""

import numpy as np
from compyute.nn.functional.functions import Function, FunctionContext
from compyute.tensors import Tensor

from .tensor_utils import to_array, to_tensor


def log_softmax(x: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last dimension."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


class MaskedCrossEntropyFunction(Function):
    """Computes the mean next-token cross-entropy of each sequence in a batch.

    Only positions with a nonzero mask contribute; each sequence's loss is the
    mean over its own masked positions.

    Shapes:
        - logits :math:`(B, S, V)`
        - targets :math:`(B, S)`
        - mask :math:`(B, S)`
        - output :math:`(B,)`
    """

    @staticmethod
    def forward(
        ctx: FunctionContext, logits: Tensor, targets: np.ndarray, mask: np.ndarray
    ) -> Tensor:
        counts = mask.sum(axis=-1)
        if np.any(counts <= 0):
            raise ValueError("Every sequence needs at least one target position.")
        log_probs = log_softmax(to_array(logits))
        picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
        losses = -(picked * mask).sum(axis=-1) / counts
        ctx.add(log_probs, targets, mask, counts)
        return to_tensor(losses)

    @staticmethod
    def backward(ctx: FunctionContext, dlosses: Tensor) -> Tensor:
        log_probs, targets, mask, counts = ctx.get()
        dlogits = np.exp(log_probs)
        np.put_along_axis(
            dlogits,
            targets[..., None],
            np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        scale = (mask * (to_array(dlosses) / counts)[:, None])[..., None]
        return to_tensor(dlogits * scale)
