"""conversions between numpy storage and compyute tensors"""

from collections.abc import Sequence
from typing import Union

import compyute as cp
import numpy as np
from compyute.tensors import Tensor

ArrayLike = Union[np.ndarray, Sequence[float]]


def to_tensor(x: ArrayLike) -> Tensor:
    """Wraps an array as a ``float64`` tensor."""
    return cp.tensor(np.asarray(x, dtype=np.float64), dtype=cp.float64)


def to_ids(ids: Union[np.ndarray, Sequence[int]]) -> Tensor:
    """Wraps token ids as an ``int32`` tensor."""
    return cp.tensor(np.asarray(ids, dtype=np.int32), dtype=cp.int32)


def to_array(x: Tensor) -> np.ndarray:
    """Returns the ``float64`` array behind a tensor."""
    return np.asarray(x.data, dtype=np.float64)
