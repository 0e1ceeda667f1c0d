"""array serialization and content digests"""

import hashlib
import json
from collections.abc import Mapping
from typing import Any

import numpy as np


def array_to_json(array: np.ndarray) -> dict[str, Any]:
    """Encodes a float64 array as a JSON-compatible dict (exact float repr)."""
    return {"shape": list(array.shape), "data": np.asarray(array).ravel().tolist()}


def array_from_json(obj: Mapping[str, Any]) -> np.ndarray:
    """Decodes an array written by :func:`array_to_json`."""
    data = np.asarray(obj["data"], dtype=np.float64)
    return data.reshape(tuple(obj["shape"]))


def content_digest(arrays: Mapping[str, np.ndarray], extra: Any = None) -> str:
    """Returns the sha256 digest of named arrays and optional JSON metadata.

    Names are hashed in sorted order together with shapes and the little-endian
    float64 bytes of every array.

    Parameters
    ----------
    arrays : Mapping[str, np.ndarray]
        Named arrays.
    extra : Any, optional
        JSON-serialisable metadata included in the digest. Defaults to ``None``.

    Returns
    -------
    str
        Hex digest.
    """
    sha = hashlib.sha256()
    for name in sorted(arrays):
        array = np.ascontiguousarray(arrays[name], dtype="<f8")
        sha.update(name.encode())
        sha.update(repr(array.shape).encode())
        sha.update(array.tobytes())
    if extra is not None:
        sha.update(json.dumps(extra, sort_keys=True).encode())
    return sha.hexdigest()


def dump_json(obj: Any) -> str:
    """Serialises with sorted keys so equal objects give byte-identical text."""
    return json.dumps(obj, sort_keys=True, indent=None, separators=(",", ":"))
