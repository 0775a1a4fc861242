"""Weight matrix file loading: raw float32 with a JSON sidecar, or .npy."""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ShapeError


def load_matrix(path) -> np.ndarray:
    """Read a 2-D float matrix.

    ``.npy`` files load directly. Anything else is raw little-endian float32,
    row-major, with the shape in a ``<path>.json`` sidecar:
    ``{"shape": [rows, cols], "dtype": "float32"}``.
    """
    path = os.fspath(path)
    if path.endswith(".npy"):
        arr = np.load(path)
        if arr.ndim != 2:
            raise ShapeError(f"{path}: expected a 2-D array, got shape {arr.shape}")
        return np.asarray(arr, dtype=np.float64)

    sidecar = path + ".json"
    try:
        with open(sidecar) as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(
            f"{sidecar}: raw weight files need a JSON sidecar with their shape"
        ) from None
    shape = tuple(int(x) for x in meta["shape"])
    if len(shape) != 2 or shape[0] <= 0 or shape[1] <= 0:
        raise ShapeError(f"{sidecar}: bad shape {shape}")
    dtype = np.dtype(meta.get("dtype", "float32")).newbyteorder("<")
    data = np.fromfile(path, dtype=dtype)
    if data.size != shape[0] * shape[1]:
        raise ShapeError(
            f"{path}: has {data.size} values, sidecar shape {shape} needs "
            f"{shape[0] * shape[1]}"
        )
    return data.reshape(shape).astype(np.float64)


def save_matrix(path, matrix) -> None:
    """Write the raw float32 + sidecar pair that :func:`load_matrix` reads."""
    path = os.fspath(path)
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ShapeError("only 2-D matrices are supported")
    matrix.astype("<f4").tofile(path)
    with open(path + ".json", "w") as f:
        json.dump({"shape": list(matrix.shape), "dtype": "float32"}, f)
