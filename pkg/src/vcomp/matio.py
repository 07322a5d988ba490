"""Matrix and spectrum I/O: dense CSV and a small binary container.

The binary container has a 16-byte header: 4-byte magic ``VCM1``, then
little-endian uint32 fields n (rows), p (columns), and element width in bytes
(8 for float64, 4 for float32), followed by the row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VCM1"
_HEADER = struct.Struct("<4sIII")

_WIDTH_DTYPES = {8: np.dtype("<f8"), 4: np.dtype("<f4")}


def save_matrix_csv(path: str | Path, X: np.ndarray) -> None:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    np.savetxt(path, X, delimiter=",", fmt="%.17g")


def save_matrix_bin(path: str | Path, X: np.ndarray, width: int = 8) -> None:
    if width not in _WIDTH_DTYPES:
        raise ValueError(f"unsupported element width {width}; use 8 or 4")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, p = X.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, p, width))
        fh.write(np.ascontiguousarray(X, dtype=_WIDTH_DTYPES[width]).tobytes())


def load_matrix(path: str | Path) -> np.ndarray:
    """Load a matrix from CSV or the binary container (sniffed by magic)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return _load_bin(path)
    X = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return X


def load_vector(path: str | Path) -> np.ndarray:
    v = load_matrix(path)
    if 1 not in v.shape and v.ndim == 2 and min(v.shape) != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    return v.reshape(-1)


def _load_bin(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, n, p, width = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if width not in _WIDTH_DTYPES:
            raise ValueError(f"{path}: unsupported element width {width}")
        payload = fh.read(n * p * width)
    if len(payload) != n * p * width:
        raise ValueError(f"{path}: truncated payload")
    X = np.frombuffer(payload, dtype=_WIDTH_DTYPES[width]).astype(np.float64)
    return X.reshape(n, p)


def save_spectrum_csv(path: str | Path, lambdas: np.ndarray) -> None:
    """Write eigenvalues as (index, lambda) rows."""
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    rows = np.column_stack([np.arange(1, lam.size + 1, dtype=np.float64), lam])
    np.savetxt(path, rows, delimiter=",", fmt=["%d", "%.17g"], header="index,lambda", comments="")
