"""Bitplane representation of code matrices and its tile byte permutation.

A code matrix is stored as one bit matrix per code bit, most significant bit
first, so a k-bit model is read by touching only the first k planes. Within a
byte, bit i (value 1 << i) belongs to weight 8*b + i of that byte's row.

Columns are zero-padded to tiles of 1024 weights (128 bytes per plane row).
The permuted layout reorders bytes inside each tile so that the 4-byte word of
lane t covers weights {256*q + 8*t .. 256*q + 8*t + 7} for q = 0..3: output
byte 4*t + j holds input byte 32*j + t. With 32 lanes walking words in
lockstep, consecutive lanes then touch consecutive activation blocks instead
of strided ones.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CodeRangeError, LayoutError, ParameterError, ShapeError

TILE_WEIGHTS = 1024
TILE_BYTES = TILE_WEIGHTS // 8
LANES = 32
WORD_BYTES = 4

LAYOUT_LINEAR = "linear"
LAYOUT_PERMUTED = "permuted"

# out[4t + j] = in[32j + t]
_PERM = np.empty(TILE_BYTES, dtype=np.int64)
for _t in range(LANES):
    for _j in range(WORD_BYTES):
        _PERM[4 * _t + _j] = 32 * _j + _t
_INV_PERM = np.argsort(_PERM)
del _t, _j


@dataclass
class BitplaneTensor:
    """n_max bit matrices; plane p holds code bit n_max-1-p of every weight."""

    planes: np.ndarray  # (n_max, rows, padded_cols // 8) uint8
    rows: int
    cols: int           # unpadded column count
    padded_cols: int
    layout: str

    def __post_init__(self):
        if self.planes.dtype != np.uint8 or self.planes.ndim != 3:
            raise ShapeError("planes must be a 3-D uint8 array")
        if self.layout not in (LAYOUT_LINEAR, LAYOUT_PERMUTED):
            raise ParameterError(f"unknown layout {self.layout!r}")
        if self.padded_cols % TILE_WEIGHTS != 0:
            raise ShapeError(f"padded columns must be a multiple of {TILE_WEIGHTS}")
        expect = (self.planes.shape[0], self.rows, self.padded_cols // 8)
        if self.planes.shape != expect:
            raise ShapeError(f"planes shape {self.planes.shape} != expected {expect}")
        if not 0 < self.cols <= self.padded_cols:
            raise ShapeError("column count out of range")

    @property
    def n_max(self) -> int:
        return self.planes.shape[0]

    @property
    def n_tiles(self) -> int:
        return self.padded_cols // TILE_WEIGHTS


def pad_columns(cols: int) -> int:
    return -(-cols // TILE_WEIGHTS) * TILE_WEIGHTS


def pack_bitplanes(codes: np.ndarray, n_max: int) -> BitplaneTensor:
    """Decompose a code matrix into MSB-first bitplanes (linear layout).

    Codes must fit in n_max bits. The column tail up to the next tile boundary
    packs as zero bits, so prefix reads of padded regions dequantize to
    centroid 0 and are cancelled by zero activations downstream.
    """
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.size == 0:
        raise ShapeError("code matrix must be a non-empty 2-D array")
    if not 1 <= n_max <= 8:
        raise ParameterError(f"n_max {n_max} outside [1, 8]")
    if not np.issubdtype(codes.dtype, np.integer):
        raise CodeRangeError("codes must be integers")
    if codes.min() < 0 or codes.max() >= (1 << n_max):
        raise CodeRangeError(f"codes exceed {n_max}-bit range")

    rows, cols = codes.shape
    padded = pad_columns(cols)
    buf = np.zeros((rows, padded), dtype=np.uint8)
    buf[:, :cols] = codes
    shifts = np.arange(n_max - 1, -1, -1, dtype=np.uint8)  # MSB first
    bits = (buf[None, :, :] >> shifts[:, None, None]) & np.uint8(1)
    planes = np.packbits(bits, axis=-1, bitorder="little")
    return BitplaneTensor(planes, rows, cols, padded, LAYOUT_LINEAR)


def unpack_codes(t: BitplaneTensor, k: int) -> np.ndarray:
    """Top-k-bit prefix codes from the first k planes only.

    Planes k..n_max-1 are never read, so any corruption there cannot change
    the result. Returns the unpadded (rows, cols) uint8 matrix.
    """
    if not 1 <= k <= t.n_max:
        raise ParameterError(f"k={k} outside [1, {t.n_max}]")
    head = t.planes[:k]
    if t.layout == LAYOUT_PERMUTED:
        head = _apply_byte_perm(head, t.n_tiles, _INV_PERM)
    bits = np.unpackbits(head, axis=-1, bitorder="little")
    codes = np.zeros((t.rows, t.padded_cols), dtype=np.uint8)
    for p in range(k):
        codes |= bits[p] << np.uint8(k - 1 - p)
    return codes[:, : t.cols]


def _apply_byte_perm(planes: np.ndarray, n_tiles: int, perm: np.ndarray) -> np.ndarray:
    shaped = planes.reshape(planes.shape[0], planes.shape[1], n_tiles, TILE_BYTES)
    return shaped[..., perm].reshape(planes.shape)


def permute_layout(t: BitplaneTensor) -> BitplaneTensor:
    """Rearrange each 128-byte tile for coalesced lane-major word reads."""
    if t.layout != LAYOUT_LINEAR:
        raise LayoutError("tensor is already permuted")
    return replace(t, planes=_apply_byte_perm(t.planes, t.n_tiles, _PERM), layout=LAYOUT_PERMUTED)


def inverse_permute_layout(t: BitplaneTensor) -> BitplaneTensor:
    if t.layout != LAYOUT_PERMUTED:
        raise LayoutError("tensor is not permuted")
    return replace(t, planes=_apply_byte_perm(t.planes, t.n_tiles, _INV_PERM), layout=LAYOUT_LINEAR)


def tile_permutation() -> np.ndarray:
    """The per-tile byte mapping (copy): output position p reads input _PERM[p]."""
    return _PERM.copy()


def lane_weight_indices(lane: int) -> np.ndarray:
    """Weight indices covered by one lane's 4-byte word within a permuted tile."""
    if not 0 <= lane < LANES:
        raise ParameterError(f"lane {lane} outside [0, {LANES})")
    out = []
    for q in range(WORD_BYTES):
        base = 256 * q + 8 * lane
        out.extend(range(base, base + 8))
    return np.array(out, dtype=np.int64)
