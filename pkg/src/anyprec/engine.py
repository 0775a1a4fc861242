"""Word-parallel GEMV/GEMM over permuted bitplanes.

The pipeline mirrors a lane-per-word execution model: each lane of a tile
loads one 32-bit word per plane, bit-transposes the stack of words so that
every weight's code bits become contiguous, shifts and masks out table
indices, fetches centroids and multiply-accumulates in float32. Reading a
k-bit model touches exactly the first k planes; the byte counters in
ExecutionReport make that proportionality observable.

The bit transpose treats a 32-bit word as 32/B sub-vectors of width B and
swaps bits across the B words with masked delta swaps: 6 bitwise operations
per pair, B/2 pairs per level, log2(B) levels. For B = 4 that is 24
operations, under the 40-operation budget the merged-table variant assumes.
At 3 bits, pairs of adjacent 3-bit indices merge into one 6-bit index into a
64-entry table of centroid pairs, halving the lookup count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitplane import (
    LANES,
    LAYOUT_PERMUTED,
    TILE_WEIGHTS,
    BitplaneTensor,
    pack_bitplanes,
    permute_layout,
)
from .errors import ParameterError, ShapeError
from .quantizer import AnyPrecisionLayer

_SWAP_MASKS = {
    (2, 1): np.uint32(0x55555555),
    (4, 1): np.uint32(0x55555555),
    (4, 2): np.uint32(0x33333333),
    (8, 1): np.uint32(0x55555555),
    (8, 2): np.uint32(0x33333333),
    (8, 4): np.uint32(0x0F0F0F0F),
}

# 6 bitwise ops per delta swap, B/2 pairs per level, log2(B) levels.
TRANSPOSE_OP_COUNT = {2: 6, 4: 24, 8: 72}


def bit_transpose(words: np.ndarray) -> np.ndarray:
    """Transpose the B x B bit blocks of B stacked 32-bit words.

    ``words`` has shape (B, ...) with B in {2, 4, 8}; output bit (g, s*B + b)
    equals input bit (b, s*B + g) for every sub-vector s. The operation is its
    own inverse.
    """
    words = np.asarray(words)
    b = words.shape[0] if words.ndim else 0
    if words.ndim < 1 or b not in (2, 4, 8):
        raise ParameterError("word count must be 2, 4 or 8")
    if words.dtype != np.uint32:
        words = words.astype(np.uint32)
    w = [words[i].copy() for i in range(b)]
    d = 1
    while d < b:
        mask = _SWAP_MASKS[(b, d)]
        for r in range(b):
            if r & d:
                continue
            t = ((w[r] >> np.uint32(d)) ^ w[r + d]) & mask
            w[r] ^= t << np.uint32(d)
            w[r + d] ^= t
        d <<= 1
    return np.stack(w)


def transpose_any_width(plane_words: np.ndarray, k: int) -> np.ndarray:
    """Turn k plane words (MSB plane first) into packed per-weight codes.

    Pads to B = next power of two >= k and feeds the planes in reversed order
    so each B-bit field reads as a binary code, zero-extended at the top.
    Output shape is (B, ...): field s of word g holds the code of the weight
    at bit position s*B + g.
    """
    plane_words = np.asarray(plane_words)
    if not 2 <= k <= 8:
        raise ParameterError(f"bit width {k} outside [2, 8]")
    if plane_words.shape[0] != k:
        raise ShapeError(f"expected {k} plane words, got {plane_words.shape[0]}")
    b = 2 if k <= 2 else 4 if k <= 4 else 8
    stacked = np.zeros((b,) + plane_words.shape[1:], dtype=np.uint32)
    for bit in range(k):
        stacked[bit] = plane_words[k - 1 - bit]  # field bit b reads plane k-1-b
    return bit_transpose(stacked)


@dataclass
class MergedTable3:
    """64 centroid pairs: entry 8*i + j holds (c_i, c_j)."""

    entries: np.ndarray  # (64, 2) float32

    def lookup(self, merged_index: int) -> tuple[float, float]:
        pair = self.entries[merged_index]
        return float(pair[0]), float(pair[1])


def build_merged_table(centroids) -> MergedTable3:
    """Expand 8 centroids into the 64-entry pair table for 3-bit lookups."""
    centroids = np.asarray(centroids, dtype=np.float32)
    if centroids.shape != (8,):
        raise ParameterError(f"expected exactly 8 centroids, got shape {centroids.shape}")
    return MergedTable3(_merged_entries(centroids[None, :])[0])


def _merged_entries(tables: np.ndarray) -> np.ndarray:
    """(rows, 8) float32 -> (rows, 64, 2): entry 8i+j = (c_i, c_j)."""
    rows = tables.shape[0]
    out = np.empty((rows, 64, 2), dtype=np.float32)
    out[:, :, 0] = np.repeat(tables, 8, axis=1)
    out[:, :, 1] = np.tile(tables, (1, 8))
    return out


@dataclass(frozen=True)
class GemvConfig:
    """Execution knobs; accumulation is always float32."""

    bit_width: int
    dense_threshold: int = 16
    activations_fp16: bool = False
    use_merged_table: bool | None = None  # None: merged exactly at 3 bits

    def merged(self) -> bool:
        if self.use_merged_table is None:
            return self.bit_width == 3
        return self.use_merged_table


@dataclass
class ExecutionReport:
    planes_bytes_read: int = 0
    table_bytes_read: int = 0
    path_taken: str = ""
    extra: dict = field(default_factory=dict)


class PreparedLayer:
    """Inference-ready view: permuted planes plus float32 tables per bit-width."""

    def __init__(self, layer: AnyPrecisionLayer, tensor: BitplaneTensor | None = None):
        self.layer = layer
        if tensor is None:
            tensor = permute_layout(pack_bitplanes(layer.codes, layer.n_max))
        elif tensor.layout != LAYOUT_PERMUTED:
            tensor = permute_layout(tensor)
        if (tensor.rows, tensor.cols) != layer.shape or tensor.n_max != layer.n_max:
            raise ShapeError("bitplane tensor does not match the layer")
        self.tensor = tensor
        self.tables32 = {
            k: layer.centroid_tables[k].astype(np.float32)
            for k in layer.supported_bits()
        }
        self._merged: np.ndarray | None = None

    @property
    def planes(self) -> np.ndarray:
        return self.tensor.planes

    def merged_pairs(self) -> np.ndarray:
        if 3 not in self.tables32:
            raise ParameterError("layer does not support 3-bit")
        if self._merged is None:
            self._merged = _merged_entries(self.tables32[3])
        return self._merged


def prepare(layer: AnyPrecisionLayer, tensor: BitplaneTensor | None = None) -> PreparedLayer:
    return PreparedLayer(layer, tensor)


def _lane_words(planes: np.ndarray, k: int, n_tiles: int):
    """First k planes as little-endian uint32 lane words: (k, rows, tiles, 32)."""
    head = np.ascontiguousarray(planes[:k])
    words = head.view("<u4")  # reinterpret each row of bytes as words
    return words.reshape(k, planes.shape[1], n_tiles, LANES)


def _weight_order(vals_lanewise: np.ndarray) -> np.ndarray:
    """(rows, tiles, 32 lanes, 32 bitpos) -> (rows, tiles, 1024) in weight order.

    Bit position j of lane t is weight 256*(j >> 3) + 8*t + (j & 7) within the
    tile, per the byte permutation.
    """
    r, nt = vals_lanewise.shape[:2]
    split = vals_lanewise.reshape(r, nt, LANES, 4, 8)  # j = 8*q + i
    return split.transpose(0, 1, 3, 2, 4).reshape(r, nt, TILE_WEIGHTS)


def _extract_codes(tw: np.ndarray, k: int) -> np.ndarray:
    """Packed transpose output (B, rows, tiles, 32) -> per-weight codes.

    Returns (rows, tiles, 32 lanes, 32 bitpos) uint8, shift+mask per field.
    """
    b = tw.shape[0]
    mask = np.uint32((1 << b) - 1)
    out = np.empty(tw.shape[1:] + (32,), dtype=np.uint8)
    for j in range(32):
        g, s = j % b, j // b
        out[..., j] = ((tw[g] >> np.uint32(s * b)) & mask).astype(np.uint8)
    return out


def _dequant_values(prep: PreparedLayer, k: int, merged: bool, report: ExecutionReport | None):
    """Decode the first k planes into float32 weight values (rows, tiles, 1024)."""
    tensor = prep.tensor
    words = _lane_words(tensor.planes, k, tensor.n_tiles)
    tw = transpose_any_width(words, k)
    rows = tensor.rows
    row_idx = np.arange(rows)[:, None, None, None]

    if merged:
        if k != 3:
            raise ParameterError("merged-table lookups apply to 3-bit only")
        pairs = prep.merged_pairs()  # (rows, 64, 2)
        vals = np.empty((rows, tensor.n_tiles, LANES, 32), dtype=np.float32)
        seven = np.uint32(7)
        for g in range(4):
            word = tw[g]
            for p in range(4):
                lo = (word >> np.uint32(8 * p)) & seven
                hi = (word >> np.uint32(8 * p + 4)) & seven
                idx6 = (lo << np.uint32(3)) | hi
                fetched = pairs[row_idx[..., 0], idx6.astype(np.int64)]
                vals[..., 8 * p + g] = fetched[..., 0]
                vals[..., 8 * p + 4 + g] = fetched[..., 1]
        if report is not None:
            report.table_bytes_read += rows * 64 * 2 * 2
    else:
        codes = _extract_codes(tw, k)
        table = prep.tables32[k]
        vals = table[row_idx, codes.astype(np.int64)]
        if report is not None:
            report.table_bytes_read += rows * (1 << k) * 2

    if report is not None:
        report.planes_bytes_read += k * rows * tensor.padded_cols // 8
    return _weight_order(vals)


def _merged_index_stream(prep: PreparedLayer) -> np.ndarray:
    """The 6-bit merged indices of the 3-bit path, in pair order (testing aid)."""
    tensor = prep.tensor
    words = _lane_words(tensor.planes, 3, tensor.n_tiles)
    tw = transpose_any_width(words, 3)
    out = []
    for g in range(4):
        for p in range(4):
            lo = (tw[g] >> np.uint32(8 * p)) & np.uint32(7)
            hi = (tw[g] >> np.uint32(8 * p + 4)) & np.uint32(7)
            out.append(((lo << np.uint32(3)) | hi).ravel())
    return np.stack(out)


def _check_bit_width(layer: AnyPrecisionLayer, k: int):
    if k not in layer.supported_bits():
        raise ParameterError(
            f"bit width {k} unsupported; layer holds [{layer.n_min}, {layer.n_max}]"
        )


def _prep_x(x, cols, padded_cols, fp16: bool) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != cols:
        raise ShapeError(f"activation length {x.shape[-1]} != in_features {cols}")
    if fp16:
        x = x.astype(np.float16)
    x32 = x.astype(np.float32)
    pad = padded_cols - cols
    if pad:
        width = [(0, 0)] * (x32.ndim - 1) + [(0, pad)]
        x32 = np.pad(x32, width)
    return x32


def gemv(
    prep: PreparedLayer,
    x,
    cfg: GemvConfig,
    report: ExecutionReport | None = None,
) -> np.ndarray:
    """y = dequant_k(W) @ x reading only the top cfg.bit_width bitplanes.

    Accumulation is float32, tile-major then lane, fixed order; results are
    bit-reproducible for identical inputs.
    """
    k = cfg.bit_width
    _check_bit_width(prep.layer, k)
    tensor = prep.tensor
    x32 = _prep_x(x, tensor.cols, tensor.padded_cols, cfg.activations_fp16)
    if x32.ndim != 1:
        raise ShapeError("gemv expects a 1-D activation vector")

    merged = cfg.merged()
    vals = _dequant_values(prep, k, merged, report)
    if report is not None:
        report.path_taken = "gemv-merged" if merged else "gemv"

    xt = x32.reshape(tensor.n_tiles, TILE_WEIGHTS)
    partial = np.einsum("rtc,tc->rt", vals, xt)
    return partial.sum(axis=1, dtype=np.float32)


def gemm(
    prep: PreparedLayer,
    x,
    cfg: GemvConfig,
    report: ExecutionReport | None = None,
) -> np.ndarray:
    """Y = X @ dequant_k(W).T for a (M, in_features) batch.

    Small batches (M <= cfg.dense_threshold) reuse the decoded tile values
    across the batch rows; larger batches dequantize once into a dense matrix
    and run a plain float32 product.
    """
    k = cfg.bit_width
    _check_bit_width(prep.layer, k)
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError("gemm expects a (M, in_features) matrix")
    m = x.shape[0]
    if m < 1:
        raise ShapeError("batch must contain at least one row")

    if m <= cfg.dense_threshold:
        tensor = prep.tensor
        x32 = _prep_x(x, tensor.cols, tensor.padded_cols, cfg.activations_fp16)
        vals = _dequant_values(prep, k, cfg.merged(), report)
        if report is not None:
            report.path_taken = "gemm-quantized"
        xt = x32.reshape(m, tensor.n_tiles, TILE_WEIGHTS)
        partial = np.einsum("mtc,rtc->mrt", xt, vals)
        return partial.sum(axis=2, dtype=np.float32)

    if x.shape[1] != prep.tensor.cols:
        raise ShapeError(
            f"activation width {x.shape[1]} != in_features {prep.tensor.cols}"
        )
    dense = dequantize(prep.layer, k)
    if report is not None:
        report.path_taken = "gemm-dense"
        report.planes_bytes_read += k * prep.tensor.rows * prep.tensor.padded_cols // 8
        report.table_bytes_read += prep.tensor.rows * (1 << k) * 2
    if cfg.activations_fp16:
        x = x.astype(np.float16)
    return x.astype(np.float32) @ dense.T


def dequantize(layer: AnyPrecisionLayer, k: int) -> np.ndarray:
    """Dense float32 weights at bit-width k from the stored codes and table."""
    _check_bit_width(layer, k)
    table = layer.centroid_tables[k].astype(np.float32)
    codes_k = layer.codes_at(k).astype(np.int64)
    return np.take_along_axis(table, codes_k, axis=1)
