"""Sensitivity-weighted non-uniform quantization with one-bit upscaling.

A layer is quantized channel by channel (one output row at a time). The seed
model clusters each channel's weights into 2**n_min groups by exact weighted
k-means; every further bit splits each cluster into two sub-clusters by exact
weighted 2-means. A cluster with code b becomes sub-clusters 2b and 2b+1, so
the code at any lower bit-width is literally the top bits of the final code.

Centroids are kept in float64 while clustering; the per-bit-width tables that
ship with a layer are rounded to half precision, matching what the inference
side reads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import clustering
from .clustering import KMeans1DResult
from .errors import ParameterError, ShapeError

log = logging.getLogger(__name__)

MIN_BITS = 2
MAX_BITS = 8


@dataclass
class SensitivityMap:
    """Per-weight non-negative importance, same shape as the weight matrix."""

    values: np.ndarray
    fallback: bool = False  # True when built from degenerate inputs

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("sensitivity map must be 2-D")
        if np.any(self.values < 0):
            raise ParameterError("sensitivity values must be non-negative")

    @classmethod
    def uniform(cls, shape, fallback: bool = False) -> "SensitivityMap":
        return cls(np.ones(shape, dtype=np.float64), fallback=fallback)


@dataclass
class ChannelQuantization:
    """One channel's codes and sorted centroids at a single bit-width."""

    bit_width: int
    codes: np.ndarray      # (n,) integers in [0, 2**bit_width)
    centroids: np.ndarray  # (2**bit_width,) float64, non-decreasing

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        k = self.bit_width
        if not MIN_BITS <= k <= MAX_BITS:
            raise ParameterError(f"bit width {k} outside [{MIN_BITS}, {MAX_BITS}]")
        if self.centroids.shape != (1 << k,):
            raise ShapeError(
                f"expected {1 << k} centroids for {k}-bit channel, got {self.centroids.shape}"
            )
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= (1 << k)):
            raise ParameterError("codes out of range for bit width")

    def dequantized(self) -> np.ndarray:
        return self.centroids[self.codes]


@dataclass
class AnyPrecisionLayer:
    """Parent-model codes plus one centroid table per supported bit-width.

    ``codes`` holds the n_max-bit code of every weight; the k-bit model for
    any supported k is codes >> (n_max - k) against centroid_tables[k].
    ``channel_sse`` records, per bit-width, each channel's weighted squared
    reconstruction error against the half-precision table.
    """

    n_min: int
    n_max: int
    codes: np.ndarray                       # (out_channels, in_features) uint8
    centroid_tables: dict[int, np.ndarray]  # k -> (out_channels, 2**k) float16
    shape: tuple[int, int]
    channel_sse: dict[int, np.ndarray] = field(default_factory=dict)
    level_codes: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not MIN_BITS <= self.n_min <= self.n_max <= MAX_BITS:
            raise ParameterError(
                f"bit range [{self.n_min}, {self.n_max}] outside [{MIN_BITS}, {MAX_BITS}]"
            )
        if tuple(self.codes.shape) != tuple(self.shape):
            raise ShapeError("codes shape does not match declared layer shape")
        for k in range(self.n_min, self.n_max + 1):
            if k not in self.centroid_tables:
                raise ParameterError(f"missing centroid table for {k}-bit")

    @property
    def out_channels(self) -> int:
        return self.shape[0]

    @property
    def in_features(self) -> int:
        return self.shape[1]

    def supported_bits(self) -> range:
        return range(self.n_min, self.n_max + 1)

    def codes_at(self, k: int) -> np.ndarray:
        """Top-k-bit codes, the k-bit sub-model of the stored parent codes."""
        if k not in self.supported_bits():
            raise ParameterError(f"bit width {k} not in [{self.n_min}, {self.n_max}]")
        return self.codes >> (self.n_max - k)


def kmeans_1d_weighted(values, weights, k: int) -> KMeans1DResult:
    """Globally optimal weighted k-means of a 1-D array.

    Assignments follow the optimal contiguous partition of the sorted values;
    equal-cost partitions resolve to the smallest leading cluster. When k
    exceeds the number of distinct values, each distinct value gets its own
    centroid and the remaining slots are duplicates of the largest centroid
    (empty clusters), reported through ``padded``.
    """
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ShapeError("values must be a non-empty 1-D array")
    if weights.shape != values.shape:
        raise ShapeError(f"weights shape {weights.shape} != values shape {values.shape}")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if np.any(weights < 0):
        raise ParameterError("weights must be non-negative")
    if weights.sum() <= 0:
        raise ParameterError("total weight must be positive")

    bounds, order, sv, sw, padded = clustering.cluster_rows(
        values[None, :], weights[None, :], k
    )
    means = clustering._segment_means(sv, sw, bounds)[0]
    # Empty (padding) clusters duplicate the largest real centroid.
    for c in range(1, k):
        if np.isnan(means[c]):
            means[c] = means[c - 1]

    lens = np.diff(bounds[0])
    codes_sorted = np.repeat(np.arange(k, dtype=np.int64), lens)
    assignments = np.empty(values.size, dtype=np.int64)
    assignments[order[0]] = codes_sorted
    return KMeans1DResult(means, assignments, bool(padded[0]))


def estimate_sensitivity_diag(gradient_samples, shape=None) -> SensitivityMap:
    """Elementwise mean of squared gradient samples (diagonal Fisher style).

    An empty sample list, or samples whose squared mean is all-zero for some
    channel, falls back to uniform importance for the affected rows and sets
    the map's ``fallback`` flag. The empty-list fallback needs ``shape`` to
    size the uniform map.
    """
    samples = [np.asarray(g, dtype=np.float64) for g in gradient_samples]
    if not samples:
        if shape is None:
            raise ParameterError("empty sample list needs an explicit shape for the fallback")
        log.warning("no gradient samples; using uniform sensitivity")
        return SensitivityMap.uniform(shape, fallback=True)
    shape = samples[0].shape
    for g in samples[1:]:
        if g.shape != shape:
            raise ShapeError("gradient samples must share one shape")
    acc = np.zeros(shape, dtype=np.float64)
    for g in samples:
        acc += g * g
    acc /= len(samples)
    dead = ~np.any(acc > 0, axis=1)
    if np.any(dead):
        log.warning("uniform sensitivity fallback for %d all-zero channel(s)", dead.sum())
        acc[dead] = 1.0
        return SensitivityMap(acc, fallback=True)
    return SensitivityMap(acc)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{what} must be finite")


def _coerce_sensitivity(weights: np.ndarray, sens) -> np.ndarray:
    """Validate sensitivities against the weight matrix; patch dead channels."""
    _check_finite(weights, "weights")
    if sens is None:
        return np.ones_like(weights)
    values = sens.values if isinstance(sens, SensitivityMap) else np.asarray(sens, dtype=np.float64)
    if values.shape != weights.shape:
        raise ShapeError(f"sensitivity shape {values.shape} != weights shape {weights.shape}")
    _check_finite(values, "sensitivities")
    if np.any(values < 0):
        raise ParameterError("sensitivity values must be non-negative")
    row_sums = values.sum(axis=1)
    if np.any(row_sums <= 0):
        dead = np.flatnonzero(row_sums <= 0)
        log.warning("zero-sensitivity channel(s) %s: falling back to uniform weights", dead[:8])
        values = values.copy()
        values[dead] = 1.0
    return values


class _ChannelBatchState:
    """Sorted-order working state for a block of channels during a build."""

    def __init__(self, w_block: np.ndarray, s_block: np.ndarray):
        self.order = np.argsort(w_block, axis=1, kind="stable")
        self.sv = np.take_along_axis(w_block, self.order, axis=1)
        self.sw = np.take_along_axis(s_block, self.order, axis=1)
        self.pw, self.pwv, self.pwv2 = clustering._prefix_sums(self.sv, self.sw)

    def seed(self, k: int) -> np.ndarray:
        distinct = clustering._distinct_counts(self.sv)
        keff = np.minimum(distinct, k)
        n = self.sv.shape[1]
        bounds = np.zeros((self.sv.shape[0], k + 1), dtype=np.int64)
        for kk in np.unique(keff):
            mask = keff == kk
            sub = clustering._dp_boundaries(
                self.sv[mask], self.pw[mask], self.pwv[mask], self.pwv2[mask], int(kk)
            )
            bounds[mask] = np.concatenate(
                [sub, np.full((sub.shape[0], k - kk), n, dtype=np.int64)], axis=1
            )
        return bounds

    def split(self, bounds: np.ndarray) -> np.ndarray:
        return clustering.split_boundaries(
            self.sv, self.sw, self.pw, self.pwv, self.pwv2, bounds
        )

    def centroids(self, bounds: np.ndarray, parents: np.ndarray | None) -> np.ndarray:
        """Float64 interval means; empty intervals inherit the parent centroid.

        At the seed level (no parents) empty intervals are the trailing pads
        of low-distinct channels and duplicate the largest centroid so tables
        keep their full width.
        """
        means = clustering._segment_means(self.sv, self.sw, bounds)
        empty = np.isnan(means)
        if parents is not None:
            means[empty] = np.repeat(parents, 2, axis=1)[empty]
        elif np.any(empty):
            for c in range(1, means.shape[1]):
                col = empty[:, c]
                means[col, c] = means[col, c - 1]
        return means

    def codes_sorted(self, bounds: np.ndarray) -> np.ndarray:
        m = bounds.shape[1] - 1
        lens = bounds[:, 1:] - bounds[:, :-1]
        flat = np.repeat(np.tile(np.arange(m, dtype=np.int64), bounds.shape[0]), lens.ravel())
        return flat.reshape(self.sv.shape)

    def scatter(self, codes_sorted: np.ndarray) -> np.ndarray:
        out = np.empty_like(codes_sorted)
        np.put_along_axis(out, self.order, codes_sorted, axis=1)
        return out

    def sse(self, bounds: np.ndarray, table16: np.ndarray) -> np.ndarray:
        """Per-channel weighted SSE against the half-precision table."""
        lens = bounds[:, 1:] - bounds[:, :-1]
        t64 = table16.astype(np.float64)
        deq = np.repeat(t64.ravel(), lens.ravel()).reshape(self.sv.shape)
        diff = self.sv - deq
        return np.sum(self.sw * diff * diff, axis=1)


def quantize_seed(weights, sens, n1: int, *, row_block: int = 64) -> list[ChannelQuantization]:
    """Quantize every output channel to the minimum bit-width independently.

    Each channel runs exact weighted k-means with k = 2**n1; codes index the
    ascending centroid list. Channels with zero total sensitivity fall back to
    uniform weighting (logged). Channels are processed ``row_block`` at a time
    to bound the working set.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise ShapeError("weight matrix must be 2-D")
    if not MIN_BITS <= n1 <= MAX_BITS:
        raise ParameterError(f"seed bit-width {n1} outside [{MIN_BITS}, {MAX_BITS}]")
    svals = _coerce_sensitivity(weights, sens)

    k = 1 << n1
    out = []
    for lo in range(0, weights.shape[0], row_block):
        hi = min(lo + row_block, weights.shape[0])
        state = _ChannelBatchState(weights[lo:hi], svals[lo:hi])
        bounds = state.seed(k)
        means = state.centroids(bounds, parents=None)
        codes = state.scatter(state.codes_sorted(bounds))
        out.extend(
            ChannelQuantization(n1, codes[r], means[r]) for r in range(hi - lo)
        )
    return out


def upscale(cq: ChannelQuantization, row, sens) -> ChannelQuantization:
    """Split every cluster of a channel into two, appending one code bit.

    Cluster b becomes sub-clusters 2b and 2b+1 via exact weighted 2-means over
    its members; the lower sub-centroid takes the even code, so the old code
    is the bit-prefix of both new ones. Clusters with fewer than two distinct
    members put everything in 2b and duplicate the parent centroid; empty
    clusters duplicate the parent centroid on both sides.
    """
    row = np.asarray(row, dtype=np.float64)
    sens = np.asarray(sens, dtype=np.float64)
    if row.shape != cq.codes.shape or sens.shape != row.shape:
        raise ShapeError("row/sensitivity length does not match the channel codes")
    if cq.bit_width >= MAX_BITS:
        raise ParameterError(f"cannot upscale past {MAX_BITS} bits")
    _check_finite(row, "weights")
    _check_finite(sens, "sensitivities")
    if np.any(sens < 0):
        raise ParameterError("sensitivity values must be non-negative")

    order = np.argsort(row, kind="stable")
    codes_sorted = np.asarray(cq.codes)[order]
    if np.any(np.diff(codes_sorted) < 0):
        return _upscale_general(cq, row, sens)

    k = 1 << cq.bit_width
    state = _ChannelBatchState(row[None, :], sens[None, :])
    bounds = np.searchsorted(codes_sorted, np.arange(k + 1), side="left")[None, :]
    new_bounds = state.split(bounds)
    means = state.centroids(new_bounds, parents=cq.centroids[None, :])[0]
    codes = state.scatter(state.codes_sorted(new_bounds))[0]
    return ChannelQuantization(cq.bit_width + 1, codes, means)


def _upscale_general(cq: ChannelQuantization, row, sens) -> ChannelQuantization:
    """Cluster-by-cluster fallback for codes that are not value-contiguous."""
    k = 1 << cq.bit_width
    new_codes = np.zeros_like(np.asarray(cq.codes))
    new_centroids = np.empty(2 * k, dtype=np.float64)
    for b in range(k):
        members = np.flatnonzero(np.asarray(cq.codes) == b)
        if members.size == 0:
            new_centroids[2 * b] = new_centroids[2 * b + 1] = cq.centroids[b]
            continue
        res = kmeans_1d_weighted(row[members], _positive_or_uniform(sens[members]), 2)
        low, high = res.centroids[0], res.centroids[1]
        if res.padded:  # fewer than two distinct member values
            new_codes[members] = 2 * b
            new_centroids[2 * b] = new_centroids[2 * b + 1] = low
        else:
            new_codes[members] = 2 * b + res.assignments
            new_centroids[2 * b] = low
            new_centroids[2 * b + 1] = high
    return ChannelQuantization(cq.bit_width + 1, new_codes, new_centroids)


def _positive_or_uniform(w: np.ndarray) -> np.ndarray:
    return w if w.sum() > 0 else np.ones_like(w)


def build_any_precision(
    weights,
    sens,
    n_min: int,
    n_max: int,
    *,
    record_levels: bool = False,
    row_block: int = 64,
    threads: int = 1,
) -> AnyPrecisionLayer:
    """Seed at n_min, then upscale one bit at a time to n_max.

    Records a half-precision centroid table and per-channel weighted SSE at
    every bit-width along the way. With ``record_levels`` the intermediate
    code matrices are kept as well (used by verification). Channels are
    processed in blocks of ``row_block`` rows; blocks are independent, so
    ``threads`` > 1 distributes them over a thread pool without changing any
    result.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.size == 0:
        raise ShapeError("weight matrix must be a non-empty 2-D array")
    if not MIN_BITS <= n_min <= n_max <= MAX_BITS:
        raise ParameterError(
            f"bit range [{n_min}, {n_max}] outside [{MIN_BITS}, {MAX_BITS}]"
        )
    svals = _coerce_sensitivity(weights, sens)

    rows = weights.shape[0]
    blocks = [(lo, min(lo + row_block, rows)) for lo in range(0, rows, row_block)]

    def run_block(span):
        lo, hi = span
        return _build_block(weights[lo:hi], svals[lo:hi], n_min, n_max, record_levels)

    if threads > 1 and len(blocks) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_block, blocks))
    else:
        results = [run_block(b) for b in blocks]

    codes = np.concatenate([r["codes"] for r in results], axis=0)
    tables = {
        k: np.concatenate([r["tables"][k] for r in results], axis=0)
        for k in range(n_min, n_max + 1)
    }
    sse = {
        k: np.concatenate([r["sse"][k] for r in results], axis=0)
        for k in range(n_min, n_max + 1)
    }
    layer = AnyPrecisionLayer(
        n_min=n_min,
        n_max=n_max,
        codes=codes.astype(np.uint8),
        centroid_tables=tables,
        shape=weights.shape,
        channel_sse=sse,
    )
    if record_levels:
        layer.level_codes = {
            k: np.concatenate([r["levels"][k] for r in results], axis=0).astype(np.uint8)
            for k in range(n_min, n_max + 1)
        }
    return layer


def continue_upscale(
    weights,
    sens,
    layer: AnyPrecisionLayer,
    new_n_max: int,
    *,
    row_block: int = 64,
) -> AnyPrecisionLayer:
    """Extend an existing layer to a higher parent bit-width.

    Needs the original weights and sensitivities; the stored codes define the
    clusters to keep splitting. Codes produced by this package are contiguous
    runs of each channel's sorted values and take the fast path; arbitrary
    code assignments fall back to per-cluster splitting. Half-precision table
    values stand in for exact parent centroids when a cluster is empty.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != tuple(layer.shape):
        raise ShapeError(f"weights shape {weights.shape} != layer shape {layer.shape}")
    if not layer.n_max < new_n_max <= MAX_BITS:
        raise ParameterError(
            f"new parent bit-width {new_n_max} must be in ({layer.n_max}, {MAX_BITS}]"
        )
    svals = _coerce_sensitivity(weights, sens)
    rows = weights.shape[0]
    k0 = layer.n_max

    all_codes = np.empty_like(layer.codes)
    tables = {k: [] for k in range(k0 + 1, new_n_max + 1)}
    sse = {k: [] for k in range(k0 + 1, new_n_max + 1)}

    for lo in range(0, rows, row_block):
        hi = min(lo + row_block, rows)
        w_b, s_b = weights[lo:hi], svals[lo:hi]
        state = _ChannelBatchState(w_b, s_b)
        codes_sorted = np.take_along_axis(layer.codes[lo:hi].astype(np.int64), state.order, axis=1)
        if np.any(np.diff(codes_sorted, axis=1) < 0):
            raise ParameterError(
                "stored codes are not value-contiguous; re-quantize from weights instead"
            )
        m = 1 << k0
        counts = np.zeros((hi - lo, m), dtype=np.int64)
        np.add.at(counts, (np.repeat(np.arange(hi - lo), w_b.shape[1]), codes_sorted.ravel()), 1)
        bounds = np.zeros((hi - lo, m + 1), dtype=np.int64)
        np.cumsum(counts, axis=1, out=bounds[:, 1:])

        parents = layer.centroid_tables[k0][lo:hi].astype(np.float64)
        for k in range(k0 + 1, new_n_max + 1):
            bounds = state.split(bounds)
            means = state.centroids(bounds, parents)
            table16 = means.astype(np.float16)
            tables[k].append(table16)
            sse[k].append(state.sse(bounds, table16))
            parents = means
        all_codes[lo:hi] = state.scatter(state.codes_sorted(bounds)).astype(np.uint8)

    new_tables = dict(layer.centroid_tables)
    new_sse = dict(layer.channel_sse)
    for k in range(k0 + 1, new_n_max + 1):
        new_tables[k] = np.concatenate(tables[k], axis=0)
        new_sse[k] = np.concatenate(sse[k], axis=0)
    # Recompute the existing levels' error record against the prefix codes.
    for k in range(layer.n_min, k0 + 1):
        t64 = new_tables[k].astype(np.float64)
        deq = np.take_along_axis(t64, (all_codes >> (new_n_max - k)).astype(np.int64), axis=1)
        new_sse[k] = np.sum(svals * (weights - deq) ** 2, axis=1)

    return AnyPrecisionLayer(
        n_min=layer.n_min,
        n_max=new_n_max,
        codes=all_codes,
        centroid_tables=new_tables,
        shape=layer.shape,
        channel_sse=new_sse,
    )


def _build_block(w_block, s_block, n_min, n_max, record_levels):
    state = _ChannelBatchState(w_block, s_block)
    bounds = state.seed(1 << n_min)
    tables, sse, levels = {}, {}, {}
    parents = None
    for k in range(n_min, n_max + 1):
        means = state.centroids(bounds, parents)
        table16 = means.astype(np.float16)
        tables[k] = table16
        sse[k] = state.sse(bounds, table16)
        if record_levels:
            levels[k] = state.scatter(state.codes_sorted(bounds))
        if k < n_max:
            bounds = state.split(bounds)
            parents = means
    codes = state.scatter(state.codes_sorted(bounds))
    return {"codes": codes, "tables": tables, "sse": sse, "levels": levels}
