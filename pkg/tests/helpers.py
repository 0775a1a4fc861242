"""Shared oracles and generators used across the test suite.

Everything here is deliberately independent of the library's fast paths:
clustering costs are enumerated over partitions (optionally in exact rational
arithmetic), codes are unpacked bit by bit, and reference products run in
float64. Keep it that way; these are the yardsticks the implementation is
measured against.
"""

from __future__ import annotations

from fractions import Fraction
from itertools import combinations

import numpy as np


def exact_partition_sse(values, weights, starts):
    """Exact rational SSE of a contiguous partition of sorted (value, weight) pairs.

    ``starts`` are the split positions (excluding 0 and n). Uses Fractions so
    two partitions can be compared without rounding ambiguity.
    """
    vals = [Fraction(float(v)) for v in values]
    wts = [Fraction(float(w)) for w in weights]
    edges = [0, *starts, len(vals)]
    total = Fraction(0)
    for a, b in zip(edges[:-1], edges[1:]):
        seg_w = sum(wts[a:b], Fraction(0))
        if b == a or seg_w == 0:
            continue
        seg_wv = sum((wts[i] * vals[i] for i in range(a, b)), Fraction(0))
        mean = seg_wv / seg_w
        total += sum((wts[i] * (vals[i] - mean) ** 2 for i in range(a, b)), Fraction(0))
    return total


def brute_force_optimal_sse(values, weights, k):
    """Minimum SSE over every contiguous k-partition of the sorted values (exact)."""
    order = np.argsort(values, kind="stable")
    sv = np.asarray(values, dtype=np.float64)[order]
    sw = np.asarray(weights, dtype=np.float64)[order]
    n = len(sv)
    best = None
    for starts in combinations(range(1, n), k - 1):
        sse = exact_partition_sse(sv, sw, list(starts))
        if best is None or sse < best:
            best = sse
    return best


def exact_assignment_sse(values, weights, assignments, centroids=None):
    """Exact rational SSE of an arbitrary assignment, centroids = cluster means.

    When ``centroids`` is given the deviation is measured against those exact
    values instead (as Fractions of their float64 representation).
    """
    vals = [Fraction(float(v)) for v in values]
    wts = [Fraction(float(w)) for w in weights]
    groups = {}
    for i, a in enumerate(assignments):
        groups.setdefault(int(a), []).append(i)
    total = Fraction(0)
    for key, idx in groups.items():
        if centroids is not None:
            c = Fraction(float(centroids[key]))
        else:
            seg_w = sum((wts[i] for i in idx), Fraction(0))
            if seg_w == 0:
                continue
            c = sum((wts[i] * vals[i] for i in idx), Fraction(0)) / seg_w
        total += sum((wts[i] * (vals[i] - c) ** 2 for i in idx), Fraction(0))
    return total


def float_sse(values, weights, assignments, centroids):
    deq = np.asarray(centroids, dtype=np.float64)[np.asarray(assignments)]
    d = np.asarray(values, dtype=np.float64) - deq
    return float(np.sum(np.asarray(weights, dtype=np.float64) * d * d))


def naive_unpack_codes(planes_bits, k, n_max):
    """Rebuild k-bit prefix codes from a (n_max, rows, cols) bit array, bit by bit."""
    rows, cols = planes_bits.shape[1:]
    codes = np.zeros((rows, cols), dtype=np.int64)
    for p in range(k):
        codes |= planes_bits[p].astype(np.int64) << (k - 1 - p)
    return codes


def naive_field_extract(words, k):
    """Reference for the SWAR transpose: per-weight, per-bit code assembly.

    ``words`` is (k, ...) uint32, most significant plane first, each word
    covering 32 weights by bit position. Returns (32, ...) int64 codes.
    """
    words = np.asarray(words)
    out = np.zeros((32,) + words.shape[1:], dtype=np.int64)
    for j in range(32):
        code = np.zeros(words.shape[1:], dtype=np.int64)
        for p in range(k):
            bit = (words[p] >> np.uint32(j)) & np.uint32(1)
            code |= bit.astype(np.int64) << (k - 1 - p)
        out[j] = code
    return out


def random_layer(rng, rows, cols, n_min, n_max):
    """Synthetic AnyPrecisionLayer with random codes and sorted random tables."""
    from anyprec import AnyPrecisionLayer

    codes = rng.integers(0, 1 << n_max, size=(rows, cols), dtype=np.uint8)
    tables = {}
    for k in range(n_min, n_max + 1):
        t = rng.normal(size=(rows, 1 << k)).astype(np.float64)
        t.sort(axis=1)
        tables[k] = t.astype(np.float16)
    return AnyPrecisionLayer(
        n_min=n_min, n_max=n_max, codes=codes, centroid_tables=tables, shape=(rows, cols)
    )


def dense_reference_gemv(layer, x, k):
    """Float64 dequantize-then-multiply reference."""
    table = layer.centroid_tables[k].astype(np.float64)
    codes_k = layer.codes_at(k)
    deq = np.take_along_axis(table, codes_k.astype(np.int64), axis=1)
    return deq @ np.asarray(x, dtype=np.float64)


def rel_err(actual, reference):
    ref = np.asarray(reference, dtype=np.float64)
    act = np.asarray(actual, dtype=np.float64)
    denom = np.max(np.abs(ref))
    if denom == 0:
        return float(np.max(np.abs(act)))
    return float(np.max(np.abs(act - ref)) / denom)
