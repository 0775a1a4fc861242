"""Exact weighted 1-D k-means.

Optimal 1-D clusters under weighted squared error are contiguous runs of the
sorted values, so the global optimum is found by dynamic programming over
sorted positions instead of Lloyd iterations. The DP argmin is monotone in the
right endpoint, which lets each layer of the recurrence be solved by divide
and conquer in O(n log n). All routines here are deterministic: ties in the
argmin scan go to the smallest split index, which keeps the leading cluster as
small as possible.

The batched variants operate on a matrix of rows sharing one length so that a
whole group of channels is clustered with a handful of numpy passes; they are
the workhorse behind seed quantization and upscaling.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ParameterError


class KMeans1DResult(NamedTuple):
    centroids: np.ndarray    # (k,) float64, non-decreasing
    assignments: np.ndarray  # (n,) int64 indices into centroids
    padded: bool             # True when k exceeded the distinct-value count


def _prefix_sums(values: np.ndarray, weights: np.ndarray):
    """Per-row inclusive prefix sums with a leading zero column.

    Returns (pw, pwv, pwv2): cumulative weight, weighted value and weighted
    squared value, the inputs of the O(1) segment-cost formula.
    """
    r, n = values.shape
    out = []
    for arr in (weights, weights * values, weights * values * values):
        p = np.zeros((r, n + 1), dtype=np.float64)
        np.cumsum(arr, axis=1, out=p[:, 1:])
        out.append(p)
    return tuple(out)


def _segment_cost(pw, pwv, pwv2, rows, a, b):
    """Weighted SSE of sorted positions [a, b) against their weighted mean.

    Zero total weight costs nothing. Cancellation can produce tiny negative
    values; they are clamped so downstream sums stay non-negative.
    """
    dw = pw[rows, b] - pw[rows, a]
    dwv = pwv[rows, b] - pwv[rows, a]
    dwv2 = pwv2[rows, b] - pwv2[rows, a]
    safe = np.where(dw > 0.0, dw, 1.0)
    mean_term = np.where(dw > 0.0, (dwv * dwv) / safe, 0.0)
    return np.maximum(dwv2 - mean_term, 0.0)


def _segment_means(sv, sw, bounds):
    """Weighted means of the intervals described by ``bounds`` (R, m+1).

    Each interval is summed independently (no prefix-difference cancellation),
    so singleton clusters reproduce their member exactly. Zero-weight but
    non-empty intervals fall back to the unweighted mean. Empty intervals come
    out as NaN and must be patched by the caller.
    """
    nrows, n = sv.shape
    m = bounds.shape[1] - 1
    lens = (bounds[:, 1:] - bounds[:, :-1]).ravel()
    starts = (bounds[:, :-1] + n * np.arange(nrows, dtype=np.int64)[:, None]).ravel()
    means = np.full(nrows * m, np.nan)
    nonempty = lens > 0
    if np.any(nonempty):
        s = starts[nonempty]
        sum_w = np.add.reduceat(sw.ravel(), s)
        sum_wv = np.add.reduceat((sw * sv).ravel(), s)
        sum_v = np.add.reduceat(sv.ravel(), s)
        with np.errstate(divide="ignore", invalid="ignore"):
            weighted = sum_wv / sum_w
            unweighted = sum_v / lens[nonempty]
        means[nonempty] = np.where(sum_w > 0.0, weighted, unweighted)
    return means.reshape(nrows, m)


_TINY = np.float64(5e-324)  # smallest subnormal; turns 0/0 segments into 0


def _dp_boundaries(values, pw, pwv, pwv2, k):
    """Optimal k-clustering boundaries for every row of a sorted batch.

    ``values`` is (R, n) with each row sorted ascending; every row is split
    into exactly k non-empty contiguous clusters (requires k <= n and, for the
    result to be the true k-means optimum, k <= distinct count per row, which
    callers enforce by grouping). Returns int64 boundaries of shape (R, k+1)
    with column 0 == 0 and column k == n.
    """
    nrows, n = values.shape
    if not 1 <= k <= n:
        raise ParameterError(f"cluster count {k} outside [1, {n}]")
    bounds = np.zeros((nrows, k + 1), dtype=np.int64)
    bounds[:, k] = n
    if k == 1:
        return bounds

    all_rows = np.arange(nrows)
    stride = n + 1
    pwf, pwvf, pwv2f = pw.ravel(), pwv.ravel(), pwv2.ravel()
    # dist[r, t]: optimal cost of clustering the first t positions of row r
    # into m clusters, updated layer by layer. The prefix-length layout shares
    # its flat index with the prefix-sum arrays, so one index array feeds all
    # four gathers of the hot loop. args[m] holds the start of the last
    # cluster for the traceback. Only t = n of the final layer is ever traced,
    # so that layer is a single scan instead of a full divide-and-conquer.
    dist = np.empty((nrows, stride), dtype=np.float64)
    dist[:, 0] = np.inf  # no clustering of an empty prefix
    dist[:, 1:] = pwv2[:, 1:] - pwv[:, 1:] * pwv[:, 1:] / np.maximum(pw[:, 1:], _TINY)
    args = {}

    def candidate_costs(jf, end_w, end_wv, end_wv2):
        """dist over prefix j, plus cost(j, b); jf = row * stride + j."""
        dw = end_w - np.take(pwf, jf)
        dwv = end_wv - np.take(pwvf, jf)
        dwv2 = end_wv2 - np.take(pwv2f, jf)
        cost = dwv2 - dwv * dwv / np.maximum(dw, _TINY)
        cost += np.take(dist.ravel(), jf)
        return cost

    for m in range(2, k):
        new_dist = np.full((nrows, stride), np.inf)
        arg = np.zeros((nrows, n), dtype=np.int64)
        # Work queue of divide-and-conquer nodes, batched across rows so each
        # wave is a single set of vector operations.
        t_row = all_rows.copy()
        t_ilo = np.full(nrows, m - 1, dtype=np.int64)
        t_ihi = np.full(nrows, n - 1, dtype=np.int64)
        t_jlo = np.full(nrows, m - 1, dtype=np.int64)
        t_jhi = np.full(nrows, n - 1, dtype=np.int64)
        while t_row.size:
            mid = (t_ilo + t_ihi) >> 1
            jhi = np.minimum(t_jhi, mid)
            cnt = jhi - t_jlo + 1
            starts = np.zeros(cnt.size, dtype=np.int64)
            np.cumsum(cnt[:-1], out=starts[1:])
            total = int(starts[-1] + cnt[-1])
            tid = np.repeat(np.arange(cnt.size), cnt)
            j = np.arange(total, dtype=np.int64) - starts[tid] + t_jlo[tid]
            row_base = t_row * stride
            bflat = row_base + mid + 1
            cand = candidate_costs(
                row_base[tid] + j,
                np.take(pwf, bflat)[tid],
                np.take(pwvf, bflat)[tid],
                np.take(pwv2f, bflat)[tid],
            )
            best = np.minimum.reduceat(cand, starts)
            first = np.where(cand == best[tid], j, n)
            jstar = np.minimum.reduceat(first, starts)
            new_dist[t_row, mid + 1] = best
            arg[t_row, mid] = jstar
            left = t_ilo <= mid - 1
            right = mid + 1 <= t_ihi
            t_row, t_ilo, t_ihi, t_jlo, t_jhi = (
                np.concatenate([t_row[left], t_row[right]]),
                np.concatenate([t_ilo[left], (mid + 1)[right]]),
                np.concatenate([(mid - 1)[left], t_ihi[right]]),
                np.concatenate([t_jlo[left], jstar[right]]),
                np.concatenate([jstar[left], t_jhi[right]]),
            )
        dist = new_dist
        args[m] = arg

    # Final layer: one scan per row over j in [k-1, n-1] ending at n.
    cnt = np.full(nrows, n - k + 1, dtype=np.int64)
    starts = np.zeros(nrows, dtype=np.int64)
    np.cumsum(cnt[:-1], out=starts[1:])
    tid = np.repeat(all_rows, cnt)
    j = np.arange(int(cnt.sum()), dtype=np.int64) - starts[tid] + (k - 1)
    row_base = all_rows * stride
    bflat = row_base + n
    cand = candidate_costs(
        row_base[tid] + j,
        np.take(pwf, bflat)[tid],
        np.take(pwvf, bflat)[tid],
        np.take(pwv2f, bflat)[tid],
    )
    best = np.minimum.reduceat(cand, starts)
    first = np.where(cand == best[tid], j, n)
    last_arg = np.minimum.reduceat(first, starts)

    idx = last_arg - 1
    bounds[:, k - 1] = last_arg
    for m in range(k - 1, 1, -1):
        jm = args[m][all_rows, idx]
        bounds[:, m - 1] = jm
        idx = jm - 1
    return bounds


def _distinct_counts(sorted_values):
    return 1 + np.count_nonzero(np.diff(sorted_values, axis=1) > 0, axis=1)


def cluster_rows(values, weights, k):
    """Exact weighted k-means over each row of a (R, n) batch.

    Rows are independent channels. Returns (boundaries, order, sorted_values,
    sorted_weights, padded_rows) where ``boundaries`` is (R, k+1) over the
    sorted positions, with empty trailing intervals for rows whose distinct
    count is below k, and ``padded_rows`` is the boolean mask of such rows.
    """
    order = np.argsort(values, axis=1, kind="stable")
    sv = np.take_along_axis(values, order, axis=1)
    sw = np.take_along_axis(weights, order, axis=1)
    pw, pwv, pwv2 = _prefix_sums(sv, sw)

    distinct = _distinct_counts(sv)
    keff = np.minimum(distinct, k)
    bounds = np.zeros((values.shape[0], k + 1), dtype=np.int64)
    for kk in np.unique(keff):
        mask = keff == kk
        sub = _dp_boundaries(sv[mask], pw[mask], pwv[mask], pwv2[mask], int(kk))
        padded = np.concatenate(
            [sub, np.full((sub.shape[0], k - kk), sv.shape[1], dtype=np.int64)], axis=1
        )
        bounds[mask] = padded
    return bounds, order, sv, sw, distinct < k


def _segmented_argmin(flat_cost, seg_starts, seg_lens, n_sentinel):
    """First argmin position of each contiguous segment of ``flat_cost``.

    Empty segments yield -1. ``seg_starts`` are flat offsets, consecutive
    non-empty segments must tile the data they cover.
    """
    out_min = np.full(seg_starts.size, np.inf)
    out_arg = np.full(seg_starts.size, -1, dtype=np.int64)
    nonempty = seg_lens > 0
    if not np.any(nonempty):
        return out_min, out_arg
    ne_starts = seg_starts[nonempty]
    best = np.minimum.reduceat(flat_cost, ne_starts)
    seg_id = np.repeat(np.arange(ne_starts.size), seg_lens[nonempty])
    flat_pos = np.arange(flat_cost.size, dtype=np.int64)
    cand = np.where(flat_cost == best[seg_id], flat_pos, n_sentinel)
    first = np.minimum.reduceat(cand, ne_starts)
    out_min[nonempty] = best
    out_arg[nonempty] = first
    return out_min, out_arg


def split_boundaries(sv, sw, pw, pwv, pwv2, bounds):
    """Optimal weighted 2-means split of every interval of every row.

    ``bounds`` is (R, m+1); the result is (R, 2m+1) where interval c becomes
    [b_c, s_c) and [s_c, b_{c+1}). Intervals with fewer than two distinct
    values are not split: all members stay in the left child and the right
    child is empty. The split scan prefers the smallest index on cost ties.
    """
    nrows, n = sv.shape
    m = bounds.shape[1] - 1
    lens = bounds[:, 1:] - bounds[:, :-1]

    # Segment statistics at the interval edges, expanded to one entry per
    # position; the statistics at the split position itself are plain slices
    # of the prefix arrays.
    stats_at = [np.take_along_axis(a, bounds, axis=1) for a in (pw, pwv, pwv2)]
    lens_flat = lens.ravel()
    lo_w, lo_wv, lo_wv2 = (np.repeat(s[:, :-1].ravel(), lens_flat) for s in stats_at)
    hi_w, hi_wv, hi_wv2 = (np.repeat(s[:, 1:].ravel(), lens_flat) for s in stats_at)
    p_w = np.ascontiguousarray(pw[:, :n]).ravel()
    p_wv = np.ascontiguousarray(pwv[:, :n]).ravel()
    p_wv2 = np.ascontiguousarray(pwv2[:, :n]).ravel()

    dlw = p_w - lo_w
    dlv = p_wv - lo_wv
    cost = (p_wv2 - lo_wv2) - dlv * dlv / np.maximum(dlw, _TINY)
    drw = hi_w - p_w
    drv = hi_wv - p_wv
    cost += (hi_wv2 - p_wv2) - drv * drv / np.maximum(drw, _TINY)

    # A split at the interval start would leave the left child empty.
    row_off = n * np.arange(nrows, dtype=np.int64)[:, None]
    start_pos = (bounds[:, :-1] + row_off).ravel()
    cost[start_pos[start_pos < nrows * n]] = np.inf

    seg_starts = start_pos
    _, arg = _segmented_argmin(cost, seg_starts, lens_flat, nrows * n)
    # arg is a flat offset; convert back to a column index within its row.
    arg = arg.reshape(nrows, m)
    split = np.where(arg >= 0, arg - n * np.arange(nrows, dtype=np.int64)[:, None], -1)

    splittable = lens >= 2
    vlo = np.take_along_axis(sv, np.minimum(bounds[:, :-1], n - 1), axis=1)
    vhi = np.take_along_axis(sv, np.maximum(bounds[:, 1:] - 1, 0), axis=1)
    splittable &= vhi > vlo
    split = np.where(splittable, split, bounds[:, 1:])  # no split: right child empty

    out = np.empty((nrows, 2 * m + 1), dtype=np.int64)
    out[:, 0::2] = bounds
    out[:, 1::2] = split
    return out
