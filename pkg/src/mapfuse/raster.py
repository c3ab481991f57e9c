"""Grid traversal and polygon fill shared by the voting, scanning and mask code.

Cells are addressed by ``floor`` of continuous coordinates, so cell ``(i, j)``
covers ``[i, i+1) x [j, j+1)``.
"""

from __future__ import annotations

import numpy as np


def clip_segments(p0, p1, xmin, ymin, xmax, ymax):
    """Liang-Barsky clipping of ``N`` segments to an axis-aligned box.

    Returns ``(keep, q0, q1)`` where ``keep`` flags segments with a non-empty
    intersection and ``q0, q1`` are the clipped endpoints (undefined where
    ``keep`` is False).
    """
    p0 = np.asarray(p0, dtype=float).reshape(-1, 2)
    p1 = np.asarray(p1, dtype=float).reshape(-1, 2)
    d = p1 - p0
    t0 = np.zeros(len(p0))
    t1 = np.ones(len(p0))
    keep = np.all(np.isfinite(p0), axis=1) & np.all(np.isfinite(p1), axis=1)
    for pk, qk in (
        (-d[:, 0], p0[:, 0] - xmin),
        (d[:, 0], xmax - p0[:, 0]),
        (-d[:, 1], p0[:, 1] - ymin),
        (d[:, 1], ymax - p0[:, 1]),
    ):
        parallel = pk == 0
        keep &= ~(parallel & (qk < 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = qk / pk
        entering = (pk < 0) & ~parallel
        leaving = (pk > 0) & ~parallel
        t0 = np.where(entering, np.maximum(t0, r), t0)
        t1 = np.where(leaving, np.minimum(t1, r), t1)
    keep &= t0 <= t1
    q0 = p0 + t0[:, None] * d
    q1 = p0 + t1[:, None] * d
    return keep, q0, q1


def _interior_integers(a, b):
    lo_v = np.minimum(a, b)
    hi_v = np.maximum(a, b)
    lo = np.floor(lo_v).astype(np.int64) + 1
    hi = np.ceil(hi_v).astype(np.int64) - 1
    return lo, np.maximum(hi - lo + 1, 0)


def _expand(seg_ids_count, lo, counts):
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    seg = np.repeat(np.arange(len(counts)), counts)
    starts = np.cumsum(counts) - counts
    k = lo[seg] + (np.arange(total) - starts[seg])
    return seg, k


def supercover_segments(p0, p1):
    """Every grid cell crossed by each segment.

    Returns ``(seg, ix, iy)`` integer arrays, one row per (segment, cell)
    pair. Cells that a segment touches only at a single corner point are not
    reported.
    """
    p0 = np.asarray(p0, dtype=float).reshape(-1, 2)
    p1 = np.asarray(p1, dtype=float).reshape(-1, 2)
    n = len(p0)
    if n == 0:
        empty = np.zeros(0, np.int64)
        return empty, empty, empty
    d = p1 - p0
    lox, cntx = _interior_integers(p0[:, 0], p1[:, 0])
    loy, cnty = _interior_integers(p0[:, 1], p1[:, 1])
    segx, kx = _expand(n, lox, cntx)
    segy, ky = _expand(n, loy, cnty)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = (kx - p0[segx, 0]) / d[segx, 0]
        ty = (ky - p0[segy, 1]) / d[segy, 1]
    ids = np.arange(n)
    seg = np.concatenate([ids, ids, segx, segy])
    t = np.concatenate([np.zeros(n), np.ones(n), tx, ty])
    order = np.lexsort((t, seg))
    seg = seg[order]
    t = t[order]
    same = seg[1:] == seg[:-1]
    dt = t[1:] - t[:-1]
    use = same & (dt > 1e-12)
    s = seg[:-1][use]
    tm = 0.5 * (t[:-1][use] + t[1:][use])
    pts = p0[s] + tm[:, None] * d[s]
    # zero-length segments still occupy their start cell
    degenerate = np.ones(n, bool)
    degenerate[s] = False
    if degenerate.any():
        s = np.concatenate([s, ids[degenerate]])
        pts = np.concatenate([pts, p0[degenerate]])
    ix = np.floor(pts[:, 0]).astype(np.int64)
    iy = np.floor(pts[:, 1]).astype(np.int64)
    return s, ix, iy


def supercover_segment(p0, p1):
    """Cells ``(ix, iy)`` crossed by one segment, in traversal order."""
    _, ix, iy = supercover_segments(np.asarray(p0, float)[None], np.asarray(p1, float)[None])
    return ix, iy


def fill_polygon(vertices, width: int, height: int):
    """Pixels whose centers lie inside a polygon (even-odd rule).

    Returns ``(rows, cols)`` index arrays restricted to the image.
    """
    V = np.asarray(vertices, dtype=float).reshape(-1, 2)
    if len(V) < 3 or not np.all(np.isfinite(V)):
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    j0 = max(int(np.ceil(V[:, 1].min() - 0.5)), 0)
    j1 = min(int(np.floor(V[:, 1].max() - 0.5)), height - 1)
    i0 = max(int(np.ceil(V[:, 0].min() - 0.5)), 0)
    i1 = min(int(np.floor(V[:, 0].max() - 0.5)), width - 1)
    if j1 < j0 or i1 < i0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    yc = np.arange(j0, j1 + 1) + 0.5
    a = V
    b = np.roll(V, -1, axis=0)
    ya = a[:, 1][None, :]
    yb = b[:, 1][None, :]
    y = yc[:, None]
    crosses = ((ya <= y) & (y < yb)) | ((yb <= y) & (y < ya))
    with np.errstate(divide="ignore", invalid="ignore"):
        x = a[:, 0][None, :] + (y - ya) * (b[:, 0] - a[:, 0])[None, :] / (yb - ya)
    x = np.where(crosses, x, np.inf)
    x.sort(axis=1)
    xc = np.arange(i0, i1 + 1) + 0.5
    inside = np.zeros((len(yc), len(xc)), bool)
    max_pairs = int(crosses.sum(axis=1).max()) // 2
    for k in range(max_pairs):
        xa = x[:, 2 * k][:, None]
        xb = x[:, 2 * k + 1][:, None]
        inside |= (xc[None, :] >= xa) & (xc[None, :] < xb)
    rr, cc = np.nonzero(inside)
    return rr + j0, cc + i0
