"""Sequential numba kernels for edge-space message passing.

Every kernel loops edges in a fixed order and accumulates sequentially, so
results are bit-reproducible across runs. No parallelism by design: the
determinism reference for the whole package is single-worker execution.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def scatter_add(values, idx, out):
    # out[idx[e]] += values[e]
    for e in range(values.shape[0]):
        row = idx[e]
        for c in range(values.shape[1]):
            out[row, c] += values[e, c]


@njit(cache=True)
def seg_max_forward(values, indptr, out, arg):
    # per-segment columnwise max; empty segments yield 0 and arg -1;
    # ties resolve to the lowest edge index
    num_seg = indptr.shape[0] - 1
    d = values.shape[1]
    for s in range(num_seg):
        lo, hi = indptr[s], indptr[s + 1]
        if lo == hi:
            for c in range(d):
                out[s, c] = 0.0
                arg[s, c] = -1
        else:
            for c in range(d):
                best = values[lo, c]
                where = lo
                for i in range(lo + 1, hi):
                    if values[i, c] > best:
                        best = values[i, c]
                        where = i
                out[s, c] = best
                arg[s, c] = where


@njit(cache=True)
def seg_max_backward(grad_out, arg, grad_values):
    num_seg, d = grad_out.shape
    for s in range(num_seg):
        for c in range(d):
            i = arg[s, c]
            if i >= 0:
                grad_values[i, c] += grad_out[s, c]


@njit(cache=True)
def agg_translate_forward(h, z, src, rel, dst, out):
    for e in range(src.shape[0]):
        s, r, t = src[e], rel[e], dst[e]
        for c in range(h.shape[1]):
            out[t, c] += h[s, c] + z[r, c]


@njit(cache=True)
def agg_translate_backward(go, src, rel, dst, gh, gz):
    for e in range(src.shape[0]):
        s, r, t = src[e], rel[e], dst[e]
        for c in range(gh.shape[1]):
            g = go[t, c]
            gh[s, c] += g
            gz[r, c] += g


@njit(cache=True)
def agg_multiply_forward(h, z, src, rel, dst, out):
    for e in range(src.shape[0]):
        s, r, t = src[e], rel[e], dst[e]
        for c in range(h.shape[1]):
            out[t, c] += h[s, c] * z[r, c]


@njit(cache=True)
def agg_multiply_backward(go, h, z, src, rel, dst, gh, gz):
    for e in range(src.shape[0]):
        s, r, t = src[e], rel[e], dst[e]
        for c in range(h.shape[1]):
            g = go[t, c]
            gh[s, c] += g * z[r, c]
            gz[r, c] += g * h[s, c]


@njit(cache=True)
def agg_rotate_forward(h, z, src, rel, dst, out):
    # coordinate pairs (2i, 2i+1) of h rotated by angle z[r, i]
    half = h.shape[1] // 2
    for e in range(src.shape[0]):
        s, r, t = src[e], rel[e], dst[e]
        for i in range(half):
            th = z[r, i]
            co = np.cos(th)
            si = np.sin(th)
            a = h[s, 2 * i]
            b = h[s, 2 * i + 1]
            out[t, 2 * i] += a * co - b * si
            out[t, 2 * i + 1] += a * si + b * co


@njit(cache=True)
def agg_rotate_backward(go, h, z, src, rel, dst, gh, gz):
    half = h.shape[1] // 2
    for e in range(src.shape[0]):
        s, r, t = src[e], rel[e], dst[e]
        for i in range(half):
            th = z[r, i]
            co = np.cos(th)
            si = np.sin(th)
            a = h[s, 2 * i]
            b = h[s, 2 * i + 1]
            g0 = go[t, 2 * i]
            g1 = go[t, 2 * i + 1]
            gh[s, 2 * i] += g0 * co + g1 * si
            gh[s, 2 * i + 1] += -g0 * si + g1 * co
            gz[r, i] += g0 * (-a * si - b * co) + g1 * (a * co - b * si)
