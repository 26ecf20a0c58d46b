"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``POLFUSE_NUMBA=0`` in the environment before import to force the numpy
implementations (useful for debugging and for the benchmark comparison).
Both paths are always importable under their explicit names so tests can
check them against each other.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("POLFUSE_NUMBA", "1").lower() not in ("0", "false", "no")


def _identity_jit(fn):
    return fn


jit = njit(cache=True, nogil=True) if HAVE_NUMBA else _identity_jit


# ---------------------------------------------------------------------------
# im2col / col2im for "same" zero-padded convolution with odd square kernels.
# Column layout: row = (c * k + ki) * k + kj, column = (b * H + h) * W + w.
# ---------------------------------------------------------------------------


def im2col_numpy(x, k):
    B, C, H, W = x.shape
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(C, B * H * W)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(C * k * k, B * H * W)


def col2im_numpy(cols, shape, k):
    B, C, H, W = shape
    if k == 1:
        return np.ascontiguousarray(cols.reshape(C, B, H, W).transpose(1, 0, 2, 3))
    p = k // 2
    c6 = cols.reshape(C, k, k, B, H, W)
    xp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + H, kj:kj + W] += c6[:, ki, kj].transpose(1, 0, 2, 3)
    return xp[:, :, p:p + H, p:p + W].copy()


@jit
def _im2col_nb(x, k):
    B, C, H, W = x.shape
    p = k // 2
    out = np.zeros((C * k * k, B * H * W), dtype=x.dtype)
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                r = (c * k + ki) * k + kj
                for b in range(B):
                    for h in range(H):
                        hh = h + ki - p
                        if hh < 0 or hh >= H:
                            continue
                        base = (b * H + h) * W
                        for w in range(W):
                            ww = w + kj - p
                            if ww >= 0 and ww < W:
                                out[r, base + w] = x[b, c, hh, ww]
    return out


@jit
def _col2im_nb(cols, B, C, H, W, k):
    p = k // 2
    out = np.zeros((B, C, H, W), dtype=cols.dtype)
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                r = (c * k + ki) * k + kj
                for b in range(B):
                    for h in range(H):
                        hh = h + ki - p
                        if hh < 0 or hh >= H:
                            continue
                        base = (b * H + h) * W
                        for w in range(W):
                            ww = w + kj - p
                            if ww >= 0 and ww < W:
                                out[b, c, hh, ww] += cols[r, base + w]
    return out


def im2col_numba(x, k):
    if k == 1:
        return im2col_numpy(x, k)
    return _im2col_nb(np.ascontiguousarray(x), k)


def col2im_numba(cols, shape, k):
    if k == 1:
        return col2im_numpy(cols, shape, k)
    B, C, H, W = shape
    return _col2im_nb(np.ascontiguousarray(cols), B, C, H, W, k)


# ---------------------------------------------------------------------------
# Channel outer product: out[b, i*m + j] = a[b, i] * c[b, j]
# ---------------------------------------------------------------------------


def outer_channels_numpy(a, c):
    B, m, H, W = a.shape
    n = c.shape[1]
    return (a[:, :, None] * c[:, None]).reshape(B, m * n, H, W)


def outer_channels_grad_numpy(g, a, c):
    B, m, H, W = a.shape
    n = c.shape[1]
    g5 = g.reshape(B, m, n, H, W)
    ga = np.einsum("bijhw,bjhw->bihw", g5, c, optimize=True)
    gc = np.einsum("bijhw,bihw->bjhw", g5, a, optimize=True)
    return ga, gc


@jit
def _outer_channels_nb(a, c):
    B, m, H, W = a.shape
    n = c.shape[1]
    out = np.empty((B, m * n, H, W), dtype=a.dtype)
    for b in range(B):
        for i in range(m):
            for j in range(n):
                r = i * n + j
                for h in range(H):
                    for w in range(W):
                        out[b, r, h, w] = a[b, i, h, w] * c[b, j, h, w]
    return out


@jit
def _outer_channels_grad_nb(g, a, c):
    B, m, H, W = a.shape
    n = c.shape[1]
    ga = np.zeros_like(a)
    gc = np.zeros_like(c)
    for b in range(B):
        for i in range(m):
            for j in range(n):
                r = i * n + j
                for h in range(H):
                    for w in range(W):
                        gv = g[b, r, h, w]
                        ga[b, i, h, w] += gv * c[b, j, h, w]
                        gc[b, j, h, w] += gv * a[b, i, h, w]
    return ga, gc


def outer_channels_numba(a, c):
    return _outer_channels_nb(np.ascontiguousarray(a), np.ascontiguousarray(c))


def outer_channels_grad_numba(g, a, c):
    return _outer_channels_grad_nb(np.ascontiguousarray(g), np.ascontiguousarray(a), np.ascontiguousarray(c))


# ---------------------------------------------------------------------------
# Self-inclusive neighbor mean over a CSR adjacency (indptr, indices).
# ---------------------------------------------------------------------------


def _csr_rows(indptr):
    return np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))


def neighbor_mean_numpy(h, indptr, indices):
    rows = _csr_rows(indptr)
    out = h.copy()
    np.add.at(out, rows, h[indices])
    denom = (np.diff(indptr) + 1).astype(h.dtype)
    return out / denom[:, None]


def neighbor_mean_grad_numpy(g, indptr, indices):
    rows = _csr_rows(indptr)
    denom = (np.diff(indptr) + 1).astype(g.dtype)
    gs = g / denom[:, None]
    out = gs.copy()
    np.add.at(out, indices, gs[rows])
    return out


@jit
def _neighbor_mean_nb(h, indptr, indices):
    n, d = h.shape
    out = np.empty_like(h)
    for v in range(n):
        lo = indptr[v]
        hi = indptr[v + 1]
        inv = 1.0 / (hi - lo + 1)
        for f in range(d):
            acc = h[v, f]
            for e in range(lo, hi):
                acc += h[indices[e], f]
            out[v, f] = acc * inv
    return out


@jit
def _neighbor_mean_grad_nb(g, indptr, indices):
    n, d = g.shape
    out = np.zeros_like(g)
    for v in range(n):
        lo = indptr[v]
        hi = indptr[v + 1]
        inv = 1.0 / (hi - lo + 1)
        for f in range(d):
            gv = g[v, f] * inv
            out[v, f] += gv
            for e in range(lo, hi):
                out[indices[e], f] += gv
    return out


def neighbor_mean_numba(h, indptr, indices):
    return _neighbor_mean_nb(np.ascontiguousarray(h), indptr, indices)


def neighbor_mean_grad_numba(g, indptr, indices):
    return _neighbor_mean_grad_nb(np.ascontiguousarray(g), indptr, indices)


# ---------------------------------------------------------------------------
# Top-k by similarity per row; ties go to the lower column index, self excluded.
# ---------------------------------------------------------------------------


def topk_rows_numpy(sim, k):
    s = sim.copy()
    np.fill_diagonal(s, -np.inf)
    order = np.argsort(-s, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


@jit
def _topk_rows_nb(sim, k):
    n = sim.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    best_v = np.empty(k, dtype=sim.dtype)
    for i in range(n):
        cnt = 0
        for j in range(n):
            if j == i:
                continue
            v = sim[i, j]
            if cnt < k:
                pos = cnt
                cnt += 1
            elif v > best_v[k - 1]:
                pos = k - 1
            else:
                continue
            # insertion keeps strict ordering; equal values stay behind earlier j
            while pos > 0 and best_v[pos - 1] < v:
                best_v[pos] = best_v[pos - 1]
                out[i, pos] = out[i, pos - 1]
                pos -= 1
            best_v[pos] = v
            out[i, pos] = j
    return out


def topk_rows_numba(sim, k):
    return _topk_rows_nb(np.ascontiguousarray(sim), k)


# ---------------------------------------------------------------------------
# Confusion counts (truth and prediction are 0-based class indices).
# ---------------------------------------------------------------------------


def confusion_counts_numpy(truth, pred, n_classes):
    flat = truth.astype(np.int64) * n_classes + pred.astype(np.int64)
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


@jit
def _confusion_counts_nb(truth, pred, n_classes):
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    for i in range(truth.shape[0]):
        out[truth[i], pred[i]] += 1
    return out


def confusion_counts_numba(truth, pred, n_classes):
    return _confusion_counts_nb(truth.astype(np.int64), pred.astype(np.int64), n_classes)


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    outer_channels = outer_channels_numba
    outer_channels_grad = outer_channels_grad_numba
    neighbor_mean = neighbor_mean_numba
    neighbor_mean_grad = neighbor_mean_grad_numba
    topk_rows = topk_rows_numba
    confusion_counts = confusion_counts_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    outer_channels = outer_channels_numpy
    outer_channels_grad = outer_channels_grad_numpy
    neighbor_mean = neighbor_mean_numpy
    neighbor_mean_grad = neighbor_mean_grad_numpy
    topk_rows = topk_rows_numpy
    confusion_counts = confusion_counts_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
