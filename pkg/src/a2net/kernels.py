"""Hot numeric kernels: 2-D convolution loops and packed Hamming scans.

Each kernel exists twice, a numba ``@njit`` version (im2col loops feeding
BLAS, hardware popcount) and a pure-numpy version. The public names dispatch on ``_backend.USE_NUMBA``;
the ``*_numba`` / ``*_numpy`` names stay importable so tests and the
benchmark can compare both paths directly.

Layouts: activations ``(N, C, H, W)``, conv weights ``(O, C, KH, KW)``,
packed codes ``(m, words)`` of ``uint64``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _backend
from ._backend import njit


def conv_out_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def deconv_out_size(size, kernel, stride, pad):
    return (size - 1) * stride - 2 * pad + kernel


# ---------------------------------------------------------------- numba path


@njit(cache=True)
def _im2col(x, kh, kw, stride, pad, oh, ow):
    n_, c_, h_, w_ = x.shape
    cols = np.zeros((n_ * oh * ow, c_ * kh * kw))
    for n in range(n_):
        for p in range(oh):
            for q in range(ow):
                row = (n * oh + p) * ow + q
                for c in range(c_):
                    for a in range(kh):
                        i = p * stride + a - pad
                        if i < 0 or i >= h_:
                            continue
                        for b in range(kw):
                            j = q * stride + b - pad
                            if 0 <= j < w_:
                                cols[row, (c * kh + a) * kw + b] = x[n, c, i, j]
    return cols


@njit(cache=True)
def _col2im(cols, n_, c_, h_, w_, kh, kw, stride, pad, oh, ow):
    x = np.zeros((n_, c_, h_, w_))
    for n in range(n_):
        for p in range(oh):
            for q in range(ow):
                row = (n * oh + p) * ow + q
                for c in range(c_):
                    for a in range(kh):
                        i = p * stride + a - pad
                        if i < 0 or i >= h_:
                            continue
                        for b in range(kw):
                            j = q * stride + b - pad
                            if 0 <= j < w_:
                                x[n, c, i, j] += cols[row, (c * kh + a) * kw + b]
    return x


@njit(cache=True)
def _rows_to_nchw(y2, n_, o_, oh, ow):
    y = np.empty((n_, o_, oh, ow))
    for n in range(n_):
        for p in range(oh):
            for q in range(ow):
                row = (n * oh + p) * ow + q
                for o in range(o_):
                    y[n, o, p, q] = y2[row, o]
    return y


@njit(cache=True)
def _nchw_to_rows(g):
    n_, o_, oh, ow = g.shape
    g2 = np.empty((n_ * oh * ow, o_))
    for n in range(n_):
        for p in range(oh):
            for q in range(ow):
                row = (n * oh + p) * ow + q
                for o in range(o_):
                    g2[row, o] = g[n, o, p, q]
    return g2


@njit(cache=True)
def conv2d_forward_numba(x, w, stride, pad):
    n_, c_, h_, w_ = x.shape
    o_, _, kh, kw = w.shape
    oh = (h_ + 2 * pad - kh) // stride + 1
    ow = (w_ + 2 * pad - kw) // stride + 1
    cols = _im2col(x, kh, kw, stride, pad, oh, ow)
    y2 = np.dot(cols, np.ascontiguousarray(w.reshape(o_, c_ * kh * kw).T))
    return _rows_to_nchw(y2, n_, o_, oh, ow)


@njit(cache=True)
def conv2d_grad_input_numba(gy, w, h_, w_, stride, pad):
    n_, o_, oh, ow = gy.shape
    _, c_, kh, kw = w.shape
    dcols = np.dot(_nchw_to_rows(gy), np.ascontiguousarray(w.reshape(o_, c_ * kh * kw)))
    return _col2im(dcols, n_, c_, h_, w_, kh, kw, stride, pad, oh, ow)


@njit(cache=True)
def conv2d_grad_weight_numba(gy, x, kh, kw, stride, pad):
    n_, o_, oh, ow = gy.shape
    c_ = x.shape[1]
    cols = _im2col(x, kh, kw, stride, pad, oh, ow)
    gw = np.dot(np.ascontiguousarray(_nchw_to_rows(gy).T), cols)
    return gw.reshape(o_, c_, kh, kw)


if _backend.HAS_NUMBA:
    from numba import types
    from numba.extending import intrinsic

    @intrinsic
    def _popcount64(typingctx, v):
        """Hardware population count (LLVM ctpop) on one uint64 word."""
        def codegen(context, builder, signature, args):
            return builder.ctpop(args[0])
        return types.uint64(types.uint64), codegen
else:  # pragma: no cover - exercised only without numba
    def _popcount64(v):
        return int(v).bit_count()


@njit(cache=True)
def hamming_scan_numba(codes, query):
    m, words = codes.shape
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        acc = 0
        for w in range(words):
            acc += np.int64(_popcount64(codes[i, w] ^ query[w]))
        out[i] = acc
    return out


@njit(cache=True)
def hamming_matrix_numba(queries, codes):
    nq, words = queries.shape
    m = codes.shape[0]
    out = np.empty((nq, m), dtype=np.int64)
    for r in range(nq):
        for i in range(m):
            acc = 0
            for w in range(words):
                acc += np.int64(_popcount64(codes[i, w] ^ queries[r, w]))
            out[r, i] = acc
    return out


# ---------------------------------------------------------------- numpy path


def _windows(x, kh, kw, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (N, C, OH, OW, KH, KW)


def conv2d_forward_numpy(x, w, stride, pad):
    _, _, kh, kw = w.shape
    win = _windows(x, kh, kw, stride, pad)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, OH, OW, O)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_grad_input_numpy(gy, w, h_, w_, stride, pad):
    n_, _, oh, ow = gy.shape
    _, c_, kh, kw = w.shape
    cols = np.tensordot(gy, w, axes=([1], [0]))  # (N, OH, OW, C, KH, KW)
    hp, wp = h_ + 2 * pad, w_ + 2 * pad
    # a window may hang past the padded edge when (H + 2p - KH) % stride != 0
    gxp = np.zeros((n_, c_, max(hp, (oh - 1) * stride + kh), max(wp, (ow - 1) * stride + kw)))
    for a in range(kh):
        for b in range(kw):
            gxp[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += cols[..., a, b].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gxp[:, :, pad:pad + h_, pad:pad + w_])


def conv2d_grad_weight_numpy(gy, x, kh, kw, stride, pad):
    win = _windows(x, kh, kw, stride, pad)
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, KH, KW)


def hamming_scan_numpy(codes, query):
    return np.bitwise_count(codes ^ query).sum(axis=1, dtype=np.int64)


def hamming_matrix_numpy(queries, codes):
    return np.bitwise_count(queries[:, None, :] ^ codes[None, :, :]).sum(axis=2, dtype=np.int64)


# ------------------------------------------------------------------ dispatch

if _backend.USE_NUMBA:
    _conv_fwd, _conv_gin, _conv_gw = conv2d_forward_numba, conv2d_grad_input_numba, conv2d_grad_weight_numba
    _ham_scan, _ham_matrix = hamming_scan_numba, hamming_matrix_numba
else:
    _conv_fwd, _conv_gin, _conv_gw = conv2d_forward_numpy, conv2d_grad_input_numpy, conv2d_grad_weight_numpy
    _ham_scan, _ham_matrix = hamming_scan_numpy, hamming_matrix_numpy


def conv2d_forward(x, w, stride=1, pad=0):
    return _conv_fwd(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(w, dtype=np.float64),
                     int(stride), int(pad))


def conv2d_grad_input(gy, w, in_hw, stride=1, pad=0):
    return _conv_gin(np.ascontiguousarray(gy, dtype=np.float64), np.ascontiguousarray(w, dtype=np.float64),
                     int(in_hw[0]), int(in_hw[1]), int(stride), int(pad))


def conv2d_grad_weight(gy, x, kernel_hw, stride=1, pad=0):
    return _conv_gw(np.ascontiguousarray(gy, dtype=np.float64), np.ascontiguousarray(x, dtype=np.float64),
                    int(kernel_hw[0]), int(kernel_hw[1]), int(stride), int(pad))


def hamming_scan(codes, query):
    """Distances from one packed ``query`` (words,) to every row of ``codes``."""
    return _ham_scan(np.ascontiguousarray(codes, dtype=np.uint64), np.ascontiguousarray(query, dtype=np.uint64))


def hamming_matrix(queries, codes):
    return _ham_matrix(np.ascontiguousarray(queries, dtype=np.uint64), np.ascontiguousarray(codes, dtype=np.uint64))
