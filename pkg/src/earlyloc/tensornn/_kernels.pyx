# cython: language_level=3
"""Compiled NHWC kernels for valid convolution and max pooling.

Every function takes C-contiguous batched arrays (N, H, W, C) and mirrors the
signature of its counterpart in ``_kernels_py``. Shape validation happens in
the caller; these loops assume consistent inputs.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()


# im2col buffers are capped at roughly this many elements per chunk
cdef enum:
    COL_BUDGET = 1 << 21


cdef inline void _gemm(char* ta, char* tb, int m, int n, int k, floating alpha,
                       floating* a, int lda, floating* b, int ldb, floating beta,
                       floating* c, int ldc) noexcept nogil:
    # column-major BLAS; callers pass row-major operands swapped
    if floating is float:
        sgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


cdef void _im2col(floating* x, floating* cols, Py_ssize_t n0, Py_ssize_t n1,
                  Py_ssize_t h, Py_ssize_t wd, Py_ssize_t cin, Py_ssize_t kh,
                  Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t oh,
                  Py_ssize_t ow) noexcept nogil:
    cdef Py_ssize_t n, i, j, di, dj, c, row = 0
    cdef Py_ssize_t width = kh * kw * cin
    cdef floating* src
    cdef floating* dst
    for n in range(n0, n1):
        for i in range(oh):
            for j in range(ow):
                dst = cols + row * width
                for di in range(kh):
                    src = x + ((n * h + i * stride + di) * wd + j * stride) * cin
                    for dj in range(kw):
                        for c in range(cin):
                            dst[c] = src[c]
                        dst += cin
                        src += cin
                row += 1


cdef void _col2im(floating* cols, floating* dx, Py_ssize_t n0, Py_ssize_t n1,
                  Py_ssize_t h, Py_ssize_t wd, Py_ssize_t cin, Py_ssize_t kh,
                  Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t oh,
                  Py_ssize_t ow) noexcept nogil:
    cdef Py_ssize_t n, i, j, di, dj, c, row = 0
    cdef Py_ssize_t width = kh * kw * cin
    cdef floating* src
    cdef floating* dst
    for n in range(n0, n1):
        for i in range(oh):
            for j in range(ow):
                src = cols + row * width
                for di in range(kh):
                    dst = dx + ((n * h + i * stride + di) * wd + j * stride) * cin
                    for dj in range(kw):
                        for c in range(cin):
                            dst[c] += src[c]
                        dst += cin
                        src += cin
                row += 1


cdef Py_ssize_t _chunk(Py_ssize_t n_batch, Py_ssize_t rows_per_sample,
                       Py_ssize_t width) noexcept nogil:
    cdef Py_ssize_t per = rows_per_sample * width
    cdef Py_ssize_t k = COL_BUDGET // per if per > 0 else n_batch
    if k < 1:
        k = 1
    return k if k < n_batch else n_batch


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   floating[::1] b, Py_ssize_t stride):
    cdef Py_ssize_t n_batch = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t cin = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], nf = w.shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1, ow = (wd - kw) // stride + 1
    cdef Py_ssize_t width = kh * kw * cin, per = oh * ow
    cdef Py_ssize_t chunk = _chunk(n_batch, per, width)
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n_batch, oh, ow, nf), dtype=dtype)
    col_arr = np.empty((chunk * per, width), dtype=dtype)
    cdef floating[:, :, :, ::1] y = out
    cdef floating[:, ::1] cols = col_arr
    cdef Py_ssize_t n0, n1, r, f, rows
    cdef floating* yp
    if n_batch == 0:
        return out
    with nogil:
        n0 = 0
        while n0 < n_batch:
            n1 = min(n0 + chunk, n_batch)
            rows = (n1 - n0) * per
            _im2col(&x[0, 0, 0, 0], &cols[0, 0], n0, n1, h, wd, cin, kh, kw,
                    stride, oh, ow)
            yp = &y[0, 0, 0, 0] + n0 * per * nf
            for r in range(rows):
                for f in range(nf):
                    yp[r * nf + f] = b[f]
            # Y(rows x F) += cols(rows x width) @ W(width x F)
            _gemm(b"N", b"N", <int>nf, <int>rows, <int>width, 1,
                  &w[0, 0, 0, 0], <int>nf, &cols[0, 0], <int>width, 1,
                  yp, <int>nf)
            n0 = n1
    return out


def conv2d_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                    floating[:, :, :, ::1] dy, Py_ssize_t stride):
    """Return ``(dx, dw, db)`` for a valid convolution."""
    cdef Py_ssize_t n_batch = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t cin = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], nf = w.shape[3]
    cdef Py_ssize_t oh = dy.shape[1], ow = dy.shape[2]
    cdef Py_ssize_t width = kh * kw * cin, per = oh * ow
    cdef Py_ssize_t chunk = _chunk(n_batch, per, width)
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((n_batch, h, wd, cin), dtype=dtype)
    dw_arr = np.zeros((kh, kw, cin, nf), dtype=dtype)
    db_arr = np.zeros(nf, dtype=dtype)
    col_arr = np.empty((max(chunk, 1) * per, width), dtype=dtype)
    dcol_arr = np.empty((max(chunk, 1) * per, width), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef floating[:, :, :, ::1] dw = dw_arr
    cdef floating[::1] db = db_arr
    cdef floating[:, ::1] cols = col_arr
    cdef floating[:, ::1] dcols = dcol_arr
    cdef Py_ssize_t n0, n1, r, f, rows
    cdef floating* dyp
    if n_batch == 0:
        return dx_arr, dw_arr, db_arr
    with nogil:
        n0 = 0
        while n0 < n_batch:
            n1 = min(n0 + chunk, n_batch)
            rows = (n1 - n0) * per
            dyp = &dy[0, 0, 0, 0] + n0 * per * nf
            for r in range(rows):
                for f in range(nf):
                    db[f] += dyp[r * nf + f]
            _im2col(&x[0, 0, 0, 0], &cols[0, 0], n0, n1, h, wd, cin, kh, kw,
                    stride, oh, ow)
            # dW(width x F) += cols^T(width x rows) @ dY(rows x F)
            _gemm(b"N", b"T", <int>nf, <int>width, <int>rows, 1,
                  dyp, <int>nf, &cols[0, 0], <int>width, 1,
                  &dw[0, 0, 0, 0], <int>nf)
            # dcols(rows x width) = dY(rows x F) @ W^T(F x width)
            _gemm(b"T", b"N", <int>width, <int>rows, <int>nf, 1,
                  &w[0, 0, 0, 0], <int>nf, dyp, <int>nf, 0,
                  &dcols[0, 0], <int>width)
            _col2im(&dcols[0, 0], &dx[0, 0, 0, 0], n0, n1, h, wd, cin, kh, kw,
                    stride, oh, ow)
            n0 = n1
    return dx_arr, dw_arr, db_arr


def depthwise_forward(floating[:, :, :, ::1] x, floating[:, :, ::1] w,
                      floating[::1] b, Py_ssize_t stride):
    cdef Py_ssize_t n_batch = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t ch = x.shape[3], kh = w.shape[0], kw = w.shape[1]
    cdef Py_ssize_t oh = (h - kh) // stride + 1, ow = (wd - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n_batch, oh, ow, ch), dtype=dtype)
    cdef floating[:, :, :, ::1] y = out
    cdef Py_ssize_t n, i, j, di, dj, c, r, s
    with nogil:
        for n in range(n_batch):
            for i in range(oh):
                for j in range(ow):
                    for c in range(ch):
                        y[n, i, j, c] = b[c]
                    for di in range(kh):
                        r = i * stride + di
                        for dj in range(kw):
                            s = j * stride + dj
                            for c in range(ch):
                                y[n, i, j, c] += x[n, r, s, c] * w[di, dj, c]
    return out


def depthwise_backward(floating[:, :, :, ::1] x, floating[:, :, ::1] w,
                       floating[:, :, :, ::1] dy, Py_ssize_t stride):
    cdef Py_ssize_t n_batch = x.shape[0], ch = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1]
    cdef Py_ssize_t oh = dy.shape[1], ow = dy.shape[2]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((x.shape[0], x.shape[1], x.shape[2], ch), dtype=dtype)
    dw_arr = np.zeros((kh, kw, ch), dtype=dtype)
    db_arr = np.zeros(ch, dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef floating[:, :, ::1] dw = dw_arr
    cdef floating[::1] db = db_arr
    cdef Py_ssize_t n, i, j, di, dj, c, r, s
    cdef floating g
    with nogil:
        for n in range(n_batch):
            for i in range(oh):
                for j in range(ow):
                    for c in range(ch):
                        db[c] += dy[n, i, j, c]
                    for di in range(kh):
                        r = i * stride + di
                        for dj in range(kw):
                            s = j * stride + dj
                            for c in range(ch):
                                g = dy[n, i, j, c]
                                dw[di, dj, c] += x[n, r, s, c] * g
                                dx[n, r, s, c] += w[di, dj, c] * g
    return dx_arr, dw_arr, db_arr


def maxpool_forward(floating[:, :, :, ::1] x, Py_ssize_t ph, Py_ssize_t pw,
                    Py_ssize_t stride):
    """Return pooled output and the flat spatial index of each maximum."""
    cdef Py_ssize_t n_batch = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t ch = x.shape[3]
    cdef Py_ssize_t oh = (h - ph) // stride + 1, ow = (wd - pw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n_batch, oh, ow, ch), dtype=dtype)
    arg_arr = np.empty((n_batch, oh, ow, ch), dtype=np.int64)
    cdef floating[:, :, :, ::1] y = out
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, i, j, di, dj, c, r, s, best_idx
    cdef floating best, v
    with nogil:
        for n in range(n_batch):
            for i in range(oh):
                for j in range(ow):
                    for c in range(ch):
                        # first maximum in row-major window order wins ties
                        r = i * stride
                        s = j * stride
                        best = x[n, r, s, c]
                        best_idx = r * wd + s
                        for di in range(ph):
                            for dj in range(pw):
                                v = x[n, r + di, s + dj, c]
                                if v > best:
                                    best = v
                                    best_idx = (r + di) * wd + s + dj
                        y[n, i, j, c] = best
                        arg[n, i, j, c] = best_idx
    return out, arg_arr


def maxpool_backward(floating[:, :, :, ::1] dy, cnp.int64_t[:, :, :, ::1] arg,
                     Py_ssize_t h, Py_ssize_t wd):
    cdef Py_ssize_t n_batch = dy.shape[0], oh = dy.shape[1], ow = dy.shape[2]
    cdef Py_ssize_t ch = dy.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((n_batch, h, wd, ch), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, i, j, c, idx
    with nogil:
        for n in range(n_batch):
            for i in range(oh):
                for j in range(ow):
                    for c in range(ch):
                        idx = arg[n, i, j, c]
                        dx[n, idx // wd, idx % wd, c] += dy[n, i, j, c]
    return dx_arr
