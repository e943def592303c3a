# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels: typed im2col/col2im loops feeding BLAS
GEMMs directly (no intermediate numpy temporaries, no output transposes).
Single threaded apart from BLAS, whose per-shape schedules are fixed, so
results are reproducible run to run."""

import numpy as np

cimport cython
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef void _gemm_rm(real* a, real* b, real* c,
                   int m, int n, int k, int op_a, int op_b,
                   real alpha, real beta) noexcept nogil:
    """Row-major C(m,n) = alpha * op(A)(m,k) @ op(B)(k,n) + beta * C.

    Implemented as the transposed column-major product; ld's are the
    row-major trailing dims of the stored arrays.
    """
    cdef char ta = b'T' if op_b else b'N'
    cdef char tb = b'T' if op_a else b'N'
    cdef int lda = k if op_b else n      # stored B is (k,n) or (n,k)
    cdef int ldb = m if op_a else k      # stored A is (m,k) or (k,m)
    cdef int ldc = n
    if real is float:
        sgemm(&ta, &tb, &n, &m, &k, <float*>&alpha, <float*>b, &lda,
              <float*>a, &ldb, <float*>&beta, <float*>c, &ldc)
    else:
        dgemm(&ta, &tb, &n, &m, &k, <double*>&alpha, <double*>b, &lda,
              <double*>a, &ldb, <double*>&beta, <double*>c, &ldc)


cdef void _im2col(const real* x, real* col,
                  Py_ssize_t Cin, Py_ssize_t H, Py_ssize_t W,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t Ho, Py_ssize_t Wo,
                  int stride, int padding) noexcept nogil:
    """Fill col as (Cin*kh*kw, Ho*Wo) row-major for one image."""
    cdef Py_ssize_t ci, p, q, i, j, ih, iw0, row, base
    cdef const real* xrow
    cdef real* crow
    for ci in range(Cin):
        for p in range(kh):
            for q in range(kw):
                row = (ci * kh + p) * kw + q
                crow = col + row * (Ho * Wo)
                for i in range(Ho):
                    ih = i * stride + p - padding
                    base = i * Wo
                    if ih < 0 or ih >= H:
                        for j in range(Wo):
                            crow[base + j] = 0
                        continue
                    xrow = x + (ci * H + ih) * W
                    iw0 = q - padding
                    if stride == 1:
                        for j in range(Wo):
                            if 0 <= j + iw0 < W:
                                crow[base + j] = xrow[j + iw0]
                            else:
                                crow[base + j] = 0
                    else:
                        for j in range(Wo):
                            if 0 <= j * stride + iw0 < W:
                                crow[base + j] = xrow[j * stride + iw0]
                            else:
                                crow[base + j] = 0


cdef void _col2im_add(const real* col, real* gx,
                      Py_ssize_t Cin, Py_ssize_t H, Py_ssize_t W,
                      Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t Ho, Py_ssize_t Wo,
                      int stride, int padding) noexcept nogil:
    cdef Py_ssize_t ci, p, q, i, j, ih, iw0, row, base
    cdef real* gxrow
    cdef const real* crow
    for ci in range(Cin):
        for p in range(kh):
            for q in range(kw):
                row = (ci * kh + p) * kw + q
                crow = col + row * (Ho * Wo)
                for i in range(Ho):
                    ih = i * stride + p - padding
                    if ih < 0 or ih >= H:
                        continue
                    gxrow = gx + (ci * H + ih) * W
                    base = i * Wo
                    iw0 = q - padding
                    if stride == 1:
                        for j in range(Wo):
                            if 0 <= j + iw0 < W:
                                gxrow[j + iw0] += crow[base + j]
                    else:
                        for j in range(Wo):
                            if 0 <= j * stride + iw0 < W:
                                gxrow[j * stride + iw0] += crow[base + j]


def conv2d_forward(x, w, int stride, int padding):
    if x.dtype == np.float32:
        return _forward["float"](x, w, stride, padding)
    return _forward["double"](x, w, stride, padding)


def conv2d_input_grad(g, w, x_shape, int stride, int padding):
    if g.dtype == np.float32:
        return _input_grad["float"](g, w, x_shape, stride, padding)
    return _input_grad["double"](g, w, x_shape, stride, padding)


def conv2d_weight_grad(g, x, w_shape, int stride, int padding):
    if g.dtype == np.float32:
        return _weight_grad["float"](g, x, w_shape, stride, padding)
    return _weight_grad["double"](g, x, w_shape, stride, padding)


def _forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, int stride, int padding):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t K = Cin * kh * kw
    dtype = np.asarray(x).dtype
    out_arr = np.empty((B, Cout, Ho, Wo), dtype=dtype)
    col_arr = np.empty((K, Ho * Wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[:, ::1] col = col_arr
    cdef Py_ssize_t b
    with nogil:
        for b in range(B):
            _im2col(&x[b, 0, 0, 0], &col[0, 0], Cin, H, W, kh, kw, Ho, Wo,
                    stride, padding)
            # out[b] (Cout, Ho*Wo) = Wmat (Cout, K) @ col (K, Ho*Wo)
            _gemm_rm(&w[0, 0, 0, 0], &col[0, 0], &out[b, 0, 0, 0],
                     <int>Cout, <int>(Ho * Wo), <int>K, 0, 0,
                     <real>1.0, <real>0.0)
    return out_arr


def _input_grad(real[:, :, :, ::1] g, real[:, :, :, ::1] w, x_shape,
                int stride, int padding):
    cdef Py_ssize_t B = x_shape[0], Cin = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t K = Cin * kh * kw
    dtype = np.asarray(g).dtype
    gx_arr = np.zeros((B, Cin, H, W), dtype=dtype)
    col_arr = np.empty((K, Ho * Wo), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, ::1] col = col_arr
    cdef Py_ssize_t b
    with nogil:
        for b in range(B):
            # gcol (K, Ho*Wo) = Wmat.T (K, Cout) @ g[b] (Cout, Ho*Wo)
            _gemm_rm(&w[0, 0, 0, 0], &g[b, 0, 0, 0], &col[0, 0],
                     <int>K, <int>(Ho * Wo), <int>Cout, 1, 0,
                     <real>1.0, <real>0.0)
            _col2im_add(&col[0, 0], &gx[b, 0, 0, 0], Cin, H, W, kh, kw, Ho, Wo,
                        stride, padding)
    return gx_arr


def _weight_grad(real[:, :, :, ::1] g, real[:, :, :, ::1] x, w_shape,
                 int stride, int padding):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w_shape[0], kh = w_shape[2], kw = w_shape[3]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t K = Cin * kh * kw
    dtype = np.asarray(g).dtype
    gw_arr = np.zeros((Cout, K), dtype=dtype)
    col_arr = np.empty((K, Ho * Wo), dtype=dtype)
    cdef real[:, ::1] gw = gw_arr
    cdef real[:, ::1] col = col_arr
    cdef Py_ssize_t b
    with nogil:
        for b in range(B):
            _im2col(&x[b, 0, 0, 0], &col[0, 0], Cin, H, W, kh, kw, Ho, Wo,
                    stride, padding)
            # gw (Cout, K) += g[b] (Cout, Ho*Wo) @ col.T (Ho*Wo, K)
            _gemm_rm(&g[b, 0, 0, 0], &col[0, 0], &gw[0, 0],
                     <int>Cout, <int>K, <int>(Ho * Wo), 0, 1,
                     <real>1.0, <real>1.0)
    return gw_arr.reshape(tuple(w_shape))
