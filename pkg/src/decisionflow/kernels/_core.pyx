# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled MLP kernels: fused affine/activation passes over BLAS matmuls.

Implements the same contract as decisionflow.kernels.fallback with one cache
layout difference (flat buffers instead of array lists); callers treat the
cache as opaque and always pair mlp_backward with the producing backend.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND = "cython"

ACT_RELU = 0
ACT_SILU = 1

DEF _RELU = 0
DEF _SILU = 1


def param_count(sizes):
    total = 0
    for i in range(len(sizes) - 1):
        total += (sizes[i] + 1) * sizes[i + 1]
    return total


cdef void _mm_nn(int m, int n, int k, double* a, double* b, double* c) noexcept nogil:
    # row-major C(m,n) = A(m,k) @ B(k,n)
    cdef double one = 1.0, zero = 0.0
    dgemm("N", "N", &n, &m, &k, &one, b, &n, a, &k, &zero, c, &n)


cdef void _mm_tn(int m, int n, int k, double* a, double* b, double* c) noexcept nogil:
    # row-major C(m,n) = A(k,m).T @ B(k,n)
    cdef double one = 1.0, zero = 0.0
    dgemm("N", "T", &n, &m, &k, &one, b, &n, a, &m, &zero, c, &n)


cdef void _mm_nt(int m, int n, int k, double* a, double* b, double* c) noexcept nogil:
    # row-major C(m,n) = A(m,k) @ B(n,k).T
    cdef double one = 1.0, zero = 0.0
    dgemm("T", "N", &n, &m, &k, &one, b, &k, a, &k, &zero, c, &n)


cdef void _bias_act(double* z, double* h, double* bias, int rows, int cols, int act) noexcept nogil:
    cdef int i, j
    cdef double v, s
    for i in range(rows):
        for j in range(cols):
            v = z[i * cols + j] + bias[j]
            z[i * cols + j] = v
            if act == _RELU:
                h[i * cols + j] = v if v > 0.0 else 0.0
            else:
                s = 1.0 / (1.0 + exp(-v))
                h[i * cols + j] = v * s


cdef void _bias_only(double* z, double* bias, int rows, int cols) noexcept nogil:
    cdef int i, j
    for i in range(rows):
        for j in range(cols):
            z[i * cols + j] += bias[j]


cdef void _act_grad_inplace(double* g, double* z, int count, int act) noexcept nogil:
    cdef int i
    cdef double v, s
    for i in range(count):
        v = z[i]
        if act == _RELU:
            if v <= 0.0:
                g[i] = 0.0
        else:
            s = 1.0 / (1.0 + exp(-v))
            g[i] = g[i] * (s * (1.0 + v * (1.0 - s)))


cdef void _col_sums(double* g, double* out, int rows, int cols) noexcept nogil:
    cdef int i, j
    for j in range(cols):
        out[j] = 0.0
    for i in range(rows):
        for j in range(cols):
            out[j] += g[i * cols + j]


def mlp_forward(cnp.ndarray[cnp.float64_t, ndim=1] params, sizes, int act,
                cnp.ndarray[cnp.float64_t, ndim=2] x):
    cdef int n_layers = len(sizes) - 1
    cdef int rows = x.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] dims = np.asarray(sizes, dtype=np.int64)

    # per-layer flat buffers: pre-activations and activations for hidden layers
    cdef int hid_total = 0
    cdef int l
    for l in range(n_layers - 1):
        hid_total += dims[l + 1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pre = np.empty(rows * hid_total, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] hidden = np.empty(rows * hid_total, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((rows, dims[n_layers]), dtype=np.float64)

    if not x.flags.c_contiguous:
        x = np.ascontiguousarray(x)

    cdef double* p = &params[0]
    cdef double* h_prev = &x[0, 0]
    cdef double* z
    cdef double* h
    cdef long poff = 0, hoff = 0
    cdef int fi, fo
    with nogil:
        for l in range(n_layers):
            fi = <int>dims[l]
            fo = <int>dims[l + 1]
            if l < n_layers - 1:
                z = &pre[0] + hoff
                h = &hidden[0] + hoff
                _mm_nn(rows, fo, fi, h_prev, p + poff, z)
                _bias_act(z, h, p + poff + <long>fi * fo, rows, fo, act)
                h_prev = h
                hoff += <long>rows * fo
            else:
                z = &out[0, 0]
                _mm_nn(rows, fo, fi, h_prev, p + poff, z)
                _bias_only(z, p + poff + <long>fi * fo, rows, fo)
            poff += <long>(fi + 1) * fo
    return out, (pre, hidden)


def mlp_backward(cnp.ndarray[cnp.float64_t, ndim=1] params, sizes, int act,
                 cnp.ndarray[cnp.float64_t, ndim=2] x, cache,
                 cnp.ndarray[cnp.float64_t, ndim=2] upstream):
    cdef int n_layers = len(sizes) - 1
    cdef int rows = x.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] dims = np.asarray(sizes, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pre = cache[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] hidden = cache[1]

    cdef cnp.ndarray[cnp.float64_t, ndim=1] dparams = np.empty_like(params)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dx = np.empty((rows, dims[0]), dtype=np.float64)

    if not x.flags.c_contiguous:
        x = np.ascontiguousarray(x)
    if not upstream.flags.c_contiguous:
        upstream = np.ascontiguousarray(upstream)

    # two gradient workspaces (ping-pong: dgemm must not read and write the
    # same buffer), each wide enough for any layer
    cdef int wmax = 0
    cdef int l
    for l in range(n_layers + 1):
        if dims[l] > wmax:
            wmax = <int>dims[l]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gbuf_a = np.empty(rows * wmax, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gbuf_b = np.empty(rows * wmax, dtype=np.float64)

    # parameter offsets and hidden-buffer offsets per layer
    cdef cnp.ndarray[cnp.int64_t, ndim=1] poffs = np.empty(n_layers, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] hoffs = np.empty(n_layers, dtype=np.int64)
    cdef long acc = 0, hacc = 0
    for l in range(n_layers):
        poffs[l] = acc
        acc += <long>(dims[l] + 1) * dims[l + 1]
        if l < n_layers - 1:
            hoffs[l] = hacc
            hacc += <long>rows * dims[l + 1]

    cdef double* p = &params[0]
    cdef double* dp = &dparams[0]
    cdef double* g = &upstream[0, 0]
    cdef double* h_prev
    cdef double* g_next
    cdef bint use_a = True
    cdef int fi, fo
    with nogil:
        for l in range(n_layers - 1, -1, -1):
            fi = <int>dims[l]
            fo = <int>dims[l + 1]
            if l == 0:
                h_prev = &x[0, 0]
            else:
                h_prev = &hidden[0] + hoffs[l - 1]
            _mm_tn(fi, fo, rows, h_prev, g, dp + poffs[l])
            _col_sums(g, dp + poffs[l] + <long>fi * fo, rows, fo)
            if l == 0:
                g_next = &dx[0, 0]
            else:
                g_next = &gbuf_a[0] if use_a else &gbuf_b[0]
                use_a = not use_a
            _mm_nt(rows, fi, fo, g, p + poffs[l], g_next)
            if l > 0:
                _act_grad_inplace(g_next, &pre[0] + hoffs[l - 1], rows * fi, act)
            g = g_next
    return dparams, dx
