# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the dense-network hot path.

Same interface as sidlab._kernels_np. Matmuls go straight to BLAS dgemm;
bias add, SiLU, and the SiLU derivative are fused single-pass C loops;
the only numpy ufunc kept is exp (its SIMD implementation beats a scalar
libm loop). Row-major arrays are fed to the column-major BLAS through
the usual transpose identity.
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

NAME = "compiled"


cdef void _gemm_nn(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c (m,n) = a (m,k) @ b (k,n), all row-major
    cdef int m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm("N", "N", &n, &m, &k, &one, &b[0, 0], &n, &a[0, 0], &k, &zero, &c[0, 0], &n)


cdef void _gemm_nt(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c (m,n) = a (m,k) @ b+ (k,n) where b is stored (n,k) row-major
    cdef int m = a.shape[0], k = a.shape[1], n = b.shape[0]
    cdef double one = 1.0, zero = 0.0
    dgemm("T", "N", &n, &m, &k, &one, &b[0, 0], &k, &a[0, 0], &k, &zero, &c[0, 0], &n)


cdef void _gemm_tn(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c (m,n) = a+ (m,k) @ b (k,n) where a is stored (k,m) row-major
    cdef int k = a.shape[0], m = a.shape[1], n = b.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm("N", "T", &n, &m, &k, &one, &b[0, 0], &n, &a[0, 0], &m, &zero, &c[0, 0], &n)


cdef void _bias_silu(double[:, ::1] z, double[::1] b, double[:, ::1] s,
                     double[:, ::1] a) noexcept nogil:
    # z += b (broadcast over rows); s holds exp(-(z+b)) on entry and
    # sigmoid on exit; a = silu(z)
    cdef Py_ssize_t i, j, rows = z.shape[0], cols = z.shape[1]
    cdef double zb
    for i in range(rows):
        for j in range(cols):
            zb = z[i, j] + b[j]
            z[i, j] = zb
            s[i, j] = 1.0 / (1.0 + s[i, j])
            a[i, j] = zb * s[i, j]


cdef void _bias_only(double[:, ::1] z, double[::1] b) noexcept nogil:
    cdef Py_ssize_t i, j, rows = z.shape[0], cols = z.shape[1]
    for i in range(rows):
        for j in range(cols):
            z[i, j] += b[j]


cdef void _silu_grad(double[:, ::1] g_h, double[:, ::1] z, double[:, ::1] s,
                     double[:, ::1] g_z) noexcept nogil:
    # g_z = g_h * (s + z*s*(1-s))
    cdef Py_ssize_t i, j, rows = z.shape[0], cols = z.shape[1]
    cdef double sv
    for i in range(rows):
        for j in range(cols):
            sv = s[i, j]
            g_z[i, j] = g_h[i, j] * (sv + z[i, j] * sv * (1.0 - sv))


cdef void _colsum(double[:, ::1] g, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, j, rows = g.shape[0], cols = g.shape[1]
    for j in range(cols):
        out[j] = 0.0
    for i in range(rows):
        for j in range(cols):
            out[j] += g[i, j]


def _timing_probe(x, w, b, n):
    """Internal: isolates gemm vs fused-loop cost for the benchmark."""
    import time
    z = np.empty((x.shape[0], w.shape[1]))
    s = np.empty_like(z)
    a = np.empty_like(z)
    t0 = time.perf_counter()
    for _ in range(n):
        _gemm_nn(x, w, z)
    t1 = time.perf_counter()
    for _ in range(n):
        np.add(z, b, out=s)
        np.negative(s, out=s)
        np.exp(s, out=s)
    t2 = time.perf_counter()
    for _ in range(n):
        _bias_silu(z, b, s, a)
    t3 = time.perf_counter()
    return {"gemm": (t1 - t0) / n, "exp": (t2 - t1) / n, "fused": (t3 - t2) / n}


def mlp_forward(xcat, weights, biases):
    """See sidlab._kernels_np.mlp_forward; cache layout matches."""
    cdef cnp.ndarray h = np.ascontiguousarray(xcat, dtype=np.float64)
    cdef cnp.ndarray z, s, a, out
    cdef Py_ssize_t i, n_layers = len(weights)
    hidden = []
    for i in range(n_layers - 1):
        w = weights[i]
        z = np.empty((h.shape[0], w.shape[1]))
        _gemm_nn(h, w, z)
        # stash exp(-(z+b)) in s, then finish sigmoid+silu in one pass.
        # exp stays a numpy call for its vectorized implementation.
        s = np.empty_like(z)
        np.add(z, biases[i], out=s)
        np.negative(s, out=s)
        np.exp(s, out=s)
        a = np.empty_like(z)
        _bias_silu(z, biases[i], s, a)
        hidden.append((z, s, a))
        h = a
    w = weights[n_layers - 1]
    out = np.empty((h.shape[0], w.shape[1]))
    _gemm_nn(h, w, out)
    _bias_only(out, biases[n_layers - 1])
    return out, (np.ascontiguousarray(xcat, dtype=np.float64), hidden)


def mlp_backward(weights, cache, g_out, need_wgrads=True):
    """See sidlab._kernels_np.mlp_backward."""
    xcat, hidden = cache
    cdef cnp.ndarray g = np.ascontiguousarray(g_out, dtype=np.float64)
    cdef cnp.ndarray g_h, g_z, gw
    cdef Py_ssize_t i, n_layers = len(weights)
    g_ws = [None] * n_layers
    g_bs = [None] * n_layers

    a_prev = hidden[n_layers - 2][2] if n_layers > 1 else xcat
    if need_wgrads:
        gw = np.empty((a_prev.shape[1], g.shape[1]))
        _gemm_tn(a_prev, g, gw)
        gb = np.empty(g.shape[1])
        _colsum(g, gb)
        g_ws[n_layers - 1] = gw
        g_bs[n_layers - 1] = gb
    g_h = np.empty((g.shape[0], weights[n_layers - 1].shape[0]))
    _gemm_nt(g, weights[n_layers - 1], g_h)

    inputs = [xcat] + [rec[2] for rec in hidden[:-1]]
    for i in range(n_layers - 2, -1, -1):
        z, s, _ = hidden[i]
        g_z = np.empty_like(g_h)
        _silu_grad(g_h, z, s, g_z)
        if need_wgrads:
            gw = np.empty((inputs[i].shape[1], g_z.shape[1]))
            _gemm_tn(inputs[i], g_z, gw)
            gb = np.empty(g_z.shape[1])
            _colsum(g_z, gb)
            g_ws[i] = gw
            g_bs[i] = gb
        g_h = np.empty((g_z.shape[0], weights[i].shape[0]))
        _gemm_nt(g_z, weights[i], g_h)

    if need_wgrads:
        return g_h, g_ws, g_bs
    return g_h, None, None
