# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dense kernels with a fixed, documented operation order.

Every accumulation runs left-to-right in ascending index order so results
are reproducible bit-for-bit, independent of BLAS builds or SIMD width.
The pure-Python module ``_kernels_py`` mirrors the exact same operation
sequence; the two backends must agree bit-for-bit.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()

BACKEND = "cython"


def matmul(double[:, ::1] a, double[:, ::1] b):
    """Row-major product: out[i,j] = sum_k a[i,k]*b[k,j], k ascending."""
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    if b.shape[0] != k:
        raise ValueError(f"matmul shape mismatch: {a.shape[0]}x{k} @ {b.shape[0]}x{m}")
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, kk
    cdef double aik
    for i in range(n):
        for kk in range(k):
            aik = a[i, kk]
            for j in range(m):
                out[i, j] += aik * b[kk, j]
    return out_arr


def matvec(double[:, ::1] a, double[::1] x):
    """out[i] = sum_k a[i,k]*x[k], k ascending."""
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1]
    if x.shape[0] != k:
        raise ValueError(f"matvec shape mismatch: {n}x{k} @ {x.shape[0]}")
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, kk
    cdef double acc
    for i in range(n):
        acc = 0.0
        for kk in range(k):
            acc += a[i, kk] * x[kk]
        out[i] = acc
    return out_arr


def matvec_t(double[:, ::1] a, double[::1] w):
    """out[j] = sum_i a[i,j]*w[i], i ascending (i.e. a.T @ w)."""
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1]
    if w.shape[0] != n:
        raise ValueError(f"matvec_t shape mismatch: {n}x{k}.T @ {w.shape[0]}")
    out_arr = np.zeros(k, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double wi
    for i in range(n):
        wi = w[i]
        for j in range(k):
            out[j] += a[i, j] * wi
    return out_arr


def dot(double[::1] x, double[::1] y):
    """sum_i x[i]*y[i], i ascending."""
    cdef Py_ssize_t n = x.shape[0]
    if y.shape[0] != n:
        raise ValueError("dot length mismatch")
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        acc += x[i] * y[i]
    return acc


def jacobi_eigh(double[:, ::1] a, double tol=1e-14, int max_sweeps=100):
    """Cyclic-by-rows Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) with eigenvalues in descending
    order (stable tie order) and eigenvectors as matching columns.
    """
    cdef Py_ssize_t n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError("jacobi_eigh needs a square matrix")
    A_arr = np.array(a, dtype=np.float64, copy=True)
    V_arr = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] A = A_arr
    cdef double[:, ::1] V = V_arr
    cdef Py_ssize_t p, q, j, sweep
    cdef double off, scale, apq, tau, t, c, s, tp, tq

    scale = 0.0
    for p in range(n):
        for q in range(n):
            scale += A[p, q] * A[p, q]
    scale = sqrt(scale)
    if scale == 0.0:
        return np.zeros(n), V_arr

    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += A[p, q] * A[p, q]
        off = sqrt(off)
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if fabs(apq) <= 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + sqrt(1.0 + tau * tau))
                c = 1.0 / sqrt(1.0 + t * t)
                s = t * c
                # rows p, q of A
                for j in range(n):
                    tp = c * A[p, j] - s * A[q, j]
                    tq = s * A[p, j] + c * A[q, j]
                    A[p, j] = tp
                    A[q, j] = tq
                # columns p, q of A
                for j in range(n):
                    tp = c * A[j, p] - s * A[j, q]
                    tq = s * A[j, p] + c * A[j, q]
                    A[j, p] = tp
                    A[j, q] = tq
                # accumulate rotation into V (columns p, q)
                for j in range(n):
                    tp = c * V[j, p] - s * V[j, q]
                    tq = s * V[j, p] + c * V[j, q]
                    V[j, p] = tp
                    V[j, q] = tq

    vals = np.array([A[p, p] for p in range(n)], dtype=np.float64)
    order = np.argsort(-vals, kind="stable")
    return vals[order], V_arr[:, order]


def cholesky(double[:, ::1] a):
    """Lower-triangular Cholesky factor; raises on a non-PD matrix."""
    cdef Py_ssize_t n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError("cholesky needs a square matrix")
    L_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] L = L_arr
    cdef Py_ssize_t i, j, k
    cdef double acc
    for j in range(n):
        acc = a[j, j]
        for k in range(j):
            acc -= L[j, k] * L[j, k]
        if acc <= 0.0:
            raise ArithmeticError(f"matrix not positive definite at pivot {j}")
        L[j, j] = sqrt(acc)
        for i in range(j + 1, n):
            acc = a[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
    return L_arr


def cholesky_solve(double[:, ::1] L, double[::1] b):
    """Solve (L L^T) x = b by forward then backward substitution."""
    cdef Py_ssize_t n = L.shape[0]
    if b.shape[0] != n:
        raise ValueError("cholesky_solve length mismatch")
    y_arr = np.zeros(n, dtype=np.float64)
    x_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] y = y_arr
    cdef double[::1] x = x_arr
    cdef Py_ssize_t i, k
    cdef double acc
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= L[i, k] * y[k]
        y[i] = acc / L[i, i]
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * x[k]
        x[i] = acc / L[i, i]
    return x_arr
