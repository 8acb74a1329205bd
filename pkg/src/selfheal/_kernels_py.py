"""Pure-Python fallback for the compiled kernels.

Mirrors the operation order of ``_kernels.pyx`` exactly: accumulations run
left-to-right in ascending index order, and the Jacobi/Cholesky routines
replay the same rotation and pivot sequence.  Vectorised numpy statements
are used only where they perform the identical per-element IEEE operations
(no reductions), so both backends agree bit-for-bit.  Slower than the
extension, but has no build requirements.
"""

import math

import numpy as np

BACKEND = "python"


def _check_2d(a, name):
    if a.ndim != 2 or a.dtype != np.float64:
        raise ValueError(f"{name} expects a float64 matrix")


def matmul(a, b):
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    n, k = a.shape
    kb, m = b.shape
    if kb != k:
        raise ValueError(f"matmul shape mismatch: {n}x{k} @ {kb}x{m}")
    out = np.zeros((n, m))
    for kk in range(k):
        # out[i,j] += a[i,kk]*b[kk,j]: same multiply-add as the scalar loop
        out += a[:, kk : kk + 1] * b[kk : kk + 1, :]
    return out


def matvec(a, x):
    _check_2d(a, "matvec")
    n, k = a.shape
    if x.shape[0] != k:
        raise ValueError(f"matvec shape mismatch: {n}x{k} @ {x.shape[0]}")
    out = np.zeros(n)
    for kk in range(k):
        out += a[:, kk] * x[kk]
    return out


def matvec_t(a, w):
    _check_2d(a, "matvec_t")
    n, k = a.shape
    if w.shape[0] != n:
        raise ValueError(f"matvec_t shape mismatch: {n}x{k}.T @ {w.shape[0]}")
    out = np.zeros(k)
    for i in range(n):
        out += a[i, :] * w[i]
    return out


def dot(x, y):
    if x.shape[0] != y.shape[0]:
        raise ValueError("dot length mismatch")
    acc = 0.0
    for i in range(x.shape[0]):
        acc += x[i] * y[i]
    return acc


def jacobi_eigh(a, tol=1e-14, max_sweeps=100):
    _check_2d(a, "jacobi_eigh")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError("jacobi_eigh needs a square matrix")
    A = a.copy()
    V = np.eye(n)

    scale = 0.0
    for p in range(n):
        for q in range(n):
            scale += A[p, q] * A[p, q]
    scale = math.sqrt(scale)
    if scale == 0.0:
        return np.zeros(n), V

    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += A[p, q] * A[p, q]
        off = math.sqrt(off)
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                rp = c * A[p, :] - s * A[q, :]
                rq = s * A[p, :] + c * A[q, :]
                A[p, :] = rp
                A[q, :] = rq
                cp = c * A[:, p] - s * A[:, q]
                cq = s * A[:, p] + c * A[:, q]
                A[:, p] = cp
                A[:, q] = cq
                vp = c * V[:, p] - s * V[:, q]
                vq = s * V[:, p] + c * V[:, q]
                V[:, p] = vp
                V[:, q] = vq

    vals = np.array([A[p, p] for p in range(n)])
    order = np.argsort(-vals, kind="stable")
    return vals[order], V[:, order]


def cholesky(a):
    _check_2d(a, "cholesky")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError("cholesky needs a square matrix")
    L = np.zeros((n, n))
    for j in range(n):
        acc = a[j, j]
        for k in range(j):
            acc -= L[j, k] * L[j, k]
        if acc <= 0.0:
            raise ArithmeticError(f"matrix not positive definite at pivot {j}")
        L[j, j] = math.sqrt(acc)
        for i in range(j + 1, n):
            acc = a[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
    return L


def cholesky_solve(L, b):
    n = L.shape[0]
    if b.shape[0] != n:
        raise ValueError("cholesky_solve length mismatch")
    y = np.zeros(n)
    x = np.zeros(n)
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
    return x
