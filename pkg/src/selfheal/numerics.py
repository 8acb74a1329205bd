"""Deterministic dense linear algebra, spectral quantities, and seeded RNG.

All matrices and vectors are float64 numpy arrays.  Reductions that feed
golden files go through the fixed-order kernels (see ``kernels``); the
random stream is PCG64, which is reproducible across platforms.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

SPECTRAL_RTOL = 1e-10
SPECTRAL_MAX_ITER = 10_000
SINGULAR_RTOL = 1e-12
DEGENERATE_GAP = 1e-10

# fixed seed for power-iteration start vectors: deterministic, and almost
# surely not orthogonal to the dominant eigenvector
_POWER_SEED = 0x5EED


class SingularMatrixError(ArithmeticError):
    """Raised when a condition number is effectively infinite."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative routine exhausts its budget."""


def as_vec(x):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite entries in vector")
    return np.ascontiguousarray(v)


def as_mat(a):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite entries in matrix")
    return np.ascontiguousarray(m)


def make_rng(seed):
    """Seeded PCG64 generator: identical seed, identical stream, any platform."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def spawn_rng(seed, *stream):
    """Independent deterministic sub-stream keyed by (seed, *stream)."""
    key = (int(seed),) + tuple(int(s) for s in stream)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def matmul(a, b):
    return kernels.matmul(as_mat(a), as_mat(b))


def matvec(a, x):
    return kernels.matvec(as_mat(a), as_vec(x))


def matvec_t(a, w):
    return kernels.matvec_t(as_mat(a), as_vec(w))


def dot(x, y):
    return kernels.dot(as_vec(x), as_vec(y))


def norm2(x):
    x = as_vec(x)
    return float(np.sqrt(kernels.dot(x, x)))


def gram(a):
    """a.T @ a through the fixed-order kernel."""
    a = as_mat(a)
    return kernels.matmul(np.ascontiguousarray(a.T), a)


def _power_iteration_sym(apply_fn, dim, rtol, max_iter):
    """Largest eigenvalue of a symmetric PSD operator given by apply_fn.

    Block-2 power iteration with Rayleigh-Ritz extraction: a paired
    near-degenerate top eigenvalue then converges at the (lam3/lam1)^2
    rate instead of stalling.  Deterministic seeded start block.
    """
    rng = make_rng(_POWER_SEED)
    width = min(2, dim)
    v = orthonormalize(rng.standard_normal((dim, width)))
    lam_prev = np.inf
    hits = 0
    for _ in range(max_iter):
        w = np.stack([apply_fn(np.ascontiguousarray(v[:, j])) for j in range(width)], axis=1)
        s = kernels.matmul(np.ascontiguousarray(v.T), np.ascontiguousarray(w))
        s = 0.5 * (s + s.T)
        ritz, _ = kernels.jacobi_eigh(np.ascontiguousarray(s))
        lam = float(ritz[0])
        try:
            v = orthonormalize(w)
        except SingularMatrixError:
            # operator range collapsed below the block width
            lead = np.ascontiguousarray(w[:, 0])
            nw = norm2(lead)
            if nw == 0.0:
                return 0.0
            width = 1
            v = (lead / nw)[:, None]
        if abs(lam - lam_prev) <= rtol * max(abs(lam), np.finfo(float).tiny):
            hits += 1
            if hits >= 2:
                return float(max(lam, 0.0))
        else:
            hits = 0
        lam_prev = lam
    raise ConvergenceError(
        f"power iteration did not reach rtol={rtol} in {max_iter} iterations"
    )


def spectral_norm(a):
    """Largest singular value via power iteration on a.T a (rtol 1e-10)."""
    a = as_mat(a)
    if a.size == 0 or not np.any(a):
        return 0.0
    g = gram(a)
    lam = _power_iteration_sym(
        lambda v: kernels.matvec(g, v), g.shape[0], SPECTRAL_RTOL, SPECTRAL_MAX_ITER
    )
    return float(np.sqrt(lam))


def condition_number(a):
    """sigma_max / sigma_min for a square full-rank matrix.

    Raises SingularMatrixError when sigma_min < 1e-12 * sigma_max.
    """
    a = as_mat(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError("condition number needs a square matrix")
    sig_max = spectral_norm(a)
    if sig_max == 0.0:
        raise SingularMatrixError("zero matrix has infinite condition number")
    g = gram(a)
    try:
        chol = kernels.cholesky(g)
    except ArithmeticError as exc:
        raise SingularMatrixError(str(exc)) from exc
    # largest eigenvalue of (a.T a)^-1 via power iteration on repeated solves
    lam_inv = _power_iteration_sym(
        lambda v: kernels.cholesky_solve(chol, v),
        g.shape[0],
        SPECTRAL_RTOL,
        SPECTRAL_MAX_ITER,
    )
    if lam_inv <= 0.0:
        raise SingularMatrixError("singular Gram matrix")
    sig_min = float(1.0 / np.sqrt(lam_inv))
    if sig_min < SINGULAR_RTOL * sig_max:
        raise SingularMatrixError(
            f"sigma_min={sig_min:.3e} below {SINGULAR_RTOL} * sigma_max={sig_max:.3e}"
        )
    return sig_max / sig_min


def solve_spd(a, b):
    """Solve a x = b for symmetric positive definite a (b vector or matrix)."""
    a = as_mat(a)
    chol = kernels.cholesky(a)
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        return kernels.cholesky_solve(chol, np.ascontiguousarray(b))
    cols = [kernels.cholesky_solve(chol, np.ascontiguousarray(b[:, j])) for j in range(b.shape[1])]
    return np.stack(cols, axis=1)


@dataclass
class EigenBasis:
    """Top-k eigenpairs of a symmetric PSD matrix."""

    vectors: np.ndarray  # d x k, orthonormal columns
    values: np.ndarray  # k, descending
    degenerate: bool  # gap between k-th and (k+1)-th eigenvalue < 1e-10


def _fix_column_signs(v):
    out = v.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        lead = nz[0] if nz.size else 0
        if col[lead] < 0.0:
            out[:, j] = -col
    return out


def top_k_eigvecs(gram_matrix, k):
    """Orthonormal basis of the top-k eigenspace of a symmetric PSD matrix.

    Sign convention: the first nonzero component of each column is positive.
    A near-degenerate gap between the k-th and (k+1)-th eigenvalues is
    flagged, not fatal.
    """
    g = as_mat(gram_matrix)
    d = g.shape[0]
    if g.shape[1] != d:
        raise ValueError("top_k_eigvecs needs a square matrix")
    if np.max(np.abs(g - g.T)) > 1e-10 * max(1.0, float(np.max(np.abs(g)))):
        raise ValueError("top_k_eigvecs needs a symmetric matrix")
    if not 1 <= k <= d:
        raise ValueError(f"k={k} out of range 1..{d}")
    vals, vecs = kernels.jacobi_eigh(g)
    degenerate = bool(k < d and abs(vals[k - 1] - vals[k]) < DEGENERATE_GAP)
    return EigenBasis(
        vectors=_fix_column_signs(vecs[:, :k]),
        values=vals[:k].copy(),
        degenerate=degenerate,
    )


def eigh_all(sym):
    """All eigenpairs (descending) of a symmetric matrix via Jacobi."""
    return kernels.jacobi_eigh(as_mat(sym))


def orthonormalize(cols):
    """Orthonormal basis for the column span (modified Gram-Schmidt, twice).

    Raises on rank deficiency; deterministic given the input.
    """
    q = as_mat(cols).copy()
    d, r = q.shape
    for _ in range(2):  # second pass scrubs rounding loss
        for j in range(r):
            for i in range(j):
                q[:, j] = q[:, j] - kernels.dot(q[:, i].copy(), q[:, j].copy()) * q[:, i]
            nj = norm2(q[:, j])
            if nj < 1e-12:
                raise SingularMatrixError(f"rank-deficient column {j} in orthonormalize")
            q[:, j] = q[:, j] / nj
    return q


def random_orthogonal(d, rng):
    """Haar-ish orthogonal d x d matrix: Gram-Schmidt of a Gaussian draw."""
    return orthonormalize(rng.standard_normal((d, d)))


def finite_diff_grad(f, x, h):
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = as_vec(x)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g
