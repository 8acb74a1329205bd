"""Embedding manifolds: PCA subspaces, shallow autoencoders, and quadratic
submersion fixtures, with their residuals, projections, and tangent-space
projectors.

The tangent projector uses the scaled form P = I - J^T (J J^T)^-1 J with
J the residual differential, so unnormalized submersions stay valid; for
linear subspaces it reduces to V V^T exactly.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dynamics import (
    DynamicalNet,
    Layer,
    jacobian,
    layer_value,
    layer_value_batch,
    net_from_json,
    net_to_json,
    vjp,
)
from .numerics import (
    ConvergenceError,
    as_mat,
    as_vec,
    eigh_all,
    gram,
    norm2,
    solve_spd,
    top_k_eigvecs,
)

ORTHONORMAL_TOL = 1e-10
RANK_TOL = 1e-10
NEWTON_GRAD_TOL = 1e-10
NEWTON_MAX_ITER = 200


@dataclass
class LinearSubspaceEmbedding:
    """Affine subspace mean + span(V); projection is mu + V V^T (x - mu)."""

    mean: np.ndarray
    basis: np.ndarray  # d x r, orthonormal columns
    degenerate: bool = False  # set by fit_pca on a near-degenerate spectrum
    spectrum: np.ndarray | None = None  # full covariance eigenvalues when fitted

    def __post_init__(self):
        self.mean = as_vec(self.mean)
        self.basis = as_mat(self.basis)
        if self.basis.shape[0] != self.mean.shape[0]:
            raise ValueError("basis rows must match mean dimension")
        r = self.basis.shape[1]
        btb = gram(self.basis)
        if np.max(np.abs(btb - np.eye(r))) > ORTHONORMAL_TOL:
            raise ValueError("basis columns are not orthonormal")

    @property
    def dim(self):
        return self.basis.shape[0]

    @property
    def rank(self):
        return self.basis.shape[1]


@dataclass
class AutoencoderEmbedding:
    """decoder(encoder(x)) realisation of the manifold projection."""

    encoder: DynamicalNet
    decoder: DynamicalNet
    train_error: float = float("nan")  # mean squared reconstruction error at fit time

    def __post_init__(self):
        if self.decoder.in_dim != self.encoder.n_classes:
            raise ValueError("decoder input must match encoder code dimension")
        if self.decoder.n_classes != self.encoder.in_dim:
            raise ValueError("decoder output must match encoder input dimension")

    @property
    def dim(self):
        return self.encoder.in_dim

    @property
    def rank(self):
        return self.encoder.n_classes


@dataclass
class QuadraticSubmersion:
    """Codim-1 analytic test manifold f(x) = n.(x-p) - a * ||(I-nn^T)(x-p)||^2.

    With p = 0 and n = e_d this is x_d - a * sum_{i<d} x_i^2.  The Hessian
    is the constant -2a * (I - nn^T), so sup ||f''||_* = 2|a| exactly.
    """

    curvature: float
    center: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        self.center = as_vec(self.center)
        self.normal = as_vec(self.normal)
        if self.normal.shape != self.center.shape:
            raise ValueError("normal and center dimensions differ")
        nn = norm2(self.normal)
        if abs(nn - 1.0) > 1e-9:
            raise ValueError("normal must be a unit vector")

    @classmethod
    def canonical(cls, curvature, dim):
        normal = np.zeros(dim)
        normal[-1] = 1.0
        return cls(curvature=float(curvature), center=np.zeros(dim), normal=normal)

    @property
    def dim(self):
        return self.center.shape[0]

    @property
    def rank(self):
        return self.dim - 1

    @property
    def hessian_bound(self):
        return 2.0 * abs(self.curvature)

    def value(self, x):
        y = as_vec(x) - self.center
        axial = kernels.dot(self.normal, y)
        lat = y - axial * self.normal
        return axial - self.curvature * kernels.dot(lat, lat)

    def grad(self, x):
        y = as_vec(x) - self.center
        axial = kernels.dot(self.normal, y)
        lat = y - axial * self.normal
        return self.normal - 2.0 * self.curvature * lat


@dataclass
class Projectors:
    """Orthogonal projectors onto a tangent space and its complement."""

    tangent: np.ndarray  # P
    normal: np.ndarray  # Q = I - P

    def __post_init__(self):
        p, q = self.tangent, self.normal
        eye = np.eye(p.shape[0])
        checks = (
            np.max(np.abs(p + q - eye)),
            np.max(np.abs(kernels.matmul(p, p) - p)),
            np.max(np.abs(p - p.T)),
            np.max(np.abs(q - q.T)),
        )
        if max(checks) > ORTHONORMAL_TOL:
            raise ValueError("projector identities violated beyond 1e-10")


def complete_orthonormal(u):
    """Deterministic orthonormal basis of the complement of a unit vector."""
    u = as_vec(u)
    d = u.shape[0]
    cols = [u / norm2(u)]
    for i in range(d):
        if len(cols) == d:
            break
        v = np.zeros(d)
        v[i] = 1.0
        for _ in range(2):
            for b in cols:
                v = v - kernels.dot(b, v) * b
        nv = norm2(v)
        if nv > 1e-8:
            cols.append(v / nv)
    if len(cols) != d:
        raise ValueError("basis completion failed")
    return np.stack(cols[1:], axis=1)


def _net_apply(net, x):
    """Forward through layers and head, caching each block's input."""
    inputs = []
    for layer in net.layers:
        inputs.append(x)
        x = layer_value(layer, x)
    inputs.append(x)
    return layer_value(net.head, x), inputs


def _net_pullback(net, inputs, w):
    w = vjp(net.head, inputs[-1], w)
    for t in range(net.depth - 1, -1, -1):
        w = vjp(net.layers[t], inputs[t], w)
    return w


def _net_jacobian(net, x):
    jac = None
    for layer in net.layers + [net.head]:
        step = jacobian(layer, x)
        x = layer_value(layer, x)
        jac = step if jac is None else kernels.matmul(step, jac)
    return jac


def _ae_value(e, x):
    code, _ = _net_apply(e.encoder, x)
    out, _ = _net_apply(e.decoder, code)
    return out


def _ae_vjp(e, x, w):
    """(E'(x))^T w for the decoder-encoder composition."""
    code, enc_inputs = _net_apply(e.encoder, x)
    _, dec_inputs = _net_apply(e.decoder, code)
    w = _net_pullback(e.decoder, dec_inputs, w)
    return _net_pullback(e.encoder, enc_inputs, w)


def project_linear(e, x):
    """mu + V V^T (x - mu); idempotent by construction."""
    y = as_vec(x) - e.mean
    return e.mean + kernels.matvec(e.basis, kernels.matvec_t(e.basis, y))


def submersion_residual(e, x):
    """Residual whose norm is the distance proxy ||E(x) - x||.

    linear: (I - VV^T)(x - mu); autoencoder: decoder(encoder(x)) - x;
    quadratic: the analytic scalar f(x) as a length-1 vector.
    """
    if isinstance(e, LinearSubspaceEmbedding):
        y = as_vec(x) - e.mean
        return y - kernels.matvec(e.basis, kernels.matvec_t(e.basis, y))
    if isinstance(e, AutoencoderEmbedding):
        x = as_vec(x)
        return _ae_value(e, x) - x
    if isinstance(e, QuadraticSubmersion):
        return np.array([e.value(x)])
    raise TypeError(f"unknown embedding type {type(e).__name__}")


def residual_vjp(e, x, w):
    """f'(x)^T w for the residual map of each embedding kind."""
    if isinstance(e, LinearSubspaceEmbedding):
        w = as_vec(w)
        return w - kernels.matvec(e.basis, kernels.matvec_t(e.basis, w))
    if isinstance(e, AutoencoderEmbedding):
        w = as_vec(w)
        return _ae_vjp(e, as_vec(x), w) - w
    if isinstance(e, QuadraticSubmersion):
        return e.grad(x) * float(w[0])
    raise TypeError(f"unknown embedding type {type(e).__name__}")


def residual_jacobian(e, x):
    """Dense f'(x): (d-r) x d for linear, 1 x d quadratic, d x d autoencoder."""
    if isinstance(e, LinearSubspaceEmbedding):
        # constant differential: rows span the orthogonal complement
        return np.ascontiguousarray(complete_subspace(e).T)
    if isinstance(e, QuadraticSubmersion):
        return e.grad(x)[None, :].copy()
    if isinstance(e, AutoencoderEmbedding):
        x = as_vec(x)
        code, _ = _net_apply(e.encoder, x)
        j_enc = _net_jacobian(e.encoder, x)
        j_dec = _net_jacobian(e.decoder, code)
        return kernels.matmul(j_dec, j_enc) - np.eye(e.dim)
    raise TypeError(f"unknown embedding type {type(e).__name__}")


def complete_subspace(e):
    """Orthonormal basis of the orthogonal complement of a linear embedding."""
    d, r = e.dim, e.rank
    cols = [e.basis[:, j].copy() for j in range(r)]
    for i in range(d):
        if len(cols) == d:
            break
        v = np.zeros(d)
        v[i] = 1.0
        for _ in range(2):
            for b in cols:
                v = v - kernels.dot(b, v) * b
        nv = norm2(v)
        if nv > 1e-8:
            cols.append(v / nv)
    if len(cols) != d:
        raise ValueError("complement completion failed")
    return np.stack(cols[r:], axis=1)


def tangent_basis(e, x):
    """Orthonormal basis of the tangent space at x."""
    if isinstance(e, LinearSubspaceEmbedding):
        return e.basis.copy()
    if isinstance(e, QuadraticSubmersion):
        g = e.grad(x)
        return complete_orthonormal(g / norm2(g))
    raise TypeError("tangent basis available for linear and quadratic embeddings")


def tangent_projectors(e, x):
    """P = I - f'^T (f' f'^T)^-1 f' and Q = I - P at a manifold point.

    Requires f'(x) to have full row rank (smallest eigenvalue of f' f'^T
    above 1e-10); a rank-deficient differential is an error that names the
    offending point.
    """
    if isinstance(e, LinearSubspaceEmbedding):
        p = kernels.matmul(e.basis, np.ascontiguousarray(e.basis.T))
        return Projectors(tangent=p, normal=np.eye(e.dim) - p)
    jac = residual_jacobian(e, x)
    m = kernels.matmul(jac, np.ascontiguousarray(jac.T))
    eigvals, _ = eigh_all(m)
    if eigvals[-1] <= RANK_TOL:
        raise ValueError(
            f"rank-deficient residual differential at x={np.array2string(as_vec(x), precision=4)}"
            f" (smallest f'f'^T eigenvalue {eigvals[-1]:.3e})"
        )
    sol = solve_spd(m, jac)  # (d-r) x d solve of (f'f'^T) X = f'
    q = kernels.matmul(np.ascontiguousarray(jac.T), sol)
    q = 0.5 * (q + q.T)  # scrub rounding asymmetry
    return Projectors(tangent=np.eye(q.shape[0]) - q, normal=q)


def _quad_lateral_basis(e):
    return complete_orthonormal(e.normal)


def quad_nearest_point(e, x):
    """Nearest point on a quadratic manifold by damped Newton.

    Parameterises z(w) = p + B w + (a ||w||^2) n over tangent coordinates w
    and minimises ||z(w) - x||^2 / 2 to gradient norm 1e-10.
    """
    x = as_vec(x)
    a = e.curvature
    b = _quad_lateral_basis(e)
    w = kernels.matvec_t(b, x - e.center)

    def point(w):
        return e.center + kernels.matvec(b, w) + (a * kernels.dot(w, w)) * e.normal

    def value_grad_hess(w):
        z = point(w)
        r = z - x
        axial = kernels.dot(e.normal, r)
        g = kernels.matvec_t(b, r) + (2.0 * a * axial) * w
        h = np.eye(w.shape[0]) * (1.0 + 2.0 * a * axial) + (4.0 * a * a) * np.outer(w, w)
        return 0.5 * kernels.dot(r, r), g, h

    val, g, h = value_grad_hess(w)
    for _ in range(NEWTON_MAX_ITER):
        if norm2(g) <= NEWTON_GRAD_TOL:
            return point(w)
        damping = 0.0
        while True:
            try:
                step = solve_spd(h + damping * np.eye(h.shape[0]), -g)
                break
            except ArithmeticError:
                damping = max(2.0 * damping, 1e-8)
        # backtrack on the objective; near the floor the decrease rounds to
        # zero, so a shrinking gradient norm also counts as progress
        gnorm = norm2(g)
        scale = 1.0
        for _ in range(60):
            w_new = w + scale * step
            val_new, g_new, h_new = value_grad_hess(w_new)
            if val_new <= val or norm2(g_new) <= gnorm:
                break
            scale *= 0.5
        w, val, g, h = w_new, val_new, g_new, h_new
    if norm2(g) <= NEWTON_GRAD_TOL:
        return point(w)
    raise ConvergenceError("quadratic nearest-point Newton did not converge in 200 steps")


def manifold_project(e, x):
    """The manifold projection E(x).

    Closed form for linear subspaces, decoder(encoder(x)) for autoencoders,
    damped Newton on the nearest-point system for quadratic fixtures.
    """
    if isinstance(e, LinearSubspaceEmbedding):
        return project_linear(e, x)
    if isinstance(e, AutoencoderEmbedding):
        return _ae_value(e, as_vec(x))
    if isinstance(e, QuadraticSubmersion):
        return quad_nearest_point(e, x)
    raise TypeError(f"unknown embedding type {type(e).__name__}")


def embed_batch(e, xs):
    """E applied to rows of xs."""
    xs = as_mat(xs)
    if isinstance(e, LinearSubspaceEmbedding):
        y = xs - e.mean
        vt = np.ascontiguousarray(e.basis.T)
        return e.mean + kernels.matmul(kernels.matmul(y, e.basis), vt)
    if isinstance(e, AutoencoderEmbedding):
        code = xs
        for layer in e.encoder.layers + [e.encoder.head]:
            code = layer_value_batch(layer, code)
        out = code
        for layer in e.decoder.layers + [e.decoder.head]:
            out = layer_value_batch(layer, out)
        return out
    return np.stack([manifold_project(e, xs[i]) for i in range(xs.shape[0])], axis=0)


# ---------------------------------------------------------------------------
# fitting


def fit_pca(data, r):
    """PCA embedding: sample mean + top-r eigenvectors of the covariance.

    A near-degenerate gap at the cut is flagged on the result, not fatal.
    """
    x = as_mat(data)
    n, d = x.shape
    if r >= d:
        raise ValueError("need r < ambient dimension")
    if n < r + 1:
        raise ValueError("need at least r+1 samples")
    mean = x.mean(axis=0)
    xc = np.ascontiguousarray(x - mean)
    cov = gram(xc) / float(n)
    basis = top_k_eigvecs(cov, r)
    all_vals, _ = eigh_all(cov)
    return LinearSubspaceEmbedding(
        mean=mean, basis=basis.vectors, degenerate=basis.degenerate, spectrum=all_vals
    )


def build_autoencoder(dim, r, hidden=(16,), activation="tanh", seed=0):
    """Untrained encoder/decoder pair with seeded Gaussian init."""
    from .numerics import make_rng

    rng = make_rng(seed)

    def make_net(widths):
        layers = []
        for din, dout in zip(widths[:-2], widths[1:-1]):
            w = rng.standard_normal((dout, din)) * np.sqrt(1.0 / din)
            layers.append(Layer(weight=w, bias=np.zeros(dout), activation=activation))
        din, dout = widths[-2], widths[-1]
        w = rng.standard_normal((dout, din)) * np.sqrt(1.0 / din)
        head = Layer(weight=w, bias=np.zeros(dout), activation="identity")
        return DynamicalNet(layers=layers, head=head)

    enc = make_net((dim,) + tuple(hidden) + (r,))
    dec = make_net((r,) + tuple(hidden) + (dim,))
    return AutoencoderEmbedding(encoder=enc, decoder=dec)


def fit_autoencoder(data, r, cfg, hidden=(16,), activation="tanh", denoise_sigma=0.0):
    """Minibatch momentum SGD on mean squared reconstruction error.

    Deterministic given cfg.seed; raises on a non-finite loss.  The final
    full-data reconstruction error is recorded on the returned embedding.
    With denoise_sigma > 0 the inputs are Gaussian-jittered while the
    targets stay clean, which shapes the off-manifold field toward a
    projection (the default 0 is plain reconstruction).
    """
    from .dynamics import act_deriv, act_value
    from .numerics import make_rng

    x = as_mat(data)
    n, d = x.shape
    if n < 1:
        raise ValueError("need at least one sample")
    ae = build_autoencoder(d, r, hidden=hidden, activation=activation, seed=cfg.seed)
    blocks = ae.encoder.layers + [ae.encoder.head] + ae.decoder.layers + [ae.decoder.head]
    vel = [(np.zeros_like(b.weight), np.zeros_like(b.bias)) for b in blocks]
    rng = make_rng(cfg.seed + 1)

    def forward_cached(xs):
        cache = []
        cur = xs
        for blk in blocks:
            wt = np.ascontiguousarray(blk.weight.T)
            z = kernels.matmul(cur, wt) + blk.bias
            y = act_value(blk.activation, z)
            if blk.residual_skip:
                y = y + cur
            cache.append((cur, z))
            cur = y
        return cur, cache

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            target = np.ascontiguousarray(x[idx])
            if denoise_sigma > 0.0:
                xb = target + denoise_sigma * rng.standard_normal(target.shape)
            else:
                xb = target
            out, cache = forward_cached(xb)
            diff = out - target
            loss = float(np.mean(np.sum(diff * diff, axis=1)))
            if not np.isfinite(loss):
                raise FloatingPointError("autoencoder training diverged")
            grad_out = (2.0 / xb.shape[0]) * diff
            for k in range(len(blocks) - 1, -1, -1):
                blk = blocks[k]
                x_in, z = cache[k]
                dz = grad_out * act_deriv(blk.activation, z)
                dw = kernels.matmul(np.ascontiguousarray(dz.T), x_in)
                db = dz.sum(axis=0)
                grad_in = kernels.matmul(np.ascontiguousarray(dz), blk.weight)
                if blk.residual_skip:
                    grad_in = grad_in + grad_out
                vw, vb = vel[k]
                vw *= cfg.momentum
                vw -= cfg.lr * dw
                vb *= cfg.momentum
                vb -= cfg.lr * db
                blk.weight += vw
                blk.bias += vb
                grad_out = grad_in

    out, _ = forward_cached(x)
    diff = out - x
    ae.train_error = float(np.mean(np.sum(diff * diff, axis=1)))
    return ae


# ---------------------------------------------------------------------------
# serialization

EMBEDDING_FORMAT_VERSION = "selfheal-embedding/1"


def _num(v):
    return format(float(v), ".17g")


def embedding_to_json(e):
    if isinstance(e, LinearSubspaceEmbedding):
        return {
            "kind": "linear",
            "mean": [_num(v) for v in e.mean],
            "basis": [[_num(v) for v in row] for row in e.basis],
            "degenerate": bool(e.degenerate),
        }
    if isinstance(e, AutoencoderEmbedding):
        return {
            "kind": "autoencoder",
            "encoder": net_to_json(e.encoder),
            "decoder": net_to_json(e.decoder),
            "train_error": _num(e.train_error),
        }
    if isinstance(e, QuadraticSubmersion):
        return {
            "kind": "quadratic",
            "curvature": _num(e.curvature),
            "center": [_num(v) for v in e.center],
            "normal": [_num(v) for v in e.normal],
        }
    raise TypeError(f"unknown embedding type {type(e).__name__}")


def embedding_from_json(obj):
    kind = obj.get("kind")
    if kind == "linear":
        return LinearSubspaceEmbedding(
            mean=np.array([float(v) for v in obj["mean"]]),
            basis=np.array([[float(v) for v in row] for row in obj["basis"]]),
            degenerate=bool(obj.get("degenerate", False)),
        )
    if kind == "autoencoder":
        return AutoencoderEmbedding(
            encoder=net_from_json(obj["encoder"]),
            decoder=net_from_json(obj["decoder"]),
            train_error=float(obj.get("train_error", "nan")),
        )
    if kind == "quadratic":
        return QuadraticSubmersion(
            curvature=float(obj["curvature"]),
            center=np.array([float(v) for v in obj["center"]]),
            normal=np.array([float(v) for v in obj["normal"]]),
        )
    raise ValueError(f"unknown embedding kind {kind!r}")


def save_embeddings(embeddings, path):
    doc = {
        "version": EMBEDDING_FORMAT_VERSION,
        "embeddings": [embedding_to_json(e) for e in embeddings],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_embeddings(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != EMBEDDING_FORMAT_VERSION:
        raise ValueError(f"unsupported embedding version {doc.get('version')!r}")
    return [embedding_from_json(o) for o in doc["embeddings"]]
