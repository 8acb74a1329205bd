"""Empirical verification of the trajectory error bounds.

Linear path: the closed-loop error recursion err_{t+1} = theta_t (I - K_t)
err_t against the product-form bound with the non-orthogonality penalty
gamma_t.  Nonlinear path: the same linear skeleton plus the O(eps^2)
per-layer gap between the regularized manifold control and its tangent
space linearisation, valid below an eps threshold.

Tangent bases are pushforwards: V_{t+1} spans theta_t span(V_t).  The
constants require exactly that, so the instance builders here construct
systems this way.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .control import apply_feedback, linear_feedback, minimize_running_loss
from .dynamics import forward, hessian_norm_bound, jacobian, layer_value
from .embedding import (
    LinearSubspaceEmbedding,
    QuadraticSubmersion,
    complete_orthonormal,
    submersion_residual,
    tangent_basis,
)
from .numerics import (
    ConvergenceError,
    SingularMatrixError,
    as_mat,
    as_vec,
    condition_number,
    gram,
    norm2,
    orthonormalize,
    spawn_rng,
    spectral_norm,
)

HOLDS_SLACK = 1e-9
ON_MANIFOLD_TOL = 1e-8


@dataclass
class LinearizedSystem:
    """Layer Jacobians plus pushforward tangent bases and the weight c."""

    thetas: list  # T square matrices
    bases: list  # T orthonormal bases, bases[t] spans theta_{t-1}...theta_0 span(bases[0])
    c: float

    def __post_init__(self):
        if len(self.bases) != len(self.thetas):
            raise ValueError("need one tangent basis per layer")
        if self.c < 0:
            raise ValueError("c must be nonnegative")

    @property
    def depth(self):
        return len(self.thetas)

    @property
    def dim(self):
        return self.thetas[0].shape[0]

    @property
    def alpha(self):
        return self.c / (1.0 + self.c)


def propagate_tangent_bases(thetas, v0, depth=None):
    """V_0 = orth(v0); V_{t+1} = orth(theta_t V_t)."""
    depth = len(thetas) if depth is None else depth
    bases = [orthonormalize(as_mat(v0))]
    for t in range(depth - 1):
        bases.append(orthonormalize(kernels.matmul(as_mat(thetas[t]), bases[-1])))
    return bases


def make_linear_system(thetas, v0, c):
    thetas = [as_mat(th) for th in thetas]
    return LinearizedSystem(thetas=thetas, bases=propagate_tangent_bases(thetas, v0), c=c)


def perturbation_split(z, v0):
    """z = z_par + z_perp with z_par = V0 V0^T z."""
    z = as_vec(z)
    v0 = as_mat(v0)
    z_par = kernels.matvec(v0, kernels.matvec_t(v0, z))
    return z_par, z - z_par


def partial_products(thetas):
    """[I, theta_0, theta_1 theta_0, ...]; product index s multiplies s layers."""
    d = thetas[0].shape[0]
    prods = [np.eye(d)]
    for th in thetas:
        prods.append(kernels.matmul(as_mat(th), prods[-1]))
    return prods


def gamma_kappa_series(thetas):
    """gamma_t = max_{s<=t} (1 + kappa(prod_s)^2) ||I - prod_s^T prod_s||_2.

    Returns (gammas, kappas) for t = 0..T; a singular partial product puts
    inf in both (the bound turns vacuous rather than aborting).
    """
    prods = partial_products(thetas)
    d = prods[0].shape[0]
    eye = np.eye(d)
    terms = []
    kappas = []
    for prod in prods:
        try:
            kap = condition_number(prod)
        except (SingularMatrixError, ConvergenceError):
            kap = math.inf
        kappas.append(kap)
        if math.isinf(kap):
            terms.append(math.inf)
            continue
        dev = spectral_norm(eye - gram(prod))
        terms.append((1.0 + kap * kap) * dev)
    gammas = []
    best = 0.0
    for term in terms:
        best = max(best, term)
        gammas.append(best)
    return gammas, kappas


def theorem1_bound(sys, z, t, gammas=None, prods=None):
    """RHS of the squared-error estimate for the linearized controlled system.

    ||prod_t||^2 ( alpha^{2t} ||z_perp||^2 + ||z_par||^2
                  + gamma_t ||z||^2 (gamma_t alpha^2 (1-alpha^{t-1})^2
                                     + 2 (alpha - alpha^t)) )
    """
    if not 1 <= t <= sys.depth:
        raise ValueError(f"t={t} outside 1..{sys.depth}")
    if gammas is None:
        gammas, _ = gamma_kappa_series(sys.thetas)
    if prods is None:
        prods = partial_products(sys.thetas)
    alpha = sys.alpha
    z = as_vec(z)
    z_par, z_perp = perturbation_split(z, sys.bases[0])
    g = gammas[t]
    if math.isinf(g):
        return math.inf
    npar = kernels.dot(z_par, z_par)
    nperp = kernels.dot(z_perp, z_perp)
    nz = kernels.dot(z, z)
    theta_norm = spectral_norm(prods[t])
    corr = g * nz * (g * alpha**2 * (1.0 - alpha ** (t - 1)) ** 2 + 2.0 * (alpha - alpha**t))
    return theta_norm**2 * (alpha ** (2 * t) * nperp + npar + corr)


def simulate_linear_controlled(sys, z):
    """||q_bar_t - x_t|| for t = 0..T via the exact controlled difference
    recursion err_{t+1} = theta_t (I - K_t) err_t."""
    err = as_vec(z).copy()
    out = [norm2(err)]
    eye = np.eye(sys.dim)
    for t in range(sys.depth):
        v = sys.bases[t]
        p = kernels.matmul(v, np.ascontiguousarray(v.T))
        k = (eye - p) / (1.0 + sys.c)
        err = kernels.matvec(sys.thetas[t], err - kernels.matvec(k, err))
        out.append(norm2(err))
    return out


@dataclass
class BoundCertificate:
    """Per-layer squared-error bound vs simulation for the linear path."""

    alpha: float
    gamma: list  # gamma_t, t = 1..T
    kappa: list  # kappa(prod_t), t = 1..T
    bound: list  # squared-error bounds, t = 1..T
    empirical: list  # squared errors, t = 1..T
    holds: bool
    vacuous: bool  # some bound is infinite (singular partial product)


def theorem1_certificate(sys, z):
    gammas, kappas = gamma_kappa_series(sys.thetas)
    prods = partial_products(sys.thetas)
    errs = simulate_linear_controlled(sys, z)
    bound = [theorem1_bound(sys, z, t, gammas=gammas, prods=prods) for t in range(1, sys.depth + 1)]
    empirical = [errs[t] ** 2 for t in range(1, sys.depth + 1)]
    holds = all(e <= b + HOLDS_SLACK for e, b in zip(empirical, bound))
    return BoundCertificate(
        alpha=sys.alpha,
        gamma=gammas[1:],
        kappa=kappas[1:],
        bound=bound,
        empirical=empirical,
        holds=holds,
        vacuous=any(math.isinf(b) for b in bound),
    )


# ---------------------------------------------------------------------------
# nonlinear path


def _embedding_sigma_scale(e, x_t):
    """(sigma_t, anchor scale) for the certifier; None sigma = uncertified."""
    if isinstance(e, LinearSubspaceEmbedding):
        return 0.0, 1.0
    if isinstance(e, QuadraticSubmersion):
        scale = norm2(e.grad(x_t))
        return e.hessian_bound / scale, scale
    return None, 1.0


def _require_c2(net):
    for layer in net.layers:
        if layer.activation == "relu":
            raise ValueError("relu layers are not C^2; certification rejects them")


@dataclass
class NonlinearSetup:
    states: list
    thetas: list
    theta_norms: list
    bases: list  # tangent bases at x_t, t = 0..T-1
    sigmas: list
    scales: list
    ks: list
    betas: list
    gammas: list
    kappas: list
    deltas: list
    v_par: np.ndarray
    v_perp: np.ndarray
    eps_threshold: float
    certified: bool


def _nonlinear_setup(net, embeddings, x0, v, c):
    _require_c2(net)
    x0 = as_vec(x0)
    v = as_vec(v)
    if abs(norm2(v) - 1.0) > 1e-9:
        raise ValueError("perturbation direction v must be a unit vector")
    if c < 0:
        raise ValueError("c must be nonnegative")
    T = net.depth
    if len(embeddings) != T:
        raise ValueError(f"need {T} embeddings, got {len(embeddings)}")

    traj = forward(net, x0)
    states = traj.states
    certified = True
    sigmas, scales, bases = [], [], []
    for t, e in enumerate(embeddings):
        res = submersion_residual(e, states[t])
        if norm2(res) > ON_MANIFOLD_TOL:
            raise ValueError(
                f"clean state at layer {t} is off its manifold (residual {norm2(res):.3e})"
            )
        sig, scale = _embedding_sigma_scale(e, states[t])
        if sig is None:
            certified = False
            sig = math.nan
        sigmas.append(sig)
        scales.append(scale)
        bases.append(tangent_basis(e, states[t]) if certified else None)

    thetas = [jacobian(net.layers[t], states[t]) for t in range(T)]
    theta_norms = [spectral_norm(th) for th in thetas]
    betas = [hessian_norm_bound(net.layers[t]) for t in range(T)]
    ks = [4.0 * s * (1.0 + 2.0 * s) if not math.isnan(s) else math.nan for s in sigmas]
    gammas, kappas = gamma_kappa_series(thetas)

    if certified:
        v_par, v_perp = perturbation_split(v, bases[0])
    else:
        v_par, v_perp = v.copy(), np.zeros_like(v)

    alpha = c / (1.0 + c)
    prods = partial_products(thetas)
    prod_norms = [spectral_norm(p) for p in prods]
    npar = kernels.dot(v_par, v_par)
    nperp = kernels.dot(v_perp, v_perp)
    nv = kernels.dot(v, v)
    deltas = [1.0]  # delta_{x_0} = 1 by definition
    for t in range(1, T):
        g = gammas[t]
        if math.isinf(g):
            deltas.append(math.inf)
            continue
        corr = g * nv * (g * alpha**2 * (1.0 - alpha ** (t - 1)) ** 2 + 2.0 * (alpha - alpha**t))
        deltas.append(prod_norms[t] ** 2 * (alpha ** (2 * t) * nperp + npar + corr))

    denom = 0.0
    for i in range(T):
        term = deltas[i] * (ks[i] * theta_norms[i] + 2.0 * betas[i])
        for j in range(i + 1, T):
            term *= theta_norms[j] + ks[j] * theta_norms[j] + 2.0 * betas[j]
        denom += term
    if not certified or math.isnan(denom):
        eps_threshold = math.nan
    elif denom <= 0.0:
        eps_threshold = math.inf
    elif math.isinf(denom):
        eps_threshold = 0.0
    else:
        eps_threshold = math.sqrt(1.0 / denom)

    return NonlinearSetup(
        states=states,
        thetas=thetas,
        theta_norms=theta_norms,
        bases=bases,
        sigmas=sigmas,
        scales=scales,
        ks=ks,
        betas=betas,
        gammas=gammas,
        kappas=kappas,
        deltas=deltas,
        v_par=v_par,
        v_perp=v_perp,
        eps_threshold=eps_threshold,
        certified=certified,
    )


def theorem2_threshold(net, embeddings, x0, v, c):
    """The eps (not eps^2) admissibility threshold of the nonlinear bound."""
    return _nonlinear_setup(net, embeddings, x0, v, c).eps_threshold


def controlled_nonlinear_states(net, embeddings, x0, c, scales=None):
    """Closed-loop run with the per-layer regularized manifold control."""
    x = as_vec(x0)
    states = [x]
    for t, layer in enumerate(net.layers):
        scale = 1.0 if scales is None else scales[t]
        u = minimize_running_loss(embeddings[t], x, c, scale=scale)
        x = forward_one(layer, x + u)
        states.append(x)
    return states


def forward_one(layer, y):
    out = layer_value(layer, y)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite controlled state")
    return out


def _linearization_terms(setup, t):
    """sum_{i<=t} delta_i (k_i th_i + 2 b_i) prod_{j=i+1..t} (th_j + k_j th_j + 2 b_j)."""
    total = 0.0
    for i in range(t + 1):
        term = setup.deltas[i] * (setup.ks[i] * setup.theta_norms[i] + 2.0 * setup.betas[i])
        for j in range(i + 1, t + 1):
            term *= setup.theta_norms[j] + setup.ks[j] * setup.theta_norms[j] + 2.0 * setup.betas[j]
        total += term
    return total


@dataclass
class NonlinearCertificate:
    """All constants of the nonlinear error bound plus the simulated run.

    bound/empirical are norms (not squares), indexed by layer t = 1..T.
    The bound is stated for layers 1..T; the statement's off-by-one between
    "1 <= t <= T" and the x_{t+1} index is resolved by checking every
    recorded layer (see audit_note).
    """

    alpha: float
    sigma: list
    k: list
    beta: list
    delta: list
    gamma: list
    kappa: list
    theta_norms: list
    eps: float
    eps_threshold: float
    vacuous: bool  # eps exceeds the threshold: bound not claimed
    bound: list
    empirical: list
    holds: bool
    certified: bool  # False when a sigma has no sound value (autoencoders)
    status: str
    audit_note: str = "bound checked at every recorded layer t=1..T"


def theorem2_certificate(net, embeddings, x0_clean, v, eps, c):
    """Evaluate the nonlinear bound constants and simulate the closed loop.

    Autoencoder embeddings carry no sound Hessian bound, so the result is
    marked uncertified (simulation only).  eps above the threshold marks
    the certificate vacuous; the system is still simulated.
    """
    setup = _nonlinear_setup(net, embeddings, x0_clean, v, c)
    if eps <= 0:
        raise ValueError("eps must be positive")
    alpha = c / (1.0 + c)
    T = net.depth
    z = eps * as_vec(v)

    if setup.certified:
        x_eps = setup.states[0] + z
        run = controlled_nonlinear_states(net, embeddings, x_eps, c, scales=setup.scales)
        empirical = [norm2(run[t] - setup.states[t]) for t in range(1, T + 1)]
    else:
        from .control import greedy_control

        x = setup.states[0] + z
        run = [x]
        for t, layer in enumerate(net.layers):
            u = greedy_control(embeddings[t], x)
            x = forward_one(layer, x + u)
            run.append(x)
        empirical = [norm2(run[t] - setup.states[t]) for t in range(1, T + 1)]

    prods = partial_products(setup.thetas)
    z_par = eps * setup.v_par
    z_perp = eps * setup.v_perp
    npar, nperp, nz = norm2(z_par), norm2(z_perp), norm2(z)
    bound = []
    for t in range(1, T + 1):
        g = setup.gammas[t]
        if math.isinf(g) or not setup.certified:
            bound.append(math.inf)
            continue
        lin = spectral_norm(prods[t]) * (
            alpha**t * nperp
            + npar
            + nz * (g * alpha * (1.0 - alpha ** (t - 1)) + math.sqrt(2.0 * g * (alpha - alpha**t)))
        )
        bound.append(lin + _linearization_terms(setup, t - 1) * eps * eps)

    holds = all(e <= b + HOLDS_SLACK for e, b in zip(empirical, bound))
    vacuous = (not setup.certified) or math.isnan(setup.eps_threshold) or eps > setup.eps_threshold
    return NonlinearCertificate(
        alpha=alpha,
        sigma=setup.sigmas,
        k=setup.ks,
        beta=setup.betas,
        delta=setup.deltas,
        gamma=setup.gammas[1:],
        kappa=setup.kappas[1:],
        theta_norms=setup.theta_norms,
        eps=eps,
        eps_threshold=setup.eps_threshold,
        vacuous=vacuous,
        bound=bound,
        empirical=empirical,
        holds=holds,
        certified=setup.certified,
        status="certified" if setup.certified else "uncertified",
    )


@dataclass
class LinearizationRecord:
    """Per-layer gap between the nonlinear run and the linear recursion."""

    errors: list  # e_t, t = 1..T
    bound: list  # the O(eps^2) series, t = 1..T
    eps: float
    eps_threshold: float
    holds: bool


def linearization_error_series(net, embeddings, x0, v, eps, c):
    """e_t = ||(xbar_t - x_t) - theta_{t-1}(I-K_{t-1})...theta_0(I-K_0) z||."""
    setup = _nonlinear_setup(net, embeddings, x0, v, c)
    if not setup.certified:
        raise ValueError("linearization error needs linear or quadratic embeddings")
    T = net.depth
    z = eps * as_vec(v)
    x_eps = setup.states[0] + z
    run = controlled_nonlinear_states(net, embeddings, x_eps, c, scales=setup.scales)

    eye = np.eye(net.in_dim)
    w = z.copy()
    errors = []
    for t in range(T):
        vbasis = setup.bases[t]
        p = kernels.matmul(vbasis, np.ascontiguousarray(vbasis.T))
        k = (eye - p) / (1.0 + c)
        w = kernels.matvec(setup.thetas[t], w - kernels.matvec(k, w))
        errors.append(norm2((run[t + 1] - setup.states[t + 1]) - w))

    bound = [_linearization_terms(setup, t) * eps * eps for t in range(T)]
    holds = all(e <= b + HOLDS_SLACK for e, b in zip(errors, bound))
    return LinearizationRecord(
        errors=errors,
        bound=bound,
        eps=eps,
        eps_threshold=setup.eps_threshold,
        holds=holds,
    )


@dataclass
class PropC2Record:
    gap: float
    bound: float
    sigma: float  # raw sup ||f''||_* = 2|a|
    sigma_normalized: float  # 2|a| / ||f'(anchor)||, matches the anchored loss
    scale: float
    u_manifold: np.ndarray
    u_tangent: np.ndarray


def propC2_check(submersion, x_on, v, eps, c):
    """Gap between the regularized manifold control and the tangent-space
    feedback at an anchor, against the 4 eps^2 sigma (1 + 2 sigma) bound.

    The submersion is normalized by the constant ||f'(x_on)|| so its
    differential has unit norm at the anchor; the reported bound uses the
    correspondingly scaled Hessian bound.
    """
    if not isinstance(submersion, QuadraticSubmersion):
        raise TypeError("proposition check runs on quadratic submersion fixtures")
    x_on = as_vec(x_on)
    v = as_vec(v)
    if abs(submersion.value(x_on)) > 1e-10:
        raise ValueError("anchor x_on is not on the manifold")
    if abs(norm2(v) - 1.0) > 1e-9:
        raise ValueError("v must be a unit vector")
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")

    scale = norm2(submersion.grad(x_on))
    x_eps = x_on + eps * v
    u_m = minimize_running_loss(submersion, x_eps, c, scale=scale)
    basis = tangent_basis(submersion, x_on)
    emb = LinearSubspaceEmbedding(mean=x_on, basis=basis)
    u_p = apply_feedback(linear_feedback(emb, x_on, c), x_eps)
    sigma_n = submersion.hessian_bound / scale
    return PropC2Record(
        gap=norm2(u_m - u_p),
        bound=4.0 * eps * eps * sigma_n * (1.0 + 2.0 * sigma_n),
        sigma=submersion.hessian_bound,
        sigma_normalized=sigma_n,
        scale=scale,
        u_manifold=u_m,
        u_tangent=u_p,
    )


# ---------------------------------------------------------------------------
# randomized instances for sweeps


def random_linear_system(seed, trial, max_dim=16, max_depth=6, c_choices=(0.0, 0.1, 1.0), orthogonal=False):
    """Random well-conditioned system with pushforward tangent bases."""
    rng = spawn_rng(seed, trial)
    d = int(rng.integers(2, max_dim + 1))
    T = int(rng.integers(1, max_depth + 1))
    r = int(rng.integers(1, d))
    c = float(c_choices[int(rng.integers(0, len(c_choices)))])
    from .numerics import random_orthogonal

    thetas = []
    for _ in range(T):
        q = random_orthogonal(d, rng)
        if orthogonal:
            thetas.append(q)
        else:
            sv = rng.uniform(0.5, 2.0, size=d)
            q2 = random_orthogonal(d, rng)
            thetas.append(kernels.matmul(kernels.matmul(q, np.diag(sv)), q2))
    v0 = orthonormalize(rng.standard_normal((d, r)))
    z = rng.standard_normal(d)
    z = z / norm2(z) * float(rng.uniform(0.1, 2.0))
    return make_linear_system(thetas, v0, c), z


def random_nonlinear_instance(
    seed,
    trial,
    dims=(3, 6),
    max_depth=3,
    curvature=0.5,
    c_choices=(0.0, 0.1, 1.0),
    linear=False,
):
    """Random tanh (or identity) net with quadratic manifolds anchored on the
    clean trajectory; tangent planes are pushforwards of the layer-0 plane."""
    from .dynamics import DynamicalNet, Layer

    rng = spawn_rng(seed, trial)
    d = int(rng.integers(dims[0], dims[1] + 1))
    T = int(rng.integers(1, max_depth + 1))
    c = float(c_choices[int(rng.integers(0, len(c_choices)))])
    activation = "identity" if linear else "tanh"
    layers = []
    for _ in range(T):
        w = rng.standard_normal((d, d)) * (0.9 / math.sqrt(d))
        b = rng.standard_normal(d) * 0.05
        layers.append(Layer(weight=w, bias=b, activation=activation))
    head = Layer(weight=np.eye(d), bias=np.zeros(d), activation="identity")
    net = DynamicalNet(layers=layers, head=head)

    x0 = rng.standard_normal(d) * 0.5
    n0 = rng.standard_normal(d)
    n0 = n0 / norm2(n0)

    states = forward(net, x0).states
    normals = [n0]
    vbasis = complete_orthonormal(n0)
    for t in range(T - 1):
        th = jacobian(net.layers[t], states[t])
        vbasis = orthonormalize(kernels.matmul(th, vbasis))
        normals.append(_unit_normal_to(vbasis))

    embeddings = []
    for t in range(T):
        a = float(rng.uniform(0.1, curvature)) * (1.0 if rng.uniform() < 0.5 else -1.0)
        if linear:
            a = 0.0
        embeddings.append(
            QuadraticSubmersion(curvature=a, center=states[t], normal=normals[t])
        )
    v = rng.standard_normal(d)
    v = v / norm2(v)
    return net, embeddings, x0, v, c


def _unit_normal_to(vbasis):
    """Deterministic unit vector orthogonal to the columns of a d x (d-1) basis."""
    d = vbasis.shape[0]
    for i in range(d):
        g = np.zeros(d)
        g[i] = 1.0
        for _ in range(2):
            for j in range(vbasis.shape[1]):
                col = np.ascontiguousarray(vbasis[:, j])
                g = g - kernels.dot(col, g) * col
        ng = norm2(g)
        if ng > 1e-8:
            return g / ng
    raise ValueError("normal completion failed")
