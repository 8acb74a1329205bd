"""Running loss, analytic linear feedback, Hamiltonian machinery, and the
successive-approximation solver for the layer-wise control problem.

The solver core is written against a tiny ops interface so the white-box
attack can re-run the exact same update sequence on a differentiation tape
(see ``tape``); the plain backend evaluates with numpy directly.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dynamics import Trajectory, forward, layer_value, vjp
from .embedding import (
    LinearSubspaceEmbedding,
    QuadraticSubmersion,
    manifold_project,
    quad_nearest_point,
    residual_vjp,
    submersion_residual,
)
from .numerics import ConvergenceError, as_vec, norm2, solve_spd

GAIN_IDENTITY_TOL = 1e-10


@dataclass
class ControlObjective:
    """Sum of per-layer running losses; the terminal loss is identically zero."""

    embeddings: list
    c: float = 0.0

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("regularization weight c must be nonnegative")


@dataclass
class PmpConfig:
    """Solver budget.  ``lr`` is the Hamiltonian ascent step; it is not the
    feedback-gain alpha = c/(1+c), which is derived from the objective's c.
    ``c`` here is the harness-level default used when building objectives."""

    max_itr: int = 3
    inner_itr: int = 10
    lr: float = 0.1
    c: float = 0.001

    def __post_init__(self):
        if self.max_itr < 1 or self.inner_itr < 1:
            raise ValueError("need max_itr >= 1 and inner_itr >= 1")
        if self.lr <= 0:
            raise ValueError("ascent step must be positive")


@dataclass
class ControlSolution:
    controls: list
    trajectory: Trajectory
    objective_history: list
    monotone_violations: list = field(default_factory=list)


@dataclass
class FeedbackGain:
    """u(x) = -K (x - anchor) with K = (cI + Q^T Q)^-1 Q^T Q = Q / (1 + c)."""

    gain: np.ndarray
    alpha: float
    anchor: np.ndarray


def running_loss(e, x, u, c):
    """0.5 ||f(x+u)||^2 + (c/2) ||u||^2."""
    x = as_vec(x)
    u = as_vec(u)
    res = submersion_residual(e, x + u)
    return 0.5 * kernels.dot(res, res) + 0.5 * c * kernels.dot(u, u)


def running_loss_grad_u(e, x, u, c):
    y = as_vec(x) + as_vec(u)
    res = submersion_residual(e, y)
    return residual_vjp(e, y, res) + c * as_vec(u)


def running_loss_grad_x(e, x, u):
    y = as_vec(x) + as_vec(u)
    res = submersion_residual(e, y)
    return residual_vjp(e, y, res)


def greedy_control(e, x):
    """The unregularized layer-wise solution E(x) - x."""
    x = as_vec(x)
    return manifold_project(e, x) - x


def linear_feedback(e, x_anchor, c):
    """Exact minimiser of the subspace running loss as a feedback gain.

    Q is symmetric idempotent, so (cI + Q^T Q)^-1 Q^T Q collapses to
    Q/(1+c); the gain identity I - K = alpha I + (1-alpha) P with
    alpha = c/(1+c) is enforced at construction.
    """
    if c < 0:
        raise ValueError("c must be nonnegative")
    v = e.basis
    d = e.dim
    p = kernels.matmul(v, np.ascontiguousarray(v.T))
    q = np.eye(d) - p
    k = q / (1.0 + c)
    alpha = c / (1.0 + c)
    identity_gap = np.max(np.abs((np.eye(d) - k) - (alpha * np.eye(d) + (1.0 - alpha) * p)))
    if identity_gap > GAIN_IDENTITY_TOL:
        raise AssertionError(f"feedback-gain identity violated by {identity_gap:.3e}")
    return FeedbackGain(gain=k, alpha=alpha, anchor=as_vec(x_anchor))


def apply_feedback(fg, x):
    return -kernels.matvec(fg.gain, as_vec(x) - fg.anchor)


def hamiltonian(net, t, x_t, p_next, u_t, objective):
    """p_{t+1} . F_t(x_t + u_t) - L(x_t, u_t)."""
    layer = net.layers[t]
    y = as_vec(x_t) + as_vec(u_t)
    fx = layer_value(layer, y)
    return kernels.dot(as_vec(p_next), fx) - running_loss(
        objective.embeddings[t], x_t, u_t, objective.c
    )


def hamiltonian_grad_u(net, t, x_t, p_next, u_t, objective):
    layer = net.layers[t]
    y = as_vec(x_t) + as_vec(u_t)
    return vjp(layer, y, p_next) - running_loss_grad_u(
        objective.embeddings[t], x_t, u_t, objective.c
    )


def total_objective(net, objective, x0, controls):
    """Sum of running losses along the controlled trajectory."""
    traj = forward(net, x0, controls)
    total = 0.0
    for t in range(net.depth):
        total += running_loss(
            objective.embeddings[t], traj.states[t], controls[t], objective.c
        )
    return total


class _PlainOps:
    """Direct numpy evaluation backend for the solver core."""

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def scale(a, s):
        return s * a

    @staticmethod
    def zeros(dim):
        return np.zeros(dim)

    @staticmethod
    def layer_value(layer, y):
        out = layer_value(layer, y)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite state in controlled forward pass")
        return out

    @staticmethod
    def layer_vjp(layer, y, w):
        out = vjp(layer, y, w)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite adjoint state")
        return out

    @staticmethod
    def embed(e, x):
        return manifold_project(e, x)

    @staticmethod
    def residual(e, y):
        return submersion_residual(e, y)

    @staticmethod
    def residual_vjp(e, y, w):
        return residual_vjp(e, y, w)


PLAIN_OPS = _PlainOps()


def solve_pmp_core(net, objective, x0, cfg, ops, on_outer_end=None):
    """Successive approximation with greedy init, shared by both backends.

    Greedy rollout seeds the controls; each outer iteration runs a
    controlled forward pass, sets p_T = 0, then sweeps backwards running
    ``inner_itr`` fixed-step ascent updates on each Hamiltonian before
    propagating the adjoint.  Returns (states, controls).
    """
    T = net.depth
    if len(objective.embeddings) != T:
        raise ValueError(f"need {T} embeddings, got {len(objective.embeddings)}")
    c = objective.c

    us = []
    x = x0
    for t, layer in enumerate(net.layers):
        proj = ops.embed(objective.embeddings[t], x)
        us.append(ops.sub(proj, x))
        x = ops.layer_value(layer, proj)

    def roll(us):
        xs = [x0]
        x = x0
        for t, layer in enumerate(net.layers):
            x = ops.layer_value(layer, ops.add(x, us[t]))
            xs.append(x)
        return xs

    for _ in range(cfg.max_itr):
        xs = roll(us)
        p = ops.zeros(net.layers[-1].out_dim)
        for t in range(T - 1, -1, -1):
            layer = net.layers[t]
            e = objective.embeddings[t]
            for _ in range(cfg.inner_itr):
                y = ops.add(xs[t], us[t])
                res = ops.residual(e, y)
                loss_grad = ops.add(ops.residual_vjp(e, y, res), ops.scale(us[t], c))
                ham_grad = ops.sub(ops.layer_vjp(layer, y, p), loss_grad)
                us[t] = ops.add(us[t], ops.scale(ham_grad, cfg.lr))
            y = ops.add(xs[t], us[t])
            res = ops.residual(e, y)
            p = ops.sub(ops.layer_vjp(layer, y, p), ops.residual_vjp(e, y, res))
        if on_outer_end is not None:
            on_outer_end(us)

    return roll(us), us


def solve_pmp(net, objective, x0, cfg):
    """Algorithm-level entry point; records the objective per outer iteration."""
    x0 = as_vec(x0)
    history = [total_objective(net, objective, x0, _greedy_rollout(net, objective, x0))]

    def record(us):
        history.append(total_objective(net, objective, x0, [np.asarray(u) for u in us]))

    _, us = solve_pmp_core(net, objective, x0, cfg, PLAIN_OPS, on_outer_end=record)
    traj = forward(net, x0, us)
    violations = [
        i for i in range(1, len(history)) if history[i] > history[i - 1] + 1e-8
    ]
    return ControlSolution(
        controls=us,
        trajectory=traj,
        objective_history=history,
        monotone_violations=violations,
    )


def _greedy_rollout(net, objective, x0):
    us = []
    x = x0
    for t, layer in enumerate(net.layers):
        u = greedy_control(objective.embeddings[t], x)
        us.append(u)
        x = layer_value(layer, x + u)
    return us


def controlled_logits(net, objective, x0, cfg):
    sol = solve_pmp(net, objective, x0, cfg)
    return layer_value(net.head, sol.trajectory.states[-1])


def controlled_predict(net, objective, x0, cfg):
    return int(np.argmax(controlled_logits(net, objective, x0, cfg)))


def solve_joint_gd(net, objective, x0, steps, lr):
    """Plain gradient descent on the stacked controls: the solver oracle.

    The full-trajectory gradient comes from one reverse sweep; controls
    start at zero, so an on-manifold input is a stationary point.
    """
    if steps < 1:
        raise ValueError("need steps >= 1")
    x0 = as_vec(x0)
    T = net.depth
    if len(objective.embeddings) != T:
        raise ValueError(f"need {T} embeddings, got {len(objective.embeddings)}")
    us = [np.zeros(layer.in_dim) for layer in net.layers]
    history = []
    for _ in range(steps):
        value, grads = joint_objective_grad(net, objective, x0, us)
        if not np.isfinite(value):
            raise FloatingPointError("joint gradient descent diverged")
        history.append(value)
        for t in range(T):
            us[t] = us[t] - lr * grads[t]
    traj = forward(net, x0, us)
    history.append(total_objective(net, objective, x0, us))
    violations = [
        i for i in range(1, len(history)) if history[i] > history[i - 1] + 1e-8
    ]
    return ControlSolution(
        controls=us,
        trajectory=traj,
        objective_history=history,
        monotone_violations=violations,
    )


def joint_objective_grad(net, objective, x0, controls):
    """Objective value and its gradient w.r.t. every control (reverse sweep)."""
    traj = forward(net, x0, controls)
    c = objective.c
    T = net.depth
    value = 0.0
    for t in range(T):
        value += running_loss(objective.embeddings[t], traj.states[t], controls[t], c)
    lam = np.zeros(net.layers[-1].out_dim)
    grads = [None] * T
    for t in range(T - 1, -1, -1):
        e = objective.embeddings[t]
        y = traj.states[t] + controls[t]
        res = submersion_residual(e, y)
        r = residual_vjp(e, y, res)
        pull = vjp(net.layers[t], y, lam)
        grads[t] = r + c * controls[t] + pull
        lam = r + pull
    return value, grads


def adjoint_states(net, objective, trajectory):
    """Backward recursion p_t = grad_x H with p_T = 0, exposed for checks."""
    T = net.depth
    p = np.zeros(net.layers[-1].out_dim)
    out = [p]
    for t in range(T - 1, -1, -1):
        e = objective.embeddings[t]
        y = trajectory.states[t] + trajectory.controls[t]
        res = submersion_residual(e, y)
        p = vjp(net.layers[t], y, p) - residual_vjp(e, y, res)
        out.append(p)
    out.reverse()
    return out


def minimize_running_loss(e, x, c, scale=1.0, grad_tol=1e-10, max_iter=200):
    """Regularized manifold control u = argmin 0.5||f(x+u)/scale||^2 + c/2||u||^2.

    Closed form for linear subspaces; damped Newton for quadratic
    submersions (c = 0 falls back to the nearest-point projection, the
    minimal-norm limit).  ``scale`` renormalises an anchored submersion so
    its differential has unit norm at the anchor.
    """
    x = as_vec(x)
    if isinstance(e, LinearSubspaceEmbedding):
        # scale cancels in the projector; effective regularization is c*scale^2
        fg = linear_feedback(e, e.mean, c * scale * scale)
        return apply_feedback(fg, x)
    if not isinstance(e, QuadraticSubmersion):
        raise TypeError("regularized control implemented for linear and quadratic embeddings")
    if c == 0.0:
        return quad_nearest_point(e, x) - x

    d = e.dim
    inv_s2 = 1.0 / (scale * scale)
    lat_proj = np.eye(d) - np.outer(e.normal, e.normal)
    hess_f = -2.0 * e.curvature * lat_proj  # constant Hessian of f

    def value_grad_hess(u):
        y = x + u
        fval = e.value(y)
        fgrad = e.grad(y)
        val = 0.5 * fval * fval * inv_s2 + 0.5 * c * kernels.dot(u, u)
        grad = fgrad * (fval * inv_s2) + c * u
        hess = (np.outer(fgrad, fgrad) + fval * hess_f) * inv_s2 + c * np.eye(d)
        return val, grad, hess

    u = np.zeros(d)
    val, grad, hess = value_grad_hess(u)
    for _ in range(max_iter):
        if norm2(grad) <= grad_tol:
            return u
        damping = 0.0
        while True:
            try:
                step = solve_spd(hess + damping * np.eye(d), -grad)
                break
            except ArithmeticError:
                damping = max(2.0 * damping, 1e-8)
        # gradient-norm decrease also accepts: the objective decrease rounds
        # to zero within a few ulp of the minimum
        gnorm = norm2(grad)
        size = 1.0
        for _ in range(60):
            u_new = u + size * step
            val_new, grad_new, hess_new = value_grad_hess(u_new)
            if val_new <= val or norm2(grad_new) <= gnorm:
                break
            size *= 0.5
        u, val, grad, hess = u_new, val_new, grad_new, hess_new
    if norm2(grad) <= grad_tol:
        return u
    raise ConvergenceError("running-loss Newton did not reach grad tolerance 1e-10")
