"""FGSM and PGD perturbation generators under l1/l2/linf balls.

Oblivious mode attacks the bare model; white-box mode differentiates
through the fully unrolled control solver (or the greedy rollout when
configured).  Every returned point is feasibility-checked against its
ball, and identical config + seed reproduces attacks bit-for-bit.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .control import ControlObjective
from .dynamics import layer_value, vjp
from .numerics import as_mat, as_vec, norm2, spawn_rng

NORMS = ("l1", "l2", "linf")
BALL_SLACK = 1e-9


@dataclass
class AttackConfig:
    norm: str
    eps: float
    steps: int = 50
    step_size: float | None = None  # default 2.5 * eps / steps
    threat: str = "oblivious"
    seed: int = 0
    random_start: bool = True
    clip_box: tuple | None = None  # declared input box (lo, hi), optional
    greedy_only: bool = False  # white-box: differentiate the greedy rollout only
    unroll_budget: int = 500_000

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.eps <= 0 or self.steps < 1:
            raise ValueError("need eps > 0 and steps >= 1")
        if self.threat not in ("oblivious", "whitebox"):
            raise ValueError("threat must be 'oblivious' or 'whitebox'")

    @property
    def step(self):
        return self.step_size if self.step_size is not None else 2.5 * self.eps / self.steps


@dataclass
class AttackResult:
    points: np.ndarray
    success: np.ndarray  # prediction differs from the true label
    loss_trace: np.ndarray  # mean loss per step
    flags: list = field(default_factory=list)


@dataclass
class ModelFn:
    """Loss/gradient/prediction interface the attacks drive."""

    loss_and_grad: object  # (x, y) -> (loss, grad_x)
    predict: object  # (x) -> int


def bare_model_fn(net):
    """Cross-entropy through the uncontrolled network."""

    def loss_and_grad(x, y):
        x = as_vec(x)
        inputs = []
        cur = x
        for layer in net.layers:
            inputs.append(cur)
            cur = layer_value(layer, cur)
        inputs.append(cur)
        logits = layer_value(net.head, cur)
        m = float(np.max(logits))
        lse = m + math.log(float(np.sum(np.exp(logits - m))))
        loss = lse - float(logits[int(y)])
        p = np.exp(logits - lse)
        p[int(y)] -= 1.0
        w = vjp(net.head, inputs[-1], p)
        for t in range(net.depth - 1, -1, -1):
            w = vjp(net.layers[t], inputs[t], w)
        return loss, w

    def predict(x):
        cur = as_vec(x)
        for layer in net.layers:
            cur = layer_value(layer, cur)
        return int(np.argmax(layer_value(net.head, cur)))

    return ModelFn(loss_and_grad=loss_and_grad, predict=predict)


def composed_model_fn(net, embedding):
    """Cross-entropy through net(E(x)): the manifold-projected classifier."""
    from .embedding import manifold_project, _ae_vjp, _net_apply  # noqa: PLC0415
    from .embedding import AutoencoderEmbedding, LinearSubspaceEmbedding
    from . import kernels

    inner = bare_model_fn(net)

    def loss_and_grad(x, y):
        x = as_vec(x)
        z = manifold_project(embedding, x)
        loss, g = inner.loss_and_grad(z, y)
        if isinstance(embedding, LinearSubspaceEmbedding):
            pg = kernels.matvec(embedding.basis, kernels.matvec_t(embedding.basis, g))
            return loss, pg
        if isinstance(embedding, AutoencoderEmbedding):
            return loss, _ae_vjp(embedding, x, g)
        raise TypeError("composed attacks support linear and autoencoder embeddings")

    def predict(x):
        return inner.predict(manifold_project(embedding, as_vec(x)))

    return ModelFn(loss_and_grad=loss_and_grad, predict=predict)


def controlled_model_fn(net, embeddings, pmp_cfg, c, greedy_only=False):
    """Cross-entropy through the closed-loop controlled network, with
    gradients from the unrolled solver tape (white-box threat)."""
    from .tape import controlled_loss_grad

    objective = ControlObjective(embeddings=list(embeddings), c=c)

    def loss_and_grad(x, y):
        loss, grad, _ = controlled_loss_grad(
            net, objective, pmp_cfg, as_vec(x), int(y), greedy_only=greedy_only
        )
        return loss, grad

    def predict(x):
        from .control import controlled_predict

        return controlled_predict(net, objective, as_vec(x), pmp_cfg)

    return ModelFn(loss_and_grad=loss_and_grad, predict=predict)


def project_l1(v, radius):
    """Euclidean projection onto the l1 ball (sorting-based simplex step)."""
    v = as_vec(v)
    if radius <= 0:
        raise ValueError("radius must be positive")
    mag = np.abs(v)
    if float(np.sum(mag)) <= radius:
        return v.copy()
    u = np.sort(mag)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, u.size + 1)
    rho = int(np.max(np.nonzero(u * idx > (css - radius))[0]))
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(mag - theta, 0.0)


def project_ball(delta, norm, eps):
    delta = as_vec(delta)
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    if norm == "l2":
        n = norm2(delta)
        return delta if n <= eps else delta * (eps / n)
    return project_l1(delta, eps)


def ball_norm(delta, norm):
    if norm == "linf":
        return float(np.max(np.abs(delta))) if delta.size else 0.0
    if norm == "l2":
        return norm2(delta)
    return float(np.sum(np.abs(delta)))


def random_start(rng, dim, norm, eps):
    if norm == "linf":
        return rng.uniform(-eps, eps, size=dim)
    if norm == "l2":
        g = rng.standard_normal(dim)
        n = norm2(g)
        if n == 0.0:
            return np.zeros(dim)
        radius = eps * rng.uniform() ** (1.0 / dim)
        return g * (radius / n)
    draw = rng.uniform(-eps, eps, size=dim)
    return project_l1(draw, eps)


def fgsm(model_fn, x, y, eps, clip_box=None):
    """x + eps * sign(grad CE); a zero gradient leaves x unchanged (flagged)."""
    x = as_vec(x)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    _, g = model_fn.loss_and_grad(x, y)
    flags = []
    if not np.any(g):
        flags.append("zero-gradient")
        adv = x.copy()
    else:
        adv = x + eps * np.sign(g)
    if clip_box is not None:
        adv = np.clip(adv, clip_box[0], clip_box[1])
    return adv, flags


def _l1_ascent_step(delta, g, step):
    """Steepest l1 step: move the largest-magnitude gradient coordinate."""
    i = int(np.argmax(np.abs(g)))
    out = delta.copy()
    out[i] += step * math.copysign(1.0, g[i])
    return out


def pgd(model_fn, x, y, cfg, rng=None):
    """Projected gradient ascent on cross-entropy for one point.

    Returns (adversarial point, success flag, per-step losses, flags).
    """
    x = as_vec(x)
    if rng is None:
        rng = spawn_rng(cfg.seed, 0)
    delta = (
        random_start(rng, x.size, cfg.norm, cfg.eps)
        if cfg.random_start
        else np.zeros(x.size)
    )
    delta = _feasible(delta, x, cfg)
    trace = []
    flags = []
    for _ in range(cfg.steps):
        loss, g = model_fn.loss_and_grad(x + delta, y)
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite attack loss")
        trace.append(loss)
        if not np.any(g):
            if "zero-gradient" not in flags:
                flags.append("zero-gradient")
            break
        if cfg.norm == "linf":
            delta = delta + cfg.step * np.sign(g)
        elif cfg.norm == "l2":
            delta = delta + cfg.step * (g / norm2(g))
        else:
            delta = _l1_ascent_step(delta, g, cfg.step)
        delta = _feasible(delta, x, cfg)
    adv = x + delta
    gap = ball_norm(adv - x, cfg.norm) - cfg.eps
    if gap > BALL_SLACK:
        raise AssertionError(f"ball feasibility violated by {gap:.3e}")
    success = model_fn.predict(adv) != int(y)
    return adv, success, np.array(trace), flags


def _feasible(delta, x, cfg):
    delta = project_ball(delta, cfg.norm, cfg.eps)
    if cfg.clip_box is not None:
        lo, hi = cfg.clip_box
        delta = np.clip(x + delta, lo, hi) - x
    return delta


def pgd_batch(model_fn, xs, ys, cfg):
    """Per-sample PGD with deterministic sub-seeded starts."""
    xs = as_mat(xs)
    n = xs.shape[0]
    points = np.zeros_like(xs)
    success = np.zeros(n, dtype=bool)
    traces = []
    flags = []
    for i in range(n):
        rng = spawn_rng(cfg.seed, i)
        adv, ok, trace, fl = pgd(model_fn, xs[i], int(ys[i]), cfg, rng=rng)
        points[i] = adv
        success[i] = ok
        traces.append(trace)
        flags.extend(f"{f}@{i}" for f in fl)
    width = max((t.size for t in traces), default=0)
    mean_trace = np.zeros(width)
    if width:
        counts = np.zeros(width)
        for t in traces:
            mean_trace[: t.size] += t
            counts[: t.size] += 1.0
        mean_trace = mean_trace / np.maximum(counts, 1.0)
    return AttackResult(points=points, success=success, loss_trace=mean_trace, flags=flags)


def fgsm_batch(model_fn, xs, ys, eps, clip_box=None):
    xs = as_mat(xs)
    n = xs.shape[0]
    points = np.zeros_like(xs)
    success = np.zeros(n, dtype=bool)
    flags = []
    for i in range(n):
        adv, fl = fgsm(model_fn, xs[i], int(ys[i]), eps, clip_box=clip_box)
        points[i] = adv
        success[i] = model_fn.predict(adv) != int(ys[i])
        flags.extend(f"{f}@{i}" for f in fl)
    return AttackResult(
        points=points, success=success, loss_trace=np.zeros(0), flags=flags
    )


class UnrollBudgetError(RuntimeError):
    """White-box unrolling would exceed the configured compute budget."""


def attack_controlled(net, embeddings, pmp_cfg, xs, ys, cfg):
    """White-box PGD through the fully unrolled controlled forward pass."""
    if cfg.threat != "whitebox":
        raise ValueError("attack_controlled requires threat='whitebox'")
    work = cfg.steps * pmp_cfg.max_itr * pmp_cfg.inner_itr * net.depth
    if not cfg.greedy_only and work > cfg.unroll_budget:
        raise UnrollBudgetError(
            f"unroll work {work} exceeds budget {cfg.unroll_budget}; "
            "reduce steps/iterations or set greedy_only"
        )
    model = controlled_model_fn(
        net, embeddings, pmp_cfg, pmp_cfg.c, greedy_only=cfg.greedy_only
    )
    xs = as_mat(xs)
    if xs.ndim == 1:
        xs = xs[None, :]
    return pgd_batch(model, xs, np.asarray(ys, dtype=np.int64).ravel(), cfg)
