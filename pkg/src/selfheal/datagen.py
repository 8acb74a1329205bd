"""Synthetic dataset generators for the toy geometries, cross-entropy with
analytic gradients, and a deterministic momentum-SGD classifier trainer.

Generators are pure functions of their spec: the same spec yields the
same bytes on every run and platform.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import LabeledDataset, TrainConfig
from .dynamics import DynamicalNet, Layer, act_deriv, act_value, logits_batch
from .numerics import as_mat, orthonormalize, spawn_rng

KINDS = ("subspace_two_class", "curved_manifold_two_class", "circle", "two_moons_like")


@dataclass
class SyntheticSpec:
    kind: str
    d: int = 2
    r: int = 1
    n_per_class: int = 50
    noise: float = 0.0
    seed: int = 0
    gap: float = 3.0  # half-distance between the class regions
    spread: float = 1.0  # in-class extent along the manifold
    radius: float = 2.0  # circle kind
    amplitude: float = 0.8  # curved kind: bend height
    frequency: float = 1.2  # curved kind: bend frequency
    class_offset: float = 0.0  # curved kind: per-class +-offset in coordinate 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not 1 <= self.r < self.d:
            raise ValueError("need 1 <= r < d")
        if self.n_per_class < 2:
            raise ValueError("need at least 2 points per class")


def generate(spec):
    """Deterministic dataset with manifold tags for the requested geometry."""
    if spec.kind == "subspace_two_class":
        return _gen_subspace(spec)
    if spec.kind == "curved_manifold_two_class":
        return _gen_curved(spec)
    if spec.kind == "circle":
        return _gen_circle(spec)
    return _gen_two_moons(spec)


def _gen_subspace(spec):
    """Two clusters along a random r-subspace, split by |s| >= gap along the
    leading direction; optional isotropic noise in the complement."""
    rng = spawn_rng(spec.seed, 0)
    basis = orthonormalize(rng.standard_normal((spec.d, spec.r)))
    n = spec.n_per_class
    coords = np.zeros((2 * n, spec.r))
    coords[:n, 0] = spec.gap + rng.uniform(0.0, spec.spread, size=n)
    coords[n:, 0] = -(spec.gap + rng.uniform(0.0, spec.spread, size=n))
    if spec.r > 1:
        coords[:, 1:] = rng.uniform(-spec.spread, spec.spread, size=(2 * n, spec.r - 1))
    points = kernels.matmul(np.ascontiguousarray(coords), np.ascontiguousarray(basis.T))
    if spec.noise > 0.0:
        raw = rng.standard_normal((2 * n, spec.d))
        inplane = kernels.matmul(
            kernels.matmul(raw, basis), np.ascontiguousarray(basis.T)
        )
        points = points + spec.noise * (raw - inplane)
    labels = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    return LabeledDataset(points=points, labels=labels, manifold_tag=labels.copy())


def _gen_curved(spec):
    """Two class segments along the curve t -> (t, A sin(w t)) in the first
    two coordinates; noise acts in the normal directions.

    With class_offset > 0 (needs d >= 3) each class also carries a small
    +-offset in coordinate 3: a weakly informative off-manifold feature the
    baseline classifier will exploit, leaving it a small transverse margin.
    The two offset branches are part of the ground-truth manifold.
    """
    rng = spawn_rng(spec.seed, 0)
    n = spec.n_per_class
    t_pos = spec.gap + rng.uniform(0.0, spec.spread, size=n)
    t_neg = -(spec.gap + rng.uniform(0.0, spec.spread, size=n))
    ts = np.concatenate([t_pos, t_neg])
    labels = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    points = np.zeros((2 * n, spec.d))
    points[:, 0] = ts
    points[:, 1] = spec.amplitude * np.sin(spec.frequency * ts)
    if spec.class_offset != 0.0:
        if spec.d < 3:
            raise ValueError("class_offset needs ambient dimension >= 3")
        points[:, 2] = spec.class_offset * np.where(labels == 0, 1.0, -1.0)
    if spec.noise > 0.0:
        extra = rng.standard_normal((2 * n, spec.d))
        extra[:, 0] = 0.0
        points = points + spec.noise * extra
    return LabeledDataset(points=points, labels=labels, manifold_tag=labels.copy())


def _gen_circle(spec):
    """Evenly spaced points on a radius-R circle; classes split by half."""
    n = 2 * spec.n_per_class
    angles = 2.0 * math.pi * np.arange(n) / n
    points = np.zeros((n, spec.d))
    points[:, 0] = spec.radius * np.cos(angles)
    points[:, 1] = spec.radius * np.sin(angles)
    if spec.noise > 0.0:
        rng = spawn_rng(spec.seed, 0)
        points = points + spec.noise * rng.standard_normal((n, spec.d))
    labels = (angles >= math.pi).astype(np.int64)
    return LabeledDataset(points=points, labels=labels, manifold_tag=np.zeros(n, dtype=np.int64))


def _gen_two_moons(spec):
    rng = spawn_rng(spec.seed, 0)
    n = spec.n_per_class
    a1 = rng.uniform(0.0, math.pi, size=n)
    a2 = rng.uniform(0.0, math.pi, size=n)
    points = np.zeros((2 * n, spec.d))
    points[:n, 0] = np.cos(a1)
    points[:n, 1] = np.sin(a1)
    points[n:, 0] = 1.0 - np.cos(a2)
    points[n:, 1] = 0.5 - np.sin(a2)
    if spec.noise > 0.0:
        points = points + spec.noise * rng.standard_normal((2 * n, spec.d))
    labels = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    return LabeledDataset(points=points, labels=labels, manifold_tag=labels.copy())


# ---------------------------------------------------------------------------
# losses and training


def cross_entropy(logits, label):
    """Log-sum-exp stabilized CE and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    label = int(label)
    if not 0 <= label < z.size:
        raise ValueError("label outside logit range")
    m = float(np.max(z))
    lse = m + math.log(float(np.sum(np.exp(z - m))))
    grad = np.exp(z - lse)
    grad[label] -= 1.0
    return lse - float(z[label]), grad


def cross_entropy_batch(logits, labels):
    z = as_mat(logits)
    labels = np.asarray(labels, dtype=np.int64)
    m = np.max(z, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1))
    picked = z[np.arange(z.shape[0]), labels]
    grad = np.exp(z - lse[:, None])
    grad[np.arange(z.shape[0]), labels] -= 1.0
    return float(np.mean(lse - picked)), grad / z.shape[0]


@dataclass
class ClassifierArch:
    hidden: tuple = (16,)
    activation: str = "tanh"
    n_classes: int = 2


@dataclass
class TrainResult:
    net: DynamicalNet
    train_accuracy: float
    epoch_losses: list = field(default_factory=list)


def build_classifier(dim, arch, seed):
    rng = spawn_rng(seed, 1)
    widths = (dim,) + tuple(arch.hidden) + (arch.n_classes,)
    layers = []
    for din, dout in zip(widths[:-2], widths[1:-1]):
        w = rng.standard_normal((dout, din)) * math.sqrt(1.0 / din)
        layers.append(Layer(weight=w, bias=np.zeros(dout), activation=arch.activation))
    w = rng.standard_normal((widths[-1], widths[-2])) * math.sqrt(1.0 / widths[-2])
    head = Layer(weight=w, bias=np.zeros(widths[-1]), activation="identity")
    return DynamicalNet(layers=layers, head=head)


def train_classifier(data, arch, cfg):
    """Momentum SGD on cross-entropy; bit-reproducible for a fixed seed."""
    net = build_classifier(data.dim, arch, cfg.seed)
    blocks = net.layers + [net.head]
    vel = [(np.zeros_like(b.weight), np.zeros_like(b.bias)) for b in blocks]
    rng = spawn_rng(cfg.seed, 2)
    x, y = data.points, data.labels
    epoch_losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(data.n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, data.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = np.ascontiguousarray(x[idx])
            yb = y[idx]
            cache = []
            cur = xb
            for blk in blocks:
                wt = np.ascontiguousarray(blk.weight.T)
                z = kernels.matmul(cur, wt) + blk.bias
                out = act_value(blk.activation, z)
                if blk.residual_skip:
                    out = out + cur
                cache.append((cur, z))
                cur = out
            loss, grad_out = cross_entropy_batch(cur, yb)
            if not math.isfinite(loss):
                raise FloatingPointError("classifier training diverged")
            epoch_loss += loss
            batches += 1
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
        epoch_losses.append(epoch_loss / max(batches, 1))
    out, _ = logits_batch(net, x)
    acc = float(np.mean(np.argmax(out, axis=1) == y))
    return TrainResult(net=net, train_accuracy=acc, epoch_losses=epoch_losses)
