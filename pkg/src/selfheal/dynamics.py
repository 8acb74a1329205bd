"""Depth-T controlled forward dynamics x_{t+1} = F_t(x_t + u_t).

Each layer is an affine map followed by an elementwise activation, with an
optional residual skip.  Gradients are hand-derived per activation; there
is no autodiff graph here.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import as_mat, as_vec, norm2, spectral_norm

ACTIVATIONS = ("identity", "tanh", "relu", "softplus")

# sup |act''| over the real line, used by the layer Hessian bound
_SUP_SECOND = {
    "identity": 0.0,
    "relu": 0.0,
    "tanh": 4.0 / (3.0 * np.sqrt(3.0)),
    "softplus": 0.25,
}


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def act_value(name, z):
    if name == "identity":
        return z.copy()
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    raise ValueError(f"unknown activation {name!r}")


def act_deriv(name, z):
    """Elementwise derivative; relu uses the 0-at-0 subgradient convention."""
    if name == "identity":
        return np.ones_like(z)
    if name == "tanh":
        th = np.tanh(z)
        return 1.0 - th * th
    if name == "relu":
        return np.where(z > 0.0, 1.0, 0.0)
    if name == "softplus":
        return _sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


def act_second(name, z):
    if name == "identity" or name == "relu":
        return np.zeros_like(z)
    if name == "tanh":
        th = np.tanh(z)
        return -2.0 * th * (1.0 - th * th)
    if name == "softplus":
        s = _sigmoid(z)
        return s * (1.0 - s)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    """One transformation F(x) = act(W x + b) [+ x when residual_skip]."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    residual_skip: bool = False

    def __post_init__(self):
        self.weight = as_mat(self.weight)
        self.bias = as_vec(self.bias)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError("bias length must match weight rows")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.residual_skip and self.weight.shape[0] != self.weight.shape[1]:
            raise ValueError("residual skip needs a square layer")

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


def layer_value(layer, x):
    x = as_vec(x)
    z = kernels.matvec(layer.weight, x) + layer.bias
    y = act_value(layer.activation, z)
    if layer.residual_skip:
        y = y + x
    return y


def layer_value_batch(layer, xs):
    """Layer applied to rows of xs (n x in_dim)."""
    xs = as_mat(xs)
    wt = np.ascontiguousarray(layer.weight.T)
    z = kernels.matmul(xs, wt) + layer.bias
    y = act_value(layer.activation, z)
    if layer.residual_skip:
        y = y + xs
    return y


def jacobian(layer, x):
    """Exact analytic Jacobian diag(act'(Wx+b)) @ W (+ I when skipping)."""
    x = as_vec(x)
    z = kernels.matvec(layer.weight, x) + layer.bias
    d = act_deriv(layer.activation, z)
    jac = d[:, None] * layer.weight
    if layer.residual_skip:
        jac = jac + np.eye(layer.in_dim)
    return jac


def vjp(layer, x, w):
    """jacobian(layer, x).T @ w without materialising the Jacobian."""
    x = as_vec(x)
    w = as_vec(w)
    z = kernels.matvec(layer.weight, x) + layer.bias
    d = act_deriv(layer.activation, z)
    out = kernels.matvec_t(layer.weight, np.ascontiguousarray(d * w))
    if layer.residual_skip:
        out = out + w
    return out


def hessian_norm_bound(layer):
    """Uniform upper bound on the tensor 2-norm of the layer Hessian.

    act(Wx+b) has Hessian entries act''(z_i) W_ij W_ik, which gives the
    bound sup|act''| * ||W||_2 * max_i ||W_i,:||_2; the residual skip is
    linear and contributes nothing.  Zero for identity and relu.
    """
    sup2 = _SUP_SECOND[layer.activation]
    if sup2 == 0.0:
        return 0.0
    row_norms = [norm2(layer.weight[i, :]) for i in range(layer.out_dim)]
    return sup2 * spectral_norm(layer.weight) * max(row_norms)


@dataclass
class DynamicalNet:
    """Layer stack F_{T-1} o ... o F_0 plus a head mapping x_T to logits."""

    layers: list
    head: Layer

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("need at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError("layer dimensions do not chain")
        if self.head.in_dim != self.layers[-1].out_dim:
            raise ValueError("head input does not match last layer")

    @property
    def depth(self):
        return len(self.layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def n_classes(self):
        return self.head.out_dim


@dataclass
class Trajectory:
    """States x_0..x_T and the controls u_0..u_{T-1} that produced them."""

    states: list
    controls: list

    def __post_init__(self):
        if len(self.states) != len(self.controls) + 1:
            raise ValueError("need exactly one more state than controls")


def zero_controls(net, like=None):
    layers = net.layers if like is None else like
    return [np.zeros(layer.in_dim) for layer in layers]


def forward(net, x0, controls=None):
    """Controlled forward pass recording every intermediate state."""
    x = as_vec(x0)
    if x.shape[0] != net.in_dim:
        raise ValueError(f"input dim {x.shape[0]} != net dim {net.in_dim}")
    if controls is None:
        controls = zero_controls(net)
    if len(controls) != net.depth:
        raise ValueError(f"need {net.depth} controls, got {len(controls)}")
    states = [x]
    for layer, u in zip(net.layers, controls):
        u = as_vec(u)
        if u.shape[0] != layer.in_dim:
            raise ValueError("control dimension mismatch")
        x = layer_value(layer, x + u)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite state in forward pass")
        states.append(x)
    return Trajectory(states=states, controls=[as_vec(u) for u in controls])


def trajectory_defect(net, traj):
    """Max reconstruction error of the forward recursion (0 by construction)."""
    worst = 0.0
    for t, layer in enumerate(net.layers):
        recomputed = layer_value(layer, traj.states[t] + traj.controls[t])
        worst = max(worst, float(np.max(np.abs(recomputed - traj.states[t + 1]))))
    return worst


def logits(net, x, controls=None):
    traj = forward(net, x, controls)
    return layer_value(net.head, traj.states[-1])


def predict(net, x, controls=None):
    return int(np.argmax(logits(net, x, controls)))


def logits_batch(net, xs):
    """Uncontrolled forward to logits for rows of xs, with a cache for vjps."""
    xs = as_mat(xs)
    cache = [xs]
    for layer in net.layers:
        xs = layer_value_batch(layer, xs)
        cache.append(xs)
    out = layer_value_batch(net.head, xs)
    return out, cache


def predict_batch(net, xs):
    out, _ = logits_batch(net, xs)
    return np.argmax(out, axis=1)


def input_grad_batch(net, cache, dlogits):
    """Pull logit cotangents back to the input rows (uncontrolled pass)."""
    dlogits = as_mat(dlogits)

    def back(layer, x_in, w):
        wt = np.ascontiguousarray(layer.weight.T)
        z = kernels.matmul(x_in, wt) + layer.bias
        d = act_deriv(layer.activation, z)
        dx = kernels.matmul(np.ascontiguousarray(d * w), layer.weight)
        if layer.residual_skip:
            dx = dx + w
        return dx

    w = back(net.head, cache[-1], dlogits)
    for t in range(net.depth - 1, -1, -1):
        w = back(net.layers[t], cache[t], w)
    return w


# ---------------------------------------------------------------------------
# serialization: JSON with 17-significant-digit decimal strings (bit-exact)

FORMAT_VERSION = "selfheal-model/1"


def _num(x):
    return format(float(x), ".17g")


def _mat_to_json(m):
    return [[_num(v) for v in row] for row in m]


def _mat_from_json(rows):
    return np.array([[float(v) for v in row] for row in rows], dtype=np.float64)


def layer_to_json(layer):
    return {
        "shape": [layer.out_dim, layer.in_dim],
        "activation": layer.activation,
        "residual_skip": layer.residual_skip,
        "weight": _mat_to_json(layer.weight),
        "bias": [_num(v) for v in layer.bias],
    }


def layer_from_json(obj):
    layer = Layer(
        weight=_mat_from_json(obj["weight"]),
        bias=np.array([float(v) for v in obj["bias"]], dtype=np.float64),
        activation=obj["activation"],
        residual_skip=bool(obj["residual_skip"]),
    )
    if list(layer.weight.shape) != list(obj["shape"]):
        raise ValueError("declared layer shape does not match weights")
    return layer


def net_to_json(net):
    return {
        "version": FORMAT_VERSION,
        "layers": [layer_to_json(l) for l in net.layers],
        "head": layer_to_json(net.head),
    }


def net_from_json(obj):
    if obj.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model version {obj.get('version')!r}")
    return DynamicalNet(
        layers=[layer_from_json(o) for o in obj["layers"]],
        head=layer_from_json(obj["head"]),
    )


def save_net(net, path):
    with open(path, "w") as fh:
        json.dump(net_to_json(net), fh, indent=1)


def load_net(path):
    with open(path) as fh:
        return net_from_json(json.load(fh))
