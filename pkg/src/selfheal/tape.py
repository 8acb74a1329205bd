"""Minimal reverse-mode tape for differentiating through the unrolled
control solver.

Only the input point is a variable; every weight, bias, and embedding
parameter is a constant.  The primitive set is exactly what the solver
core emits: affine maps with constant matrices, elementwise activations
and their derivatives (whose pullbacks need the second derivatives), and
vector arithmetic.  Gradients are checked against finite differences in
the test suite.
"""

import numpy as np

from . import kernels
from .dynamics import act_deriv, act_second, act_value
from .embedding import AutoencoderEmbedding, LinearSubspaceEmbedding


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


class Tape:
    """Records primitive operations in execution order for one backward pass."""

    def __init__(self):
        self.nodes = []

    def _push(self, node):
        self.nodes.append(node)
        return node

    def leaf(self, value):
        return self._push(Node(np.asarray(value, dtype=np.float64).copy()))

    def const(self, value):
        # constants participate in forward values only; no node recorded
        return Node(np.asarray(value, dtype=np.float64))

    def add(self, a, b):
        out = Node(a.value + b.value, (a, b))

        def back():
            a._accumulate(out.grad)
            b._accumulate(out.grad)

        out.backward_fn = back
        return self._push(out)

    def sub(self, a, b):
        out = Node(a.value - b.value, (a, b))

        def back():
            a._accumulate(out.grad)
            b._accumulate(-out.grad)

        out.backward_fn = back
        return self._push(out)

    def scale(self, a, s):
        s = float(s)
        out = Node(s * a.value, (a,))

        def back():
            a._accumulate(s * out.grad)

        out.backward_fn = back
        return self._push(out)

    def mul(self, a, b):
        out = Node(a.value * b.value, (a, b))

        def back():
            a._accumulate(out.grad * b.value)
            b._accumulate(out.grad * a.value)

        out.backward_fn = back
        return self._push(out)

    def affine(self, w, b, x):
        """w @ x + b with constant w, b."""
        w = np.ascontiguousarray(w)
        out = Node(kernels.matvec(w, np.ascontiguousarray(x.value)) + b, (x,))

        def back():
            x._accumulate(kernels.matvec_t(w, np.ascontiguousarray(out.grad)))

        out.backward_fn = back
        return self._push(out)

    def mat_t(self, w, x):
        """w.T @ x with constant w."""
        w = np.ascontiguousarray(w)
        out = Node(kernels.matvec_t(w, np.ascontiguousarray(x.value)), (x,))

        def back():
            x._accumulate(kernels.matvec(w, np.ascontiguousarray(out.grad)))

        out.backward_fn = back
        return self._push(out)

    def act(self, name, z):
        out = Node(act_value(name, z.value), (z,))

        def back():
            z._accumulate(out.grad * act_deriv(name, z.value))

        out.backward_fn = back
        return self._push(out)

    def act_prime(self, name, z):
        """sigma'(z) as a value; its pullback needs sigma''."""
        out = Node(act_deriv(name, z.value), (z,))

        def back():
            z._accumulate(out.grad * act_second(name, z.value))

        out.backward_fn = back
        return self._push(out)

    def dot(self, a, b):
        out = Node(np.float64(kernels.dot(np.ascontiguousarray(a.value), np.ascontiguousarray(b.value))), (a, b))

        def back():
            a._accumulate(float(out.grad) * b.value)
            b._accumulate(float(out.grad) * a.value)

        out.backward_fn = back
        return self._push(out)

    def cross_entropy(self, logits, label):
        z = logits.value
        m = float(np.max(z))
        lse = m + np.log(np.sum(np.exp(z - m)))
        out = Node(np.float64(lse - z[label]), (logits,))

        def back():
            p = np.exp(z - lse)
            p[label] -= 1.0
            logits._accumulate(float(out.grad) * p)

        out.backward_fn = back
        return self._push(out)

    def run_backward(self, loss):
        loss.grad = np.float64(1.0)
        for node in reversed(self.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn()


class TapeOps:
    """Solver-core ops backend recording onto a tape.

    Quadratic fixtures are rejected: their projection is an inner Newton
    loop with a data-dependent stop, which has no clean unrolling.
    """

    def __init__(self, tape):
        self.tape = tape

    def add(self, a, b):
        return self.tape.add(a, b)

    def sub(self, a, b):
        return self.tape.sub(a, b)

    def scale(self, a, s):
        return self.tape.scale(a, s)

    def zeros(self, dim):
        return self.tape.const(np.zeros(dim))

    def layer_value(self, layer, y):
        t = self.tape
        z = t.affine(layer.weight, layer.bias, y)
        out = t.act(layer.activation, z)
        if layer.residual_skip:
            out = t.add(out, y)
        return out

    def layer_vjp(self, layer, y, w):
        t = self.tape
        z = t.affine(layer.weight, layer.bias, y)
        d = t.act_prime(layer.activation, z)
        out = t.mat_t(layer.weight, t.mul(d, w))
        if layer.residual_skip:
            out = t.add(out, w)
        return out

    def _net_value(self, net, x):
        for layer in net.layers:
            x = self.layer_value(layer, x)
        return self.layer_value(net.head, x)

    def _net_vjp(self, net, x, w):
        inputs = []
        for layer in net.layers:
            inputs.append(x)
            x = self.layer_value(layer, x)
        inputs.append(x)
        w = self.layer_vjp(net.head, inputs[-1], w)
        for t in range(net.depth - 1, -1, -1):
            w = self.layer_vjp(net.layers[t], inputs[t], w)
        return w

    def embed(self, e, x):
        t = self.tape
        if isinstance(e, LinearSubspaceEmbedding):
            y = t.sub(x, t.const(e.mean))
            coords = t.mat_t(e.basis, y)
            return t.add(t.const(e.mean), t.affine(e.basis, np.zeros(e.dim), coords))
        if isinstance(e, AutoencoderEmbedding):
            return self._net_value(e.decoder, self._net_value(e.encoder, x))
        raise TypeError(
            f"white-box unrolling does not support {type(e).__name__} embeddings"
        )

    def residual(self, e, y):
        return self.tape.sub(self.embed(e, y), y) if isinstance(e, AutoencoderEmbedding) else self._linear_residual(e, y)

    def _linear_residual(self, e, y):
        if not isinstance(e, LinearSubspaceEmbedding):
            raise TypeError(
                f"white-box unrolling does not support {type(e).__name__} embeddings"
            )
        t = self.tape
        centered = t.sub(y, t.const(e.mean))
        coords = t.mat_t(e.basis, centered)
        return t.sub(centered, t.affine(e.basis, np.zeros(e.dim), coords))

    def residual_vjp(self, e, y, w):
        t = self.tape
        if isinstance(e, LinearSubspaceEmbedding):
            coords = t.mat_t(e.basis, w)
            return t.sub(w, t.affine(e.basis, np.zeros(e.dim), coords))
        if isinstance(e, AutoencoderEmbedding):
            code_pull = self._net_vjp_composed(e, y, w)
            return t.sub(code_pull, w)
        raise TypeError(
            f"white-box unrolling does not support {type(e).__name__} embeddings"
        )

    def _net_vjp_composed(self, e, y, w):
        """(E'(y))^T w through decoder then encoder."""
        enc_inputs = []
        x = y
        for layer in e.encoder.layers:
            enc_inputs.append(x)
            x = self.layer_value(layer, x)
        enc_inputs.append(x)
        code = self.layer_value(e.encoder.head, x)

        dec_inputs = []
        x = code
        for layer in e.decoder.layers:
            dec_inputs.append(x)
            x = self.layer_value(layer, x)
        dec_inputs.append(x)

        w = self.layer_vjp(e.decoder.head, dec_inputs[-1], w)
        for t in range(e.decoder.depth - 1, -1, -1):
            w = self.layer_vjp(e.decoder.layers[t], dec_inputs[t], w)
        w = self.layer_vjp(e.encoder.head, enc_inputs[-1], w)
        for t in range(e.encoder.depth - 1, -1, -1):
            w = self.layer_vjp(e.encoder.layers[t], enc_inputs[t], w)
        return w


def controlled_loss_grad(net, objective, cfg, x, label, greedy_only=False):
    """CE loss of the controlled prediction and its input gradient, by
    unrolling the full solver (or just the greedy rollout) on a tape."""
    from .control import solve_pmp_core

    tape = Tape()
    ops = TapeOps(tape)
    x_node = tape.leaf(x)
    if greedy_only:
        cur = x_node
        for t, layer in enumerate(net.layers):
            proj = ops.embed(objective.embeddings[t], cur)
            cur = ops.layer_value(layer, proj)
        xs = [cur]
    else:
        xs, _ = solve_pmp_core(net, objective, x_node, cfg, ops)
    logits = ops.layer_value(net.head, xs[-1])
    loss = tape.cross_entropy(logits, int(label))
    tape.run_backward(loss)
    grad = x_node.grad if x_node.grad is not None else np.zeros_like(np.asarray(x))
    return float(loss.value), np.asarray(grad, dtype=np.float64), np.asarray(logits.value)
