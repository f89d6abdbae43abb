"""Minimal reverse-mode autodiff over dense float64 arrays.

Define-by-run: every primitive call records a :class:`Node` on its output
tensor. :meth:`Graph.trace` recovers the topologically ordered node list
from one or more outputs; the same graph can be replayed on new named leaf
values with :func:`forward` and differentiated with :func:`backward`.

The primitive set is closed (:class:`OpKind`); there is no registration
hook for user ops.
"""

import itertools
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class OpKind(str, Enum):
    MATMUL = "matmul"
    CONV2D = "conv2d"
    TRANSPOSED_CONV2D = "transposed_conv2d"
    TANH = "tanh"
    RELU = "relu"
    HADAMARD = "hadamard"
    CONCAT = "concat"
    GLOBAL_AVG_POOL = "global_avg_pool"
    SPATIAL_SOFTMAX = "spatial_softmax"
    FROBENIUS_SQ = "frobenius_sq"
    ADD = "add"
    SCALE = "scale"
    RESHAPE = "reshape"


_node_ids = itertools.count()


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "node")

    def __init__(self, data, requires_grad=False, name=None, check=True):
        data = np.asarray(data, dtype=np.float64)
        if check and not np.all(np.isfinite(data)):
            raise ValueError(f"non-finite value in tensor {name or '<anon>'}")
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar over the closed primitive set
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    id: int
    kind: OpKind
    inputs: tuple
    attrs: dict
    output: Tensor


# --------------------------------------------------------------- primitive rules
# each entry: (forward(datas, attrs) -> array, backward(g, datas, out, attrs) -> grads)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _mm_fwd(d, a):
    x, y = d
    x = x.T if a["trans_a"] else x
    y = y.T if a["trans_b"] else y
    return x @ y


def _mm_bwd(g, d, out, a):
    x, y = d
    ta, tb = a["trans_a"], a["trans_b"]
    xe = x.T if ta else x
    ye = y.T if tb else y
    gx = g @ ye.T
    gy = xe.T @ g
    return [gx.T if ta else gx, gy.T if tb else gy]


def _conv_fwd(d, a):
    y = kernels.conv2d_forward(d[0], d[1], a["stride"], a["pad"])
    if len(d) == 3:
        y += d[2][None, :, None, None]
    return y


def _conv_bwd(g, d, out, a):
    x, w = d[0], d[1]
    grads = [
        kernels.conv2d_grad_input(g, w, x.shape[2:], a["stride"], a["pad"]),
        kernels.conv2d_grad_weight(g, x, w.shape[2:], a["stride"], a["pad"]),
    ]
    if len(d) == 3:
        grads.append(g.sum(axis=(0, 2, 3)))
    return grads


def _deconv_out_hw(x_shape, w_shape, a):
    return tuple(kernels.deconv_out_size(x_shape[2 + i], w_shape[2 + i], a["stride"], a["pad"]) for i in (0, 1))


def _deconv_fwd(d, a):
    x, w = d[0], d[1]
    y = kernels.conv2d_grad_input(x, w, _deconv_out_hw(x.shape, w.shape, a), a["stride"], a["pad"])
    if len(d) == 3:
        y += d[2][None, :, None, None]
    return y


def _deconv_bwd(g, d, out, a):
    x, w = d[0], d[1]
    grads = [
        kernels.conv2d_forward(g, w, a["stride"], a["pad"]),
        kernels.conv2d_grad_weight(x, g, w.shape[2:], a["stride"], a["pad"]),
    ]
    if len(d) == 3:
        grads.append(g.sum(axis=(0, 2, 3)))
    return grads


def _softmax_fwd(d, a):
    x = d[0]
    z = x - x.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=(-2, -1), keepdims=True)


def _softmax_bwd(g, d, s, a):
    return [s * (g - (g * s).sum(axis=(-2, -1), keepdims=True))]


def _concat_bwd(g, d, out, a):
    edges = np.cumsum([x.shape[a["axis"]] for x in d])[:-1]
    return np.split(g, edges, axis=a["axis"])


def _gap_bwd(g, d, out, a):
    x = d[0]
    hw = x.shape[-1] * x.shape[-2]
    return [np.broadcast_to(g[..., None, None] / hw, x.shape)]


_RULES = {
    OpKind.MATMUL: (_mm_fwd, _mm_bwd),
    OpKind.CONV2D: (_conv_fwd, _conv_bwd),
    OpKind.TRANSPOSED_CONV2D: (_deconv_fwd, _deconv_bwd),
    OpKind.TANH: (lambda d, a: np.tanh(d[0]), lambda g, d, y, a: [g * (1.0 - y * y)]),
    OpKind.RELU: (lambda d, a: np.maximum(d[0], 0.0), lambda g, d, y, a: [g * (d[0] > 0)]),
    OpKind.HADAMARD: (
        lambda d, a: d[0] * d[1],
        lambda g, d, y, a: [_unbroadcast(g * d[1], d[0].shape), _unbroadcast(g * d[0], d[1].shape)],
    ),
    OpKind.CONCAT: (lambda d, a: np.concatenate(d, axis=a["axis"]), _concat_bwd),
    OpKind.GLOBAL_AVG_POOL: (lambda d, a: d[0].mean(axis=(-2, -1)), _gap_bwd),
    OpKind.SPATIAL_SOFTMAX: (_softmax_fwd, _softmax_bwd),
    OpKind.FROBENIUS_SQ: (lambda d, a: np.sum(d[0] * d[0]), lambda g, d, y, a: [2.0 * g * d[0]]),
    OpKind.ADD: (
        lambda d, a: d[0] + d[1],
        lambda g, d, y, a: [_unbroadcast(g, d[0].shape), _unbroadcast(g, d[1].shape)],
    ),
    OpKind.SCALE: (lambda d, a: a["c"] * d[0], lambda g, d, y, a: [a["c"] * g]),
    OpKind.RESHAPE: (lambda d, a: d[0].reshape(a["shape"]), lambda g, d, y, a: [g.reshape(d[0].shape)]),
}


def _shape_rule(kind, shapes, attrs):
    """Return an error string when input shapes violate ``kind``'s rule."""
    if kind is OpKind.MATMUL:
        a, b = shapes
        if len(a) != 2 or len(b) != 2:
            return f"matmul needs 2-D operands, got {a} and {b}"
        inner_a = a[0] if attrs["trans_a"] else a[1]
        inner_b = b[1] if attrs["trans_b"] else b[0]
        if inner_a != inner_b:
            return f"matmul inner extents differ: {a} x {b}"
    elif kind in (OpKind.CONV2D, OpKind.TRANSPOSED_CONV2D):
        x, w = shapes[0], shapes[1]
        if len(x) != 4 or len(w) != 4:
            return f"{kind.value} needs (N,C,H,W) input and 4-D weight, got {x}, {w}"
        in_ch = w[1] if kind is OpKind.CONV2D else w[0]
        out_ch = w[0] if kind is OpKind.CONV2D else w[1]
        if x[1] != in_ch:
            return f"{kind.value} channel mismatch: input {x[1]} vs weight {w}"
        if len(shapes) == 3 and shapes[2] != (out_ch,):
            return f"{kind.value} bias shape {shapes[2]} != ({out_ch},)"
        if kind is OpKind.CONV2D:
            oh = kernels.conv_out_size(x[2], w[2], attrs["stride"], attrs["pad"])
            ow = kernels.conv_out_size(x[3], w[3], attrs["stride"], attrs["pad"])
        else:
            oh, ow = _deconv_out_hw(x, w, attrs)
        if oh < 1 or ow < 1:
            return f"{kind.value} produces empty output from {x} with kernel {w[2:]}"
    elif kind in (OpKind.HADAMARD, OpKind.ADD):
        try:
            np.broadcast_shapes(*shapes)
        except ValueError:
            return f"{kind.value} shapes not broadcastable: {shapes}"
    elif kind is OpKind.CONCAT:
        ax = attrs["axis"]
        ref = shapes[0]
        for s in shapes[1:]:
            if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != ax % len(ref)):
                return f"concat shapes disagree off axis {ax}: {shapes}"
    elif kind in (OpKind.GLOBAL_AVG_POOL, OpKind.SPATIAL_SOFTMAX):
        if len(shapes[0]) < 2:
            return f"{kind.value} needs trailing (H, W) axes, got {shapes[0]}"
    elif kind is OpKind.RESHAPE:
        if int(np.prod(attrs["shape"])) != int(np.prod(shapes[0])):
            return f"cannot reshape {shapes[0]} to {attrs['shape']}"
    return None


def _apply(kind, inputs, **attrs):
    nid = next(_node_ids)
    err = _shape_rule(kind, [x.shape for x in inputs], attrs)
    if err:
        raise ShapeError(f"node {nid} ({kind.value}): {err}")
    out = Tensor(_RULES[kind][0]([x.data for x in inputs], attrs), check=False)
    out.requires_grad = any(x.requires_grad for x in inputs)
    out.node = Node(nid, kind, tuple(inputs), attrs, out)
    return out


# ----------------------------------------------------------------- primitives


def matmul(a, b, trans_a=False, trans_b=False):
    return _apply(OpKind.MATMUL, (a, b), trans_a=trans_a, trans_b=trans_b)


def conv2d(x, w, b=None, stride=1, pad=0):
    return _apply(OpKind.CONV2D, (x, w) if b is None else (x, w, b), stride=stride, pad=pad)


def transposed_conv2d(x, w, b=None, stride=1, pad=0):
    """Weight layout ``(C_in, C_out, KH, KW)``; out = (in - 1)*stride - 2*pad + kernel."""
    return _apply(OpKind.TRANSPOSED_CONV2D, (x, w) if b is None else (x, w, b), stride=stride, pad=pad)


def tanh(x):
    return _apply(OpKind.TANH, (x,))


def relu(x):
    return _apply(OpKind.RELU, (x,))


def hadamard(a, b):
    return _apply(OpKind.HADAMARD, (a, b))


def concat(tensors, axis=-1):
    return _apply(OpKind.CONCAT, tuple(tensors), axis=axis)


def global_avg_pool(x):
    return _apply(OpKind.GLOBAL_AVG_POOL, (x,))


def spatial_softmax(x):
    return _apply(OpKind.SPATIAL_SOFTMAX, (x,))


def frobenius_sq(x):
    return _apply(OpKind.FROBENIUS_SQ, (x,))


def add(a, b):
    return _apply(OpKind.ADD, (a, b))


def scale(x, c):
    return _apply(OpKind.SCALE, (x,), c=float(c))


def reshape(x, shape):
    return _apply(OpKind.RESHAPE, (x,), shape=tuple(int(s) for s in shape))


# ---------------------------------------------------------------------- graph


class Graph:
    """Topologically ordered nodes reachable from ``outputs``."""

    def __init__(self, nodes, outputs):
        self.nodes = nodes
        self.outputs = outputs

    @classmethod
    def trace(cls, outputs):
        if isinstance(outputs, Tensor):
            outputs = {"out": outputs}
        order, seen = [], set()
        for root in outputs.values():
            stack = [(root, False)]
            while stack:
                t, expanded = stack.pop()
                node = t.node
                if node is None or (node.id in seen and not expanded):
                    continue
                if expanded:
                    order.append(node)
                    continue
                seen.add(node.id)
                stack.append((t, True))
                for x in reversed(node.inputs):
                    if x.node is not None and x.node.id not in seen:
                        stack.append((x, False))
        return cls(order, dict(outputs))

    def leaves(self):
        found = {}
        for node in self.nodes:
            for x in node.inputs:
                if x.node is None and x.name is not None:
                    found.setdefault(x.name, x)
        return found

    def __len__(self):
        return len(self.nodes)


def forward(graph, inputs=None):
    """Re-evaluate ``graph`` after binding named leaf tensors to new values."""
    leaves = graph.leaves()
    for name, value in (inputs or {}).items():
        if name not in leaves:
            raise KeyError(f"graph has no leaf named {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"non-finite value bound to leaf {name!r}")
        if value.shape != leaves[name].shape:
            raise ShapeError(f"leaf {name!r}: expected shape {leaves[name].shape}, got {value.shape}")
        leaves[name].data = value
    for node in graph.nodes:
        datas = [x.data for x in node.inputs]
        node.output.data = _RULES[node.kind][0](datas, node.attrs)
    return dict(graph.outputs)


def backward(loss, graph=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None or not node.output.requires_grad:
            continue
        datas = [x.data for x in node.inputs]
        in_grads = _RULES[node.kind][1](g, datas, node.output.data, node.attrs)
        for x, gx in zip(node.inputs, in_grads):
            if not x.requires_grad:
                continue
            key = id(x)
            if x.node is None:
                x.grad = gx.copy() if x.grad is None else x.grad + gx
            elif key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
    return graph


def sgd_step(params, lr, weight_decay=0.0):
    """In place ``p <- p - lr * (g + weight_decay * p)`` for each tensor with a grad."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if weight_decay < 0:
        raise ValueError("weight decay must be non-negative")
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"grad shape {p.grad.shape} != param shape {p.data.shape} for {p.name}")
        p.data = p.data - lr * (p.grad + weight_decay * p.data)


@dataclass
class GradCheckResult:
    max_error: float
    worst: tuple  # (param index, flat coordinate)
    analytic: float
    numeric: float
    nonfinite: list

    @property
    def ok(self):
        return not self.nonfinite


def finite_diff_check(fn, params, eps=1e-5):
    """Compare backward() against central differences on every coordinate.

    ``fn(params)`` must build and return a scalar Tensor from ``params``.
    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    backward(fn(params))
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    best = GradCheckResult(0.0, (0, 0), 0.0, 0.0, [])
    for pi, p in enumerate(params):
        p.data = np.array(p.data, dtype=np.float64, order="C")  # writable view target
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = fn(params).item()
            flat[j] = orig - eps
            fm = fn(params).item()
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                best.nonfinite.append((pi, j))
                continue
            num = (fp - fm) / (2 * eps)
            ana = analytic[pi].reshape(-1)[j]
            err = abs(ana - num) / max(1.0, abs(ana))
            if err > best.max_error:
                best.max_error, best.worst, best.analytic, best.numeric = err, (pi, j), ana, num
    return best
