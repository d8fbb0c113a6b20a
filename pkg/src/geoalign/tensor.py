"""Minimal dense tensor engine with tape-based reverse-mode differentiation.

Values are float64 numpy arrays. Every operation records a node on a
ComputationGraph; insertion order is the topological order, and backward()
walks the tape once in reverse, accumulating vector-Jacobian products.
Trainable leaves are Parameters; their gradients accumulate across backward
calls until explicitly zeroed.

Broadcasting is deliberately restricted: elementwise ops require identical
shapes, bias addition broadcasts a vector over the last axis, matmul
broadcasts a 2-D right operand over leading batch axes, and expand_batch
tiles a tensor along a new leading axis. Everything else must be explicit.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from . import _kernels
from .errors import DomainError, NumericError, ShapeError

LAYER_NORM_EPS = 1e-5



class Parameter:
    """Named trainable leaf: a value array and an accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class _Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple, vjp: Optional[Callable]):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """Array value plus a handle into the graph that produced it."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data: np.ndarray, graph: "ComputationGraph", node_id: int):
        self.data = data
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, c):
        if isinstance(c, Tensor):
            return mul(self, c)
        return scale(self, float(c))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"


class ComputationGraph:
    """Append-only tape of recorded operations.

    One graph is confined to a single thread of execution during a forward
    and backward pass; independent graphs may run concurrently.
    """

    def __init__(self, debug: bool = False):
        self.nodes: list[_Node] = []
        self.param_nodes: list[tuple[int, Parameter]] = []
        self.debug = debug

    def _record(self, op, data, inputs, vjp) -> Tensor:
        if self.debug and not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite values produced by {op}")
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, inputs, vjp))
        return Tensor(np.asarray(data, dtype=np.float64), self, node_id)

    def constant(self, data) -> Tensor:
        """Enter an array as a non-trainable leaf."""
        return self._record("const", np.array(data, dtype=np.float64), (), None)

    def param(self, p: Parameter) -> Tensor:
        """Enter a Parameter's current value as a trainable leaf."""
        t = self._record("param", p.value.copy(), (), None)
        self.param_nodes.append((t.node_id, p))
        return t

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(param) into every Parameter entered.

        Visits each recorded node exactly once, in reverse insertion order.
        Gradients add onto whatever is already in Parameter.grad.
        """
        if loss.graph is not self:
            raise ShapeError("loss tensor does not belong to this graph")
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones(())
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            for iid, contrib in zip(node.inputs, node.vjp(g)):
                if contrib is None:
                    continue
                grads[iid] = contrib if grads[iid] is None else grads[iid] + contrib
        for nid, p in self.param_nodes:
            if grads[nid] is not None:
                p.grad += grads[nid]


def _graph_of(*tensors: Tensor) -> ComputationGraph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise ShapeError("operands belong to different computation graphs")
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; a is (..., n, m), b is (m, k) or (..., m, k)."""
    g = _graph_of(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # shared right operand: collapse leading axes into one GEMM
        m, k = bd.shape
        a2 = np.ascontiguousarray(ad).reshape(-1, m)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (k,))

        def vjp(gout):
            g2 = np.ascontiguousarray(gout).reshape(-1, k)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

    else:
        out = ad @ bd

        def vjp(gout):
            da = gout @ np.swapaxes(bd, -1, -2)
            db = np.swapaxes(ad, -1, -2) @ gout
            return da, db

    return g._record("matmul", out, (a.node_id, b.node_id), vjp)


def _require_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op} shapes differ: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    _require_same_shape("add", a, b)
    return g._record("add", a.data + b.data, (a.node_id, b.node_id), lambda gout: (gout, gout))


def sub(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    _require_same_shape("sub", a, b)
    return g._record("sub", a.data - b.data, (a.node_id, b.node_id), lambda gout: (gout, -gout))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product, identical shapes."""
    g = _graph_of(a, b)
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return g._record("mul", ad * bd, (a.node_id, b.node_id), lambda gout: (gout * bd, gout * ad))


def scale(t: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    return t.graph._record("scale", t.data * c, (t.node_id,), lambda gout: (gout * c,))


def mul_scalar(t: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar (shape ()) tensor."""
    g = _graph_of(t, s)
    if s.data.shape != ():
        raise ShapeError(f"mul_scalar needs a scalar tensor, got shape {s.data.shape}")
    td, sd = t.data, s.data

    def vjp(gout):
        return gout * sd, np.sum(gout * td)

    return g._record("mul_scalar", td * sd, (t.node_id, s.node_id), vjp)


def reciprocal(t: Tensor) -> Tensor:
    out = 1.0 / t.data
    return t.graph._record("reciprocal", out, (t.node_id,), lambda gout: (-gout * out * out,))


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.data)
    return t.graph._record("exp", out, (t.node_id,), lambda gout: (gout * out,))


def log(t: Tensor) -> Tensor:
    td = t.data
    return t.graph._record("log", np.log(td), (t.node_id,), lambda gout: (gout / td,))


def add_bias(t: Tensor, b: Tensor) -> Tensor:
    """Add a vector to the last axis of t; the only implicit broadcast."""
    g = _graph_of(t, b)
    if b.data.ndim != 1 or t.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias shapes incompatible: {t.data.shape} + {b.data.shape}")

    def vjp(gout):
        db = gout.sum(axis=tuple(range(gout.ndim - 1))) if gout.ndim > 1 else gout
        return gout, db

    return g._record("add_bias", t.data + b.data, (t.node_id, b.node_id), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    g = _graph_of(*tensors)
    datas = [t.data for t in tensors]
    ndim = datas[0].ndim
    ax = axis % ndim
    for d in datas[1:]:
        if d.ndim != ndim or d.shape[:ax] + d.shape[ax + 1 :] != datas[0].shape[:ax] + datas[0].shape[ax + 1 :]:
            raise ShapeError(f"concat shapes incompatible along axis {axis}: "
                             f"{[d.shape for d in datas]}")
    out = np.concatenate(datas, axis=ax)
    offsets = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def vjp(gout):
        return tuple(np.split(gout, offsets, axis=ax))

    return g._record("concat", out, tuple(t.node_id for t in tensors), vjp)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    td = t.data
    ax = axis % td.ndim
    if not 0 <= start < stop <= td.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] invalid for axis {axis} of {td.shape}")
    idx = tuple(slice(None) if i != ax else slice(start, stop) for i in range(td.ndim))
    out = td[idx].copy()

    def vjp(gout):
        dt = np.zeros_like(td)
        dt[idx] = gout
        return (dt,)

    return t.graph._record("slice", out, (t.node_id,), vjp)


def transpose(t: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swap_axes(t, -1, -2)


def swap_axes(t: Tensor, a: int, b: int) -> Tensor:
    """Exchange two axes (a view; tensor data is never mutated in place)."""
    if t.data.ndim < 2:
        raise ShapeError(f"swap_axes needs rank >= 2, got {t.data.shape}")
    out = np.swapaxes(t.data, a, b)
    return t.graph._record(
        "swap_axes", out, (t.node_id,), lambda gout: (np.swapaxes(gout, a, b),)
    )


def reshape(t: Tensor, shape: tuple) -> Tensor:
    td = t.data
    if int(np.prod(shape)) != td.size:
        raise ShapeError(f"cannot reshape {td.shape} into {shape}")
    return t.graph._record(
        "reshape", td.reshape(shape), (t.node_id,), lambda gout: (gout.reshape(td.shape),)
    )


def expand_batch(t: Tensor, n: int) -> Tensor:
    """Tile a tensor along a new leading axis of size n."""
    out = np.broadcast_to(t.data, (n,) + t.data.shape).copy()
    return t.graph._record("expand", out, (t.node_id,), lambda gout: (gout.sum(axis=0),))


def mean(t: Tensor, axis: int) -> Tensor:
    td = t.data
    ax = axis % td.ndim
    n = td.shape[ax]
    out = td.mean(axis=ax)

    def vjp(gout):
        return (np.repeat(np.expand_dims(gout / n, ax), n, axis=ax),)

    return t.graph._record("mean", out, (t.node_id,), vjp)


def mean_all(t: Tensor) -> Tensor:
    td = t.data
    size = td.size

    def vjp(gout):
        return (np.full_like(td, gout / size),)

    return t.graph._record("mean_all", td.mean(), (t.node_id,), vjp)


def softmax(t: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction for stability."""
    td = t.data
    shifted = td - td.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(gout):
        return (out * (gout - np.sum(gout * out, axis=-1, keepdims=True)),)

    return t.graph._record("softmax", out, (t.node_id,), vjp)


def logsumexp(t: Tensor) -> Tensor:
    """log(sum(exp(.))) over the last axis, reducing it away."""
    td = t.data
    m = td.max(axis=-1, keepdims=True)
    e = np.exp(td - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    soft = e / s

    def vjp(gout):
        return (soft * np.expand_dims(gout, -1),)

    return t.graph._record("logsumexp", out, (t.node_id,), vjp)


def diag(t: Tensor) -> Tensor:
    """Extract the diagonal of a square matrix."""
    td = t.data
    if td.ndim != 2 or td.shape[0] != td.shape[1]:
        raise ShapeError(f"diag needs a square matrix, got {td.shape}")
    n = td.shape[0]

    def vjp(gout):
        dt = np.zeros_like(td)
        np.fill_diagonal(dt, gout)
        return (dt,)

    return t.graph._record("diag", np.diagonal(td).copy(), (t.node_id,), vjp)


def l2_normalize(t: Tensor) -> Tensor:
    """Scale each last-axis row to unit Euclidean norm."""
    td = t.data
    norm = np.linalg.norm(td, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DomainError("l2_normalize: zero-norm row")
    out = td / norm

    def vjp(gout):
        return ((gout - out * np.sum(gout * out, axis=-1, keepdims=True)) / norm,)

    return t.graph._record("l2norm", out, (t.node_id,), vjp)


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    g = _graph_of(t, gain, bias)
    td = t.data
    d = td.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature dim {d}"
        )
    t2 = np.ascontiguousarray(td).reshape(-1, d)
    out2, xhat, inv = _kernels.layer_norm_fwd(t2, gain.data, bias.data, LAYER_NORM_EPS)
    gd = gain.data

    def vjp(gout):
        g2 = np.ascontiguousarray(gout).reshape(-1, d)
        dx, dgain, dbias = _kernels.layer_norm_bwd(g2, xhat, inv, gd)
        return dx.reshape(td.shape), dgain, dbias

    return g._record(
        "layer_norm", out2.reshape(td.shape), (t.node_id, gain.node_id, bias.node_id), vjp
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(t: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation:
    0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    td = t.data
    th = np.tanh(_GELU_C * (td + 0.044715 * td * td * td))
    out = 0.5 * td * (1.0 + th)

    def vjp(gout):
        d_inner = _GELU_C * (1.0 + 0.134145 * td * td)
        return (gout * (0.5 * (1.0 + th) + (0.5 * td) * (1.0 - th * th) * d_inner),)

    return t.graph._record("gelu", out, (t.node_id,), vjp)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for a 2-D weight and a bias over the last axis."""
    g = _graph_of(x, w, b)
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0] or bd.shape != (wd.shape[1],):
        raise ShapeError(f"affine shapes incompatible: {xd.shape} @ {wd.shape} + {bd.shape}")
    m, k = wd.shape
    x2 = np.ascontiguousarray(xd).reshape(-1, m)
    out = x2 @ wd
    out += bd
    out = out.reshape(xd.shape[:-1] + (k,))

    def vjp(gout):
        g2 = np.ascontiguousarray(gout).reshape(-1, k)
        return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2, g2.sum(axis=0)

    return g._record("affine", out, (x.node_id, w.node_id, b.node_id), vjp)
