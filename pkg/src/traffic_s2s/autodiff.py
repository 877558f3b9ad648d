"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. A :class:`Tape`
records every operation of one forward pass as a :class:`Node`; because nodes
are appended in evaluation order, the tape itself is a topological order and
:func:`backward` walks it in reverse.

Only the operations the forecasting models need are provided. Apart from the
per-channel bias of the convolution and dense layers, operands must have
identical shapes; batch broadcasting of parameters is explicit via
:meth:`Tape.tile`.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Node:
    """One value in the computation graph."""

    __slots__ = ("id", "op", "inputs", "value", "grad", "name", "_vjp", "_cache")

    def __init__(self, id, op, inputs, value, vjp=None, name=None):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.name = name
        self._vjp = vjp
        self._cache = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_param(self):
        return self.op == "param"

    @property
    def gradient(self) -> np.ndarray:
        if self.grad is None:
            return np.zeros_like(self.value)
        return self.grad

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.id}, {self.op}{label}, shape={self.value.shape})"


def _same_shape(op, a, b):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def _sigmoid(x):
    # tanh form is overflow-free for any finite input
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- convolution helpers ------------------------------------------------------
# Patches are laid out channel-major, [C*prod(K), N*prod(S)], so the forward
# product and both gradient products are single GEMMs without 6-D transposes.

def _offsets(ksize):
    return itertools.product(*(range(k) for k in ksize))


def _im2col(x: np.ndarray, ksize: tuple) -> np.ndarray:
    """[N, C, *S] -> [C*prod(K), N*prod(S)] patches under zero 'same' padding."""
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    pads = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in ksize]
    xt = np.pad(x, pads).swapaxes(0, 1)
    cols = np.empty((c,) + tuple(ksize) + (n,) + spatial, dtype=DTYPE)
    for off in _offsets(ksize):
        region = (slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(off, spatial))
        cols[(slice(None),) + off] = xt[region]
    return cols.reshape(c * math.prod(ksize), n * math.prod(spatial))


def _col2im(dcols: np.ndarray, xshape: tuple, ksize: tuple) -> np.ndarray:
    n, c = xshape[:2]
    spatial = xshape[2:]
    dc = dcols.reshape((c,) + tuple(ksize) + (n,) + spatial)
    padded = tuple(s + k - 1 for s, k in zip(spatial, ksize))
    dxp = np.zeros((c, n) + padded, dtype=DTYPE)
    for off in _offsets(ksize):
        region = (slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(off, spatial))
        dxp[region] += dc[(slice(None),) + off]
    crop = (slice(None), slice(None)) + tuple(slice(k // 2, k // 2 + s) for k, s in zip(ksize, spatial))
    return dxp[crop].swapaxes(0, 1)


class Tape:
    """Records a single forward pass. Build a fresh tape per pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _push(self, op, inputs, value, vjp=None, name=None) -> Node:
        node = Node(len(self.nodes), op, inputs, value, vjp, name)
        self.nodes.append(node)
        return node

    # -- leaves -------------------------------------------------------------

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ContractError(f"duplicate parameter {name!r}")
        node = self._push("param", (), as_tensor(value), name=name)
        self.params[name] = node
        return node

    def params_from(self, params: dict) -> dict[str, Node]:
        return {k: self.param(k, v) for k, v in params.items()}

    def const(self, value) -> Node:
        return self._push("const", (), as_tensor(value))

    # -- elementwise ----------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        _same_shape("add", a, b)
        return self._push("add", (a, b), a.value + b.value, lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        _same_shape("sub", a, b)
        return self._push("sub", (a, b), a.value - b.value, lambda g: (g, -g))

    def mul(self, a: Node, b: Node) -> Node:
        """Hadamard product."""
        _same_shape("hadamard", a, b)
        av, bv = a.value, b.value
        return self._push("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    hadamard = mul

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._push("scale", (a,), a.value * c, lambda g: (g * c,))

    def sigmoid(self, a: Node) -> Node:
        y = _sigmoid(a.value)
        return self._push("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)
        return self._push("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))

    # -- shape ----------------------------------------------------------------

    def reshape(self, a: Node, shape) -> Node:
        shape = tuple(shape)
        orig = a.value.shape
        try:
            y = a.value.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"reshape: {orig} -> {shape}") from exc
        return self._push("reshape", (a,), y, lambda g: (g.reshape(orig),))

    def tile(self, a: Node, n: int) -> Node:
        """Repeat ``a`` along a new leading batch axis of size ``n``."""
        y = np.broadcast_to(a.value, (n,) + a.value.shape)
        return self._push("tile", (a,), y, lambda g: (g.sum(axis=0),))

    def stack(self, nodes, axis: int = 0) -> Node:
        nodes = tuple(nodes)
        shapes = {n.value.shape for n in nodes}
        if len(shapes) != 1:
            raise DimensionError(f"stack: inconsistent shapes {sorted(shapes)}")
        y = np.stack([n.value for n in nodes], axis=axis)
        count = len(nodes)

        def vjp(g):
            return tuple(np.take(g, i, axis=axis) for i in range(count))

        return self._push("stack", nodes, y, vjp)

    def concat(self, nodes, axis: int = 0) -> Node:
        nodes = tuple(nodes)
        vals = [n.value for n in nodes]
        try:
            y = np.concatenate(vals, axis=axis)
        except ValueError as exc:
            raise DimensionError(f"concat: {[v.shape for v in vals]}") from exc
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def vjp(g):
            return tuple(np.split(g, bounds, axis=axis))

        return self._push("concat", nodes, y, vjp)

    def slice(self, a: Node, axis: int, start: int, stop: int) -> Node:
        shape = a.value.shape
        index = (slice(None),) * axis + (slice(start, stop),)

        def vjp(g):
            full = np.zeros(shape, dtype=DTYPE)
            full[index] = g
            return (full,)

        return self._push("slice", (a,), a.value[index], vjp)

    # -- linear algebra ---------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise DimensionError(f"matmul: {av.shape} @ {bv.shape}")
        return self._push("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))

    def linear(self, x: Node, w: Node, b: Node | None = None) -> Node:
        """Dense layer ``x @ w + b`` with x [N, in], w [in, out], b [out]."""
        xv, wv = x.value, w.value
        if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
            raise DimensionError(f"linear: {xv.shape} @ {wv.shape}")
        y = xv @ wv
        if b is not None:
            if b.value.shape != (wv.shape[1],):
                raise DimensionError(f"linear: bias {b.value.shape} for {wv.shape[1]} outputs")
            y = y + b.value
            return self._push("linear", (x, w, b), y,
                              lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))
        return self._push("linear", (x, w), y, lambda g: (g @ wv.T, xv.T @ g))

    def conv2d(self, x: Node, k: Node, b: Node | None = None) -> Node:
        """Zero-padded 'same' 2-D convolution.

        x is [C_in, H, W] or batched [N, C_in, H, W]; k is [C_out, C_in, kH, kW].
        """
        if k.value.ndim != 4:
            raise DimensionError(f"conv2d: kernel must be 4-D, got {k.value.shape}")
        return self._conv(x, k, b, 2, "conv2d")

    def conv3d(self, x: Node, k: Node, b: Node | None = None) -> Node:
        """'Same' 3-D convolution; x is [N, C_in, T, H, W], k [C_out, C_in, kT, kH, kW]."""
        if k.value.ndim != 5:
            raise DimensionError(f"conv3d: kernel must be 5-D, got {k.value.shape}")
        return self._conv(x, k, b, 3, "conv3d")

    def _conv(self, x, k, b, d, op):
        kv = k.value
        xv = x.value
        unbatched = xv.ndim == d + 1
        if unbatched:
            xv = xv[None]
        if xv.ndim != d + 2:
            raise DimensionError(f"{op}: input rank {x.value.ndim} unsupported")
        c_out, c_in = kv.shape[:2]
        ksize = kv.shape[2:]
        if xv.shape[1] != c_in:
            raise DimensionError(f"{op}: kernel expects {c_in} input channels, got {xv.shape[1]}")
        if any(s % 2 == 0 for s in ksize):
            raise DimensionError(f"{op}: kernel size {ksize} must be odd")
        if b is not None and b.value.shape != (c_out,):
            raise DimensionError(f"{op}: bias shape {b.value.shape} != ({c_out},)")

        # patches are reused by every convolution reading the same input node
        if x._cache is None:
            x._cache = {}
        cols = x._cache.get(ksize)
        if cols is None:
            cols = _im2col(xv, ksize)
            x._cache[ksize] = cols

        n = xv.shape[0]
        spatial = xv.shape[2:]
        kflat = kv.reshape(c_out, -1)
        out = kflat @ cols
        if b is not None:
            out += b.value[:, None]
        y = out.reshape((c_out, n) + spatial).swapaxes(0, 1)
        if unbatched:
            y = y[0]
        xshape = xv.shape

        def vjp(g):
            if unbatched:
                g = g[None]
            gf = np.ascontiguousarray(g.swapaxes(0, 1)).reshape(c_out, -1)
            dk = (gf @ cols.T).reshape(kv.shape)
            dx = _col2im(kflat.T @ gf, xshape, ksize)
            if unbatched:
                dx = dx[0]
            if b is None:
                return dx, dk
            return dx, dk, gf.sum(axis=1)

        inputs = (x, k) if b is None else (x, k, b)
        return self._push(op, inputs, y, vjp)

    # -- normalization ------------------------------------------------------------

    def batchnorm(self, x: Node, gamma: Node, beta: Node, mean=None, var=None,
                  eps: float = 1e-5) -> Node:
        """Per-channel standardization of x [N, C, *S] with learned scale/shift.

        With ``mean``/``var`` given the statistics are treated as constants
        (evaluation path); otherwise batch statistics are used and
        differentiated through.
        """
        xv = x.value
        c = xv.shape[1]
        if gamma.value.shape != (c,) or beta.value.shape != (c,):
            raise DimensionError("batchnorm: scale/shift must be per channel")
        axes = (0,) + tuple(range(2, xv.ndim))
        bshape = (1, c) + (1,) * (xv.ndim - 2)
        gv = gamma.value.reshape(bshape)
        if mean is None:
            mu = xv.mean(axis=axes, keepdims=True)
            var_b = xv.var(axis=axes, keepdims=True)
        else:
            mu = np.asarray(mean, dtype=DTYPE).reshape(bshape)
            var_b = np.asarray(var, dtype=DTYPE).reshape(bshape)
        inv = 1.0 / np.sqrt(var_b + eps)
        xhat = (xv - mu) * inv
        y = gv * xhat + beta.value.reshape(bshape)
        m = xv.size // c
        batch_stats = mean is None

        def vjp(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gv
            if batch_stats:
                dx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                dx = dxhat * inv
            return dx, dgamma, dbeta

        return self._push("batchnorm", (x, gamma, beta), y, vjp)

    # -- reductions ------------------------------------------------------------------

    def sum(self, a: Node) -> Node:
        shape = a.value.shape
        return self._push("sum", (a,), np.asarray(a.value.sum()),
                          lambda g: (np.full(shape, float(g)),))

    def mse_loss(self, pred: Node, target: Node) -> Node:
        """Mean over all elements of the squared difference."""
        _same_shape("mse_loss", pred, target)
        diff = pred.value - target.value
        n = diff.size

        def vjp(g):
            d = diff * (2.0 * float(g) / n)
            return d, -d

        return self._push("mse", (pred, target), np.asarray(np.mean(diff * diff)), vjp)


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Gradient of scalar ``loss`` with respect to every parameter on ``tape``.

    All node gradients are reset first, so repeated calls are idempotent.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.id + 1]):
        if node.grad is None or node._vjp is None:
            continue
        for parent, g in zip(node.inputs, node._vjp(node.grad)):
            if parent.op == "const":
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    return {name: node.gradient.copy() for name, node in tape.params.items()}


def finite_diff_gradient(f, params: dict, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of scalar ``f(params)`` for every coordinate."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    work = {k: as_tensor(v).copy() for k, v in params.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(work))
            flat[i] = orig - eps
            fm = float(f(work))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads[name] = g
    return grads


def max_relative_error(a: dict, b: dict, floor: float = 1e-8) -> float:
    """Largest elementwise |a-b| / max(|a|, |b|, floor) over matching keys."""
    worst = 0.0
    for k in a:
        x, y = np.asarray(a[k]), np.asarray(b[k])
        if x.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst
