"""Minimal reverse-mode autodiff over dense float64 arrays.

The operator set is deliberately closed: exactly what the networks, the
rasterizer and the compositor need, nothing more.  Shapes must match
exactly except where an op is documented to fuse a broadcast (bias terms,
scalar scaling, color tinting).  Every forward op validates that its
output is finite, and the backward pass re-checks every gradient it
emits, so NaNs fail loudly with the name of the offending op.
"""

from __future__ import annotations

import numpy as np


class NumericError(ArithmeticError):
    """Non-finite value produced by a recorded operation."""


class DiffArray:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff.

    ``requires_grad`` marks leaves that should receive gradients; interior
    nodes inherit it from their parents.  ``np.asarray(x)`` reads the
    values, so DiffArrays can stand in for plain arrays in non-diff code.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backprop", "_op", "_done")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        if not np.isfinite(self.values).all():
            raise NumericError("non-finite values in leaf array")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backprop = None
        self._op = "leaf"
        self._done = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        v = self.values
        return v.astype(dtype) if dtype is not None else v.copy() if copy else v

    def __repr__(self):
        return f"DiffArray(shape={self.values.shape}, op={self._op!r}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    # operator sugar; scalars are treated as constant shifts/scales
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -as_diff(other))

    def __rsub__(self, other):
        return add(as_diff(other), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def constant(values) -> DiffArray:
    return DiffArray(values, requires_grad=False)


def parameter(values) -> DiffArray:
    return DiffArray(values, requires_grad=True)


def make_op(values: np.ndarray, parents, backprop, op: str) -> DiffArray:
    """Record one operation.  ``backprop(out)`` must add into parent grads.

    This is the extension point other modules (the rasterizer) use to
    define ops with hand-written adjoints.
    """
    out = DiffArray.__new__(DiffArray)
    out.values = np.asarray(values, dtype=np.float64)
    if not np.isfinite(out.values).all():
        raise NumericError(f"non-finite values in forward op {op!r}")
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._op = op
    out._done = False
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backprop = backprop
    else:
        out._parents = ()
        out._backprop = None
    return out


def _accum(node: DiffArray, delta: np.ndarray):
    if node.grad is None:
        node.grad = np.zeros_like(node.values)
    node.grad += delta


def backward(loss: DiffArray):
    """Reverse-mode sweep from a scalar loss; fills .grad on the way down.

    A second sweep from the same node without re-recording the forward
    computation is an error (grads would silently double).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise RuntimeError("backward already ran for this node; re-record the forward pass")
    loss._done = True

    # iterative DFS: graphs easily exceed the recursion limit
    topo: list[DiffArray] = []
    seen = set()
    stack: list[tuple[DiffArray, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.values)
    for node in reversed(topo):
        if node._backprop is None or node.grad is None:
            continue
        node._backprop(node)
        for p in node._parents:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient emitted by op {node._op!r}")


def zero_grads(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> DiffArray:
    if isinstance(b, (int, float)):
        a = as_diff(a)

        def backprop(out):
            _accum(a, out.grad)

        return make_op(a.values + float(b), (a,), backprop, "add_const")
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = as_diff(a), as_diff(b)
    if a.shape != b.shape:
        if a.size == 1 or b.size == 1:
            s, x = (a, b) if a.size == 1 else (b, a)

            def backprop(out):
                _accum(x, out.grad)
                _accum(s, np.array(out.grad.sum()).reshape(s.shape))

            return make_op(x.values + s.values.reshape(()), (x, s), backprop, "add_scalar")
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backprop(out):
        _accum(a, out.grad)
        _accum(b, out.grad)

    return make_op(a.values + b.values, (a, b), backprop, "add")


def mul(a, b) -> DiffArray:
    if isinstance(b, (int, float)):
        a = as_diff(a)
        c = float(b)

        def backprop(out):
            _accum(a, c * out.grad)

        return make_op(a.values * c, (a,), backprop, "scale")
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = as_diff(a), as_diff(b)
    if a.shape != b.shape:
        # one side may be a scalar node (learned scale, e.g. depth weights)
        if a.size == 1 or b.size == 1:
            s, x = (a, b) if a.size == 1 else (b, a)

            def backprop(out):
                _accum(x, s.values.reshape(()) * out.grad)
                _accum(s, np.array((out.grad * x.values).sum()).reshape(s.shape))

            return make_op(x.values * s.values.reshape(()), (x, s), backprop, "scale_by")
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backprop(out):
        _accum(a, b.values * out.grad)
        _accum(b, a.values * out.grad)

    return make_op(a.values * b.values, (a, b), backprop, "mul")


def div(a, b) -> DiffArray:
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / float(b))
    a, b = as_diff(a), as_diff(b)
    if a.shape != b.shape:
        raise ValueError(f"div shape mismatch: {a.shape} vs {b.shape}")

    def backprop(out):
        _accum(a, out.grad / b.values)
        _accum(b, -out.grad * a.values / (b.values * b.values))

    return make_op(a.values / b.values, (a, b), backprop, "div")


def exp(x) -> DiffArray:
    x = as_diff(x)
    ev = np.exp(x.values)

    def backprop(out):
        _accum(x, ev * out.grad)

    return make_op(ev, (x,), backprop, "exp")


def log(x) -> DiffArray:
    x = as_diff(x)
    if (x.values <= 0).any():
        raise ValueError("log requires strictly positive input")

    def backprop(out):
        _accum(x, out.grad / x.values)

    return make_op(np.log(x.values), (x,), backprop, "log")


def relu(x) -> DiffArray:
    x = as_diff(x)
    mask = x.values > 0  # subgradient at 0 is 0 by convention

    def backprop(out):
        _accum(x, mask * out.grad)

    return make_op(np.where(mask, x.values, 0.0), (x,), backprop, "relu")


def sigmoid(x) -> DiffArray:
    x = as_diff(x)
    z = np.exp(-np.abs(x.values))
    v = np.where(x.values >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backprop(out):
        _accum(x, v * (1.0 - v) * out.grad)

    return make_op(v, (x,), backprop, "sigmoid")


def tanh(x) -> DiffArray:
    x = as_diff(x)
    v = np.tanh(x.values)

    def backprop(out):
        _accum(x, (1.0 - v * v) * out.grad)

    return make_op(v, (x,), backprop, "tanh")


def softplus(x) -> DiffArray:
    x = as_diff(x)
    v = np.logaddexp(0.0, x.values)

    def backprop(out):
        _accum(x, out.grad / (1.0 + np.exp(-x.values)))

    return make_op(v, (x,), backprop, "softplus")


def sin(x) -> DiffArray:
    x = as_diff(x)

    def backprop(out):
        _accum(x, np.cos(x.values) * out.grad)

    return make_op(np.sin(x.values), (x,), backprop, "sin")


def cos(x) -> DiffArray:
    x = as_diff(x)

    def backprop(out):
        _accum(x, -np.sin(x.values) * out.grad)

    return make_op(np.cos(x.values), (x,), backprop, "cos")


def clip01(x) -> DiffArray:
    """Clamp to [0, 1]; gradient passes only through the open interior."""
    x = as_diff(x)
    interior = (x.values > 0.0) & (x.values < 1.0)

    def backprop(out):
        _accum(x, interior * out.grad)

    return make_op(np.clip(x.values, 0.0, 1.0), (x,), backprop, "clip01")


def clamp_min(x, lo: float) -> DiffArray:
    x = as_diff(x)
    lo = float(lo)
    above = x.values > lo

    def backprop(out):
        _accum(x, above * out.grad)

    return make_op(np.maximum(x.values, lo), (x,), backprop, "clamp_min")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x, shape) -> DiffArray:
    x = as_diff(x)
    shape = tuple(shape)

    def backprop(out):
        _accum(x, out.grad.reshape(x.shape))

    return make_op(x.values.reshape(shape), (x,), backprop, "reshape")


def transpose2d(x) -> DiffArray:
    x = as_diff(x)
    if x.values.ndim != 2:
        raise ValueError(f"transpose2d needs a 2-d array, got shape {x.shape}")

    def backprop(out):
        _accum(x, out.grad.T)

    return make_op(x.values.T.copy(), (x,), backprop, "transpose2d")


def concat(parts, axis: int = 0) -> DiffArray:
    parts = [as_diff(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backprop(out):
        for p, g in zip(parts, np.split(out.grad, splits, axis=axis)):
            _accum(p, g)

    return make_op(np.concatenate([p.values for p in parts], axis=axis), tuple(parts), backprop, "concat")


def slice_axis(x, axis: int, start: int, stop: int) -> DiffArray:
    x = as_diff(x)
    index = [slice(None)] * x.values.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backprop(out):
        if x.grad is None:
            x.grad = np.zeros_like(x.values)
        x.grad[index] += out.grad

    return make_op(x.values[index].copy(), (x,), backprop, "slice")


def repeat_vector(z, count: int) -> DiffArray:
    """Tile a (d,) vector into (d, count) columns; gradient sums back."""
    z = as_diff(z)
    if z.values.ndim != 1:
        raise ValueError(f"repeat_vector needs a 1-d array, got shape {z.shape}")

    def backprop(out):
        _accum(z, out.grad.sum(axis=1))

    return make_op(np.repeat(z.values[:, None], count, axis=1), (z,), backprop, "repeat_vector")


def subsample2(x) -> DiffArray:
    """Take every second row/column of a (C, H, W) array (stride-2 identity)."""
    x = as_diff(x)
    if x.values.ndim != 3:
        raise ValueError(f"subsample2 needs a (C, H, W) array, got shape {x.shape}")

    def backprop(out):
        if x.grad is None:
            x.grad = np.zeros_like(x.values)
        x.grad[:, ::2, ::2] += out.grad

    return make_op(x.values[:, ::2, ::2].copy(), (x,), backprop, "subsample2")


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------


def sum_all(x) -> DiffArray:
    x = as_diff(x)

    def backprop(out):
        _accum(x, np.full_like(x.values, float(out.grad)))

    return make_op(np.array(x.values.sum()), (x,), backprop, "sum")


def mean_all(x) -> DiffArray:
    x = as_diff(x)
    n = x.size

    def backprop(out):
        _accum(x, np.full_like(x.values, float(out.grad) / n))

    return make_op(np.array(x.values.mean()), (x,), backprop, "mean")


def reduce_mse(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.values - b.values
    n = a.size

    def backprop(out):
        g = (2.0 / n) * float(out.grad) * diff
        _accum(a, g)
        _accum(b, -g)

    return make_op(np.array(np.mean(diff * diff)), (a, b), backprop, "reduce_mse")


def kl_standard_normal(mu, logvar) -> DiffArray:
    """-0.5 * mean(1 + logvar - mu^2 - exp(logvar)); zero at the standard normal."""
    mu, logvar = as_diff(mu), as_diff(logvar)
    if mu.shape != logvar.shape:
        raise ValueError(f"kl shape mismatch: {mu.shape} vs {logvar.shape}")
    ev = np.exp(logvar.values)
    n = mu.size

    def backprop(out):
        g = float(out.grad)
        _accum(mu, g * mu.values / n)
        _accum(logvar, g * 0.5 * (ev - 1.0) / n)

    value = -0.5 * np.mean(1.0 + logvar.values - mu.values**2 - ev)
    return make_op(np.array(value), (mu, logvar), backprop, "kl_standard_normal")


def softmax(x) -> DiffArray:
    """Softmax along the last axis."""
    x = as_diff(x)
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    v = e / e.sum(axis=-1, keepdims=True)

    def backprop(out):
        dot = (out.grad * v).sum(axis=-1, keepdims=True)
        _accum(x, v * (out.grad - dot))

    return make_op(v, (x,), backprop, "softmax")


# ---------------------------------------------------------------------------
# linear algebra and convolutions
# ---------------------------------------------------------------------------


def matmul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backprop(out):
        _accum(a, out.grad @ b.values.T)
        _accum(b, a.values.T @ out.grad)

    return make_op(a.values @ b.values, (a, b), backprop, "matmul")


def fully_connected(x, w, b) -> DiffArray:
    """x @ w + b with the bias broadcast over rows of x."""
    x, w, b = as_diff(x), as_diff(w), as_diff(b)
    if x.values.ndim != 2 or w.values.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"fully_connected shape mismatch: {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match output width {w.shape[1]}")

    def backprop(out):
        _accum(x, out.grad @ w.values.T)
        _accum(w, x.values.T @ out.grad)
        _accum(b, out.grad.sum(axis=0))

    return make_op(x.values @ w.values + b.values, (x, w, b), backprop, "fully_connected")


def conv1d_circular(x, kernels, bias) -> DiffArray:
    """3-tap 1-d convolution with wrap-around padding.

    x: (C_in, L), kernels: (C_out, C_in, 3), bias: (C_out,) -> (C_out, L).
    Output position j mixes input positions j-1, j, j+1 modulo L, which is
    convolution along the perimeter of a closed curve.
    """
    x, kernels, bias = as_diff(x), as_diff(kernels), as_diff(bias)
    if x.values.ndim != 2:
        raise ValueError(f"conv1d input must be (C_in, L), got {x.shape}")
    c_in, length = x.shape
    if kernels.values.ndim != 3 or kernels.shape[1] != c_in or kernels.shape[2] != 3:
        raise ValueError(f"kernels must be (C_out, {c_in}, 3), got {kernels.shape}")
    c_out = kernels.shape[0]
    if bias.shape != (c_out,):
        raise ValueError(f"bias must be ({c_out},), got {bias.shape}")

    xp = np.concatenate([x.values[:, -1:], x.values, x.values[:, :1]], axis=1)
    y = np.repeat(bias.values[:, None], length, axis=1)
    for tap in range(3):
        y += kernels.values[:, :, tap] @ xp[:, tap : tap + length]

    def backprop(out):
        gxp = np.zeros_like(xp)
        for tap in range(3):
            win = xp[:, tap : tap + length]
            _accum_kernel_tap(kernels, tap, out.grad @ win.T)
            gxp[:, tap : tap + length] += kernels.values[:, :, tap].T @ out.grad
        gx = gxp[:, 1:-1]
        gx[:, -1] += gxp[:, 0]
        gx[:, 0] += gxp[:, -1]
        _accum(x, gx)
        _accum(bias, out.grad.sum(axis=1))

    return make_op(y, (x, kernels, bias), backprop, "conv1d_circular")


def _accum_kernel_tap(kernels: DiffArray, tap: int, delta: np.ndarray):
    if kernels.grad is None:
        kernels.grad = np.zeros_like(kernels.values)
    kernels.grad[:, :, tap] += delta


def _conv2d(x, kernels, bias, stride: int, op: str) -> DiffArray:
    x, kernels, bias = as_diff(x), as_diff(kernels), as_diff(bias)
    if x.values.ndim != 3:
        raise ValueError(f"{op} input must be (C_in, H, W), got {x.shape}")
    c_in, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"{op} needs spatial extents >= 2, got {h}x{w}")
    if kernels.values.ndim != 4 or kernels.shape[1:] != (c_in, 3, 3):
        raise ValueError(f"kernels must be (C_out, {c_in}, 3, 3), got {kernels.shape}")
    c_out = kernels.shape[0]
    if bias.shape != (c_out,):
        raise ValueError(f"bias must be ({c_out},), got {bias.shape}")

    ho = -(-h // stride)
    wo = -(-w // stride)
    xp = np.zeros((c_in, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x.values
    taps = [(di, dj) for di in range(3) for dj in range(3)]

    def window(buf, di, dj):
        return buf[:, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride]

    y = np.repeat(bias.values[:, None], ho * wo, axis=1)
    for di, dj in taps:
        y += kernels.values[:, :, di, dj] @ window(xp, di, dj).reshape(c_in, -1)
    y = y.reshape(c_out, ho, wo)

    def backprop(out):
        g = out.grad.reshape(c_out, -1)
        gxp = np.zeros_like(xp)
        if kernels.grad is None:
            kernels.grad = np.zeros_like(kernels.values)
        for di, dj in taps:
            win = window(xp, di, dj).reshape(c_in, -1)
            kernels.grad[:, :, di, dj] += g @ win.T
            gwin = (kernels.values[:, :, di, dj].T @ g).reshape(c_in, ho, wo)
            window(gxp, di, dj)[...] += gwin
        _accum(x, gxp[:, 1:-1, 1:-1])
        _accum(bias, g.sum(axis=1))

    return make_op(y, (x, kernels, bias), backprop, op)


def conv2d_down(x, kernels, bias) -> DiffArray:
    """3x3 convolution, stride 2, zero padding 1: spatial extents halve (ceil)."""
    return _conv2d(x, kernels, bias, 2, "conv2d_down")


def conv2d_same(x, kernels, bias) -> DiffArray:
    """3x3 convolution, stride 1, zero padding 1: spatial extents preserved."""
    return _conv2d(x, kernels, bias, 1, "conv2d_same")


def tint(weight, color) -> DiffArray:
    """(H, W) per-pixel weight times an RGB triple -> (H, W, 3)."""
    weight, color = as_diff(weight), as_diff(color)
    if weight.values.ndim != 2 or color.shape != (3,):
        raise ValueError(f"tint needs (H, W) and (3,), got {weight.shape} and {color.shape}")

    def backprop(out):
        _accum(weight, out.grad @ color.values)
        _accum(color, np.einsum("hwc,hw->c", out.grad, weight.values))

    return make_op(weight.values[:, :, None] * color.values, (weight, color), backprop, "tint")


# ---------------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------------


def lstm_params_shapes(input_size: int, hidden: int) -> dict:
    """Shapes for one direction's gate weights, input weights and biases."""
    return {"wx": (input_size, 4 * hidden), "wh": (hidden, 4 * hidden), "b": (4 * hidden,)}


def _lstm_direction(steps, wx, wh, b, hidden: int):
    h = constant(np.zeros((1, hidden)))
    c = constant(np.zeros((1, hidden)))
    outs = []
    for x in steps:
        gates = fully_connected(x, wx, b) + matmul(h, wh)
        i = sigmoid(slice_axis(gates, 1, 0, hidden))
        f = sigmoid(slice_axis(gates, 1, hidden, 2 * hidden))
        g = tanh(slice_axis(gates, 1, 2 * hidden, 3 * hidden))
        o = sigmoid(slice_axis(gates, 1, 3 * hidden, 4 * hidden))
        c = f * c + i * g
        h = o * tanh(c)
        outs.append(h)
    return outs


def lstm_bidirectional(inputs, params: dict, hidden: int) -> list:
    """Run an LSTM both ways over the sequence; concat per-step hidden states.

    inputs: list of (1, D_in) DiffArrays (one per step).  params holds the
    six arrays wx_f, wh_f, b_f, wx_b, wh_b, b_b with gate order (i, f, g, o).
    Returns a list of (1, 2*hidden) DiffArrays.
    """
    steps = [as_diff(x) for x in inputs]
    if not steps:
        raise ValueError("lstm needs at least one step")
    fwd = _lstm_direction(steps, params["wx_f"], params["wh_f"], params["b_f"], hidden)
    bwd = _lstm_direction(steps[::-1], params["wx_b"], params["wh_b"], params["b_b"], hidden)
    bwd = bwd[::-1]
    return [concat([f, r], axis=1) for f, r in zip(fwd, bwd)]
